//! Deterministic synthetic fixtures: a structured feedback corpus with
//! planted main topics and sub-topics, a matching issue catalog, and
//! Gaussian point clouds for classifier and clustering tests.
//!
//! The corpus generator plants structure at two levels. Lexically, each
//! document draws most of its tokens from one sub-topic's word bank, so
//! topic models can recover the banks. Geometrically, deterministic
//! hash-based embeddings of such documents land near the other documents
//! sharing the bank, so embedding-space clustering sees the same planted
//! groups. All generation is driven by a single seed.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::FeedbackRecord;
use crate::embeddings::EmbeddingVector;
use crate::knowledge::IssueEntry;

/// One planted sub-topic: a name, its word bank, and whether the generated
/// catalog contains an issue for it.
#[derive(Debug, Clone)]
pub struct SubTopicSpec {
    pub name: &'static str,
    pub words: &'static [&'static str],
    pub covered_by_catalog: bool,
}

/// One planted main topic with its sub-topics.
#[derive(Debug, Clone)]
pub struct TopicSpec {
    pub name: &'static str,
    pub subtopics: Vec<SubTopicSpec>,
}

/// Eight product-feedback main topics, two sub-topics each, with pairwise
/// disjoint word banks so planted structure is unambiguous.
pub fn default_topic_specs() -> Vec<TopicSpec> {
    fn sub(
        name: &'static str,
        words: &'static [&'static str],
        covered_by_catalog: bool,
    ) -> SubTopicSpec {
        SubTopicSpec {
            name,
            words,
            covered_by_catalog,
        }
    }
    vec![
        TopicSpec {
            name: "calendar",
            subtopics: vec![
                sub(
                    "meeting_invites",
                    &[
                        "meeting",
                        "invite",
                        "accept",
                        "decline",
                        "organizer",
                        "timezone",
                        "reschedule",
                        "attendee",
                    ],
                    true,
                ),
                sub(
                    "reminders",
                    &[
                        "reminder", "alert", "snooze", "popup", "dismiss", "ring", "silent",
                        "clock",
                    ],
                    true,
                ),
            ],
        },
        TopicSpec {
            name: "attachments",
            subtopics: vec![
                sub(
                    "upload_failures",
                    &[
                        "attachment",
                        "upload",
                        "size",
                        "limit",
                        "large",
                        "megabyte",
                        "reject",
                        "compress",
                    ],
                    true,
                ),
                sub(
                    "preview_problems",
                    &[
                        "preview",
                        "inline",
                        "render",
                        "thumbnail",
                        "viewer",
                        "blank",
                        "corrupt",
                        "spreadsheet",
                    ],
                    true,
                ),
            ],
        },
        TopicSpec {
            name: "sign_in",
            subtopics: vec![
                sub(
                    "password_reset",
                    &[
                        "password",
                        "reset",
                        "forgot",
                        "expired",
                        "verification",
                        "resend",
                        "lockout",
                        "username",
                    ],
                    true,
                ),
                sub(
                    "two_factor",
                    &[
                        "factor",
                        "authenticator",
                        "code",
                        "prompt",
                        "loop",
                        "trust",
                        "device",
                        "approve",
                    ],
                    true,
                ),
            ],
        },
        TopicSpec {
            name: "notifications",
            subtopics: vec![
                sub(
                    "missing_alerts",
                    &[
                        "notification",
                        "deliver",
                        "banner",
                        "background",
                        "delay",
                        "arrive",
                        "miss",
                        "push",
                    ],
                    true,
                ),
                sub(
                    "too_noisy",
                    &[
                        "mute", "spam", "buzz", "constant", "flood", "duplicate", "nonstop",
                        "chime",
                    ],
                    false,
                ),
            ],
        },
        TopicSpec {
            name: "search",
            subtopics: vec![
                sub(
                    "no_results",
                    &[
                        "search", "result", "find", "query", "match", "index", "nothing",
                        "keyword",
                    ],
                    true,
                ),
                sub(
                    "slow_search",
                    &[
                        "spinner", "wait", "forever", "lag", "freeze", "crawl", "sluggish",
                        "hang",
                    ],
                    false,
                ),
            ],
        },
        TopicSpec {
            name: "sync",
            subtopics: vec![
                sub(
                    "conflicts",
                    &[
                        "sync",
                        "conflict",
                        "copy",
                        "version",
                        "merge",
                        "overwrite",
                        "stale",
                        "divergent",
                    ],
                    true,
                ),
                sub(
                    "offline_mode",
                    &[
                        "offline",
                        "reconnect",
                        "airplane",
                        "cache",
                        "pending",
                        "queue",
                        "stuck",
                        "resume",
                    ],
                    true,
                ),
            ],
        },
        TopicSpec {
            name: "billing",
            subtopics: vec![
                sub(
                    "double_charge",
                    &[
                        "charge", "invoice", "refund", "card", "payment", "billed", "twice",
                        "receipt",
                    ],
                    true,
                ),
                sub(
                    "plan_changes",
                    &[
                        "plan",
                        "upgrade",
                        "subscription",
                        "tier",
                        "trial",
                        "renew",
                        "cancel",
                        "downgrade",
                    ],
                    true,
                ),
            ],
        },
        TopicSpec {
            name: "editor",
            subtopics: vec![
                sub(
                    "formatting",
                    &[
                        "formatting",
                        "bold",
                        "bullet",
                        "indent",
                        "paste",
                        "font",
                        "spacing",
                        "markdown",
                    ],
                    true,
                ),
                sub(
                    "crashes",
                    &[
                        "crash", "quit", "unsaved", "lose", "restart", "abrupt", "wipe",
                        "vanish",
                    ],
                    false,
                ),
            ],
        },
    ]
}

/// Topic-neutral content words sprinkled into every document.
pub const FILLER_WORDS: &[&str] = &[
    "team", "morning", "yesterday", "laptop", "customer", "project", "window", "button",
    "screen", "account", "message", "folder", "report", "week", "office", "number",
];

const CHANNELS: &[&str] = &["in_app", "email", "store_review", "support"];

#[derive(Debug, Clone)]
pub struct SyntheticCorpusConfig {
    pub n_docs: usize,
    /// Inclusive range of content tokens per document.
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Probability that a token comes from the sibling sub-topic of the same
    /// main topic rather than the document's own bank.
    pub sibling_word_prob: f64,
    /// Probability that a token is a neutral filler word.
    pub filler_word_prob: f64,
    /// Fraction of documents given a second main-topic label.
    pub multi_label_fraction: f64,
    /// Fraction of documents wrapped in markup or seeded with HTML entities,
    /// to exercise text cleanup.
    pub markup_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        SyntheticCorpusConfig {
            n_docs: 500,
            min_tokens: 12,
            max_tokens: 24,
            sibling_word_prob: 0.1,
            filler_word_prob: 0.2,
            multi_label_fraction: 0.3,
            markup_fraction: 0.08,
            seed: 42,
        }
    }
}

/// Generates the structured corpus. Document `i` belongs to main topic
/// `i % topics` and sub-topic `(i / topics) % 2`, so topics and sub-topics
/// are evenly represented regardless of `n_docs`.
pub fn generate_corpus(specs: &[TopicSpec], cfg: &SyntheticCorpusConfig) -> Vec<FeedbackRecord> {
    assert!(!specs.is_empty(), "need at least one topic spec");
    assert!(
        cfg.min_tokens >= 3 && cfg.max_tokens >= cfg.min_tokens,
        "token range must allow at least 3 tokens"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.n_docs);
    for i in 0..cfg.n_docs {
        let topic_idx = i % specs.len();
        let topic = &specs[topic_idx];
        let sub_idx = (i / specs.len()) % topic.subtopics.len();
        let own_bank = topic.subtopics[sub_idx].words;
        let sibling_bank = topic.subtopics[(sub_idx + 1) % topic.subtopics.len()].words;

        let n_tokens = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let roll: f64 = rng.random();
            let word = if roll < cfg.filler_word_prob {
                FILLER_WORDS.choose(&mut rng).unwrap()
            } else if roll < cfg.filler_word_prob + cfg.sibling_word_prob {
                sibling_bank.choose(&mut rng).unwrap()
            } else {
                own_bank.choose(&mut rng).unwrap()
            };
            tokens.push(*word);
        }

        let mut text = format!("The {} keeps coming up and the {}", tokens.join(" "), {
            // Anchor one guaranteed own-bank word at the end so even heavy
            // filler draws stay on topic.
            own_bank[i % own_bank.len()]
        });
        text.push('.');
        if rng.random::<f64>() < cfg.markup_fraction {
            text = if rng.random::<f64>() < 0.5 {
                format!("<p>{text}</p> <br>")
            } else {
                text.replace(" and ", " &amp; ")
            };
        }

        let mut labels = BTreeSet::from([topic.name.to_string()]);
        if rng.random::<f64>() < cfg.multi_label_fraction {
            let other = loop {
                let candidate = rng.random_range(0..specs.len());
                if candidate != topic_idx {
                    break candidate;
                }
            };
            labels.insert(specs[other].name.to_string());
        }

        records.push(FeedbackRecord {
            id: format!("fb-{i:04}"),
            text,
            channel: CHANNELS[i % CHANNELS.len()].to_string(),
            labels,
        });
    }
    records
}

/// Generates the issue catalog: one entry per covered sub-topic whose title
/// is built from that sub-topic's bank, plus off-topic distractor entries.
pub fn generate_catalog(specs: &[TopicSpec], distractors: usize) -> Vec<IssueEntry> {
    let mut entries = Vec::new();
    let mut serial = 1;
    for topic in specs {
        for sub in &topic.subtopics {
            if !sub.covered_by_catalog {
                continue;
            }
            let title = format!("fix {} issues", sub.words[..6].join(" "));
            entries.push(IssueEntry {
                id: format!("KB-{serial:03}"),
                title,
                url: format!("https://support.example.com/kb/{serial:03}"),
                body: Some(format!(
                    "Self-help steps for {} problems in {}.",
                    sub.name.replace('_', " "),
                    topic.name
                )),
            });
            serial += 1;
        }
    }
    const DISTRACTOR_WORDS: &[&str] = &[
        "printer", "driver", "toner", "cartridge", "landscape", "margins", "envelope",
        "letterhead", "scanner", "fax", "ribbon", "stapler",
    ];
    for d in 0..distractors {
        let start = (d * 3) % (DISTRACTOR_WORDS.len() - 4);
        let title = format!("fix {} issues", DISTRACTOR_WORDS[start..start + 4].join(" "));
        entries.push(IssueEntry {
            id: format!("KB-{serial:03}"),
            title,
            url: format!("https://support.example.com/kb/{serial:03}"),
            body: None,
        });
        serial += 1;
    }
    entries
}

/// Labeled Gaussian class clusters for classifier tests: class `c` is
/// centered at `center_scale` along axis `c` (requires `dim >= n_classes`),
/// with unit-variance isotropic noise scaled by `sigma`. Pairwise center
/// distance is `center_scale * sqrt(2)`.
pub fn gaussian_class_clusters(
    n_classes: usize,
    points_per_class: usize,
    dim: usize,
    center_scale: f64,
    sigma: f64,
    seed: u64,
) -> Vec<(EmbeddingVector, String)> {
    assert!(dim >= n_classes, "need one axis per class");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_classes * points_per_class);
    for class in 0..n_classes {
        let name = format!("class_{class:02}");
        for _ in 0..points_per_class {
            let mut values: Vec<f64> = (0..dim)
                .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            values[class] += center_scale;
            pairs.push((
                EmbeddingVector::new(values, "synthetic cluster point").unwrap(),
                name.clone(),
            ));
        }
    }
    pairs
}

/// Two well-separated isotropic blobs on the first axis, for clustering and
/// silhouette fixtures. Returns points and their blob ids.
pub fn two_blobs(
    n_per_blob: usize,
    dim: usize,
    separation: f64,
    sigma: f64,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(2 * n_per_blob);
    let mut labels = Vec::with_capacity(2 * n_per_blob);
    for blob in 0..2 {
        for _ in 0..n_per_blob {
            let mut p: Vec<f64> = (0..dim)
                .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            p[0] += separation * blob as f64;
            points.push(p);
            labels.push(blob);
        }
    }
    (points, labels)
}
