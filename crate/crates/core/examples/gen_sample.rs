//! Regenerates the bundled sample corpus and issue catalog under
//! `data/sample/`. Run from the workspace root:
//!
//! ```text
//! cargo run -p feedback-insight --example gen_sample
//! ```

use std::fs;
use std::path::Path;

use feedback_insight::synthetic::{
    default_topic_specs, generate_catalog, generate_corpus, SyntheticCorpusConfig,
};

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).expect("serialize sample row"));
        text.push('\n');
    }
    fs::write(path, text).unwrap_or_else(|e| panic!("write {}: {e}", path.display()));
}

fn main() {
    let out_dir = Path::new("data/sample");
    fs::create_dir_all(out_dir).expect("create data/sample");

    let specs = default_topic_specs();
    let corpus_cfg = SyntheticCorpusConfig::default();
    let records = generate_corpus(&specs, &corpus_cfg);
    write_jsonl(&out_dir.join("corpus.jsonl"), &records);

    let catalog = generate_catalog(&specs, 4);
    write_jsonl(&out_dir.join("catalog.jsonl"), &catalog);

    println!(
        "wrote {} feedback records and {} catalog issues to {}",
        records.len(),
        catalog.len(),
        out_dir.display()
    );
}
