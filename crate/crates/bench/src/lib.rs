//! Benchmark-only crate; see `benches/pipeline_benches.rs`.
