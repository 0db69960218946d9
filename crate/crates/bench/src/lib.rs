//! Criterion benchmarks for the hot paths: shot generation, task sampling,
//! over-sampling and per-task adaptation. See `benches/learners.rs`; run
//! with `cargo bench -p cifsl-bench`.
