//! Criterion benchmarks for the pipeline's hot paths; see `benches/`.
