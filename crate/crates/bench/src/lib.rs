//! Criterion benchmarks for the training hot paths; see `benches/`.
