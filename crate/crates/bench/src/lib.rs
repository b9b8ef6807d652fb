//! Criterion benchmarks for the training and evaluation pipeline; see `benches/`.
