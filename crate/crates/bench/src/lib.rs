//! Criterion benchmarks for the forward and backward passes live in `benches/`.
