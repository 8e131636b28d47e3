//! Criterion benchmarks for the headlab core; see `benches/`.
