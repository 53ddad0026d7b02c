//! Criterion benchmarks for the tendon pipeline live in `benches/`.
