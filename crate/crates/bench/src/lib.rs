//! Criterion benchmarks for the scheduling engine; see `benches/`.
