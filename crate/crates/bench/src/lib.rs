//! Criterion benchmarks for the simulator live in `benches/`.
