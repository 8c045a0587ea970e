//! Criterion benchmarks for the partition builders and the Monte Carlo norms; see `benches/`.
