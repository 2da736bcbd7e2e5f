//! Criterion benchmarks for the normscape kernels; see `benches/`.
