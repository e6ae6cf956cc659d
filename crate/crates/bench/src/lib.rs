//! Criterion benchmarks for the filmvox kernels; see `benches/`.
