//! Benchmarks for the falsification kernels live in `benches/`.
