//! Criterion benchmarks for the ppl-stability solvers live in `benches/`.
