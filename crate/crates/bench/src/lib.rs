//! Criterion benchmarks for `gcpx-core` live in `benches/`.
