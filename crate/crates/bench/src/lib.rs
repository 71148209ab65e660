//! Criterion benchmarks for `qqa-core`; see `benches/`.
