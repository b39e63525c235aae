//! Criterion benchmarks for `near2-core`; see `benches/`.
