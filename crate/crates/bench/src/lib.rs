//! Criterion benchmarks for the modalsphere engine and oracle; see `benches/`.
