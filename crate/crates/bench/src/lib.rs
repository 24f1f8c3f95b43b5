//! Criterion benchmarks for the rendering and training hot paths; see `benches/`.
