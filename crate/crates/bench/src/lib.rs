//! Criterion benchmarks for the deformtx pipeline stages live in `benches/`.
