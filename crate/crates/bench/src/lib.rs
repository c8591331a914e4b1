//! Criterion benchmarks for the flow and constraint hot paths; see
//! `benches/`.
