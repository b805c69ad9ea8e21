//! Benchmarks for EM and feature coding live in `benches/`.
