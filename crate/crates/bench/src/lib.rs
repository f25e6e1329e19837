//! Benchmark-only package; see `benches/encoding.rs`.
