//! Benchmark-only crate; see `benches/combiners.rs`.
