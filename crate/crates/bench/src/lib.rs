//! Criterion benchmarks for the embedding, training and retrieval hot paths.
//! See `benches/embedding.rs`.
