//! Benchmarks live in `benches/`: rating-file parsing, network passes and streaming updates.
