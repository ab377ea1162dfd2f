//! Benchmark-only crate. Run `cargo bench -p mtlab-bench`; kernel benches
//! cover matrix products, a training forward pass and beam search, text
//! benches cover subword training, encoding and corpus metrics.
