//! Criterion benchmarks for the geometry, filtering, matching and pipeline kernels.
//!
//! Run with `cargo bench -p xmodal-bench`.
