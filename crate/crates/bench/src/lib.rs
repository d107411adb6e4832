//! Criterion benchmarks for the handtraj kernels; run with `cargo bench -p handtraj-bench`.
