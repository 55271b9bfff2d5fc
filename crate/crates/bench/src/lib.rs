//! Nothing here: this crate only exists to hold the criterion benchmarks in
//! `benches/`. Run them with `cargo bench -p maskbench-bench`.
