//! FLOP accounting and wall-clock scaling measurements for vanilla and
//! anchor attention.
//!
//! Timed regions run single-threaded unless parallel heads are requested,
//! and cells are always timed one after another.

pub mod fit;
pub mod flops;
pub mod kernels;
pub mod report;
pub mod sweep;

pub use fit::{fit_scaling, ScalingFit};
pub use flops::{
    anchor_explicit_flops, anchor_flops, count_ops, vanilla_flops, Counted, OpTally, Scalar,
};
pub use report::{write_csv, write_jsonl, CSV_HEADER};
pub use sweep::{
    run_sweep, run_sweep_with, sweep_cells, BenchRecord, Cell, Mechanism, Precision, SweepSpec,
};
