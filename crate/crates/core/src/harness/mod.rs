//! Grid execution, robustness curves, best/worst selection, envelopes and
//! reports.

mod curves;
mod experiment;
mod grid;
pub mod report;

pub use curves::{
    default_range, envelope, evaluate_curve, identity_point, practical_level, select_best_worst, Envelope,
    RobustnessCurve, TestSweep,
};
pub use experiment::{
    baseline_dir, default_tests, evaluate_experiment, plan_runs, run_dir, run_grid, CurveRecord, CurveSet,
    GridContext, GridOutcome, Manifest, ResolvedSweep, RunEntry, RunPlan, RunStatus, BASELINE_ID, CURVES, MANIFEST,
};
pub use grid::{compact, grid_points, Axis, GridSpec, Scale};
pub use report::write_report;
