//! Mismatch diagnostics: mismatch degree, useless-point frequency, the
//! window-KD baseline and distribution metrics.

pub mod kd;
pub mod metrics;
pub mod sweep;
pub mod useless;

pub use kd::{kd_baseline_distill, sample_kd, window_targets, KdConfig, KdInit, KdOutcome};
pub use metrics::{
    endpoint_error, fraction_within, median, mismatch_degree, nearest_distance, w1_distance, MetricsRecord,
    MismatchReport,
};
pub use sweep::{is_non_decreasing, run_sweep, shifted_support, SweepConfig, SweepReport, SweepRow};
pub use useless::{diffuse, useless_frequency, DiffusedPoints, UselessConfig, UselessJudge, UselessMode};
