//! Scoring attributions and counterfactuals, and checking the estimator.

mod metrics;
mod road;
mod tasks;
mod verify;

pub use metrics::{flip_rate, mean_l2, tangent_report, TangentReport};
pub use road::{
    default_fractions, harmonic_fill, noisy_linear_impute, removal_order, road_curve, RoadCurve,
    DEFAULT_NOISE_STD,
};
pub use verify::{
    curve_toy, manifold_alignment, order_scan, run_verification, simplex_shape, span_trials,
    toy_order_scan, AlignmentPoint, Check, CurveToyConfig, CurveToyReport, OrderScanReport,
    SpanReport, VerificationReport, DEFAULT_DELTAS, RESIDUAL_FLOOR,
};
pub use tasks::{blob_image, BlobTask, TwoClassTask, BLOB_SIDE, BLOB_WIDTH};
