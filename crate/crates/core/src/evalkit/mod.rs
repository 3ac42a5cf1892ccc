//! Metrics, the whole-model gradient check and the ablation harness.

mod ablation;
mod gradcheck;
mod metrics;

pub use ablation::{run_ablation, run_cell, AblationAxis, AblationCell, AblationGrid, AblationResults, SplitScore, ValueSummary};
pub use gradcheck::{gradcheck, gradcheck_with, ElementError, GradcheckConfig, GradcheckReport};
pub use metrics::{goal_progress, navigation_error, path_length, spl, success, EpisodeRow, MetricReport, SUCCESS_RADIUS};
