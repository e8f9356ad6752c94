//! The cascade: toy backbone, per-stage adaptive heads, training and weights I/O.

mod calibrate;
pub mod checkpoint;
mod config;
mod forward;
mod model;
mod train;

pub use calibrate::{calibrate_stats, CALIBRATION_STEP};
pub use config::{LevelConfig, MetricScheme, PipelineConfig, Schedule};
pub use forward::{
    extract_features, forward_cascade, initial_levels, level_ranges, run_stage, select_proposals,
    train_step_image, CascadeOutput, LossBreakdown, LossPlan, StageOutput,
};
pub(crate) use forward::{loss_and_grad, plan_loss};
pub use model::{Model, StageHead};
pub use train::{image_rng, propose_all, stage_mean_iou, train, EpochMetrics, TrainState, Trainer};
