//! End-to-end harness: ROI pooling, synthetic data, two-stage training,
//! checkpoints, inference and the K/M sweep.

mod checkpoint;
mod gradsuite;
mod infer;
mod model;
mod roi;
mod synth;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use infer::{evaluate_model, infer, infer_dataset, sweep_km, SweepRow};
pub use model::{build_bank, train, ModelState, Stage, TrainConfig, TrainOutcome};
pub use roi::{cells_in_box, pool_actors, roi_pool};
pub use synth::{synth_generate, Clip, Dataset, SynthConfig, CONFIG_FILE, DATASET_FILE, GT_FILE};
pub use gradsuite::{
    check_modules, check_registered_ops, check_stage_two_loss, gradient_suite, small_instance, small_model, GRAD_EPS,
    GRAD_TOL,
};
