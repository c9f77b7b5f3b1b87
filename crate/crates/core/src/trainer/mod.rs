//! Optimization loop, schedules, checkpointing and evaluation metrics.

mod gradsuite;
mod metrics;
mod pose;
mod run;
mod step;

pub use gradsuite::{gradient_suite, suite_fixture, SuiteEntry, SuiteReport, SUITE_PATCH, SUITE_SAMPLES};
pub use metrics::{abs_rel, gaussian_window, psnr, ssim};
pub use pose::{interpolate_pose, sample_novel_pose};
pub use run::{
    adam_config, draw_batch, error_rate, evaluate, evaluate_run, loss_weights, run_training, write_eval, EvalRender,
    EvalReport, EvalRow, FieldRenderer, OracleRenderer, RunDir, TrainState, Trainer, ViewRenderer, EVAL_HEADER,
};
pub use step::{
    build_loss, sample_color_rays, Frozen, Networks, StepBatch, StepOutput, TrainData, FIELD_PREFIX, PID_PREFIX,
};
