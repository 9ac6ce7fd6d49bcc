//! Two-stage training: reconstruction first, then adversarial fine-tuning.

mod config;
mod loss;
mod trainer;

pub use config::{default_lambdas, TrainConfig, Variant, BETA, K_MSE, K_PERCEPTUAL, TARGET_BPPS};
pub use loss::{
    apply_variant, distortion, egp_loss, egp_loss_var, inference_text, rate_target_controller, LossReport,
};
pub use trainer::{
    checkpoint_name, run_dir, run_training, stage_checkpoint, train_stage, StageOutcome, TrainedModel, TrainingSet, CONFIG_FILE,
    LOG_FILE,
};
