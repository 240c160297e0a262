//! Source pretraining, domain adaptation and the comparison baselines.

pub mod config;
pub mod data;
pub mod loops;
pub mod model;
pub mod step;

pub use config::{AugmentConfig, EarlyStopConfig, NaiveDiscConfig, PseudoLabelConfig, TrainConfig};
pub use data::{load_prepared, split_indices, PreparedSample};
pub use loops::{
    adapt, adapt_dusa, baseline_naive_discriminator, baseline_self_training, detection_loss_mean, predict,
    pretrain_source, pseudo_label, sim_disc_accuracy, AdaptMethod, EpochRecord, RunHooks, RunOutcome, Start,
    CHECKPOINT_DIR, FINAL_CHECKPOINT, METRICS_FILE,
};
pub use model::{load_checkpoint, save_checkpoint, AdapterArch, AdapterKind, Model, Stage, TrainState};
