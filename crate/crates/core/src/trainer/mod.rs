//! Stage-1 training, evaluation, ablations and checkpoints.

mod artifacts;
mod checkpoint;
mod config;
mod eval;
mod model;
mod optim;
mod train;
mod transformer;

pub use artifacts::{
    brain_tokens, load_stage2, save_run, save_stage2, stage2_pairs, write_ablation_csv, write_loss_csv,
    write_metrics_csv, write_router_csv, LOSS_CSV, MODEL_CKPT, ROUTER_CSV, STAGE2_PREFIX,
};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointFile, KIND_STAGE1, KIND_STAGE2};
pub use config::{AblationMode, KlMode, PriorTarget, TrainConfig};
pub use eval::{ablate, identification, AblationRow, EvalMetrics, Identification, TrainedModel};
pub use model::{Modality, Model, Pass, SampleForward};
pub use optim::Adam;
pub use train::{
    router_diagnostics, train, train_model, train_with_hook, EpochHook, RouterDiagnostics, TrainOutcome,
    TrainingSet,
};
pub use transformer::{encoder_params, TransformerEncoder};
