//! Pretraining, finetuning, evaluation and model persistence.

pub mod checkpoint;
pub mod finetune;
pub mod metrics;
pub mod optim;
pub mod pretrain;

pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use finetune::{
    evaluate, finetune, predict, stratified_subsample, FinetuneConfig, FinetuneHeadConfig, FinetuneMeta, FinetuneRun,
    Predictions, Task,
};
pub use metrics::{activation_spread, ce90, histogram_csv, mae, mean_predictor_mae, top1, MetricsReport};
pub use optim::Adam;
pub use pretrain::{
    activation_histogram, build_model_graph, decompose_links, init_checkpoint, mean_active, pretrain, pretrain_observed,
    reconstruction_nmse_db, trace_csv, DictMode, EpochTrace, ModelGraph, PretrainConfig, PretrainRun, RunStatus,
    StepView,
};
