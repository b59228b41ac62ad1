//! Experiment configuration, the training loop, evaluation and strategy
//! sweeps.

mod config;
mod eval;
mod log;
mod suite;
mod train;

pub use config::{Precision, Strategy, TrainConfig};
pub use eval::{
    evaluate_checkpoint, evaluate_models, evaluate_net, evaluate_with, mean_dice,
    models_from_checkpoint, predict_labels, EVAL_CHUNK,
};
pub use log::{EvalRecord, ExperimentLog, IterationRecord, ModelKind};
pub use suite::{run_suite, suite_threads, SuiteResult};
pub use train::{
    load_dataset, load_pretrained, pretrain_holdout, pretrain_holdout_report, pretrain_on, pretrained_checkpoint, train, train_on, Models,
    TrainOutcome,
};
