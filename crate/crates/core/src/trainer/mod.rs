//! Desk-scale distillation harness: synthetic data, MLP teacher and
//! student, SGD with momentum, per-epoch metrics.

pub mod data;
pub mod distill;
pub mod experiment;
pub mod mlp;

pub use data::{gen_synthetic, Dataset, SyntheticTask, SyntheticTaskSpec};
pub use distill::{
    accuracy, backprop_check, dataset_logits, distill, objective_param_grad, train_plain,
    train_teacher, Objective, TrainOptions, TrainRecord, TrainRecordRow, TrainRun,
};
pub use experiment::{
    experiment_gdkd, experiment_other_only, experiment_top1, final_metrics, mean_of, ExperimentSpec,
    FinalMetrics, SeedSetup, EXPERIMENT_WEIGHTS,
};
pub use mlp::{Activation, Mlp, MlpSpec, Sgd};
