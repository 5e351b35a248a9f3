//! Metrics, label-scarcity subsampling, cross-validation and the
//! leave-one-dataset-out harness.

pub mod lodo;
pub mod metrics;
pub mod report;
pub mod splits;

pub use lodo::{
    evaluate_transfer, holdout_finetune, lodo_run, predictions_csv, prepare_windows, pretrain_excluding, EvalProtocol, LodoConfig,
    FinetunedTask, LodoOutcome, PredictionRow, Task, TransferOutcome, Variant,
};
pub use metrics::{multiset_prf, per_class_scores, weighted_f1, ClassScores, Prf};
pub use report::{AggregateRow, MetricReport, MetricRow};
pub use splits::{kfold_splits, subsample_count, subsample_training, Fold};
