//! Answer model training, evaluation, ensembling and reporting.

pub mod eval;
pub mod optim;
pub mod report;
pub mod schedule;
pub mod trainer;
pub mod vqa;

pub use eval::{
    average_distributions, ensemble_predict, evaluate, evaluate_ensemble, predict, score_predictions,
    simple_accuracy, vqa_accuracy, EvalReport, Member,
};
pub use report::{render_table, report_kv, TableRow, METRIC_COLUMNS, TABLE_COLUMNS};
pub use schedule::{cosine_lr, LrSchedule};
pub use trainer::{train, TrainConfig, TrainOutcome};
pub use vqa::{LanguageConfig, VqaModel, VqaModelConfig, VqaSample};
