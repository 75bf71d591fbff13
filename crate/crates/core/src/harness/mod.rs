//! Training, evaluation, ablation, gradient checking and explanation export.

pub mod ablate;
pub mod evaluate;
pub mod explain;
pub mod gradcheck;
pub mod metrics;
pub mod train;

pub use ablate::{ablate, train_seeds, AblationRow, AblationTable, SeedSummary, ABLATION_GRID};
pub use evaluate::{evaluate, predict_all};
pub use explain::{export_explanation, ExplanationBundle};
pub use gradcheck::{gradcheck, GradCheckReport};
pub use metrics::{ClassMetrics, MetricsReport};
pub use train::{train, train_model, Adam, EpochRecord, TrainHistory, TrainOutcome, Trainer};
