//! Dataset generation, k-fold training and the studies built on them.

pub mod dataset;
pub mod folds;
pub mod report;
pub mod studies;
pub mod train;

pub use dataset::{generate_dataset, generate_dataset_with, Dataset};
pub use folds::{kfold, FoldSplit, DEFAULT_FOLDS};
pub use report::{Aggregate, ExperimentReport, ReportRow, THRESHOLD_RATIO};
pub use studies::{
    all_targets, run_asymmetry_experiment, run_augmentation_study, run_inverse_study,
    AsymmetryStats, AsymmetrySummary, PlotRow, PlotSeries, StudyOutput, StudySettings,
};
pub use train::{
    evaluate, pattern_batch, train_eval, train_eval_models, FoldResult, RunLabel, TrainConfig,
};
