//! Detection metrics, the KNN baseline and the method comparison harness.

mod harness;
mod knn;
mod metrics;

pub use harness::{
    evaluate_scores, run_comparison, run_split, write_roc_csv, ComparisonTable, HarnessConfig,
    Method, MethodResult, MethodSummary,
};
pub use knn::knn_baseline;
pub use metrics::{
    competition_score, confusion, mcc, mcc_degenerate, roc_auc, ConfusionCounts, RocCurve,
    RocPoint, ScoreConvention, DEFAULT_THRESHOLD,
};
