//! Metrics, evaluation of trained checkpoints, and source-collapse sweeps.
//!
//! Binary detection treats class 0 (`normal`) as negative and scores each sample
//! by the probability mass on every other class.

mod harness;
mod metrics;

pub use harness::{
    collapse_sweep, combinations, evaluate, join_tags, predict_set, report, BinaryMetrics,
    CollapseMode, EvalReport, MultiMetrics, Predictions, RobustnessReport, SweepRow,
};
pub use metrics::{
    anomaly_score, argmax, auc_roc, average_precision, decision_fusion, mean_ap, per_class_ap,
    Confusion, DecisionMode,
};
