//! Evaluation metrics, bootstrap confidence intervals and paired
//! permutation tests.

mod metrics;
mod stats;

pub use metrics::{
    accuracy, auc_roc, balanced_accuracy, binary_auc, cohens_kappa, mean_recall, per_class_f1,
    recall_at_k, rouge1, support_weighted, weighted_f1, KappaWeighting, LabeledPredictions,
    RECALL_KS,
};
pub use stats::{
    bootstrap_ci, nearest_rank, paired_permutation_test, ConfidenceInterval, PermutationConfig,
    PermutationResult,
};
