//! Cross-validation: fold assignment, scores, bounds, verdicts, and the
//! leave-one-area-out and independent-validation alternatives.

pub mod bounds;
pub mod folds;
pub mod loao;
pub mod scores;
pub mod validation;
pub mod verdict;

pub use bounds::{error_bound_adjusted, error_bound_naive, BoundReport};
pub use folds::{assign_folds_psu, assign_folds_ssu, resplit_two_fold, FoldAssignment, Scheme};
pub use loao::{loao_score, LoaoScore};
pub use scores::{cv_scores, run_folds, score_folds, CvScores, FoldResults, MissingFolds};
pub use validation::{independent_validation_score, validation_term};
pub use verdict::{compare_detailed, compare_models, decide, CvConfig, Decision, Verdict};
