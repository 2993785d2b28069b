//! Design-aware cross-validation for comparing small area estimators.
//!
//! The crate covers survey microdata handling ([`survey`]), direct Hájek
//! estimation ([`direct`]), Fay-Herriot and beta-binomial area models
//! ([`models`]), K-fold cross-validation scoring with error bounds and the
//! comparison verdict ([`cv`]), and a design-based simulation lab ([`sim`]).

pub mod cv;
pub mod direct;
pub mod error;
pub mod models;
pub mod rng;
pub mod sim;
pub mod survey;

pub use direct::{hajek, hajek_all, logit_transform, DirectEstimate, DirectEstimates, SingletonPolicy};
pub use error::{Error, Result};
pub use survey::{area_weights, load_survey, rescale_weights, AreaWeights, Id, SurveyDataset, UnitRecord, WeightMode};
