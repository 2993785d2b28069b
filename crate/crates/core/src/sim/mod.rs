//! Design-based simulation: synthetic frames and populations, two-stage
//! surveys, and replicate studies scored against the known truth.

pub mod checks;
pub mod config;
pub mod design;
pub mod frame;
pub mod population;
pub mod study;

pub use checks::{direct_calibration, loao_gap_check, training_mse_check, remainder_check};
pub use config::{AreaConfig, PairConfig, ScenarioConfig, SizeRange};
pub use design::draw_survey;
pub use frame::{build_frame, FrameCluster};
pub use population::{generate_population, SyntheticPopulation};
pub use study::{run_study, StudyReport, StudySummary};
