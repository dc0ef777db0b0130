//! Conditional cross-fitting for design-based estimation of the average
//! treatment effect in randomized experiments.
//!
//! The crate is `no_std` with `alloc`. Randomness always comes from a
//! caller-owned [`rand::RngCore`] stream.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod designs;
pub mod error;
pub mod estimators;
pub mod math;
pub mod oracle;
pub mod population;
pub mod predictors;
pub mod splitters;
pub mod variance;

pub use designs::{Design, Support};
pub use error::Error;
pub use estimators::{
    adjusted_estimate, cross_fit_estimate, cross_fit_with_split, ht_estimate,
    oracle_adjusted_estimate, CrossFitEstimate, Strictness,
};
pub use math::Matrix;
pub use population::{ObservedData, Population};
pub use predictors::{
    build_full_training_set, build_training_set, FittedPredictor, Learner, PredictorSpec, TrainingSet,
};
pub use splitters::{is_optimal_plan, split, SplitPlan, SplitResult};
pub use variance::{confidence_interval, conservativeness_gap, variance_cf, VarianceEstimate};

pub type Result<T> = core::result::Result<T, Error>;
