//! Online learning in discounted linear MDPs with optimistic exploration,
//! feature-based imitation learning, and exact dynamic-programming oracles.

// negated comparisons are used deliberately so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod envsim;
pub mod error;
pub mod harness;
pub mod imitation;
pub mod instances;
pub mod learner;
pub mod mdp;
pub mod numerics;
pub mod oamdp;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
pub use learner::{CompactPolicy, Hyperparams, LearnerConfig, LearnerState};
pub use mdp::{FeatureMap, LinearMdp, OccupancyMeasure, TabularMdp, TabularPolicy};
pub use numerics::CovarianceState;
pub use oamdp::AscensionFunction;
