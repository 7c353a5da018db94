//! Constrained reinforcement learning with affinely independent mixed
//! policies: CMDP primitives, benchmark environments, the mixed-policy
//! geometry kernel, the primal-dual learner, off-policy evaluation and
//! persistence.

pub mod aim;
pub mod cmdp;
pub mod envs;
pub mod error;
pub mod learner;
pub mod ope;
pub mod store;

pub use aim::{AimPolicy, HullStatus};
pub use cmdp::{
    Cmdp, CmdpParts, ConstraintSpec, DeterministicPolicy, LambdaVector, MeasurementVector, Objective, PolicyId,
};
pub use envs::{MarketingConfig, StochasticPolicy, TransitionDataset, TransitionSample};
pub use error::{Error, Result};
pub use learner::{train, MixerKind, Problem, TrainConfig, TrainOutcome, TrainTrace};
pub use ope::{NormalizationMode, OpeEstimate};
