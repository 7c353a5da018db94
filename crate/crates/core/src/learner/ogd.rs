use serde::{Deserialize, Serialize};

use crate::cmdp::{ConstraintSpec, LambdaVector, MeasurementVector};

/// Step-size schedule of the multiplier player.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum LearningRate {
    /// `eta_t = scale / sqrt(t)`.
    InvSqrt { scale: f64 },
    Constant { eta: f64 },
}

impl Default for LearningRate {
    fn default() -> Self {
        LearningRate::InvSqrt { scale: 1.0 }
    }
}

impl LearningRate {
    pub fn eta(&self, t: usize) -> f64 {
        match *self {
            LearningRate::InvSqrt { scale } => scale / (t.max(1) as f64).sqrt(),
            LearningRate::Constant { eta } => eta,
        }
    }
}

/// Projected gradient step on `lambda`. The Lagrangian's gradient in
/// `lambda` is `-(J_c - tau)`, so the step is
/// `max(0, lambda + eta_t (J_c - tau))` with `eta_t = 1/sqrt(t)`.
pub fn ogd_step(lambda: &LambdaVector, x_pi: &MeasurementVector, tau: &ConstraintSpec, t: usize) -> LambdaVector {
    ogd_step_with(lambda, x_pi, tau, t, LearningRate::default())
}

pub fn ogd_step_with(
    lambda: &LambdaVector,
    x_pi: &MeasurementVector,
    tau: &ConstraintSpec,
    t: usize,
    rate: LearningRate,
) -> LambdaVector {
    debug_assert!(t >= 1);
    debug_assert_eq!(lambda.m(), x_pi.m());
    let eta = rate.eta(t);
    LambdaVector::project(
        lambda
            .as_slice()
            .iter()
            .zip(x_pi.j_c())
            .zip(tau.tau())
            .map(|((l, c), t)| l + eta * (c - t))
            .collect(),
    )
}
