use serde::{Deserialize, Serialize};

use crate::aim::{AimPolicy, UpdateBranch};
use crate::cmdp::{
    evaluate_policy_exact, lagrangian, Cmdp, ConstraintSpec, DeterministicPolicy, LambdaVector, MeasurementVector,
    PolicyId,
};
use crate::envs::TransitionDataset;
use crate::error::{Error, Result};

use super::best_response::{best_response_exact_with_id, FeatureSpec, FittedDiagnostics, FittedLearner, QFunction};
use super::mixer::Mixer;
use super::ogd::ogd_step_with;
use super::registry::{PolicyParams, PolicyRecord, PolicyRegistry};
use super::{BestResponseMode, MeasurementSource, MixerKind, TrainConfig};

/// What the policy player learns from.
#[derive(Debug, Clone, Copy)]
pub enum Problem<'a> {
    /// A known CMDP, solved exactly.
    Model(&'a Cmdp),
    /// Logged transitions. `simulator` is only consulted when the config
    /// asks for exact measurements.
    Offline {
        dataset: &'a TransitionDataset,
        simulator: Option<&'a Cmdp>,
    },
}

impl Problem<'_> {
    fn m(&self) -> usize {
        match self {
            Problem::Model(c) => c.n_costs(),
            Problem::Offline { dataset, .. } => dataset.m(),
        }
    }

    fn discount(&self) -> f64 {
        match self {
            Problem::Model(c) => c.discount(),
            Problem::Offline { dataset, .. } => dataset.metadata.discount,
        }
    }

    fn reward_range(&self) -> f64 {
        let (lo, hi) = match self {
            Problem::Model(c) => c.reward_range(),
            Problem::Offline { dataset, .. } => dataset
                .samples
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.reward), hi.max(s.reward))),
        };
        if hi >= lo {
            hi - lo
        } else {
            0.0
        }
    }
}

/// `10 * reward_range / min_k |tau_k|`, floored at `1e-6`. A zero
/// threshold falls back to a unit scale.
pub fn box_lambda_max(reward_range: f64, tau: &ConstraintSpec) -> f64 {
    let scale = tau.tau().iter().map(|t| t.abs()).fold(f64::INFINITY, f64::min);
    let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    (10.0 * reward_range / scale).max(1e-6)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    /// The policy was offered to the mixer and accepted.
    Exported,
    /// Not an export step.
    Held,
    /// The mixer update failed; the previous mixture was kept.
    Failed,
}

impl RoundStatus {
    pub fn name(self) -> &'static str {
        match self {
            RoundStatus::Exported => "exported",
            RoundStatus::Held => "held",
            RoundStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    /// Multipliers the best response was computed against.
    pub lambda: Vec<f64>,
    pub policy: PolicyId,
    pub x_pi: MeasurementVector,
    /// `L(pi_t, lambda_t)`.
    pub lagrangian: f64,
    /// Mixer target after this round; empty before the first export.
    pub target: Option<MeasurementVector>,
    pub active: usize,
    pub stored_params: usize,
    pub status: RoundStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub mixer: MixerKind,
    pub best_response: BestResponseMode,
    pub measurement: MeasurementSource,
    pub seed: u64,
    pub m: usize,
    pub tau: Vec<f64>,
    /// Side of the box `[0, lambda_max]^m` that regret is measured against.
    pub lambda_max: f64,
    pub lambda_update_every: usize,
    pub export_every: usize,
    pub config_digest: String,
    pub diagnostics: Option<FittedDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub metadata: TraceMetadata,
    pub records: Vec<RoundRecord>,
}

impl TrainTrace {
    /// `(1/T) sum_t lambda_t`.
    pub fn lambda_hat(&self) -> LambdaVector {
        let m = self.metadata.m;
        if self.records.is_empty() {
            return LambdaVector::zeros(m);
        }
        let mut sum = vec![0.0; m];
        for r in &self.records {
            for (acc, l) in sum.iter_mut().zip(&r.lambda) {
                *acc += l;
            }
        }
        let n = self.records.len() as f64;
        LambdaVector::project(sum.into_iter().map(|s| s / n).collect())
    }

    /// Realized regret of the multiplier player against the best fixed
    /// multiplier in the documented box.
    pub fn regret(&self) -> f64 {
        regret(&self.records, &self.metadata.tau, self.metadata.lambda_max)
    }

    pub fn peak_stored_params(&self) -> usize {
        self.records.iter().map(|r| r.stored_params).max().unwrap_or(0)
    }
}

/// `sum_t L(pi_t, lambda_t) - min_{lambda in [0, lambda_max]^m} sum_t L(pi_t, lambda)`.
///
/// The sum is linear in `lambda`, so the minimum sits at a box corner:
/// `lambda_k = lambda_max` where the cumulative slack is positive.
pub fn regret(records: &[RoundRecord], tau: &[f64], lambda_max: f64) -> f64 {
    let played: f64 = records.iter().map(|r| r.lagrangian).sum();
    let reward: f64 = records.iter().map(|r| r.x_pi.j_r()).sum();
    let penalty: f64 = (0..tau.len())
        .map(|k| {
            let slack: f64 = records.iter().map(|r| r.x_pi.j_c()[k] - tau[k]).sum();
            lambda_max * slack.max(0.0)
        })
        .sum();
    played - (reward - penalty)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityGap {
    /// `max_pi L(pi, lambda_hat) - min_lambda L(mu, lambda)`.
    pub gap: f64,
    /// `Regret_T / T` from the trace.
    pub bound: f64,
    pub best_response_value: f64,
    pub mixture_value: f64,
}

/// Duality gap of `(mu, lambda_hat)` on a known CMDP and the regret bound
/// it should respect. The inner minimum ranges over the same box as the
/// regret.
pub fn duality_gap(
    cmdp: &Cmdp,
    mu_target: &MeasurementVector,
    lambda_hat: &LambdaVector,
    tau: &ConstraintSpec,
    trace: &TrainTrace,
) -> Result<DualityGap> {
    if mu_target.m() != tau.m() {
        return Err(Error::dim("mixture measurement", tau.m(), mu_target.m()));
    }
    let (_, x_br) = best_response_exact_with_id(cmdp, lambda_hat, tau, PolicyId(0))?;
    let best_response_value = lagrangian(&x_br, lambda_hat, tau)?;
    let lambda_max = trace.metadata.lambda_max;
    let mixture_value = mu_target.j_r()
        - mu_target
            .j_c()
            .iter()
            .zip(tau.tau())
            .map(|(c, t)| lambda_max * (c - t).max(0.0))
            .sum::<f64>();
    let t = trace.records.len().max(1) as f64;
    Ok(DualityGap {
        gap: best_response_value - mixture_value,
        bound: trace.regret() / t,
        best_response_value,
        mixture_value,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: AimPolicy,
    pub lambda_hat: LambdaVector,
    pub trace: TrainTrace,
    /// Parameters of every distinct best response.
    pub registry: PolicyRegistry,
    pub rebuilds: usize,
    pub failures: usize,
    pub branches: Vec<Option<UpdateBranch>>,
}

/// Training stopped early; `trace` holds the rounds completed before the
/// failure, when the run got that far.
#[derive(Debug, thiserror::Error)]
#[error("training failed: {error}")]
pub struct TrainFailure {
    #[source]
    pub error: Error,
    pub trace: Option<TrainTrace>,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        TrainFailure { error, trace: None }
    }
}

enum Responder<'a> {
    Exact(&'a Cmdp),
    Fitted {
        learner: FittedLearner<'a>,
        simulator: Option<&'a Cmdp>,
        linear: bool,
    },
}

impl Responder<'_> {
    fn respond(
        &self,
        lambda: &LambdaVector,
        tau: &ConstraintSpec,
        source: MeasurementSource,
        registry: &mut PolicyRegistry,
    ) -> Result<(DeterministicPolicy, MeasurementVector)> {
        match self {
            Responder::Exact(cmdp) => {
                let (policy, x) = best_response_exact_with_id(cmdp, lambda, tau, PolicyId(0))?;
                let na = cmdp.n_actions();
                let policy = registry.intern(&policy, || PolicyRecord::tabular(&policy, na).params);
                Ok((policy, x))
            }
            Responder::Fitted {
                learner,
                simulator,
                linear,
            } => {
                let (policy, q, x_ope) = learner.best_response(lambda, tau, PolicyId(0))?;
                let na = q.n_actions();
                let support = learner.support().to_vec();
                let policy = registry.intern(&policy, || match (linear, q) {
                    (true, QFunction::Linear { features, weights }) => PolicyParams::Linear {
                        features,
                        weights,
                        support,
                    },
                    _ => PolicyRecord::tabular(&policy, na).params,
                });
                let x = match source {
                    MeasurementSource::Ope => x_ope,
                    MeasurementSource::Exact => {
                        let cmdp = simulator.ok_or_else(|| {
                            Error::Precondition("exact measurements need the generating CMDP".into())
                        })?;
                        evaluate_policy_exact(cmdp, &policy)?
                    }
                };
                Ok((policy, x))
            }
        }
    }
}

/// Runs the game loop for `config.rounds` steps.
///
/// Each step computes a best response to the current multipliers. The
/// multipliers take an OGD step every `lambda_update_every` steps (with
/// their own step counter), and every `export_every`-th best response is
/// offered to the mixer. One trace record is written per step.
pub fn train(problem: Problem<'_>, tau: &ConstraintSpec, config: &TrainConfig) -> Result<TrainOutcome, TrainFailure> {
    config.validate()?;
    if problem.m() != tau.m() {
        return Err(Error::dim("training thresholds", problem.m(), tau.m()).into());
    }
    if let Some(g) = config.gamma {
        if (g - problem.discount()).abs() > 1e-12 {
            return Err(Error::Precondition(format!(
                "config discount {g} differs from the problem's {}",
                problem.discount()
            ))
            .into());
        }
    }
    let responder = match (config.best_response, problem) {
        (BestResponseMode::Exact, Problem::Model(cmdp)) => Responder::Exact(cmdp),
        (BestResponseMode::Fitted, Problem::Offline { dataset, simulator }) => Responder::Fitted {
            learner: FittedLearner::new(dataset, config.fitted.clone(), dataset.metadata.discount)?,
            simulator,
            linear: matches!(config.fitted.features, FeatureSpec::Linear { .. }),
        },
        (BestResponseMode::Exact, _) => {
            return Err(Error::Precondition("exact best responses need a CMDP".into()).into());
        }
        (BestResponseMode::Fitted, _) => {
            return Err(Error::Precondition("fitted best responses need a dataset".into()).into());
        }
    };
    let measurement = match config.best_response {
        BestResponseMode::Exact => MeasurementSource::Exact,
        BestResponseMode::Fitted => config.measurement,
    };
    let diagnostics = match &responder {
        Responder::Fitted { learner, .. } => Some(learner.diagnostics()),
        Responder::Exact(_) => None,
    };

    let mut trace = TrainTrace {
        metadata: TraceMetadata {
            mixer: config.mixer,
            best_response: config.best_response,
            measurement,
            seed: config.seed,
            m: tau.m(),
            tau: tau.tau().to_vec(),
            lambda_max: config
                .lambda_max
                .unwrap_or_else(|| box_lambda_max(problem.reward_range(), tau)),
            lambda_update_every: config.lambda_update_every,
            export_every: config.export_every,
            config_digest: config.digest(),
            diagnostics,
        },
        records: Vec::with_capacity(config.rounds),
    };

    let mut lambda = config.lambda_init.initial(tau.m(), config.seed)?;
    let mut registry = PolicyRegistry::new();
    let mut mixer = Mixer::new(config.mixer, config.geometry_tol);
    let mut cached: Option<(LambdaVector, DeterministicPolicy, MeasurementVector)> = None;
    let mut branches = Vec::new();
    let mut lambda_steps = 0;

    for t in 1..=config.rounds {
        let (policy, x) = match &cached {
            Some((l, p, x)) if *l == lambda => (p.clone(), x.clone()),
            _ => match responder.respond(&lambda, tau, measurement, &mut registry) {
                Ok((p, x)) => {
                    cached = Some((lambda.clone(), p.clone(), x.clone()));
                    (p, x)
                }
                Err(error) => {
                    return Err(TrainFailure {
                        error,
                        trace: Some(trace),
                    })
                }
            },
        };
        let value = match lagrangian(&x, &lambda, tau) {
            Ok(v) => v,
            Err(error) => {
                return Err(TrainFailure {
                    error,
                    trace: Some(trace),
                })
            }
        };
        let status = if t % config.export_every == 0 {
            let size = registry.record(policy.id).map_or(0, PolicyRecord::size);
            let outcome = mixer.push(policy.id, &x, size, tau);
            branches.push(outcome.branch);
            if outcome.error.is_some() {
                RoundStatus::Failed
            } else {
                RoundStatus::Exported
            }
        } else {
            RoundStatus::Held
        };
        trace.records.push(RoundRecord {
            t,
            lambda: lambda.as_slice().to_vec(),
            policy: policy.id,
            x_pi: x.clone(),
            lagrangian: value,
            target: mixer.target(),
            active: mixer.active_len(),
            stored_params: mixer.stored_params(),
            status,
        });
        if t % config.lambda_update_every == 0 {
            lambda_steps += 1;
            lambda = ogd_step_with(&lambda, &x, tau, lambda_steps, config.learning_rate);
        }
    }

    Ok(TrainOutcome {
        policy: mixer.policy(),
        lambda_hat: trace.lambda_hat(),
        trace,
        registry,
        rebuilds: mixer.rebuilds(),
        failures: mixer.failures(),
        branches,
    })
}
