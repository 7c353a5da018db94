//! Best responses of the policy player: exact value iteration on a known
//! CMDP, or fitted Q-iteration on logged transitions. Both maximize the
//! penalized reward `r - lambda^T (c - tau)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cmdp::{
    evaluate_policy_exact, penalized_reward, Cmdp, ConstraintSpec, DeterministicPolicy, LambdaVector,
    MeasurementVector, PolicyId,
};
use crate::envs::TransitionDataset;
use crate::error::{Error, Result};
use crate::ope::{is_estimate, NormalizationMode, DEFAULT_CLIP};

const VALUE_ITERATION_TOL: f64 = 1e-10;
const VALUE_ITERATION_MAX_SWEEPS: usize = 1_000_000;

/// Actions whose values differ by less than this (relative to the value
/// scale) are tied; ties go to the lowest index.
pub const TIE_TOL: f64 = 1e-12;

fn argmax_lowest(values: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    let candidates: Vec<(usize, f64)> = values.collect();
    let best = candidates.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return None;
    }
    let tol = TIE_TOL * best.abs().max(1.0);
    candidates.into_iter().find(|(_, v)| *v >= best - tol)
}

/// Optimal deterministic policy for the penalized reward, found by value
/// iteration to a sup-norm change below `1e-10`, and its exact measurement.
pub fn best_response_exact(
    cmdp: &Cmdp,
    lambda: &LambdaVector,
    tau: &ConstraintSpec,
) -> Result<(DeterministicPolicy, MeasurementVector)> {
    best_response_exact_with_id(cmdp, lambda, tau, PolicyId(0))
}

pub(crate) fn best_response_exact_with_id(
    cmdp: &Cmdp,
    lambda: &LambdaVector,
    tau: &ConstraintSpec,
    id: PolicyId,
) -> Result<(DeterministicPolicy, MeasurementVector)> {
    if lambda.m() != cmdp.n_costs() {
        return Err(Error::dim("best-response multipliers", cmdp.n_costs(), lambda.m()));
    }
    if tau.m() != cmdp.n_costs() {
        return Err(Error::dim("best-response thresholds", cmdp.n_costs(), tau.m()));
    }
    let (ns, na, gamma) = (cmdp.n_states(), cmdp.n_actions(), cmdp.discount());
    let shaped: Vec<f64> = (0..ns * na)
        .map(|i| penalized_reward(cmdp.reward(i / na, i % na), cmdp.cost(i / na, i % na), lambda, tau))
        .collect();
    let q_of = |v: &[f64], s: usize, a: usize| {
        let future: f64 = cmdp.transition_row(s, a).iter().zip(v).map(|(p, v)| p * v).sum();
        shaped[s * na + a] + gamma * future
    };

    let mut v = vec![0.0; ns];
    for _ in 0..VALUE_ITERATION_MAX_SWEEPS {
        let next: Vec<f64> = (0..ns)
            .map(|s| (0..na).map(|a| q_of(&v, s, a)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < VALUE_ITERATION_TOL {
            break;
        }
    }
    let actions: Vec<usize> = (0..ns)
        .map(|s| argmax_lowest((0..na).map(|a| (a, q_of(&v, s, a)))).map_or(0, |(a, _)| a))
        .collect();
    let policy = DeterministicPolicy::new(id, actions, na)?;
    let x = evaluate_policy_exact(cmdp, &policy)?;
    Ok((policy, x))
}

/// Explicit feature table for linear Q-functions: one row of `dim` entries
/// per state-action pair, row index `s * n_actions + a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub n_states: usize,
    pub n_actions: usize,
    pub dim: usize,
    pub rows: Vec<f64>,
}

impl FeatureMap {
    pub fn new(n_states: usize, n_actions: usize, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if rows.len() != n_states * n_actions * dim {
            return Err(Error::dim("feature table", n_states * n_actions * dim, rows.len()));
        }
        if dim == 0 || rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("features must be finite with dim >= 1".into()));
        }
        Ok(FeatureMap {
            n_states,
            n_actions,
            dim,
            rows,
        })
    }

    /// One-hot features; linear FQI on these reproduces the tabular case.
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        let dim = n_states * n_actions;
        let mut rows = vec![0.0; dim * dim];
        for i in 0..dim {
            rows[i * dim + i] = 1.0;
        }
        FeatureMap {
            n_states,
            n_actions,
            dim,
            rows,
        }
    }

    pub fn phi(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.dim;
        &self.rows[start..start + self.dim]
    }
}

/// Action-value function used by fitted best responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QFunction {
    Tabular {
        n_states: usize,
        n_actions: usize,
        values: Vec<f64>,
    },
    Linear {
        features: FeatureMap,
        weights: Vec<f64>,
    },
}

impl QFunction {
    pub fn n_states(&self) -> usize {
        match self {
            QFunction::Tabular { n_states, .. } => *n_states,
            QFunction::Linear { features, .. } => features.n_states,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            QFunction::Tabular { n_actions, .. } => *n_actions,
            QFunction::Linear { features, .. } => features.n_actions,
        }
    }

    pub fn q(&self, s: usize, a: usize) -> f64 {
        match self {
            QFunction::Tabular { n_actions, values, .. } => values[s * n_actions + a],
            QFunction::Linear { features, weights } => {
                features.phi(s, a).iter().zip(weights).map(|(f, w)| f * w).sum()
            }
        }
    }

    /// Greedy readout restricted to `support` (actions allowed per state,
    /// row-major). States without any allowed action play action 0.
    pub fn greedy(&self, id: PolicyId, support: &[bool]) -> Result<DeterministicPolicy> {
        let (ns, na) = (self.n_states(), self.n_actions());
        if support.len() != ns * na {
            return Err(Error::dim("greedy support mask", ns * na, support.len()));
        }
        let actions = (0..ns)
            .map(|s| {
                argmax_lowest((0..na).filter(|&a| support[s * na + a]).map(|a| (a, self.q(s, a))))
                    .map_or(0, |(a, _)| a)
            })
            .collect();
        DeterministicPolicy::new(id, actions, na)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    #[default]
    Tabular,
    Linear {
        dim: usize,
        rows: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpeConfig {
    pub clip: f64,
    pub mode: NormalizationMode,
}

impl Default for OpeConfig {
    fn default() -> Self {
        OpeConfig {
            clip: DEFAULT_CLIP,
            mode: NormalizationMode::Plain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FittedConfig {
    pub sweeps: usize,
    /// Relaxation of each sweep: `Q <- (1 - step) Q + step * fitted`.
    pub step_size: f64,
    pub features: FeatureSpec,
    /// Ridge penalty of the linear regression.
    pub ridge: f64,
    pub ope: OpeConfig,
}

impl Default for FittedConfig {
    fn default() -> Self {
        FittedConfig {
            sweeps: 100,
            step_size: 1.0,
            features: FeatureSpec::Tabular,
            ridge: 1e-6,
            ope: OpeConfig::default(),
        }
    }
}

/// Pairs and states the dataset never covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FittedDiagnostics {
    /// State-action pairs with no logged sample; their Q stays at 0.
    pub unobserved_pairs: usize,
    /// States with no logged action; their greedy action defaults to 0.
    pub unvisited_states: usize,
}

/// Per state-action sufficient statistics of the dataset.
#[derive(Debug, Clone)]
struct PairStats {
    count: f64,
    reward_sum: f64,
    cost_sum: Vec<f64>,
    /// `(next_state, count)` sorted by state.
    next: Vec<(usize, f64)>,
}

enum Regressor {
    Tabular,
    Linear {
        features: FeatureMap,
        /// Cholesky factor of `Phi^T Phi + ridge I`.
        gram: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    },
}

/// Fitted Q-iteration on a fixed dataset. Dataset statistics are gathered
/// once; each best response starts from `Q = 0`.
pub struct FittedLearner<'a> {
    dataset: &'a TransitionDataset,
    config: FittedConfig,
    stats: Vec<Option<PairStats>>,
    support: Vec<bool>,
    state_has_support: Vec<bool>,
    regressor: Regressor,
    gamma: f64,
    diagnostics: FittedDiagnostics,
}

impl<'a> FittedLearner<'a> {
    pub fn new(dataset: &'a TransitionDataset, config: FittedConfig, gamma: f64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("discount {gamma} outside [0, 1)")));
        }
        if config.sweeps == 0 || !(config.step_size > 0.0 && config.step_size <= 1.0) {
            return Err(Error::InvalidArgument("need sweeps >= 1 and step size in (0, 1]".into()));
        }
        let meta = &dataset.metadata;
        let (ns, na, m) = (meta.n_states, meta.n_actions, meta.m);
        let mut stats: Vec<Option<PairStats>> = vec![None; ns * na];
        for sample in &dataset.samples {
            let entry = stats[sample.state * na + sample.action].get_or_insert_with(|| PairStats {
                count: 0.0,
                reward_sum: 0.0,
                cost_sum: vec![0.0; m],
                next: Vec::new(),
            });
            entry.count += 1.0;
            entry.reward_sum += sample.reward;
            for (acc, c) in entry.cost_sum.iter_mut().zip(&sample.cost) {
                *acc += c;
            }
            match entry.next.binary_search_by_key(&sample.next_state, |(s, _)| *s) {
                Ok(i) => entry.next[i].1 += 1.0,
                Err(i) => entry.next.insert(i, (sample.next_state, 1.0)),
            }
        }
        let support: Vec<bool> = stats.iter().map(Option::is_some).collect();
        let state_has_support: Vec<bool> = (0..ns).map(|s| support[s * na..(s + 1) * na].iter().any(|&b| b)).collect();
        let diagnostics = FittedDiagnostics {
            unobserved_pairs: support.iter().filter(|&&b| !b).count(),
            unvisited_states: state_has_support.iter().filter(|&&b| !b).count(),
        };

        let regressor = match &config.features {
            FeatureSpec::Tabular => Regressor::Tabular,
            FeatureSpec::Linear { dim, rows } => {
                let features = FeatureMap::new(ns, na, *dim, rows.clone())?;
                let mut gram = DMatrix::<f64>::identity(*dim, *dim) * config.ridge;
                for sample in &dataset.samples {
                    let phi = DVector::from_column_slice(features.phi(sample.state, sample.action));
                    gram += &phi * phi.transpose();
                }
                let gram = gram
                    .cholesky()
                    .ok_or(Error::Singular("factoring the feature Gram matrix"))?;
                Regressor::Linear { features, gram }
            }
        };

        Ok(FittedLearner {
            dataset,
            config,
            stats,
            support,
            state_has_support,
            regressor,
            gamma,
            diagnostics,
        })
    }

    pub fn diagnostics(&self) -> FittedDiagnostics {
        self.diagnostics
    }

    /// Allowed actions per state: those with at least one logged sample.
    pub fn support(&self) -> &[bool] {
        &self.support
    }

    fn n_actions(&self) -> usize {
        self.dataset.metadata.n_actions
    }

    /// Value of a next state under `q`. States without logged actions are
    /// treated as absorbing with zero reward and cost, which under the
    /// penalized reward is worth `lambda^T tau / (1 - gamma)`.
    fn state_value(&self, q: &QFunction, s: usize, absorbing_value: f64) -> f64 {
        if !self.state_has_support[s] {
            return absorbing_value;
        }
        let na = self.n_actions();
        (0..na)
            .filter(|&a| self.support[s * na + a])
            .map(|a| q.q(s, a))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Runs the configured number of sweeps for the penalized reward.
    pub fn fit(&self, lambda: &LambdaVector, tau: &ConstraintSpec) -> Result<QFunction> {
        let meta = &self.dataset.metadata;
        if lambda.m() != meta.m || tau.m() != meta.m {
            return Err(Error::dim("fitted best-response multipliers", meta.m, lambda.m()));
        }
        let (ns, na) = (meta.n_states, meta.n_actions);
        let absorbing_value = lambda
            .as_slice()
            .iter()
            .zip(tau.tau())
            .map(|(l, t)| l * t)
            .sum::<f64>()
            / (1.0 - self.gamma);
        let step = self.config.step_size;

        match &self.regressor {
            Regressor::Tabular => {
                let shaped: Vec<Option<f64>> = self
                    .stats
                    .iter()
                    .map(|st| {
                        st.as_ref().map(|st| {
                            let c: Vec<f64> = st.cost_sum.iter().map(|c| c / st.count).collect();
                            penalized_reward(st.reward_sum / st.count, &c, lambda, tau)
                        })
                    })
                    .collect();
                let mut q = QFunction::Tabular {
                    n_states: ns,
                    n_actions: na,
                    values: vec![0.0; ns * na],
                };
                for _ in 0..self.config.sweeps {
                    let values: Vec<f64> = (0..ns * na)
                        .map(|i| {
                            let (Some(st), Some(r)) = (&self.stats[i], shaped[i]) else {
                                return 0.0;
                            };
                            let future: f64 = st
                                .next
                                .iter()
                                .map(|(s2, n)| n * self.state_value(&q, *s2, absorbing_value))
                                .sum::<f64>()
                                / st.count;
                            let fitted = r + self.gamma * future;
                            (1.0 - step) * q.q(i / na, i % na) + step * fitted
                        })
                        .collect();
                    q = QFunction::Tabular {
                        n_states: ns,
                        n_actions: na,
                        values,
                    };
                }
                Ok(q)
            }
            Regressor::Linear { features, gram } => {
                let mut weights = DVector::<f64>::zeros(features.dim);
                let mut q = QFunction::Linear {
                    features: features.clone(),
                    weights: weights.iter().copied().collect(),
                };
                for _ in 0..self.config.sweeps {
                    let mut rhs = DVector::<f64>::zeros(features.dim);
                    for sample in &self.dataset.samples {
                        let target = penalized_reward(sample.reward, &sample.cost, lambda, tau)
                            + self.gamma * self.state_value(&q, sample.next_state, absorbing_value);
                        for (acc, f) in rhs.iter_mut().zip(features.phi(sample.state, sample.action)) {
                            *acc += f * target;
                        }
                    }
                    let fitted = gram.solve(&rhs);
                    weights = weights * (1.0 - step) + fitted * step;
                    q = QFunction::Linear {
                        features: features.clone(),
                        weights: weights.iter().copied().collect(),
                    };
                }
                Ok(q)
            }
        }
    }

    /// Greedy policy of the fitted Q-function and its OPE measurement.
    pub fn best_response(
        &self,
        lambda: &LambdaVector,
        tau: &ConstraintSpec,
        id: PolicyId,
    ) -> Result<(DeterministicPolicy, QFunction, MeasurementVector)> {
        let q = self.fit(lambda, tau)?;
        let policy = q.greedy(id, &self.support)?;
        let estimate = is_estimate(self.dataset, &policy, self.config.ope.clip, self.config.ope.mode)?;
        Ok((policy, q, estimate.x_hat))
    }
}

/// One-shot fitted best response: fitted Q-iteration on the penalized
/// reward, greedy readout, and an importance-sampling measurement.
pub fn best_response_fitted(
    dataset: &TransitionDataset,
    lambda: &LambdaVector,
    tau: &ConstraintSpec,
    config: &FittedConfig,
) -> Result<(DeterministicPolicy, MeasurementVector)> {
    let learner = FittedLearner::new(dataset, config.clone(), dataset.metadata.discount)?;
    let (policy, _, x) = learner.best_response(lambda, tau, PolicyId(0))?;
    Ok((policy, x))
}
