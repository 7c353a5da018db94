//! Clipped importance-sampling evaluation of deterministic and mixed
//! policies from logged episodes.

use serde::{Deserialize, Serialize};

use crate::aim::AimPolicy;
use crate::cmdp::{DeterministicPolicy, MeasurementVector, PolicyId};
use crate::envs::TransitionDataset;
use crate::error::{Error, Result};

pub const DEFAULT_CLIP: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationMode {
    /// Divide by the number of episodes.
    #[default]
    Plain,
    /// Divide by the sum of the weights.
    SelfNormalized,
}

impl std::str::FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(NormalizationMode::Plain),
            "self-normalized" | "self_normalized" | "sn" => Ok(NormalizationMode::SelfNormalized),
            other => Err(Error::InvalidArgument(format!("unknown normalization mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeEstimate {
    pub x_hat: MeasurementVector,
    pub n_episodes: usize,
    /// `(sum w)^2 / sum w^2`; never exceeds `n_episodes`.
    pub effective_sample_size: f64,
    pub clip: f64,
    pub mode: NormalizationMode,
    /// Largest per-episode weight after clipping.
    pub max_weight: f64,
    /// No logged episode agrees with the evaluated policy.
    pub no_support: bool,
}

/// Per-episode importance weight of a deterministic policy, clipped at
/// `clip`: the product over steps of `1[a = pi(s)] / propensity`.
pub fn episode_weight(episode: &[crate::envs::TransitionSample], policy: &DeterministicPolicy, clip: f64) -> f64 {
    let mut w = 1.0;
    for step in episode {
        if policy.action(step.state) != step.action {
            return 0.0;
        }
        w /= step.behavior_propensity;
        if w >= clip {
            return clip;
        }
    }
    w.min(clip)
}

struct EpisodeReturns {
    weight: f64,
    returns: Vec<f64>,
}

fn discounted_returns(episode: &[crate::envs::TransitionSample], gamma: f64, dim: usize) -> Vec<f64> {
    let mut returns = vec![0.0; dim];
    let mut discount = 1.0;
    for step in episode {
        returns[0] += discount * step.reward;
        for (r, c) in returns[1..].iter_mut().zip(&step.cost) {
            *r += discount * c;
        }
        discount *= gamma;
    }
    returns
}

fn check_inputs(dataset: &TransitionDataset, policy: &DeterministicPolicy, clip: f64) -> Result<()> {
    if !(clip > 0.0) {
        return Err(Error::InvalidArgument(format!("clip must be positive, got {clip}")));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if policy.n_states() != dataset.metadata.n_states {
        return Err(Error::dim("evaluated policy states", dataset.metadata.n_states, policy.n_states()));
    }
    Ok(())
}

/// Importance-sampling estimate of `[J_r, J_c]` for a deterministic policy.
///
/// Returns use the dataset's recorded discount. When no episode matches
/// the policy the estimate is zero with `no_support` set.
pub fn is_estimate(
    dataset: &TransitionDataset,
    policy: &DeterministicPolicy,
    clip: f64,
    mode: NormalizationMode,
) -> Result<OpeEstimate> {
    check_inputs(dataset, policy, clip)?;
    let dim = dataset.m() + 1;
    let gamma = dataset.metadata.discount;
    let episodes: Vec<EpisodeReturns> = dataset
        .episodes()
        .map(|ep| EpisodeReturns {
            weight: episode_weight(ep, policy, clip),
            returns: discounted_returns(ep, gamma, dim),
        })
        .collect();
    Ok(aggregate(&episodes, dim, clip, mode))
}

fn aggregate(episodes: &[EpisodeReturns], dim: usize, clip: f64, mode: NormalizationMode) -> OpeEstimate {
    let n = episodes.len();
    let mut weighted = vec![0.0; dim];
    let (mut sum_w, mut sum_w2, mut max_w) = (0.0, 0.0, 0.0f64);
    for ep in episodes {
        if ep.weight == 0.0 {
            continue;
        }
        sum_w += ep.weight;
        sum_w2 += ep.weight * ep.weight;
        max_w = max_w.max(ep.weight);
        for (acc, g) in weighted.iter_mut().zip(&ep.returns) {
            *acc += ep.weight * g;
        }
    }
    let no_support = sum_w == 0.0;
    let denom = match mode {
        NormalizationMode::Plain => n as f64,
        NormalizationMode::SelfNormalized => sum_w,
    };
    let x_hat = if no_support {
        vec![0.0; dim]
    } else {
        weighted.iter().map(|v| v / denom).collect()
    };
    OpeEstimate {
        x_hat: MeasurementVector::new(x_hat).expect("finite weighted returns"),
        n_episodes: n,
        effective_sample_size: if no_support { 0.0 } else { sum_w * sum_w / sum_w2 },
        clip,
        mode,
        max_weight: max_w,
        no_support,
    }
}

/// `sum_i alpha_i * is_estimate(pi_i)`, using linearity of the measurement
/// in the mixing weights.
pub fn evaluate_mixed<'a>(
    dataset: &TransitionDataset,
    mu: &AimPolicy,
    lookup: impl Fn(PolicyId) -> Option<&'a DeterministicPolicy>,
    clip: f64,
    mode: NormalizationMode,
) -> Result<OpeEstimate> {
    if mu.is_empty() {
        return Err(Error::EmptyPolicy);
    }
    let mut parts = Vec::with_capacity(mu.len());
    for active in mu.active() {
        let policy = lookup(active.policy)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameters for policy {}", active.policy)))?;
        parts.push(is_estimate(dataset, policy, clip, mode)?);
    }
    let weights = mu.weights();
    let x_hat = MeasurementVector::combine(parts.iter().map(|p| &p.x_hat), weights);
    Ok(OpeEstimate {
        x_hat,
        n_episodes: parts[0].n_episodes,
        effective_sample_size: parts
            .iter()
            .zip(weights)
            .map(|(p, w)| w * p.effective_sample_size)
            .sum(),
        clip,
        mode,
        max_weight: parts.iter().map(|p| p.max_weight).fold(0.0, f64::max),
        no_support: parts.iter().zip(weights).any(|(p, w)| *w > 0.0 && p.no_support),
    })
}
