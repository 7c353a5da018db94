//! Myopic two-step baseline: fit one-step reward and cost responses from
//! logged data, then pick each action by its one-step penalized reward
//! with the multiplier set so that the one-step spend over the logged
//! state distribution meets the budget. Long-run effects of actions on
//! future states are ignored by construction.

use aimrl::cmdp::{penalized_reward, DeterministicPolicy, LambdaVector, PolicyId};
use aimrl::{ConstraintSpec, Result, TransitionDataset};

const BISECTION_STEPS: usize = 60;

/// Mean one-step reward and costs per state-action pair; `None` where the
/// source has no information.
#[derive(Debug, Clone)]
pub struct OneStepModel {
    n_states: usize,
    n_actions: usize,
    means: Vec<Option<(f64, Vec<f64>)>>,
    /// Discounted visits per episode under the logging policy.
    state_weights: Vec<f64>,
}

impl OneStepModel {
    pub fn from_dataset(ds: &TransitionDataset) -> Self {
        let (ns, na, m) = (ds.metadata.n_states, ds.metadata.n_actions, ds.m());
        let mut sums = vec![(0usize, 0.0, vec![0.0; m]); ns * na];
        let mut state_weights = vec![0.0; ns];
        let n_episodes = ds.episodes().count().max(1) as f64;
        for sample in &ds.samples {
            state_weights[sample.state] += ds.metadata.discount.powi(sample.step_index as i32) / n_episodes;
            let entry = &mut sums[sample.state * na + sample.action];
            entry.0 += 1;
            entry.1 += sample.reward;
            entry.2.iter_mut().zip(&sample.cost).for_each(|(acc, c)| *acc += c);
        }
        let means = sums
            .into_iter()
            .map(|(n, r, c)| {
                (n > 0).then(|| {
                    let n = n as f64;
                    (r / n, c.into_iter().map(|v| v / n).collect())
                })
            })
            .collect();
        OneStepModel {
            n_states: ns,
            n_actions: na,
            means,
            state_weights,
        }
    }

    /// Expected discounted one-step cost of `policy` with states drawn as
    /// in the log, ignoring how the policy would change them.
    pub fn one_step_cost(&self, policy: &DeterministicPolicy, m: usize) -> Vec<f64> {
        let mut total = vec![0.0; m];
        for (s, w) in self.state_weights.iter().enumerate().filter(|(_, w)| **w > 0.0) {
            if let Some((_, c)) = &self.means[s * self.n_actions + policy.action(s)] {
                total.iter_mut().zip(c).for_each(|(acc, c)| *acc += w * c);
            }
        }
        total
    }

    /// Per state, the known action maximizing `r - lambda^T (c - tau)`;
    /// lowest index on ties, action 0 where nothing is known.
    pub fn greedy(&self, lambda: &LambdaVector, tau: &ConstraintSpec, id: PolicyId) -> Result<DeterministicPolicy> {
        let actions = (0..self.n_states)
            .map(|s| {
                let mut best: Option<(usize, f64)> = None;
                for a in 0..self.n_actions {
                    if let Some((r, c)) = &self.means[s * self.n_actions + a] {
                        let v = penalized_reward(*r, c, lambda, tau);
                        if best.is_none_or(|(_, b)| v > b) {
                            best = Some((a, v));
                        }
                    }
                }
                best.map_or(0, |(a, _)| a)
            })
            .collect();
        DeterministicPolicy::new(id, actions, self.n_actions)
    }
}

#[derive(Debug, Clone)]
pub struct MyopicBaseline {
    /// Common value of every multiplier.
    pub lambda: f64,
    pub policy: DeterministicPolicy,
    /// One-step spend over the logged state distribution.
    pub one_step_cost: Vec<f64>,
}

/// Smallest multiplier in `[0, lambda_max]` (shared by all constraints)
/// whose myopic policy keeps the one-step spend within `tau`, found by
/// bisection. Falls back to `lambda_max` when no multiplier suffices.
pub fn myopic_baseline(model: &OneStepModel, tau: &ConstraintSpec, lambda_max: f64, id: PolicyId) -> Result<MyopicBaseline> {
    let m = tau.m();
    let at = |l: f64| -> Result<MyopicBaseline> {
        let policy = model.greedy(&LambdaVector::new(vec![l; m])?, tau, id)?;
        let one_step_cost = model.one_step_cost(&policy, m);
        Ok(MyopicBaseline {
            lambda: l,
            policy,
            one_step_cost,
        })
    };
    let within = |b: &MyopicBaseline| b.one_step_cost.iter().zip(tau.tau()).all(|(c, t)| *c <= *t);
    let free = at(0.0)?;
    if within(&free) {
        return Ok(free);
    }
    let mut best = at(lambda_max)?;
    if !within(&best) {
        return Ok(best);
    }
    let mut lo = 0.0;
    for _ in 0..BISECTION_STEPS {
        let candidate = at(0.5 * (lo + best.lambda))?;
        if within(&candidate) {
            best = candidate;
        } else {
            lo = candidate.lambda;
        }
    }
    Ok(best)
}
