//! Synthetic CMDP constructors and offline dataset collection.
//!
//! Action indices are zero-based: in [`example1_cmdp`] action 0 is the free
//! no-op (`r = 0, c = 0`) and action 1 pays `r = 1, c = 1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmdp::{Cmdp, CmdpParts, ConstraintSpec, PROBABILITY_TOL};
use crate::error::{Error, Result};

pub const DEFAULT_DISCOUNT: f64 = 0.8;

/// Episodes that never reach a terminal state are truncated here.
pub const DEFAULT_MAX_EPISODE_STEPS: usize = 1_000;

/// One decision state, `n_actions` one-shot actions, then an absorbing
/// terminal state.
fn one_shot_cmdp(id: String, rewards: &[f64], costs: &[Vec<f64>], discount: f64) -> Result<Cmdp> {
    let n_actions = rewards.len();
    let m = costs[0].len();
    let n_states = 2;
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    for a in 0..n_actions {
        // decision -> terminal, terminal -> terminal
        transition[a * n_states + 1] = 1.0;
        transition[(n_actions + a) * n_states + 1] = 1.0;
    }
    let mut reward = vec![0.0; n_states * n_actions];
    reward[..n_actions].copy_from_slice(rewards);
    let mut cost = vec![0.0; n_states * n_actions * m];
    for (a, c) in costs.iter().enumerate() {
        cost[a * m..(a + 1) * m].copy_from_slice(c);
    }
    Cmdp::new(CmdpParts {
        id,
        n_states,
        n_actions,
        n_costs: m,
        transition,
        reward,
        cost,
        discount,
        initial_dist: vec![1.0, 0.0],
        terminal: vec![false, true],
    })
}

/// Single state, two actions: `(r, c) = (0, 0)` and `(1, 1)`. The optimum
/// under `J_c <= tau` plays action 1 with probability `tau`.
pub fn example1_cmdp(tau: f64) -> Result<(Cmdp, ConstraintSpec)> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    let cmdp = one_shot_cmdp(
        format!("example1(tau={tau})"),
        &[0.0, 1.0],
        &[vec![0.0], vec![1.0]],
        DEFAULT_DISCOUNT,
    )?;
    Ok((cmdp, ConstraintSpec::new(vec![tau])?))
}

/// Single state with `m + 1` one-shot actions: action 0 pays nothing and
/// action `i` pays reward 1 and cost `e_i`. With `tau = 1/(m+1)` in every
/// coordinate the unique optimum is the uniform mixture, value `m/(m+1)`.
pub fn simplex_cmdp(m: usize) -> Result<(Cmdp, ConstraintSpec)> {
    if m < 1 {
        return Err(Error::InvalidArgument("simplex CMDP needs m >= 1".into()));
    }
    let mut rewards = vec![0.0];
    let mut costs = vec![vec![0.0; m]];
    for i in 0..m {
        rewards.push(1.0);
        let mut c = vec![0.0; m];
        c[i] = 1.0;
        costs.push(c);
    }
    let cmdp = one_shot_cmdp(format!("simplex(m={m})"), &rewards, &costs, DEFAULT_DISCOUNT)?;
    Ok((cmdp, ConstraintSpec::uniform(m, 1.0 / (1.0 + m as f64))?))
}

/// Parameters of the coupon-allocation simulator.
///
/// A user is described by an activeness level and whether they took part
/// yesterday. Each day the operator offers one coupon; the user takes part
/// (is active and redeems the coupon) with probability
///
/// ```text
/// q = clamp(base + activeness_slope * level/(levels-1)
///           + coupon_slope * value + habit_bonus * took_part_yesterday)
/// ```
///
/// Taking part lifts the level by one with probability
/// `max_up_drift * (levels-1-level)/(levels-1)`, so inactive users respond
/// more in the long run; skipping a day drops it by one with probability
/// `down_drift`. Reward is the expected activity `q`, cost the expected
/// spend `value * q`. The horizon is unrolled into the state so the CMDP is
/// finite and exactly solvable.
///
/// The defaults are hand-picked constants, not fitted to any data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketingConfig {
    pub activeness_levels: usize,
    pub coupon_values: Vec<f64>,
    pub horizon: usize,
    pub discount: f64,
    /// Spend allowed per day; `tau` is its discounted sum over the horizon.
    pub daily_budget: f64,
    /// Overrides the budget-derived threshold when set.
    pub tau: Option<f64>,
    pub base_participation: f64,
    pub activeness_slope: f64,
    pub coupon_slope: f64,
    pub habit_bonus: f64,
    pub max_up_drift: f64,
    pub down_drift: f64,
    /// Distribution over activeness levels on day 0; uniform when unset.
    pub initial_levels: Option<Vec<f64>>,
}

impl Default for MarketingConfig {
    fn default() -> Self {
        MarketingConfig {
            activeness_levels: 4,
            coupon_values: vec![1.0, 2.0, 3.0],
            horizon: 7,
            discount: DEFAULT_DISCOUNT,
            daily_budget: 0.6,
            tau: None,
            base_participation: 0.05,
            activeness_slope: 0.7,
            coupon_slope: 0.08,
            habit_bonus: 0.10,
            max_up_drift: 0.8,
            down_drift: 0.4,
            initial_levels: None,
        }
    }
}

impl MarketingConfig {
    pub fn n_states(&self) -> usize {
        self.activeness_levels * 2 * self.horizon + 1
    }

    pub fn threshold(&self) -> f64 {
        self.tau.unwrap_or_else(|| {
            (0..self.horizon)
                .map(|d| self.daily_budget * self.discount.powi(d as i32))
                .sum()
        })
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("marketing config: {msg}")));
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        if self.activeness_levels == 0 {
            return bad("need at least one activeness level");
        }
        if self.coupon_values.is_empty() {
            return bad("coupon set is empty");
        }
        if self.coupon_values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("coupon values must be finite and nonnegative");
        }
        for (name, p) in [("max_up_drift", self.max_up_drift), ("down_drift", self.down_drift)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must be a probability"));
            }
        }
        if let Some(levels) = &self.initial_levels {
            if levels.len() != self.activeness_levels {
                return bad("initial_levels must have one entry per activeness level");
            }
            let total: f64 = levels.iter().sum();
            if levels.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > PROBABILITY_TOL {
                return bad("initial_levels must be a probability vector");
            }
        }
        if !self.threshold().is_finite() {
            return bad("threshold must be finite");
        }
        Ok(())
    }

    fn participation(&self, level: usize, habit: bool, coupon: f64) -> f64 {
        let level_frac = if self.activeness_levels > 1 {
            level as f64 / (self.activeness_levels - 1) as f64
        } else {
            0.0
        };
        let q = self.base_participation
            + self.activeness_slope * level_frac
            + self.coupon_slope * coupon
            + if habit { self.habit_bonus } else { 0.0 };
        q.clamp(0.01, 0.99)
    }

    fn up_drift(&self, level: usize) -> f64 {
        if self.activeness_levels > 1 {
            self.max_up_drift * (self.activeness_levels - 1 - level) as f64
                / (self.activeness_levels - 1) as f64
        } else {
            0.0
        }
    }

    /// State index of `(day, level, took_part_yesterday)`.
    pub fn state_index(&self, day: usize, level: usize, habit: bool) -> usize {
        (day * self.activeness_levels + level) * 2 + usize::from(habit)
    }
}

/// Day-indexed coupon-allocation CMDP with a single spend constraint.
pub fn marketing_cmdp(config: &MarketingConfig) -> Result<(Cmdp, ConstraintSpec)> {
    config.validate()?;
    let levels = config.activeness_levels;
    let n_states = config.n_states();
    let n_actions = config.coupon_values.len();
    let terminal_state = n_states - 1;

    let mut transition = vec![0.0; n_states * n_actions * n_states];
    let mut reward = vec![0.0; n_states * n_actions];
    let mut cost = vec![0.0; n_states * n_actions];
    let mut terminal = vec![false; n_states];
    terminal[terminal_state] = true;

    for day in 0..config.horizon {
        for level in 0..levels {
            for habit in [false, true] {
                let s = config.state_index(day, level, habit);
                for (a, &coupon) in config.coupon_values.iter().enumerate() {
                    let q = config.participation(level, habit, coupon);
                    reward[s * n_actions + a] = q;
                    cost[s * n_actions + a] = coupon * q;

                    let row = &mut transition[(s * n_actions + a) * n_states..][..n_states];
                    if day + 1 == config.horizon {
                        row[terminal_state] = 1.0;
                        continue;
                    }
                    let next = |lvl: usize, h: bool| config.state_index(day + 1, lvl, h);
                    let up = if level + 1 < levels { config.up_drift(level) } else { 0.0 };
                    row[next((level + 1).min(levels - 1), true)] += q * up;
                    row[next(level, true)] += q * (1.0 - up);
                    let down = if level > 0 { config.down_drift } else { 0.0 };
                    row[next(level.saturating_sub(1), false)] += (1.0 - q) * down;
                    row[next(level, false)] += (1.0 - q) * (1.0 - down);
                }
            }
        }
    }
    for a in 0..n_actions {
        transition[(terminal_state * n_actions + a) * n_states + terminal_state] = 1.0;
    }

    let mut initial_dist = vec![0.0; n_states];
    let uniform = vec![1.0 / levels as f64; levels];
    let start = config.initial_levels.as_ref().unwrap_or(&uniform);
    for (level, p) in start.iter().enumerate() {
        initial_dist[config.state_index(0, level, false)] = *p;
    }

    let cmdp = Cmdp::new(CmdpParts {
        id: format!("marketing(levels={levels},horizon={},coupons={n_actions})", config.horizon),
        n_states,
        n_actions,
        n_costs: 1,
        transition,
        reward,
        cost,
        discount: config.discount,
        initial_dist,
        terminal,
    })?;
    Ok((cmdp, ConstraintSpec::new(vec![config.threshold()])?))
}

/// A state-conditional action distribution used to log data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticPolicy {
    pub id: String,
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl StochasticPolicy {
    pub fn new(id: impl Into<String>, n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::dim("behavior probabilities", n_states * n_actions, probs.len()));
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (total - 1.0).abs() > PROBABILITY_TOL {
                return Err(Error::InvalidArgument(format!(
                    "behavior row for state {s} is not a probability vector"
                )));
            }
        }
        Ok(StochasticPolicy {
            id: id.into(),
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        StochasticPolicy {
            id: "uniform".into(),
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
}

/// One logged transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSample {
    pub episode_id: u64,
    pub step_index: u32,
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
    pub reward: f64,
    pub cost: Vec<f64>,
    /// Probability the logging policy gave to `action` at `state`.
    pub behavior_propensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub cmdp_id: String,
    pub behavior_id: String,
    pub seed: u64,
    pub m: usize,
    pub discount: f64,
    pub n_states: usize,
    pub n_actions: usize,
    pub n_episodes: u64,
}

/// Logged transitions grouped into contiguous episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDataset {
    pub metadata: DatasetMetadata,
    pub samples: Vec<TransitionSample>,
}

impl TransitionDataset {
    pub fn new(metadata: DatasetMetadata, samples: Vec<TransitionSample>) -> Result<Self> {
        let ds = TransitionDataset { metadata, samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn m(&self) -> usize {
        self.metadata.m
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let meta = &self.metadata;
        if meta.m == 0 {
            return Err(Error::Invariant("dataset must have m >= 1".into()));
        }
        if !(0.0..1.0).contains(&meta.discount) {
            return Err(Error::Invariant(format!("dataset discount {} outside [0, 1)", meta.discount)));
        }
        let mut previous: Option<&TransitionSample> = None;
        let mut episodes = 0u64;
        for (i, sample) in self.samples.iter().enumerate() {
            if sample.cost.len() != meta.m {
                return Err(Error::dim("dataset sample cost", meta.m, sample.cost.len()));
            }
            if !(sample.behavior_propensity > 0.0 && sample.behavior_propensity <= 1.0) {
                return Err(Error::Invariant(format!(
                    "sample {i} has propensity {} outside (0, 1]",
                    sample.behavior_propensity
                )));
            }
            if sample.state >= meta.n_states || sample.next_state >= meta.n_states || sample.action >= meta.n_actions {
                return Err(Error::Invariant(format!("sample {i} indexes outside the state/action space")));
            }
            if !sample.reward.is_finite() || sample.cost.iter().any(|c| !c.is_finite()) {
                return Err(Error::Invariant(format!("sample {i} has non-finite reward or cost")));
            }
            let contiguous = match previous {
                Some(prev) if prev.episode_id == sample.episode_id => sample.step_index == prev.step_index + 1,
                _ => {
                    episodes += 1;
                    sample.step_index == 0
                }
            };
            if !contiguous {
                return Err(Error::Invariant(format!(
                    "sample {i} breaks step contiguity in episode {}",
                    sample.episode_id
                )));
            }
            previous = Some(sample);
        }
        if episodes > meta.n_episodes {
            return Err(Error::Invariant(format!(
                "dataset holds {episodes} episodes but metadata records {}",
                meta.n_episodes
            )));
        }
        Ok(())
    }

    /// Iterates over episodes as contiguous slices.
    pub fn episodes(&self) -> impl Iterator<Item = &[TransitionSample]> {
        self.samples
            .chunk_by(|a, b| a.episode_id == b.episode_id)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CollectOptions {
    pub n_episodes: u64,
    pub seed: u64,
    pub max_steps: usize,
}

/// Logs `n_episodes` episodes under `behavior` with the default step cap.
pub fn collect_dataset(
    cmdp: &Cmdp,
    behavior: &StochasticPolicy,
    n_episodes: u64,
    seed: u64,
) -> Result<TransitionDataset> {
    collect_dataset_with(
        cmdp,
        behavior,
        CollectOptions {
            n_episodes,
            seed,
            max_steps: DEFAULT_MAX_EPISODE_STEPS,
        },
    )
}

/// Each episode draws from its own ChaCha stream keyed by `(seed,
/// episode_id)`, so the result does not depend on scheduling.
pub fn collect_dataset_with(
    cmdp: &Cmdp,
    behavior: &StochasticPolicy,
    options: CollectOptions,
) -> Result<TransitionDataset> {
    if behavior.n_states() != cmdp.n_states() || behavior.n_actions() != cmdp.n_actions() {
        return Err(Error::InvalidArgument(format!(
            "behavior policy is {}x{} but the CMDP is {}x{}",
            behavior.n_states(),
            behavior.n_actions(),
            cmdp.n_states(),
            cmdp.n_actions()
        )));
    }
    for s in (0..cmdp.n_states()).filter(|&s| !cmdp.is_terminal(s)) {
        if let Some(a) = behavior.row(s).iter().position(|&p| p <= 0.0) {
            return Err(Error::ZeroSupport { state: s, action: a });
        }
    }

    let episodes: Vec<Vec<TransitionSample>> = (0..options.n_episodes)
        .into_par_iter()
        .map(|episode_id| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(episode_id);
            simulate_episode(cmdp, behavior, episode_id, options.max_steps, &mut rng)
        })
        .collect();

    let metadata = DatasetMetadata {
        cmdp_id: cmdp.id().to_string(),
        behavior_id: behavior.id.clone(),
        seed: options.seed,
        m: cmdp.n_costs(),
        discount: cmdp.discount(),
        n_states: cmdp.n_states(),
        n_actions: cmdp.n_actions(),
        n_episodes: options.n_episodes,
    };
    TransitionDataset::new(metadata, episodes.into_iter().flatten().collect())
}

/// Inverse-CDF draw from a probability row.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the last partial sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn simulate_episode(
    cmdp: &Cmdp,
    behavior: &StochasticPolicy,
    episode_id: u64,
    max_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<TransitionSample> {
    let mut samples = Vec::new();
    let mut state = sample_index(cmdp.initial_dist(), rng);
    for step in 0..max_steps {
        if cmdp.is_terminal(state) {
            break;
        }
        let action = sample_index(behavior.row(state), rng);
        let next_state = sample_index(cmdp.transition_row(state, action), rng);
        samples.push(TransitionSample {
            episode_id,
            step_index: step as u32,
            state,
            action,
            next_state,
            reward: cmdp.reward(state, action),
            cost: cmdp.cost(state, action).to_vec(),
            behavior_propensity: behavior.prob(state, action),
        });
        state = next_state;
    }
    samples
}
