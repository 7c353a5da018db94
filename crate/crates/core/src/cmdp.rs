//! Finite constrained MDPs, measurement vectors and Lagrangian arithmetic.
//!
//! A policy is summarized by its measurement vector `[J_r, J_c1, .., J_cm]`:
//! the expected discounted reward followed by the `m` expected discounted
//! costs. Everything downstream (mixing, best responses, the multiplier
//! player) works on these vectors.

use std::cmp::Ordering;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on probability rows and the initial distribution.
pub const PROBABILITY_TOL: f64 = 1e-12;

/// `j_c <= tau + FEASIBILITY_TOL` counts as feasible.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Largest state count evaluated with a dense direct solve.
pub const DIRECT_SOLVE_MAX_STATES: usize = 2_000;

const ITERATIVE_EVAL_TOL: f64 = 1e-10;
const ITERATIVE_EVAL_MAX_SWEEPS: usize = 1_000_000;

/// A finite constrained MDP with `m`-dimensional costs.
///
/// Terminal states are absorbing and pay zero reward and cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cmdp {
    id: String,
    n_states: usize,
    n_actions: usize,
    n_costs: usize,
    /// `P(s'|s,a)` laid out as `[(s * n_actions + a) * n_states + s']`.
    transition: Vec<f64>,
    /// `r(s,a)` at `[s * n_actions + a]`.
    reward: Vec<f64>,
    /// `c_k(s,a)` at `[(s * n_actions + a) * n_costs + k]`.
    cost: Vec<f64>,
    discount: f64,
    initial_dist: Vec<f64>,
    terminal: Vec<bool>,
}

/// Raw parts used to build a [`Cmdp`]; validated by [`Cmdp::new`].
#[derive(Debug, Clone)]
pub struct CmdpParts {
    pub id: String,
    pub n_states: usize,
    pub n_actions: usize,
    pub n_costs: usize,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    pub cost: Vec<f64>,
    pub discount: f64,
    pub initial_dist: Vec<f64>,
    pub terminal: Vec<bool>,
}

impl Cmdp {
    pub fn new(parts: CmdpParts) -> Result<Self> {
        let cmdp = Cmdp {
            id: parts.id,
            n_states: parts.n_states,
            n_actions: parts.n_actions,
            n_costs: parts.n_costs,
            transition: parts.transition,
            reward: parts.reward,
            cost: parts.cost,
            discount: parts.discount,
            initial_dist: parts.initial_dist,
            terminal: parts.terminal,
        };
        cmdp.validate()?;
        Ok(cmdp)
    }

    /// Checks every structural invariant. Called by the constructor and by
    /// loaders after deserialization.
    pub fn validate(&self) -> Result<()> {
        let (ns, na, m) = (self.n_states, self.n_actions, self.n_costs);
        if ns == 0 || na == 0 {
            return Err(Error::InvalidCmdp("need at least one state and one action".into()));
        }
        if m == 0 {
            return Err(Error::InvalidCmdp("need at least one cost channel".into()));
        }
        if self.transition.len() != ns * na * ns {
            return Err(Error::dim("transition kernel", ns * na * ns, self.transition.len()));
        }
        if self.reward.len() != ns * na {
            return Err(Error::dim("reward table", ns * na, self.reward.len()));
        }
        if self.cost.len() != ns * na * m {
            return Err(Error::dim("cost table", ns * na * m, self.cost.len()));
        }
        if self.initial_dist.len() != ns {
            return Err(Error::dim("initial distribution", ns, self.initial_dist.len()));
        }
        if self.terminal.len() != ns {
            return Err(Error::dim("terminal flags", ns, self.terminal.len()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::InvalidCmdp(format!(
                "discount must lie in [0, 1), got {}",
                self.discount
            )));
        }
        check_distribution(&self.initial_dist, "initial distribution")?;
        for s in 0..ns {
            for a in 0..na {
                let row = self.transition_row(s, a);
                check_distribution(row, "transition row")
                    .map_err(|e| Error::InvalidCmdp(format!("state {s}, action {a}: {e}")))?;
                if !self.reward(s, a).is_finite() || self.cost(s, a).iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidCmdp(format!(
                        "non-finite reward or cost at state {s}, action {a}"
                    )));
                }
                if self.terminal[s] {
                    if row[s] != 1.0 {
                        return Err(Error::InvalidCmdp(format!("terminal state {s} is not absorbing")));
                    }
                    if self.reward(s, a) != 0.0 || self.cost(s, a).iter().any(|&c| c != 0.0) {
                        return Err(Error::InvalidCmdp(format!(
                            "terminal state {s} pays nonzero reward or cost"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Number of constraints `m`.
    pub fn n_costs(&self) -> usize {
        self.n_costs
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn cost(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_costs;
        &self.cost[start..start + self.n_costs]
    }

    /// Reward of channel 0 or cost `k` of channel `k + 1`.
    fn channel(&self, s: usize, a: usize, channel: usize) -> f64 {
        if channel == 0 {
            self.reward(s, a)
        } else {
            self.cost(s, a)[channel - 1]
        }
    }

    /// Smallest and largest one-step reward over all state-action pairs.
    pub fn reward_range(&self) -> (f64, f64) {
        self.reward
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)))
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::InvalidCmdp(format!("{what} has negative or non-finite entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROBABILITY_TOL {
        return Err(Error::InvalidCmdp(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// Constraint thresholds `tau`, one per cost channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ConstraintSpec {
    tau: Vec<f64>,
}

impl ConstraintSpec {
    pub fn new(tau: Vec<f64>) -> Result<Self> {
        if tau.is_empty() {
            return Err(Error::InvalidArgument("at least one constraint is required".into()));
        }
        if tau.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("constraint thresholds must be finite".into()));
        }
        Ok(ConstraintSpec { tau })
    }

    pub fn uniform(m: usize, tau: f64) -> Result<Self> {
        Self::new(vec![tau; m])
    }

    pub fn m(&self) -> usize {
        self.tau.len()
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }
}

impl TryFrom<Vec<f64>> for ConstraintSpec {
    type Error = Error;

    fn try_from(tau: Vec<f64>) -> Result<Self> {
        ConstraintSpec::new(tau)
    }
}

impl From<ConstraintSpec> for Vec<f64> {
    fn from(spec: ConstraintSpec) -> Self {
        spec.tau
    }
}

/// The `(m+1)`-vector `[J_r, J_c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeasurementVector(Vec<f64>);

impl MeasurementVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidArgument(
                "a measurement vector holds a reward and at least one cost".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("measurement entries must be finite".into()));
        }
        Ok(MeasurementVector(values))
    }

    pub fn from_parts(j_r: f64, j_c: &[f64]) -> Result<Self> {
        let mut v = Vec::with_capacity(j_c.len() + 1);
        v.push(j_r);
        v.extend_from_slice(j_c);
        Self::new(v)
    }

    pub fn zeros(m: usize) -> Self {
        MeasurementVector(vec![0.0; m + 1])
    }

    pub fn j_r(&self) -> f64 {
        self.0[0]
    }

    pub fn j_c(&self) -> &[f64] {
        &self.0[1..]
    }

    /// Number of constraints.
    pub fn m(&self) -> usize {
        self.0.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `(1 - theta) * self + theta * other`.
    pub fn lerp(&self, other: &MeasurementVector, theta: f64) -> MeasurementVector {
        debug_assert_eq!(self.dim(), other.dim());
        MeasurementVector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| (1.0 - theta) * a + theta * b)
                .collect(),
        )
    }

    /// Convex combination `sum_i w_i x_i` of equally sized vectors.
    pub fn combine<'a>(
        points: impl IntoIterator<Item = &'a MeasurementVector>,
        weights: &[f64],
    ) -> MeasurementVector {
        let mut out: Vec<f64> = Vec::new();
        for (x, &w) in points.into_iter().zip(weights) {
            if out.is_empty() {
                out = vec![0.0; x.dim()];
            }
            for (o, v) in out.iter_mut().zip(x.as_slice()) {
                *o += w * v;
            }
        }
        MeasurementVector(out)
    }

    pub fn max_abs_diff(&self, other: &MeasurementVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for MeasurementVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "]")
    }
}

/// Stable identifier of a deterministic policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolicyId(pub u64);

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pi-{:06}", self.0)
    }
}

/// A tabular state-to-action map. Greedy readouts of Q-functions are
/// materialized into this form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeterministicPolicy {
    pub id: PolicyId,
    actions: Vec<usize>,
}

impl DeterministicPolicy {
    pub fn new(id: PolicyId, actions: Vec<usize>, n_actions: usize) -> Result<Self> {
        if let Some((s, &a)) = actions.iter().enumerate().find(|(_, &a)| a >= n_actions) {
            return Err(Error::InvalidArgument(format!(
                "action {a} at state {s} is out of range for {n_actions} actions"
            )));
        }
        Ok(DeterministicPolicy { id, actions })
    }

    /// The policy that plays `action` everywhere.
    pub fn constant(id: PolicyId, n_states: usize, action: usize) -> Self {
        DeterministicPolicy {
            id,
            actions: vec![action; n_states],
        }
    }

    pub fn action(&self, s: usize) -> usize {
        self.actions[s]
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn n_states(&self) -> usize {
        self.actions.len()
    }
}

/// Lagrange multipliers, entrywise nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LambdaVector(Vec<f64>);

impl LambdaVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument(
                "multipliers must be finite and nonnegative".into(),
            ));
        }
        Ok(LambdaVector(entries))
    }

    pub fn zeros(m: usize) -> Self {
        LambdaVector(vec![0.0; m])
    }

    /// Projects onto the nonnegative orthant.
    pub fn project(entries: Vec<f64>) -> Self {
        LambdaVector(entries.into_iter().map(|l| l.max(0.0)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn m(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<f64>> for LambdaVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        LambdaVector::new(v)
    }
}

impl From<LambdaVector> for Vec<f64> {
    fn from(l: LambdaVector) -> Self {
        l.0
    }
}

/// Extended-real value of `min_{lambda >= 0} L(x, lambda)`: the reward of a
/// feasible point, or negative infinity.
///
/// The ordering is total: `Infeasible` sorts below every finite value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Infeasible,
    Feasible(f64),
}

impl Objective {
    pub fn is_feasible(self) -> bool {
        matches!(self, Objective::Feasible(_))
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Objective::Feasible(v) => Some(v),
            Objective::Infeasible => None,
        }
    }
}

impl PartialOrd for Objective {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (Objective::Infeasible, Objective::Infeasible) => Some(Ordering::Equal),
            (Objective::Infeasible, Objective::Feasible(_)) => Some(Ordering::Less),
            (Objective::Feasible(_), Objective::Infeasible) => Some(Ordering::Greater),
            (Objective::Feasible(a), Objective::Feasible(b)) => a.partial_cmp(b),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::Infeasible => write!(f, "-inf"),
            Objective::Feasible(v) => write!(f, "{v}"),
        }
    }
}

fn check_m(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::dim(context, expected, found));
    }
    Ok(())
}

/// `J_r - lambda^T (J_c - tau)`.
pub fn lagrangian(x: &MeasurementVector, lambda: &LambdaVector, tau: &ConstraintSpec) -> Result<f64> {
    check_m("lagrangian multipliers", x.m(), lambda.m())?;
    check_m("lagrangian thresholds", x.m(), tau.m())?;
    Ok(penalized_reward(x.j_r(), x.j_c(), lambda, tau))
}

/// `r - lambda^T (c - tau)`, the per-step reward handed to unconstrained
/// solvers.
pub fn penalized_reward(r: f64, c: &[f64], lambda: &LambdaVector, tau: &ConstraintSpec) -> f64 {
    debug_assert_eq!(c.len(), lambda.m());
    debug_assert_eq!(c.len(), tau.m());
    r - c
        .iter()
        .zip(lambda.as_slice())
        .zip(tau.tau())
        .map(|((c, l), t)| l * (c - t))
        .sum::<f64>()
}

pub fn is_feasible(x: &MeasurementVector, tau: &ConstraintSpec) -> bool {
    x.j_c()
        .iter()
        .zip(tau.tau())
        .all(|(c, t)| *c <= t + FEASIBILITY_TOL)
}

/// `min_{lambda >= 0} L(x, lambda)`.
pub fn feasibility_objective(x: &MeasurementVector, tau: &ConstraintSpec) -> Result<Objective> {
    check_m("feasibility thresholds", x.m(), tau.m())?;
    Ok(if is_feasible(x, tau) {
        Objective::Feasible(x.j_r())
    } else {
        Objective::Infeasible
    })
}

/// `|| max(0, J_c - tau) ||_2`. Violations within the feasibility tolerance
/// count as zero.
pub fn constraint_distance(x: &MeasurementVector, tau: &ConstraintSpec) -> Result<f64> {
    check_m("constraint distance thresholds", x.m(), tau.m())?;
    if is_feasible(x, tau) {
        return Ok(0.0);
    }
    Ok(x.j_c()
        .iter()
        .zip(tau.tau())
        .map(|(c, t)| (c - t).max(0.0).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Exact `[J_r, J_c]` of a deterministic policy.
///
/// Each of the `m+1` channels solves `(I - gamma P_pi) v = r_pi`; the
/// measurement is `initial_dist^T v`.
pub fn evaluate_policy_exact(cmdp: &Cmdp, policy: &DeterministicPolicy) -> Result<MeasurementVector> {
    check_m("policy state count", cmdp.n_states(), policy.n_states())?;
    if let Some(&a) = policy.actions().iter().find(|&&a| a >= cmdp.n_actions()) {
        return Err(Error::InvalidArgument(format!("policy plays out-of-range action {a}")));
    }
    let values = if cmdp.n_states() <= DIRECT_SOLVE_MAX_STATES {
        evaluate_direct(cmdp, policy)?
    } else {
        evaluate_iterative(cmdp, policy)
    };
    let j: Vec<f64> = values
        .iter()
        .map(|v| v.iter().zip(cmdp.initial_dist()).map(|(v, p)| v * p).sum())
        .collect();
    MeasurementVector::new(j).map_err(|_| Error::Numerical("policy evaluation produced non-finite values".into()))
}

fn evaluate_direct(cmdp: &Cmdp, policy: &DeterministicPolicy) -> Result<Vec<Vec<f64>>> {
    let n = cmdp.n_states();
    let channels = cmdp.n_costs() + 1;
    let gamma = cmdp.discount();
    let mut system = DMatrix::<f64>::identity(n, n);
    let mut rhs = DMatrix::<f64>::zeros(n, channels);
    for s in 0..n {
        let a = policy.action(s);
        for (s2, p) in cmdp.transition_row(s, a).iter().enumerate() {
            if *p != 0.0 {
                system[(s, s2)] -= gamma * p;
            }
        }
        for ch in 0..channels {
            rhs[(s, ch)] = cmdp.channel(s, a, ch);
        }
    }
    let solution = system
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("evaluating a policy"))?;
    Ok((0..channels)
        .map(|ch| solution.column(ch).iter().copied().collect())
        .collect())
}

fn evaluate_iterative(cmdp: &Cmdp, policy: &DeterministicPolicy) -> Vec<Vec<f64>> {
    let n = cmdp.n_states();
    let channels = cmdp.n_costs() + 1;
    let gamma = cmdp.discount();
    (0..channels)
        .map(|ch| {
            let mut v = DVector::<f64>::zeros(n);
            for _ in 0..ITERATIVE_EVAL_MAX_SWEEPS {
                let mut delta: f64 = 0.0;
                let next: Vec<f64> = (0..n)
                    .map(|s| {
                        let a = policy.action(s);
                        let future: f64 = cmdp
                            .transition_row(s, a)
                            .iter()
                            .zip(v.iter())
                            .map(|(p, v)| p * v)
                            .sum();
                        cmdp.channel(s, a, ch) + gamma * future
                    })
                    .collect();
                for (old, new) in v.iter_mut().zip(next) {
                    delta = delta.max((new - *old).abs());
                    *old = new;
                }
                if delta < ITERATIVE_EVAL_TOL {
                    break;
                }
            }
            v.iter().copied().collect()
        })
        .collect()
}
