//! Affinely independent mixed (AIM) policies.
//!
//! A mixed policy is stored as its active deterministic policies, their
//! measurement vectors and the mixing weights. Keeping the active vectors
//! affinely independent caps the active set at `m + 2` no matter how many
//! policies have been mixed in. The geometry here only sees policy ids and
//! measurement vectors.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmdp::{
    constraint_distance, feasibility_objective, is_feasible, ConstraintSpec, MeasurementVector, PolicyId,
};
use crate::envs::sample_index;
use crate::error::{Error, Result};

/// Default tolerance for weights, residuals and rank tests.
pub const GEOMETRY_TOL: f64 = 1e-9;

/// Simplices whose augmented vertex matrix is worse conditioned than this
/// are rebuilt from scratch.
pub const MAX_CONDITION: f64 = 1e12;

/// Residuals and rank tests scale with the largest vertex norm.
fn scale_of<'a>(points: impl IntoIterator<Item = &'a MeasurementVector>) -> f64 {
    points
        .into_iter()
        .map(|p| p.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(1.0, f64::max)
}

/// Affine frame of a vertex set: the first vertex plus the SVD of the edge
/// matrix `[p_2 - p_1, .., p_k - p_1]`.
struct AffineFrame {
    base: DVector<f64>,
    edges: Option<(DMatrix<f64>, nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>)>,
    k: usize,
    scale: f64,
    condition: f64,
}

impl AffineFrame {
    fn new(points: &[&MeasurementVector], tol: f64) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::Precondition("vertex set is empty".into()))?;
        let d = first.dim();
        if let Some(p) = points.iter().find(|p| p.dim() != d) {
            return Err(Error::dim("simplex vertex", d, p.dim()));
        }
        let k = points.len();
        let scale = scale_of(points.iter().copied());
        let base = DVector::from_column_slice(first.as_slice());
        if k == 1 {
            return Ok(AffineFrame {
                base,
                edges: None,
                k,
                scale,
                condition: 1.0,
            });
        }
        if k > d + 1 {
            return Err(Error::AffinelyDependent);
        }
        let edges = DMatrix::from_fn(d, k - 1, |r, c| points[c + 1].as_slice()[r] - first.as_slice()[r]);
        let svd = edges.clone().svd(true, true);
        let (smin, smax) = svd
            .singular_values
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        if smin <= tol * scale {
            return Err(Error::AffinelyDependent);
        }
        Ok(AffineFrame {
            base,
            edges: Some((edges, svd)),
            k,
            scale,
            condition: smax / smin,
        })
    }

    /// Least-squares barycentric coordinates and the residual norm.
    fn coordinates(&self, x: &MeasurementVector) -> Result<(Vec<f64>, f64)> {
        if x.dim() != self.base.len() {
            return Err(Error::dim("barycentric target", self.base.len(), x.dim()));
        }
        let offset = DVector::from_column_slice(x.as_slice()) - &self.base;
        let Some((edges, svd)) = &self.edges else {
            return Ok((vec![1.0], offset.norm()));
        };
        let beta = svd
            .solve(&offset, 0.0)
            .map_err(|e| Error::Numerical(format!("barycentric solve failed: {e}")))?;
        let residual = (edges * &beta - &offset).norm();
        let mut alpha = Vec::with_capacity(self.k);
        alpha.push(1.0 - beta.sum());
        alpha.extend(beta.iter().copied());
        Ok((alpha, residual))
    }

    fn in_affine_hull(&self, residual: f64, tol: f64) -> bool {
        residual <= tol * self.scale
    }
}

fn refs(points: &[MeasurementVector]) -> Vec<&MeasurementVector> {
    points.iter().collect()
}

/// Barycentric coordinates of `x` with respect to an affinely independent
/// vertex set, or `None` when `x` is off the affine hull.
///
/// Coordinates sum to one and may be negative.
pub fn barycentric_coordinates(
    s_x: &[MeasurementVector],
    x: &MeasurementVector,
    tol: f64,
) -> Result<Option<Vec<f64>>> {
    let frame = AffineFrame::new(&refs(s_x), tol)?;
    let (alpha, residual) = frame.coordinates(x)?;
    Ok(frame.in_affine_hull(residual, tol).then_some(alpha))
}

#[derive(Debug, Clone, PartialEq)]
pub enum HullStatus {
    OutsideAffine,
    /// Coordinates clamped to be nonnegative and renormalized.
    InConvex(Vec<f64>),
    InAffineOutsideConvex(Vec<f64>),
}

pub fn hull_status(s_x: &[MeasurementVector], x: &MeasurementVector, tol: f64) -> Result<HullStatus> {
    classify(&AffineFrame::new(&refs(s_x), tol)?, x, tol)
}

fn classify(frame: &AffineFrame, x: &MeasurementVector, tol: f64) -> Result<HullStatus> {
    let (alpha, residual) = frame.coordinates(x)?;
    if !frame.in_affine_hull(residual, tol) {
        return Ok(HullStatus::OutsideAffine);
    }
    if alpha.iter().all(|&a| a >= -tol) {
        Ok(HullStatus::InConvex(clamp_weights(alpha)))
    } else {
        Ok(HullStatus::InAffineOutsideConvex(alpha))
    }
}

fn clamp_weights(alpha: Vec<f64>) -> Vec<f64> {
    let clamped: Vec<f64> = alpha.into_iter().map(|a| a.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    clamped.into_iter().map(|a| a / total).collect()
}

/// Result of moving the previous point onto the facet crossed by the
/// segment towards the new target.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexRemoval {
    /// Indices (into the input vertex set) of the vertices that remain.
    pub kept: Vec<usize>,
    /// `theta * x_t + (1 - theta) * x_prev`, which lies on the facet.
    pub x_prev: MeasurementVector,
    pub theta: f64,
    /// Smallest index attaining the minimum step length.
    pub exit_vertex: usize,
    /// Coordinates of the facet point with respect to the input vertices.
    pub facet_coordinates: Vec<f64>,
}

/// Walks from `x_prev` (inside the simplex) towards `x_t` (outside it, in its
/// affine hull) and stops on the first facet crossed. Every vertex whose
/// coordinate at the crossing point is at most `tol` is dropped.
///
/// The step length is
/// `theta = min_{i: a_t,i <= 0} a_prev,i / (a_prev,i - a_t,i)`.
pub fn remove_one_vertex(
    s_x: &[MeasurementVector],
    x_prev: &MeasurementVector,
    x_t: &MeasurementVector,
    tol: f64,
) -> Result<VertexRemoval> {
    let frame = AffineFrame::new(&refs(s_x), tol)?;
    remove_with_frame(&frame, x_prev, x_t, tol)
}

fn remove_with_frame(
    frame: &AffineFrame,
    x_prev: &MeasurementVector,
    x_t: &MeasurementVector,
    tol: f64,
) -> Result<VertexRemoval> {
    let (a_prev, r_prev) = frame.coordinates(x_prev)?;
    if !frame.in_affine_hull(r_prev, tol) || a_prev.iter().any(|&a| a < -tol) {
        return Err(Error::Precondition("previous point is not inside the simplex".into()));
    }
    let (a_t, r_t) = frame.coordinates(x_t)?;
    if !frame.in_affine_hull(r_t, tol) {
        return Err(Error::Precondition("target is outside the affine hull".into()));
    }
    if a_t.iter().all(|&a| a > tol) {
        return Err(Error::Precondition("target lies strictly inside the simplex".into()));
    }

    let mut best: Option<(usize, f64)> = None;
    for (i, (&p, &t)) in a_prev.iter().zip(&a_t).enumerate() {
        if t > tol {
            continue;
        }
        let denom = p - t;
        let step = if p <= tol || denom <= 0.0 { 0.0 } else { p / denom };
        if best.is_none_or(|(_, b)| step < b) {
            best = Some((i, step));
        }
    }
    let (exit_vertex, raw_theta) = best.expect("at least one coordinate is nonpositive");
    if !(-tol..=1.0 + 1e-6).contains(&raw_theta) {
        return Err(Error::Numerical(format!("facet step {raw_theta} outside [0, 1]")));
    }
    let theta = raw_theta.clamp(0.0, 1.0);

    let facet_coordinates: Vec<f64> = a_prev
        .iter()
        .zip(&a_t)
        .map(|(p, t)| theta * t + (1.0 - theta) * p)
        .collect();
    let kept: Vec<usize> = (0..facet_coordinates.len())
        .filter(|&i| i != exit_vertex && facet_coordinates[i] > tol)
        .collect();
    Ok(VertexRemoval {
        kept,
        x_prev: x_prev.lerp(x_t, theta),
        theta,
        exit_vertex,
        facet_coordinates,
    })
}

/// One active member of a mixed policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivePolicy {
    pub policy: PolicyId,
    pub x: MeasurementVector,
}

/// A finite mixture of deterministic policies together with its
/// measurement vector.
///
/// The AIM managers additionally keep the active vectors affinely
/// independent; the store-all baseline produces plain uniform mixtures.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AimPolicy {
    active: Vec<ActivePolicy>,
    weights: Vec<f64>,
    target: Option<MeasurementVector>,
}

impl AimPolicy {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(policy: PolicyId, x: MeasurementVector) -> Self {
        AimPolicy {
            active: vec![ActivePolicy { policy, x: x.clone() }],
            weights: vec![1.0],
            target: Some(x),
        }
    }

    /// Builds a mixture and checks the weight and representation invariants.
    pub fn from_parts(active: Vec<ActivePolicy>, weights: Vec<f64>, target: MeasurementVector) -> Result<Self> {
        let mu = AimPolicy {
            active,
            weights,
            target: Some(target),
        };
        mu.check_mixture(GEOMETRY_TOL)?;
        Ok(mu)
    }

    /// Mixture without the target check; used by the store-all baseline.
    pub(crate) fn from_parts_unchecked(active: Vec<ActivePolicy>, weights: Vec<f64>, target: MeasurementVector) -> Self {
        AimPolicy {
            active,
            weights,
            target: Some(target),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn active(&self) -> &[ActivePolicy] {
        &self.active
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn target(&self) -> Option<&MeasurementVector> {
        self.target.as_ref()
    }

    pub fn measurements(&self) -> Vec<MeasurementVector> {
        self.active.iter().map(|a| a.x.clone()).collect()
    }

    /// `sum_i alpha_i x_i`, recomputed from the representation.
    pub fn represented(&self) -> Option<MeasurementVector> {
        (!self.is_empty()).then(|| MeasurementVector::combine(self.active.iter().map(|a| &a.x), &self.weights))
    }

    /// Weights are nonnegative, sum to one, and reproduce the target.
    pub fn check_mixture(&self, tol: f64) -> Result<()> {
        if self.weights.len() != self.active.len() {
            return Err(Error::Invariant(format!(
                "{} weights for {} active policies",
                self.weights.len(),
                self.active.len()
            )));
        }
        let Some(target) = &self.target else {
            return if self.active.is_empty() {
                Ok(())
            } else {
                Err(Error::Invariant("mixture has policies but no target".into()))
            };
        };
        if self.active.is_empty() {
            return Err(Error::EmptyPolicy);
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w >= 0.0)) {
            return Err(Error::Invariant(format!("negative or undefined weight {w}")));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > tol {
            return Err(Error::Invariant(format!("weights sum to {total}")));
        }
        if let Some(a) = self.active.iter().find(|a| a.x.dim() != target.dim()) {
            return Err(Error::dim("active measurement", target.dim(), a.x.dim()));
        }
        let represented = self.represented().expect("nonempty");
        let err = represented.max_abs_diff(target);
        let scale = scale_of(self.active.iter().map(|a| &a.x));
        if err > tol * scale {
            return Err(Error::Invariant(format!(
                "target differs from the weighted measurements by {err:e}"
            )));
        }
        Ok(())
    }

    /// All mixture invariants plus affine independence and the `m + 2` cap.
    pub fn check_invariants(&self, tol: f64) -> Result<()> {
        self.check_mixture(tol)?;
        let Some(target) = &self.target else { return Ok(()) };
        if self.active.len() > target.dim() + 1 {
            return Err(Error::Invariant(format!(
                "{} active policies exceed the m + 2 = {} cap",
                self.active.len(),
                target.dim() + 1
            )));
        }
        let xs: Vec<&MeasurementVector> = self.active.iter().map(|a| &a.x).collect();
        AffineFrame::new(&xs, tol).map(|_| ()).map_err(|e| match e {
            Error::AffinelyDependent => Error::Invariant("active measurement vectors are affinely dependent".into()),
            other => other,
        })
    }

    /// Draws one active policy with probability equal to its weight.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> Result<PolicyId> {
        if self.is_empty() {
            return Err(Error::EmptyPolicy);
        }
        Ok(self.active[sample_index(&self.weights, rng)].policy)
    }

    /// A reproducible stream of draws.
    pub fn sampler(&self, seed: u64) -> Result<impl Iterator<Item = PolicyId> + '_> {
        if self.is_empty() {
            return Err(Error::EmptyPolicy);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(std::iter::repeat_with(move || self.active[sample_index(&self.weights, &mut rng)].policy))
    }
}

/// First draw of [`AimPolicy::sampler`]: the policy executed for one episode.
pub fn sample_policy(mu: &AimPolicy, seed: u64) -> Result<PolicyId> {
    mu.sampler(seed)?.next().ok_or(Error::EmptyPolicy)
}

/// Which branch of the active-set maintenance ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateBranch {
    First,
    Unchanged,
    NewPolicyOnly,
    OutsideAffine,
    InConvex,
    Replaced,
}

#[derive(Debug, Clone)]
pub struct AimUpdate {
    pub policy: AimPolicy,
    pub branch: UpdateBranch,
    /// The incremental path was abandoned for a from-scratch representation.
    pub rebuilt: bool,
}

/// Re-expresses `target` over the previous active set plus the new policy,
/// keeping the active set affinely independent.
pub fn update_towards(
    mu_prev: &AimPolicy,
    policy: PolicyId,
    x_pi: &MeasurementVector,
    target: MeasurementVector,
    tol: f64,
) -> Result<AimUpdate> {
    let Some(x_prev) = mu_prev.target() else {
        return Ok(AimUpdate {
            policy: AimPolicy::single(policy, x_pi.clone()),
            branch: UpdateBranch::First,
            rebuilt: false,
        });
    };
    if x_pi.dim() != x_prev.dim() {
        return Err(Error::dim("new policy measurement", x_prev.dim(), x_pi.dim()));
    }
    if target.dim() != x_prev.dim() {
        return Err(Error::dim("target measurement", x_prev.dim(), target.dim()));
    }
    if &target == x_prev {
        return Ok(AimUpdate {
            policy: mu_prev.clone(),
            branch: UpdateBranch::Unchanged,
            rebuilt: false,
        });
    }
    if &target == x_pi {
        return Ok(AimUpdate {
            policy: AimPolicy::single(policy, x_pi.clone()),
            branch: UpdateBranch::NewPolicyOnly,
            rebuilt: false,
        });
    }

    let newcomer = ActivePolicy {
        policy,
        x: x_pi.clone(),
    };
    match incremental(mu_prev, x_prev, &newcomer, &target, tol) {
        Ok((active, weights, branch)) => Ok(AimUpdate {
            policy: AimPolicy {
                active,
                weights,
                target: Some(target),
            },
            branch,
            rebuilt: false,
        }),
        Err(_) => {
            let mut candidates = mu_prev.active.clone();
            candidates.push(newcomer);
            let (active, weights) = rebuild(&candidates, &target, tol)?;
            Ok(AimUpdate {
                policy: AimPolicy {
                    active,
                    weights,
                    target: Some(target),
                },
                branch: UpdateBranch::Replaced,
                rebuilt: true,
            })
        }
    }
}

type Representation = (Vec<ActivePolicy>, Vec<f64>);

fn incremental(
    mu_prev: &AimPolicy,
    x_prev: &MeasurementVector,
    newcomer: &ActivePolicy,
    target: &MeasurementVector,
    tol: f64,
) -> Result<(Vec<ActivePolicy>, Vec<f64>, UpdateBranch)> {
    let xs: Vec<&MeasurementVector> = mu_prev.active.iter().map(|a| &a.x).collect();
    let frame = AffineFrame::new(&xs, tol)?;
    if frame.condition > MAX_CONDITION {
        return Err(Error::Numerical("active simplex is ill-conditioned".into()));
    }
    let (mut active, branch) = match classify(&frame, target, tol)? {
        HullStatus::OutsideAffine => {
            let mut active = mu_prev.active.clone();
            active.push(newcomer.clone());
            (active, UpdateBranch::OutsideAffine)
        }
        HullStatus::InConvex(_) => (mu_prev.active.clone(), UpdateBranch::InConvex),
        HullStatus::InAffineOutsideConvex(_) => {
            let removal = remove_with_frame(&frame, x_prev, target, tol)?;
            let mut active: Vec<ActivePolicy> = removal.kept.iter().map(|&i| mu_prev.active[i].clone()).collect();
            active.push(newcomer.clone());
            (active, UpdateBranch::Replaced)
        }
    };
    let weights = settle_weights(&mut active, target, tol)?;
    Ok((active, weights, branch))
}

/// Solves for the target's coordinates, drops every vertex with weight at
/// most `tol`, and re-solves on what is left.
fn settle_weights(active: &mut Vec<ActivePolicy>, target: &MeasurementVector, tol: f64) -> Result<Vec<f64>> {
    let alpha = convex_coordinates(active, target, tol)?;
    if alpha.iter().all(|&a| a > tol) {
        return Ok(clamp_weights(alpha));
    }
    let mut keep = alpha.iter().map(|&a| a > tol);
    active.retain(|_| keep.next().unwrap_or(false));
    if active.is_empty() {
        return Err(Error::Numerical("pruning removed every vertex".into()));
    }
    Ok(clamp_weights(convex_coordinates(active, target, tol)?))
}

fn convex_coordinates(active: &[ActivePolicy], target: &MeasurementVector, tol: f64) -> Result<Vec<f64>> {
    let xs: Vec<&MeasurementVector> = active.iter().map(|a| &a.x).collect();
    let frame = AffineFrame::new(&xs, tol)?;
    if frame.condition > MAX_CONDITION {
        return Err(Error::Numerical("updated simplex is ill-conditioned".into()));
    }
    let (alpha, residual) = frame.coordinates(target)?;
    if !frame.in_affine_hull(residual, tol) {
        return Err(Error::Numerical(format!("target misses the updated simplex by {residual:e}")));
    }
    if alpha.iter().any(|&a| a < -tol) {
        return Err(Error::Numerical("target left the updated simplex".into()));
    }
    Ok(alpha)
}

/// Smallest well-conditioned affinely independent subset of `candidates`
/// whose convex hull contains `target`.
fn rebuild(candidates: &[ActivePolicy], target: &MeasurementVector, tol: f64) -> Result<Representation> {
    let max_size = candidates.len().min(target.dim() + 1);
    for size in 1..=max_size {
        for subset in (0..candidates.len()).combinations(size) {
            let xs: Vec<&MeasurementVector> = subset.iter().map(|&i| &candidates[i].x).collect();
            let Ok(frame) = AffineFrame::new(&xs, tol) else { continue };
            if frame.condition > MAX_CONDITION {
                continue;
            }
            let (alpha, residual) = frame.coordinates(target)?;
            if frame.in_affine_hull(residual, tol) && alpha.iter().all(|&a| a >= -tol) {
                let active = subset.iter().map(|&i| candidates[i].clone()).collect();
                return Ok((active, clamp_weights(alpha)));
            }
        }
    }
    Err(Error::Numerical(
        "no convex representation of the target over the active set and newcomer".into(),
    ))
}

/// AIM-mean: the target is the running average of every policy seen so
/// far, `x_t = x(mu_{t-1}) (t-1)/t + x(pi_t)/t`.
pub fn aim_mean_update(mu_prev: &AimPolicy, policy: PolicyId, x_pi: &MeasurementVector, t: usize) -> Result<AimPolicy> {
    Ok(aim_mean_step(mu_prev, policy, x_pi, t, GEOMETRY_TOL)?.policy)
}

pub fn aim_mean_step(
    mu_prev: &AimPolicy,
    policy: PolicyId,
    x_pi: &MeasurementVector,
    t: usize,
    tol: f64,
) -> Result<AimUpdate> {
    if t == 0 {
        return Err(Error::InvalidArgument("rounds are numbered from 1".into()));
    }
    if t == 1 && !mu_prev.is_empty() {
        return Err(Error::Precondition("round 1 expects an empty mixed policy".into()));
    }
    let target = match mu_prev.target() {
        Some(prev) => running_mean(prev, x_pi, t),
        None => x_pi.clone(),
    };
    update_towards(mu_prev, policy, x_pi, target, tol)
}

/// `prev * (t-1)/t + x / t`.
pub fn running_mean(prev: &MeasurementVector, x: &MeasurementVector, t: usize) -> MeasurementVector {
    let t = t as f64;
    let v: Vec<f64> = prev
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(p, x)| p * (t - 1.0) / t + x / t)
        .collect();
    MeasurementVector::new(v).expect("finite inputs give a finite mean")
}

/// The point of the segment `[x_prev, x_new]` that maximizes reward subject
/// to the constraints, or failing that, minimizes constraint violation.
pub fn aim_greedy_target(
    x_prev: &MeasurementVector,
    x_new: &MeasurementVector,
    tau: &ConstraintSpec,
) -> Result<MeasurementVector> {
    if x_prev.dim() != x_new.dim() {
        return Err(Error::dim("greedy segment endpoints", x_prev.dim(), x_new.dim()));
    }
    feasibility_objective(x_prev, tau)?;
    let (prev_ok, new_ok) = (is_feasible(x_prev, tau), is_feasible(x_new, tau));
    let chosen = match (prev_ok, new_ok) {
        (true, true) => {
            if x_new.j_r() > x_prev.j_r() {
                x_new.clone()
            } else {
                x_prev.clone()
            }
        }
        (false, false) => {
            let (d_prev, d_new) = (constraint_distance(x_prev, tau)?, constraint_distance(x_new, tau)?);
            if d_new < d_prev || (d_new == d_prev && x_new.j_r() > x_prev.j_r()) {
                x_new.clone()
            } else {
                x_prev.clone()
            }
        }
        (true, false) => boundary_or_feasible(x_prev, x_new, tau),
        (false, true) => boundary_or_feasible(x_new, x_prev, tau),
    };
    Ok(chosen)
}

fn boundary_or_feasible(feasible: &MeasurementVector, infeasible: &MeasurementVector, tau: &ConstraintSpec) -> MeasurementVector {
    if infeasible.j_r() <= feasible.j_r() {
        return feasible.clone();
    }
    let theta = feasible
        .j_c()
        .iter()
        .zip(infeasible.j_c())
        .zip(tau.tau())
        .filter(|((_, ci), t)| *ci > *t)
        .map(|((cf, ci), t)| (t - cf) / (ci - cf))
        .fold(1.0f64, f64::min)
        .clamp(0.0, 1.0);
    feasible.lerp(infeasible, theta)
}

/// AIM-greedy: AIM-mean's active-set maintenance with the greedy segment
/// target in place of the running mean.
pub fn aim_greedy_update(
    mu_prev: &AimPolicy,
    policy: PolicyId,
    x_pi: &MeasurementVector,
    tau: &ConstraintSpec,
) -> Result<AimPolicy> {
    Ok(aim_greedy_step(mu_prev, policy, x_pi, tau, GEOMETRY_TOL)?.policy)
}

pub fn aim_greedy_step(
    mu_prev: &AimPolicy,
    policy: PolicyId,
    x_pi: &MeasurementVector,
    tau: &ConstraintSpec,
    tol: f64,
) -> Result<AimUpdate> {
    if x_pi.m() != tau.m() {
        return Err(Error::dim("greedy thresholds", x_pi.m(), tau.m()));
    }
    let target = match mu_prev.target() {
        Some(prev) => aim_greedy_target(prev, x_pi, tau)?,
        None => x_pi.clone(),
    };
    update_towards(mu_prev, policy, x_pi, target, tol)
}

/// Keeps whichever of the incumbent and the candidate has the higher
/// feasibility objective; ties go to the smaller constraint distance, then
/// to the incumbent.
pub fn single_best_update(
    best: Option<(PolicyId, MeasurementVector)>,
    candidate: (PolicyId, MeasurementVector),
    tau: &ConstraintSpec,
) -> Result<(PolicyId, MeasurementVector)> {
    let Some(incumbent) = best else {
        feasibility_objective(&candidate.1, tau)?;
        return Ok(candidate);
    };
    let (obj_inc, obj_cand) = (
        feasibility_objective(&incumbent.1, tau)?,
        feasibility_objective(&candidate.1, tau)?,
    );
    let take = if obj_cand > obj_inc {
        true
    } else if obj_cand == obj_inc {
        constraint_distance(&candidate.1, tau)? < constraint_distance(&incumbent.1, tau)?
    } else {
        false
    };
    Ok(if take { candidate } else { incumbent })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mv(v: &[f64]) -> MeasurementVector {
        MeasurementVector::new(v.to_vec()).unwrap()
    }

    fn triangle() -> Vec<MeasurementVector> {
        vec![mv(&[0.0, 0.0]), mv(&[1.0, 0.0]), mv(&[0.0, 1.0])]
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len(), "{a:?} vs {b:?}");
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn barycentric_examples() {
        let alpha = barycentric_coordinates(&triangle(), &mv(&[0.25, 0.25]), GEOMETRY_TOL)
            .unwrap()
            .unwrap();
        assert_close(&alpha, &[0.5, 0.25, 0.25], 1e-12);
        let vertex = barycentric_coordinates(&triangle(), &mv(&[1.0, 0.0]), GEOMETRY_TOL)
            .unwrap()
            .unwrap();
        assert_close(&vertex, &[0.0, 1.0, 0.0], 1e-12);
        let line = [mv(&[0.0, 0.0]), mv(&[1.0, 0.0])];
        assert_eq!(barycentric_coordinates(&line, &mv(&[0.0, 1.0]), GEOMETRY_TOL).unwrap(), None);
    }

    #[test]
    fn dependent_vertices_are_rejected() {
        let collinear = [mv(&[0.0, 0.0]), mv(&[1.0, 1.0]), mv(&[2.0, 2.0])];
        assert!(matches!(
            barycentric_coordinates(&collinear, &mv(&[0.5, 0.5]), GEOMETRY_TOL),
            Err(Error::AffinelyDependent)
        ));
    }

    #[test]
    fn hull_status_examples() {
        assert!(matches!(
            hull_status(&triangle(), &mv(&[0.25, 0.25]), GEOMETRY_TOL).unwrap(),
            HullStatus::InConvex(_)
        ));
        match hull_status(&triangle(), &mv(&[1.0, 1.0]), GEOMETRY_TOL).unwrap() {
            HullStatus::InAffineOutsideConvex(alpha) => assert_close(&alpha, &[-1.0, 1.0, 1.0], 1e-12),
            other => panic!("unexpected {other:?}"),
        }
        let line = [mv(&[0.0, 0.0]), mv(&[1.0, 0.0])];
        assert_eq!(
            hull_status(&line, &mv(&[0.3, 0.2]), GEOMETRY_TOL).unwrap(),
            HullStatus::OutsideAffine
        );
    }

    #[test]
    fn remove_one_vertex_worked_example() {
        let out = remove_one_vertex(&triangle(), &mv(&[0.3, 0.3]), &mv(&[0.9, 0.3]), GEOMETRY_TOL).unwrap();
        assert!((out.theta - 2.0 / 3.0).abs() < 1e-12);
        assert_close(out.x_prev.as_slice(), &[0.7, 0.3], 1e-12);
        assert_eq!(out.kept, vec![1, 2]);
        assert_eq!(out.exit_vertex, 0);
    }

    #[test]
    fn remove_one_vertex_target_on_facet() {
        let out = remove_one_vertex(&triangle(), &mv(&[0.3, 0.3]), &mv(&[0.7, 0.3]), GEOMETRY_TOL).unwrap();
        assert!((out.theta - 1.0).abs() < 1e-12);
        assert_close(out.x_prev.as_slice(), &[0.7, 0.3], 1e-12);
        assert_eq!(out.kept, vec![1, 2]);
    }

    #[test]
    fn remove_one_vertex_rejects_interior_target() {
        assert!(matches!(
            remove_one_vertex(&triangle(), &mv(&[0.3, 0.3]), &mv(&[0.25, 0.25]), GEOMETRY_TOL),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn aim_mean_first_rounds() {
        let mu1 = aim_mean_update(&AimPolicy::empty(), PolicyId(1), &mv(&[0.0, 0.0]), 1).unwrap();
        assert_eq!(mu1.weights(), &[1.0]);
        assert_eq!(mu1.target().unwrap(), &mv(&[0.0, 0.0]));
        let mu2 = aim_mean_update(&mu1, PolicyId(2), &mv(&[1.0, 1.0]), 2).unwrap();
        assert_eq!(mu2.target().unwrap(), &mv(&[0.5, 0.5]));
        assert_close(mu2.weights(), &[0.5, 0.5], 1e-12);
        mu2.check_invariants(GEOMETRY_TOL).unwrap();
    }

    #[test]
    fn aim_mean_rejects_round_zero() {
        assert!(aim_mean_update(&AimPolicy::empty(), PolicyId(1), &mv(&[0.0, 0.0]), 0).is_err());
    }

    #[test]
    fn greedy_target_cases() {
        let tau = ConstraintSpec::new(vec![0.3]).unwrap();
        let t = |a: &[f64], b: &[f64]| aim_greedy_target(&mv(a), &mv(b), &tau).unwrap();
        assert_eq!(t(&[0.5, 0.2], &[0.7, 0.25]), mv(&[0.7, 0.25]));
        assert_close(t(&[0.5, 0.2], &[1.0, 0.6]).as_slice(), &[0.625, 0.3], 1e-12);
        assert_eq!(t(&[0.6, 0.5], &[0.9, 0.8]), mv(&[0.6, 0.5]));
        // infeasible endpoint with lower reward: keep the feasible one
        assert_eq!(t(&[0.5, 0.2], &[0.4, 0.6]), mv(&[0.5, 0.2]));
        // the infeasible endpoint can be the incumbent too
        assert_close(t(&[1.0, 0.6], &[0.5, 0.2]).as_slice(), &[0.625, 0.3], 1e-12);
    }

    #[test]
    fn greedy_keeps_better_incumbent_unchanged() {
        let tau = ConstraintSpec::new(vec![0.3]).unwrap();
        let mu1 = aim_greedy_update(&AimPolicy::empty(), PolicyId(1), &mv(&[0.7, 0.25]), &tau).unwrap();
        let mu2 = aim_greedy_update(&mu1, PolicyId(2), &mv(&[0.5, 0.2]), &tau).unwrap();
        assert_eq!(mu1, mu2);
    }

    #[test]
    fn greedy_first_policy_even_if_infeasible() {
        let tau = ConstraintSpec::new(vec![0.3]).unwrap();
        let mu = aim_greedy_update(&AimPolicy::empty(), PolicyId(9), &mv(&[1.0, 1.0]), &tau).unwrap();
        assert_eq!(mu.len(), 1);
        assert_eq!(mu.active()[0].policy, PolicyId(9));
    }

    #[test]
    fn greedy_boundary_mixes_endpoints() {
        let tau = ConstraintSpec::new(vec![0.3]).unwrap();
        let mu1 = aim_greedy_update(&AimPolicy::empty(), PolicyId(1), &mv(&[1.0, 1.0]), &tau).unwrap();
        let mu2 = aim_greedy_update(&mu1, PolicyId(2), &mv(&[0.0, 0.0]), &tau).unwrap();
        let target = mu2.target().unwrap();
        assert!((target.j_c()[0] - 0.3).abs() < 1e-9);
        assert_eq!(mu2.len(), 2);
        mu2.check_invariants(GEOMETRY_TOL).unwrap();
    }

    #[test]
    fn single_best_examples() {
        let tau = ConstraintSpec::new(vec![0.3]).unwrap();
        let a = (PolicyId(1), mv(&[0.5, 0.2]));
        assert_eq!(single_best_update(None, a.clone(), &tau).unwrap(), a);
        let b = (PolicyId(2), mv(&[0.7, 0.25]));
        assert_eq!(single_best_update(Some(a.clone()), b.clone(), &tau).unwrap(), b);
        let c = (PolicyId(3), mv(&[0.9, 0.6]));
        assert_eq!(single_best_update(Some(a.clone()), c, &tau).unwrap(), a);
        // infeasible tie: closer to the constraint wins, equal keeps incumbent
        let far = (PolicyId(4), mv(&[2.0, 0.9]));
        let near = (PolicyId(5), mv(&[0.1, 0.4]));
        assert_eq!(single_best_update(Some(far.clone()), near.clone(), &tau).unwrap(), near);
        let same = (PolicyId(6), mv(&[3.0, 0.9]));
        assert_eq!(single_best_update(Some(far.clone()), same, &tau).unwrap(), far);
    }

    #[test]
    fn sampling_follows_weights() {
        let mu = AimPolicy::from_parts(
            vec![
                ActivePolicy { policy: PolicyId(1), x: mv(&[0.0, 0.0]) },
                ActivePolicy { policy: PolicyId(2), x: mv(&[1.0, 1.0]) },
            ],
            vec![0.25, 0.75],
            mv(&[0.75, 0.75]),
        )
        .unwrap();
        let draws: Vec<PolicyId> = mu.sampler(5).unwrap().take(100_000).collect();
        let freq = draws.iter().filter(|p| **p == PolicyId(2)).count() as f64 / 1e5;
        assert!((freq - 0.75).abs() < 0.01);
        let again: Vec<PolicyId> = mu.sampler(5).unwrap().take(100_000).collect();
        assert_eq!(draws, again);

        let single = AimPolicy::single(PolicyId(3), mv(&[0.1, 0.1]));
        assert!((0..50).all(|s| sample_policy(&single, s).unwrap() == PolicyId(3)));
        assert!(matches!(sample_policy(&AimPolicy::empty(), 0), Err(Error::EmptyPolicy)));
    }

    #[test]
    fn from_parts_checks_weights() {
        let r = AimPolicy::from_parts(
            vec![
                ActivePolicy { policy: PolicyId(1), x: mv(&[0.0, 0.0]) },
                ActivePolicy { policy: PolicyId(2), x: mv(&[1.0, 1.0]) },
            ],
            vec![0.6, 0.39],
            mv(&[0.39, 0.39]),
        );
        assert!(matches!(r, Err(Error::Invariant(_))));
    }
}
