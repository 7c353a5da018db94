//! Independent oracles shared by integration and acceptance tests.
#![allow(dead_code)]

use aimrl::aim::HullStatus;
use aimrl::cmdp::{Cmdp, ConstraintSpec, DeterministicPolicy, MeasurementVector};
use microlp::{ComparisonOp, OptimizationDirection, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mv(v: &[f64]) -> MeasurementVector {
    MeasurementVector::new(v.to_vec()).unwrap()
}

/// Solves `sum_i a_i v_i = x, sum_i a_i = 1` with `a >= 0` (convex) or `a`
/// free (affine). Returns the coordinates when feasible.
pub fn lp_coordinates(vertices: &[Vec<f64>], x: &[f64], convex: bool) -> Option<Vec<f64>> {
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let bounds = if convex { (0.0, f64::INFINITY) } else { (f64::NEG_INFINITY, f64::INFINITY) };
    let vars: Vec<_> = vertices.iter().map(|_| lp.add_var(0.0, bounds)).collect();
    for (d, &xd) in x.iter().enumerate() {
        let row: Vec<_> = vars.iter().zip(vertices).map(|(v, p)| (*v, p[d])).collect();
        lp.add_constraint(row, ComparisonOp::Eq, xd);
    }
    let ones: Vec<_> = vars.iter().map(|v| (*v, 1.0)).collect();
    lp.add_constraint(ones, ComparisonOp::Eq, 1.0);
    match lp.solve() {
        Ok(sol) => Some(vars.iter().map(|v| *sol.var_value(*v)).collect()),
        Err(microlp::Error::Infeasible) => None,
        Err(e) => panic!("LP oracle failed: {e}"),
    }
}

/// Hull classification by linear programming alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpHull {
    Outside,
    InAffine,
    InConvex,
}

pub fn lp_hull(vertices: &[Vec<f64>], x: &[f64]) -> (LpHull, Option<Vec<f64>>) {
    if let Some(a) = lp_coordinates(vertices, x, true) {
        return (LpHull::InConvex, Some(a));
    }
    match lp_coordinates(vertices, x, false) {
        Some(a) => (LpHull::InAffine, Some(a)),
        None => (LpHull::Outside, None),
    }
}

pub fn kernel_class(status: &HullStatus) -> LpHull {
    match status {
        HullStatus::OutsideAffine => LpHull::Outside,
        HullStatus::InAffineOutsideConvex(_) => LpHull::InAffine,
        HullStatus::InConvex(_) => LpHull::InConvex,
    }
}

/// A random hull instance with a margin of `0.05` from every boundary:
/// `k + 1` affinely independent vertices in `R^d` and a query point that
/// is inside the simplex, in its affine hull but outside, or off the hull.
pub struct HullInstance {
    pub vertices: Vec<Vec<f64>>,
    pub x: Vec<f64>,
    pub expected: LpHull,
    pub coordinates: Vec<f64>,
}

pub fn random_hull_instance(rng: &mut ChaCha8Rng, d: usize) -> HullInstance {
    let k = rng.random_range(1..=d);
    loop {
        let vertices: Vec<Vec<f64>> = (0..=k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        // Reject nearly degenerate simplices via the Gram determinant.
        let edges: Vec<Vec<f64>> = vertices[1..]
            .iter()
            .map(|v| v.iter().zip(&vertices[0]).map(|(a, b)| a - b).collect())
            .collect();
        let gram = nalgebra::DMatrix::<f64>::from_fn(k, k, |i, j| edges[i].iter().zip(&edges[j]).map(|(a, b)| a * b).sum::<f64>());
        if gram.determinant() < 1e-3 {
            continue;
        }
        let kind = rng.random_range(0..3);
        let mut coords: Vec<f64> = (0..=k).map(|_| rng.random_range(0.05..1.0)).collect();
        if kind == 1 {
            let i = rng.random_range(0..=k);
            coords[i] = -rng.random_range(0.05..1.0);
        }
        let total: f64 = coords.iter().sum();
        if total.abs() < 0.2 {
            continue;
        }
        coords.iter_mut().for_each(|c| *c /= total);
        if kind == 0 && coords.iter().any(|c| *c < 0.02) {
            continue;
        }
        if kind == 1 && coords.iter().all(|c| *c >= -0.02) {
            continue;
        }
        let mut x: Vec<f64> = (0..d)
            .map(|j| coords.iter().zip(&vertices).map(|(a, v)| a * v[j]).sum())
            .collect();
        let expected = match kind {
            0 => LpHull::InConvex,
            1 => LpHull::InAffine,
            _ => {
                if k == d {
                    continue;
                }
                // push x off the affine hull along a component orthogonal to the edges
                let dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let e = nalgebra::DMatrix::from_fn(d, k, |r, c| edges[c][r]);
                let dv = nalgebra::DVector::from_vec(dir);
                let proj = &e * (e.transpose() * &e).try_inverse().unwrap() * e.transpose() * &dv;
                let orth = dv - proj;
                if orth.norm() < 0.1 {
                    continue;
                }
                let scale = rng.random_range(0.05..0.5) / orth.norm();
                for (xj, o) in x.iter_mut().zip(orth.iter()) {
                    *xj += scale * o;
                }
                LpHull::Outside
            }
        };
        return HullInstance {
            vertices,
            x,
            expected,
            coordinates: coords,
        };
    }
}

/// Constrained optimum `max J_r s.t. J_c <= tau` over all mixed policies,
/// from the occupancy-measure linear program.
pub fn occupancy_lp_optimum(cmdp: &Cmdp, tau: &ConstraintSpec) -> f64 {
    let (ns, na, gamma) = (cmdp.n_states(), cmdp.n_actions(), cmdp.discount());
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let d: Vec<_> = (0..ns * na)
        .map(|i| lp.add_var(cmdp.reward(i / na, i % na), (0.0, f64::INFINITY)))
        .collect();
    for s2 in 0..ns {
        let mut row: Vec<(microlp::Variable, f64)> = Vec::new();
        for s in 0..ns {
            for a in 0..na {
                let mut coef = -gamma * cmdp.transition_row(s, a)[s2];
                if s == s2 {
                    coef += 1.0;
                }
                if coef != 0.0 {
                    row.push((d[s * na + a], coef));
                }
            }
        }
        lp.add_constraint(row, ComparisonOp::Eq, cmdp.initial_dist()[s2]);
    }
    for k in 0..tau.m() {
        let row: Vec<_> = (0..ns * na).map(|i| (d[i], cmdp.cost(i / na, i % na)[k])).collect();
        lp.add_constraint(row, ComparisonOp::Le, tau.tau()[k]);
    }
    lp.solve().expect("occupancy LP solves").objective()
}

/// Every deterministic policy of a small CMDP, in lexicographic order.
pub fn all_deterministic_policies(cmdp: &Cmdp) -> Vec<DeterministicPolicy> {
    let (ns, na) = (cmdp.n_states(), cmdp.n_actions());
    let total = na.pow(ns as u32);
    (0..total)
        .map(|mut code| {
            let actions = (0..ns)
                .map(|_| {
                    let a = code % na;
                    code /= na;
                    a
                })
                .collect();
            DeterministicPolicy::new(aimrl::PolicyId(0), actions, na).unwrap()
        })
        .collect()
}

/// Monte-Carlo estimate of `[J_r, J_c]` by rolling out `policy`.
pub fn monte_carlo(cmdp: &Cmdp, policy: &DeterministicPolicy, episodes: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = cmdp.n_costs();
    let mut total = vec![0.0; m + 1];
    let draw = |p: &[f64], rng: &mut ChaCha8Rng| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    };
    for _ in 0..episodes {
        let mut s = draw(cmdp.initial_dist(), &mut rng);
        let mut discount = 1.0;
        for _ in 0..10_000 {
            if cmdp.is_terminal(s) {
                break;
            }
            let a = policy.action(s);
            total[0] += discount * cmdp.reward(s, a);
            for (k, c) in cmdp.cost(s, a).iter().enumerate() {
                total[k + 1] += discount * c;
            }
            discount *= cmdp.discount();
            s = draw(cmdp.transition_row(s, a), &mut rng);
        }
    }
    total.iter().map(|v| v / episodes as f64).collect()
}

/// A stream of measurement vectors in `R^{m+1}`. Pooled streams draw from a
/// handful of fixed points, as repeated best responses do.
pub fn random_stream(seed: u64, len: usize, m: usize, pooled: bool) -> Vec<MeasurementVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |rng: &mut ChaCha8Rng| mv(&(0..=m).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
    if pooled {
        let pool: Vec<MeasurementVector> = (0..m + 4).map(|_| point(&mut rng)).collect();
        (0..len).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect()
    } else {
        (0..len).map(|_| point(&mut rng)).collect()
    }
}
