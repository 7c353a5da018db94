mod common;

use aimrl::cmdp::{evaluate_policy_exact, lagrangian, Cmdp, CmdpParts, ConstraintSpec, LambdaVector};
use aimrl::envs::{collect_dataset, example1_cmdp, marketing_cmdp, simplex_cmdp, MarketingConfig, StochasticPolicy};
use aimrl::learner::{
    best_response_exact, best_response_fitted, duality_gap, train, BestResponseMode, FittedConfig, LambdaInit,
    MixerKind, Problem, TrainConfig,
};
use common::*;
use proptest::prelude::*;

fn tiny_marketing() -> MarketingConfig {
    MarketingConfig {
        activeness_levels: 2,
        horizon: 2,
        ..MarketingConfig::default()
    }
}

/// Best mixture of at most two deterministic policies by enumeration.
fn enumerated_optimum(cmdp: &Cmdp, tau: f64) -> f64 {
    let mut points: Vec<(f64, f64)> = all_deterministic_policies(cmdp)
        .iter()
        .map(|p| {
            let x = evaluate_policy_exact(cmdp, p).unwrap();
            (x.j_r(), x.j_c()[0])
        })
        .collect();
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    let (feasible, infeasible): (Vec<&(f64, f64)>, Vec<&(f64, f64)>) = points.iter().partition(|p| p.1 <= tau);
    let mut best = feasible.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    for f in &feasible {
        for i in infeasible.iter().filter(|i| i.0 > f.0) {
            let theta = (tau - f.1) / (i.1 - f.1);
            best = best.max(f.0 + theta * (i.0 - f.0));
        }
    }
    best
}

#[test]
fn occupancy_lp_matches_enumeration_on_tiny_marketing() {
    let (cmdp, tau) = marketing_cmdp(&tiny_marketing()).unwrap();
    let lp = occupancy_lp_optimum(&cmdp, &tau);
    let brute = enumerated_optimum(&cmdp, tau.tau()[0]);
    assert!((lp - brute).abs() < 1e-7, "LP {lp} vs enumeration {brute}");
}

#[test]
fn exact_training_reaches_lp_optimum_on_marketing() {
    let (cmdp, tau) = marketing_cmdp(&MarketingConfig::default()).unwrap();
    let optimum = occupancy_lp_optimum(&cmdp, &tau);
    let out = train(Problem::Model(&cmdp), &tau, &TrainConfig::every_round(3000, MixerKind::AimMean)).unwrap();
    let x = out.policy.target().unwrap();
    assert!((x.j_r() - optimum).abs() < 0.02 * optimum.abs().max(1.0), "{x} vs {optimum}");
    assert!(x.j_c()[0] <= tau.tau()[0] + 0.02);
    assert!(out.trace.records.iter().all(|r| r.active <= 3));
}

#[test]
fn tiny_marketing_training_reaches_enumerated_optimum() {
    let (cmdp, tau) = marketing_cmdp(&tiny_marketing()).unwrap();
    let optimum = enumerated_optimum(&cmdp, tau.tau()[0]);
    let out = train(Problem::Model(&cmdp), &tau, &TrainConfig::every_round(4000, MixerKind::AimGreedy)).unwrap();
    let x = out.policy.target().unwrap();
    assert!(x.j_c()[0] <= tau.tau()[0] + 1e-9, "{x}");
    assert!(x.j_r() >= optimum - 0.02, "{x} vs {optimum}");
}

#[test]
fn simplex_training_respects_capacity() {
    for m in [1usize, 2, 3] {
        let (cmdp, tau) = simplex_cmdp(m).unwrap();
        let out = train(Problem::Model(&cmdp), &tau, &TrainConfig::every_round(3000, MixerKind::AimMean)).unwrap();
        let x = out.policy.target().unwrap();
        let opt = m as f64 / (m as f64 + 1.0);
        assert!((x.j_r() - opt).abs() <= 0.03, "m={m}: {x}");
        assert!(out.trace.records.iter().all(|r| r.active <= m + 2));
        out.policy.check_invariants(1e-8).unwrap();
    }
}

#[test]
fn training_is_reproducible() {
    let (cmdp, tau) = example1_cmdp(0.3).unwrap();
    let config = TrainConfig {
        lambda_init: LambdaInit::Uniform { max: 2.0 },
        seed: 17,
        ..TrainConfig::every_round(500, MixerKind::AimGreedy)
    };
    let a = train(Problem::Model(&cmdp), &tau, &config).unwrap();
    let b = train(Problem::Model(&cmdp), &tau, &config).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.policy, b.policy);
}

#[test]
fn duality_gap_is_bounded_by_regret() {
    let (cmdp, tau) = example1_cmdp(0.3).unwrap();
    for seed in 0..3 {
        let config = TrainConfig {
            lambda_init: LambdaInit::Uniform { max: 2.0 },
            seed,
            ..TrainConfig::every_round(1000, MixerKind::AimMean)
        };
        let out = train(Problem::Model(&cmdp), &tau, &config).unwrap();
        let gap = duality_gap(&cmdp, out.policy.target().unwrap(), &out.lambda_hat, &tau, &out.trace).unwrap();
        assert!(gap.gap <= gap.bound + 1e-6, "seed {seed}: {gap:?}");
        assert!(gap.gap >= -1e-9);
    }
}

#[test]
fn saddle_point_has_zero_gap() {
    let (cmdp, tau) = example1_cmdp(0.3).unwrap();
    let config = TrainConfig::every_round(10, MixerKind::AimMean);
    let out = train(Problem::Model(&cmdp), &tau, &config).unwrap();
    let optimum = mv(&[0.3, 0.3]);
    let dual = LambdaVector::new(vec![1.0]).unwrap();
    let gap = duality_gap(&cmdp, &optimum, &dual, &tau, &out.trace).unwrap();
    assert!(gap.gap.abs() <= 1e-6, "{gap:?}");
}

#[test]
fn fitted_best_response_agrees_with_exact() {
    let (cmdp, tau) = example1_cmdp(0.3).unwrap();
    let behavior = StochasticPolicy::uniform(2, 2);
    let config = FittedConfig::default();
    for seed in 0..20 {
        let ds = collect_dataset(&cmdp, &behavior, 10_000, seed).unwrap();
        for l in [0.5, 2.0] {
            let lambda = LambdaVector::new(vec![l]).unwrap();
            let (exact, _) = best_response_exact(&cmdp, &lambda, &tau).unwrap();
            let (fitted, _) = best_response_fitted(&ds, &lambda, &tau, &config).unwrap();
            assert_eq!(exact.actions()[0], fitted.actions()[0], "seed {seed} lambda {l}");
        }
    }
}

#[test]
fn fitted_training_on_marketing_stays_near_exact_optimum() {
    let (cmdp, tau) = marketing_cmdp(&MarketingConfig::default()).unwrap();
    let behavior = StochasticPolicy::uniform(cmdp.n_states(), cmdp.n_actions());
    let ds = collect_dataset(&cmdp, &behavior, 5_000, 2).unwrap();
    let config = TrainConfig {
        best_response: BestResponseMode::Fitted,
        measurement: aimrl::learner::MeasurementSource::Exact,
        ..TrainConfig::every_round(1000, MixerKind::AimGreedy)
    };
    let out = train(
        Problem::Offline {
            dataset: &ds,
            simulator: Some(&cmdp),
        },
        &tau,
        &config,
    )
    .unwrap();
    let x = out.policy.target().unwrap();
    let optimum = occupancy_lp_optimum(&cmdp, &tau);
    assert!(x.j_c()[0] <= tau.tau()[0] + 1e-9);
    assert!(x.j_r() >= optimum - 0.1, "{x} vs {optimum}");
}

fn single_state(rewards: &[f64], costs: &[f64]) -> Cmdp {
    let na = rewards.len();
    let mut transition = vec![0.0; 2 * na * 2];
    for a in 0..na {
        transition[a * 2 + 1] = 1.0;
        transition[(na + a) * 2 + 1] = 1.0;
    }
    let mut reward = vec![0.0; 2 * na];
    reward[..na].copy_from_slice(rewards);
    let mut cost = vec![0.0; 2 * na];
    cost[..na].copy_from_slice(costs);
    Cmdp::new(CmdpParts {
        id: "single".into(),
        n_states: 2,
        n_actions: na,
        n_costs: 1,
        transition,
        reward,
        cost,
        discount: 0.8,
        initial_dist: vec![1.0, 0.0],
        terminal: vec![false, true],
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_best_response_maximizes_lagrangian(
        rc in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..6),
        l in 0.0f64..3.0,
    ) {
        let (r, c): (Vec<f64>, Vec<f64>) = rc.into_iter().unzip();
        let cmdp = single_state(&r, &c);
        let tau = ConstraintSpec::new(vec![0.5]).unwrap();
        let lambda = LambdaVector::new(vec![l]).unwrap();
        let (_, x) = best_response_exact(&cmdp, &lambda, &tau).unwrap();
        let value = lagrangian(&x, &lambda, &tau).unwrap();
        for p in all_deterministic_policies(&cmdp) {
            let other = lagrangian(&evaluate_policy_exact(&cmdp, &p).unwrap(), &lambda, &tau).unwrap();
            prop_assert!(value >= other - 1e-9);
        }
    }
}

/// Constrained optimum of the default marketing CMDP; a regression value.
const MARKETING_DEFAULT_OPTIMUM: f64 = 2.188812270912;

#[test]
fn marketing_default_optimum_is_pinned() {
    let (cmdp, tau) = marketing_cmdp(&MarketingConfig::default()).unwrap();
    let lp = occupancy_lp_optimum(&cmdp, &tau);
    assert!((lp - MARKETING_DEFAULT_OPTIMUM).abs() < 1e-9, "{lp}");
    let out = train(Problem::Model(&cmdp), &tau, &TrainConfig::every_round(3000, MixerKind::AimGreedy)).unwrap();
    let x = out.policy.target().unwrap();
    assert!(x.j_c()[0] <= tau.tau()[0] + 1e-9);
    assert!(x.j_r() >= MARKETING_DEFAULT_OPTIMUM - 0.01, "{x}");
}
