//! The `train`, `evaluate`, `compare` and `collect` commands.

use std::path::{Path, PathBuf};

use aimrl::cmdp::evaluate_policy_exact;
use aimrl::learner::{
    box_lambda_max, duality_gap, train, BestResponseMode, MeasurementSource, MixerKind, PolicyRecord, Problem,
    TrainConfig, TrainOutcome,
};
use aimrl::ope::{evaluate_mixed, is_estimate};
use aimrl::store::{self, PolicySetMetadata, FORMAT_VERSION};
use aimrl::{AimPolicy, Cmdp, ConstraintSpec, DeterministicPolicy, MeasurementVector, NormalizationMode, PolicyId};
use aimrl::{TransitionDataset, TrainTrace};
use anyhow::{bail, Context, Result};

use crate::config::ExperimentConfig;
use crate::myopic::{myopic_baseline, OneStepModel};
use crate::report::{
    Assessment, ComparisonMetadata, ComparisonRow, ComparisonTable, EvaluationReport, MemberEstimate, TrainSummary,
};

pub const POLICY_SET_FILE: &str = "policy_set.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DATASET_FILE: &str = "dataset.csv";
pub const CMDP_FILE: &str = "cmdp.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const MYOPIC: &str = "myopic";

/// Command-line overrides shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub clip: Option<f64>,
    pub mode: Option<NormalizationMode>,
}

impl Overrides {
    fn apply(&self, mut config: ExperimentConfig) -> Result<ExperimentConfig> {
        config = config.with_seed(self.seed);
        if let Some(clip) = self.clip {
            if !(clip > 0.0) {
                bail!("clip must be positive, got {clip}");
            }
            config.evaluation.clip = clip;
            config.train.fitted.ope.clip = clip;
        }
        if let Some(mode) = self.mode {
            config.evaluation.mode = mode;
            config.train.fitted.ope.mode = mode;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        Ok(config)
    }
}

/// A parsed config with its environment built.
struct Experiment {
    config: ExperimentConfig,
    cmdp: Cmdp,
    tau: ConstraintSpec,
}

impl Experiment {
    fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let config = overrides.apply(ExperimentConfig::load(path)?)?;
        let (cmdp, tau) = config.environment.build()?;
        Ok(Experiment { config, cmdp, tau })
    }

    fn output_dir(&self) -> Result<&Path> {
        let dir = self.config.output_dir.as_path();
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn logged(&self, seed: u64) -> Result<TransitionDataset> {
        let mut spec = self.config.dataset.clone();
        spec.seed = seed;
        spec.materialize(&self.cmdp)
    }

    /// The training dataset; exact best responses need none.
    fn dataset(&self, seed: u64) -> Result<Option<TransitionDataset>> {
        match self.config.train.best_response {
            BestResponseMode::Exact => Ok(None),
            BestResponseMode::Fitted => self.logged(seed).map(Some),
        }
    }

    /// Trains with the config's settings under `mixer` and `seed`.
    fn run(&self, dataset: Option<&TransitionDataset>, mixer: MixerKind, seed: u64) -> Result<TrainOutcome, Failure> {
        let config = TrainConfig {
            mixer,
            seed,
            ..self.config.train.clone()
        };
        let problem = match dataset {
            None => Problem::Model(&self.cmdp),
            Some(dataset) => Problem::Offline {
                dataset,
                simulator: (config.measurement == MeasurementSource::Exact).then_some(&self.cmdp),
            },
        };
        train(problem, &self.tau, &config).map_err(|f| Failure {
            error: anyhow::Error::new(f.error),
            trace: f.trace,
        })
    }

    fn measurement_source(&self) -> MeasurementSource {
        match self.config.train.best_response {
            BestResponseMode::Exact => MeasurementSource::Exact,
            BestResponseMode::Fitted => self.config.train.measurement,
        }
    }
}

struct Failure {
    error: anyhow::Error,
    trace: Option<TrainTrace>,
}

/// `sum_i alpha_i x(pi_i)` with each member evaluated exactly.
pub fn exact_mixture<'a>(
    cmdp: &Cmdp,
    mu: &AimPolicy,
    lookup: impl Fn(PolicyId) -> Option<&'a DeterministicPolicy>,
) -> Result<MeasurementVector> {
    let mut xs = Vec::with_capacity(mu.len());
    for active in mu.active() {
        let policy = lookup(active.policy).with_context(|| format!("no parameters for policy {}", active.policy))?;
        xs.push(evaluate_policy_exact(cmdp, policy)?);
    }
    Ok(MeasurementVector::combine(xs.iter(), mu.weights()))
}

fn records_of(outcome: &TrainOutcome) -> Vec<PolicyRecord> {
    outcome
        .policy
        .active()
        .iter()
        .filter_map(|a| outcome.registry.record(a.policy).cloned())
        .collect()
}

fn save_run(dir: &Path, outcome: &TrainOutcome, tau: &ConstraintSpec, config: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let metadata = PolicySetMetadata {
        config_digest: outcome.trace.metadata.config_digest.clone(),
        seed: config.seed,
        round: outcome.trace.records.len(),
        mixer: config.mixer.name().into(),
    };
    store::save_policy_set(&dir.join(POLICY_SET_FILE), &outcome.policy, &records_of(outcome), tau, &metadata)?;
    store::save_trace(&dir.join(TRACE_FILE), &outcome.trace)?;
    Ok(())
}

/// Trains per the config and writes the policy set, the trace and a
/// summary. On a training failure the partial trace is still written.
pub fn cmd_train(config_path: &Path, overrides: &Overrides) -> Result<TrainSummary> {
    let exp = Experiment::load(config_path, overrides)?;
    let config = &exp.config.train;
    let dataset = exp.dataset(exp.config.dataset.seed)?;
    let out = exp.output_dir()?;
    if let Some(ds) = &dataset {
        store::save_dataset(&out.join(DATASET_FILE), ds)?;
    }
    let outcome = match exp.run(dataset.as_ref(), config.mixer, config.seed) {
        Ok(outcome) => outcome,
        Err(failure) => {
            if let Some(trace) = &failure.trace {
                store::save_trace(&out.join(TRACE_FILE), trace)?;
            }
            return Err(failure.error.context("training failed"));
        }
    };
    save_run(out, &outcome, &exp.tau, config)?;

    let target = outcome.policy.target().context("training exported no policy")?;
    let exact = exact_mixture(&exp.cmdp, &outcome.policy, |id| outcome.registry.get(id))?;
    let gap = match config.best_response {
        BestResponseMode::Exact => Some(duality_gap(&exp.cmdp, target, &outcome.lambda_hat, &exp.tau, &outcome.trace)?),
        BestResponseMode::Fitted => None,
    };
    let trace = &outcome.trace;
    let summary = TrainSummary {
        format_version: FORMAT_VERSION,
        environment: exp.cmdp.id().to_string(),
        mixer: config.mixer.name().into(),
        best_response: name_of(&config.best_response),
        measurement: name_of(&trace.metadata.measurement),
        rounds: config.rounds,
        seed: config.seed,
        tau: exp.tau.tau().to_vec(),
        target: Assessment::new(target, &exp.tau)?,
        exact: Assessment::new(&exact, &exp.tau)?,
        lambda_hat: outcome.lambda_hat.as_slice().to_vec(),
        lambda_max: trace.metadata.lambda_max,
        regret: trace.regret(),
        duality_gap: gap,
        peak_stored_params: trace.peak_stored_params(),
        policy_size: records_of(&outcome).iter().map(PolicyRecord::size).max().unwrap_or(0),
        active: outcome.policy.len(),
        distinct_policies: outcome.registry.len(),
        rebuilds: outcome.rebuilds,
        failures: outcome.failures,
        config_digest: trace.metadata.config_digest.clone(),
    };
    store::save_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn name_of<T: serde::Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

/// Inputs of `evaluate` besides the overrides.
#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub policy_set: PathBuf,
    pub dataset: PathBuf,
    /// Enables exact evaluation on the config's environment, and supplies
    /// the default clip, mode and output directory.
    pub config: Option<PathBuf>,
}

/// Estimates a saved mixed policy on a logged dataset, and evaluates it
/// exactly when an environment is available.
pub fn cmd_evaluate(args: &EvaluateArgs, overrides: &Overrides) -> Result<EvaluationReport> {
    let loaded = store::load_policy_set(&args.policy_set)?;
    let dataset = store::load_dataset(&args.dataset)?;
    if dataset.m() != loaded.tau.m() {
        bail!(
            "the policy set has m = {} but the dataset has m = {}",
            loaded.tau.m(),
            dataset.m()
        );
    }
    for policy in &loaded.policies {
        if policy.n_states() != dataset.metadata.n_states {
            bail!(
                "policy {} covers {} states but the dataset has {}",
                policy.id,
                policy.n_states(),
                dataset.metadata.n_states
            );
        }
    }
    let exp = match &args.config {
        Some(path) => Some(Experiment::load(path, overrides)?),
        None => None,
    };
    let (clip, mode) = match &exp {
        Some(e) => (e.config.evaluation.clip, e.config.evaluation.mode),
        None => (
            overrides.clip.unwrap_or(aimrl::ope::DEFAULT_CLIP),
            overrides.mode.unwrap_or_default(),
        ),
    };
    if !(clip > 0.0) {
        bail!("clip must be positive, got {clip}");
    }
    let estimate = evaluate_mixed(&dataset, &loaded.policy, |id| loaded.lookup(id), clip, mode)?;
    let mut members = Vec::with_capacity(loaded.policy.len());
    for (active, weight) in loaded.policy.active().iter().zip(loaded.policy.weights()) {
        let policy = loaded.lookup(active.policy).context("policy set lost a member")?;
        let e = is_estimate(&dataset, policy, clip, mode)?;
        members.push(MemberEstimate {
            policy_id: active.policy,
            weight: *weight,
            estimate: e.x_hat,
            effective_sample_size: e.effective_sample_size,
            max_weight: e.max_weight,
            no_support: e.no_support,
        });
    }
    let exact = match &exp {
        Some(e) => {
            if e.tau.m() != loaded.tau.m() {
                bail!("the environment has m = {} but the policy set has m = {}", e.tau.m(), loaded.tau.m());
            }
            let x = exact_mixture(&e.cmdp, &loaded.policy, |id| loaded.lookup(id))?;
            Some(Assessment::new(&x, &loaded.tau)?)
        }
        None => None,
    };
    let report = EvaluationReport {
        format_version: FORMAT_VERSION,
        clip,
        mode,
        n_episodes: estimate.n_episodes,
        estimate,
        members,
        exact,
    };
    let out = match (&overrides.out, &exp) {
        (Some(out), _) => out.clone(),
        (None, Some(e)) => e.config.output_dir.clone(),
        (None, None) => args
            .policy_set
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    store::save_json(&out.join(EVALUATION_FILE), &report)?;
    Ok(report)
}

/// Runs every configured mixer (and the myopic baseline) on the same
/// seeds, writing each run to `seed_<s>/<method>/` and the final
/// objectives to one comparison table.
pub fn cmd_compare(config_path: &Path, overrides: &Overrides) -> Result<ComparisonTable> {
    let exp = Experiment::load(config_path, overrides)?;
    let spec = &exp.config.compare;
    if spec.seeds.is_empty() || (spec.mixers.is_empty() && !spec.myopic) {
        bail!("nothing to compare: list at least one seed and one method");
    }
    let out = exp.output_dir()?.to_path_buf();
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let dataset = exp.dataset(seed)?;
        let seed_dir = out.join(format!("seed_{seed}"));
        let results: Vec<Result<ComparisonRow>> = std::thread::scope(|scope| {
            let handles: Vec<_> = spec
                .mixers
                .iter()
                .map(|&mixer| {
                    let (exp, dataset, dir) = (&exp, dataset.as_ref(), seed_dir.join(mixer.name()));
                    scope.spawn(move || compare_mixer(exp, dataset, mixer, seed, &dir))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| bail!("comparison worker panicked")))
                .collect()
        });
        for row in results {
            rows.push(row?);
        }
        if spec.myopic {
            rows.push(compare_myopic(&exp, dataset.as_ref(), seed, &seed_dir.join(MYOPIC))?);
        }
    }
    let table = ComparisonTable {
        metadata: ComparisonMetadata {
            environment: exp.cmdp.id().to_string(),
            m: exp.tau.m(),
            tau: exp.tau.tau().to_vec(),
            best_response: name_of(&exp.config.train.best_response),
            measurement: name_of(&exp.measurement_source()),
            rounds: exp.config.train.rounds,
            config_digest: exp.config.train.digest(),
        },
        rows,
    };
    table.save(&out.join(COMPARISON_FILE))?;
    Ok(table)
}

fn compare_mixer(
    exp: &Experiment,
    dataset: Option<&TransitionDataset>,
    mixer: MixerKind,
    seed: u64,
    dir: &Path,
) -> Result<ComparisonRow> {
    let outcome = exp
        .run(dataset, mixer, seed)
        .map_err(|f| f.error.context(format!("{mixer} on seed {seed}")))?;
    let config = TrainConfig {
        mixer,
        seed,
        ..exp.config.train.clone()
    };
    save_run(dir, &outcome, &exp.tau, &config)?;
    let target = outcome.policy.target().context("training exported no policy")?;
    let exact = exact_mixture(&exp.cmdp, &outcome.policy, |id| outcome.registry.get(id))?;
    row(exp, seed, mixer.name(), target, &exact, outcome.trace.peak_stored_params())
}

fn compare_myopic(exp: &Experiment, dataset: Option<&TransitionDataset>, seed: u64, dir: &Path) -> Result<ComparisonRow> {
    let owned;
    let ds = match dataset {
        Some(ds) => ds,
        None => {
            owned = exp.logged(seed)?;
            &owned
        }
    };
    let (lo, hi) = ds
        .samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.reward), hi.max(s.reward)));
    let lambda_max = exp
        .config
        .train
        .lambda_max
        .unwrap_or_else(|| box_lambda_max((hi - lo).max(0.0), &exp.tau));
    let id = PolicyId(1);
    let baseline = myopic_baseline(&OneStepModel::from_dataset(ds), &exp.tau, lambda_max, id)?;
    let exact = evaluate_policy_exact(&exp.cmdp, &baseline.policy)?;
    let measured = match exp.measurement_source() {
        MeasurementSource::Exact => exact.clone(),
        MeasurementSource::Ope => {
            let ope = &exp.config.train.fitted.ope;
            is_estimate(ds, &baseline.policy, ope.clip, ope.mode)?.x_hat
        }
    };
    let mu = AimPolicy::single(id, measured.clone());
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let metadata = PolicySetMetadata {
        config_digest: exp.config.train.digest(),
        seed,
        round: 0,
        mixer: MYOPIC.into(),
    };
    let record = PolicyRecord::tabular(&baseline.policy, exp.cmdp.n_actions());
    store::save_policy_set(&dir.join(POLICY_SET_FILE), &mu, &[record.clone()], &exp.tau, &metadata)?;
    row(exp, seed, MYOPIC, &measured, &exact, record.size())
}

fn row(
    exp: &Experiment,
    seed: u64,
    method: &str,
    target: &MeasurementVector,
    exact: &MeasurementVector,
    peak: usize,
) -> Result<ComparisonRow> {
    let t = Assessment::new(target, &exp.tau)?;
    let e = Assessment::new(exact, &exp.tau)?;
    Ok(ComparisonRow {
        seed,
        method: method.into(),
        target: t.measurement,
        target_objective: t.objective,
        exact: e.measurement,
        exact_objective: e.objective,
        exact_distance: e.distance,
        peak_stored_params: peak,
    })
}

/// Logs a dataset per the config and writes it with the environment.
pub fn cmd_collect(config_path: &Path, overrides: &Overrides) -> Result<PathBuf> {
    let exp = Experiment::load(config_path, overrides)?;
    let dataset = exp.config.dataset.materialize(&exp.cmdp)?;
    let out = exp.output_dir()?;
    let path = out.join(DATASET_FILE);
    store::save_dataset(&path, &dataset)?;
    store::save_cmdp(&out.join(CMDP_FILE), &exp.cmdp, Some(&exp.tau))?;
    Ok(path)
}
