//! Experiment configuration files.
//!
//! A config is a JSON document:
//!
//! ```json
//! {
//!   "environment": { "kind": "example1", "tau": 0.3 },
//!   "dataset": { "episodes": 10000, "seed": 1 },
//!   "train": { "rounds": 2000, "lambda_update_every": 1, "export_every": 1, "mixer": "aim_mean" },
//!   "evaluation": { "clip": 20.0, "mode": "plain" },
//!   "compare": { "seeds": [0, 1, 2, 3, 4] },
//!   "output_dir": "out/example1"
//! }
//! ```
//!
//! Every section except `environment` is optional.

use std::path::{Path, PathBuf};

use aimrl::envs::{collect_dataset_with, example1_cmdp, marketing_cmdp, simplex_cmdp, CollectOptions};
use aimrl::learner::{MixerKind, TrainConfig};
use aimrl::store;
use aimrl::{Cmdp, ConstraintSpec, MarketingConfig, NormalizationMode, StochasticPolicy, TransitionDataset};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentSpec {
    Example1 { tau: f64 },
    Simplex { m: usize },
    Marketing(MarketingConfig),
    /// A CMDP saved with the store module; it must carry thresholds.
    File { path: PathBuf },
}

impl EnvironmentSpec {
    pub fn build(&self) -> Result<(Cmdp, ConstraintSpec)> {
        Ok(match self {
            EnvironmentSpec::Example1 { tau } => example1_cmdp(*tau)?,
            EnvironmentSpec::Simplex { m } => simplex_cmdp(*m)?,
            EnvironmentSpec::Marketing(config) => marketing_cmdp(config)?,
            EnvironmentSpec::File { path } => match store::load_cmdp(path)? {
                (cmdp, Some(tau)) => (cmdp, tau),
                (_, None) => bail!("CMDP file {} has no thresholds", path.display()),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BehaviorSpec {
    #[default]
    Uniform,
    /// Row-major `n_states x n_actions` probabilities.
    Table { probs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub behavior: BehaviorSpec,
    pub episodes: u64,
    pub seed: u64,
    pub max_steps: usize,
    /// Load this dataset instead of collecting one.
    pub path: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            behavior: BehaviorSpec::Uniform,
            episodes: 10_000,
            seed: 0,
            max_steps: aimrl::envs::DEFAULT_MAX_EPISODE_STEPS,
            path: None,
        }
    }
}

impl DatasetSpec {
    pub fn behavior_policy(&self, cmdp: &Cmdp) -> Result<StochasticPolicy> {
        Ok(match &self.behavior {
            BehaviorSpec::Uniform => StochasticPolicy::uniform(cmdp.n_states(), cmdp.n_actions()),
            BehaviorSpec::Table { probs } => {
                StochasticPolicy::new("table", cmdp.n_states(), cmdp.n_actions(), probs.clone())?
            }
        })
    }

    /// Loads the configured file, or logs fresh episodes from `cmdp`.
    pub fn materialize(&self, cmdp: &Cmdp) -> Result<TransitionDataset> {
        if let Some(path) = &self.path {
            let ds = store::load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
            if ds.m() != cmdp.n_costs() || ds.metadata.n_states != cmdp.n_states() {
                bail!("dataset {} does not match the environment", path.display());
            }
            return Ok(ds);
        }
        let behavior = self.behavior_policy(cmdp)?;
        Ok(collect_dataset_with(
            cmdp,
            &behavior,
            CollectOptions {
                n_episodes: self.episodes,
                seed: self.seed,
                max_steps: self.max_steps,
            },
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSpec {
    pub clip: f64,
    pub mode: NormalizationMode,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        EvaluationSpec {
            clip: aimrl::ope::DEFAULT_CLIP,
            mode: NormalizationMode::Plain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSpec {
    pub seeds: Vec<u64>,
    pub mixers: Vec<MixerKind>,
    pub myopic: bool,
}

impl Default for CompareSpec {
    fn default() -> Self {
        CompareSpec {
            seeds: (0..5).collect(),
            mixers: MixerKind::ALL.to_vec(),
            myopic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
    #[serde(default)]
    pub compare: CompareSpec,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.train.validate()?;
        Ok(config)
    }

    /// Applies a seed override to training, data collection and the
    /// comparison seeds.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(seed) = seed {
            self.train.seed = seed;
            self.dataset.seed = seed;
            self.compare.seeds = vec![seed];
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_and_marketing_configs() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"environment": {"kind": "example1", "tau": 0.3}}"#).unwrap();
        assert_eq!(c.environment, EnvironmentSpec::Example1 { tau: 0.3 });
        assert_eq!(c.output_dir, PathBuf::from("out"));
        let c: ExperimentConfig = serde_json::from_str(
            r#"{"environment": {"kind": "marketing", "horizon": 5},
                "train": {"mixer": "aim_greedy", "best_response": "fitted"}}"#,
        )
        .unwrap();
        match c.environment {
            EnvironmentSpec::Marketing(m) => assert_eq!(m.horizon, 5),
            other => panic!("{other:?}"),
        }
        assert_eq!(c.train.mixer, MixerKind::AimGreedy);
    }

    #[test]
    fn rejects_unknown_fields() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"environment": {"kind": "simplex", "m": 2}, "trian": {}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(
            r#"{"environment": {"kind": "marketing", "horizn": 5}}"#
        )
        .is_err());
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"environment": {"kind": "simplex", "m": 2}}"#).unwrap();
        let c = c.with_seed(Some(42));
        assert_eq!((c.train.seed, c.dataset.seed, c.compare.seeds.clone()), (42, 42, vec![42]));
    }
}
