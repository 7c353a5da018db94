//! The multiplier player (OGD), the policy player (best responses), and the
//! game loop that feeds best responses into a mixed-policy manager.

mod best_response;
mod mixer;
mod ogd;
mod registry;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aim::GEOMETRY_TOL;
use crate::cmdp::LambdaVector;
use crate::error::{Error, Result};

pub use best_response::{
    best_response_exact, best_response_fitted, FeatureMap, FeatureSpec, FittedConfig, FittedDiagnostics,
    FittedLearner, OpeConfig, QFunction, TIE_TOL,
};
pub use mixer::{Mixer, MixerOutcome};
pub use ogd::{ogd_step, ogd_step_with, LearningRate};
pub use registry::{PolicyParams, PolicyRecord, PolicyRegistry};
pub use train::{
    box_lambda_max, duality_gap, regret, train, DualityGap, Problem, RoundRecord, RoundStatus, TrainFailure,
    TrainOutcome, TrainTrace, TraceMetadata,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BestResponseMode {
    #[default]
    Exact,
    Fitted,
}

/// Where `x(pi_t)` comes from in fitted mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementSource {
    /// Importance-sampling estimate from the training dataset.
    #[default]
    Ope,
    /// Exact evaluation on the generating CMDP (simulation studies only).
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    StoreAll,
    SingleBest,
    #[default]
    AimMean,
    AimGreedy,
}

impl MixerKind {
    pub const ALL: [MixerKind; 4] = [
        MixerKind::SingleBest,
        MixerKind::AimMean,
        MixerKind::AimGreedy,
        MixerKind::StoreAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::StoreAll => "store_all",
            MixerKind::SingleBest => "single_best",
            MixerKind::AimMean => "aim_mean",
            MixerKind::AimGreedy => "aim_greedy",
        }
    }
}

impl std::fmt::Display for MixerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mixer {s:?}")))
    }
}

/// Initial multipliers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaInit {
    #[default]
    Zero,
    Fixed { values: Vec<f64> },
    /// Each entry drawn uniformly from `[0, max]` using the training seed.
    Uniform { max: f64 },
}

impl LambdaInit {
    pub fn initial(&self, m: usize, seed: u64) -> Result<LambdaVector> {
        match self {
            LambdaInit::Zero => Ok(LambdaVector::zeros(m)),
            LambdaInit::Fixed { values } => {
                if values.len() != m {
                    return Err(Error::dim("initial multipliers", m, values.len()));
                }
                LambdaVector::new(values.clone())
            }
            LambdaInit::Uniform { max } => {
                if !(*max >= 0.0 && max.is_finite()) {
                    return Err(Error::InvalidArgument(format!("invalid multiplier range {max}")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                LambdaVector::new((0..m).map(|_| rng.random::<f64>() * max).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of best-response steps `T`.
    pub rounds: usize,
    pub lambda_update_every: usize,
    pub export_every: usize,
    /// Expected discount; `None` accepts the problem's own.
    pub gamma: Option<f64>,
    pub learning_rate: LearningRate,
    pub lambda_init: LambdaInit,
    pub best_response: BestResponseMode,
    pub fitted: FittedConfig,
    pub measurement: MeasurementSource,
    pub mixer: MixerKind,
    pub seed: u64,
    /// Side of the comparison box for regret; derived from the problem when unset.
    pub lambda_max: Option<f64>,
    pub geometry_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 1000,
            lambda_update_every: 10,
            export_every: 100,
            gamma: None,
            learning_rate: LearningRate::default(),
            lambda_init: LambdaInit::Zero,
            best_response: BestResponseMode::Exact,
            fitted: FittedConfig::default(),
            measurement: MeasurementSource::Ope,
            mixer: MixerKind::AimMean,
            seed: 0,
            lambda_max: None,
            geometry_tol: GEOMETRY_TOL,
        }
    }
}

impl TrainConfig {
    /// Textbook game loop: every step updates the multipliers and exports.
    pub fn every_round(rounds: usize, mixer: MixerKind) -> Self {
        TrainConfig {
            rounds,
            lambda_update_every: 1,
            export_every: 1,
            mixer,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.lambda_update_every == 0 || self.export_every == 0 {
            return Err(Error::InvalidArgument(
                "rounds, lambda_update_every and export_every must be positive".into(),
            ));
        }
        if let Some(g) = self.gamma {
            if !(0.0..1.0).contains(&g) {
                return Err(Error::InvalidArgument(format!("discount {g} outside [0, 1)")));
            }
        }
        match self.learning_rate {
            LearningRate::InvSqrt { scale: x } | LearningRate::Constant { eta: x } if !(x > 0.0 && x.is_finite()) => {
                return Err(Error::InvalidArgument(format!("learning rate {x} must be positive")));
            }
            _ => {}
        }
        if let Some(l) = self.lambda_max {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidArgument(format!("lambda_max {l} must be positive")));
            }
        }
        if !(self.geometry_tol > 0.0) {
            return Err(Error::InvalidArgument("geometry tolerance must be positive".into()));
        }
        if !(self.fitted.ope.clip > 0.0) {
            return Err(Error::InvalidArgument("clip must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
