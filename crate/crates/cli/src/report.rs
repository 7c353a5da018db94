//! Output documents written by the commands, with their loaders.

use std::path::Path;

use aimrl::cmdp::{constraint_distance, feasibility_objective, Objective};
use aimrl::learner::DualityGap;
use aimrl::store::{self, format_real, FORMAT_VERSION};
use aimrl::{ConstraintSpec, MeasurementVector, NormalizationMode, OpeEstimate, PolicyId};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

const COMPARISON_MAGIC: &str = "# aimrl-comparison";

/// Serializes an [`Objective`] as its value, or the string `"-inf"`.
pub mod objective_serde {
    use super::*;

    pub fn serialize<S: Serializer>(o: &Objective, s: S) -> std::result::Result<S::Ok, S::Error> {
        match o {
            Objective::Feasible(v) => s.serialize_f64(*v),
            Objective::Infeasible => s.serialize_str("-inf"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Objective, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Value(f64),
            Sentinel(String),
        }
        match Raw::deserialize(d)? {
            Raw::Value(v) => Ok(Objective::Feasible(v)),
            Raw::Sentinel(s) if s == "-inf" => Ok(Objective::Infeasible),
            Raw::Sentinel(s) => Err(serde::de::Error::custom(format!("invalid objective {s:?}"))),
        }
    }
}

pub fn objective_cell(o: Objective) -> String {
    match o {
        Objective::Feasible(v) => format_real(v),
        Objective::Infeasible => "-inf".into(),
    }
}

pub fn parse_objective(cell: &str) -> Result<Objective> {
    if cell == "-inf" {
        return Ok(Objective::Infeasible);
    }
    Ok(Objective::Feasible(cell.parse().with_context(|| format!("invalid objective {cell:?}"))?))
}

/// A measurement with its feasibility verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assessment {
    pub measurement: MeasurementVector,
    pub feasible: bool,
    #[serde(with = "objective_serde")]
    pub objective: Objective,
    pub distance: f64,
}

impl Assessment {
    pub fn new(x: &MeasurementVector, tau: &ConstraintSpec) -> Result<Self> {
        let objective = feasibility_objective(x, tau)?;
        Ok(Assessment {
            measurement: x.clone(),
            feasible: objective.is_feasible(),
            objective,
            distance: constraint_distance(x, tau)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSummary {
    pub format_version: u32,
    pub environment: String,
    pub mixer: String,
    pub best_response: String,
    pub measurement: String,
    pub rounds: usize,
    pub seed: u64,
    pub tau: Vec<f64>,
    /// The mixer's target, in the units training measured with.
    pub target: Assessment,
    /// Exact measurement of the final mixture on the environment.
    pub exact: Assessment,
    pub lambda_hat: Vec<f64>,
    pub lambda_max: f64,
    pub regret: f64,
    /// Only computed for exact best responses.
    pub duality_gap: Option<DualityGap>,
    pub peak_stored_params: usize,
    pub policy_size: usize,
    pub active: usize,
    pub distinct_policies: usize,
    pub rebuilds: usize,
    pub failures: usize,
    pub config_digest: String,
}

impl TrainSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let summary: TrainSummary = store::load_json(path)?;
        check_version(summary.format_version, path)?;
        Ok(summary)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberEstimate {
    pub policy_id: PolicyId,
    pub weight: f64,
    pub estimate: MeasurementVector,
    pub effective_sample_size: f64,
    pub max_weight: f64,
    pub no_support: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub format_version: u32,
    pub clip: f64,
    pub mode: NormalizationMode,
    pub n_episodes: usize,
    pub estimate: OpeEstimate,
    pub members: Vec<MemberEstimate>,
    pub exact: Option<Assessment>,
}

impl EvaluationReport {
    pub fn load(path: &Path) -> Result<Self> {
        let report: EvaluationReport = store::load_json(path)?;
        check_version(report.format_version, path)?;
        Ok(report)
    }
}

fn check_version(found: u32, path: &Path) -> Result<()> {
    if found != FORMAT_VERSION {
        bail!("{}: format version {found} is not supported (expected {FORMAT_VERSION})", path.display());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonMetadata {
    pub environment: String,
    pub m: usize,
    pub tau: Vec<f64>,
    pub best_response: String,
    pub measurement: String,
    pub rounds: usize,
    pub config_digest: String,
}

/// One method on one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub seed: u64,
    pub method: String,
    pub target: MeasurementVector,
    pub target_objective: Objective,
    pub exact: MeasurementVector,
    pub exact_objective: Objective,
    pub exact_distance: f64,
    pub peak_stored_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub metadata: ComparisonMetadata,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn header(m: usize) -> Vec<String> {
        let mut h = vec!["seed".to_string(), "method".into(), "target_j_r".into()];
        h.extend((0..m).map(|k| format!("target_j_c{k}")));
        h.extend(["target_objective".into(), "exact_j_r".into()]);
        h.extend((0..m).map(|k| format!("exact_j_c{k}")));
        h.extend([
            "exact_objective".into(),
            "exact_distance".into(),
            "peak_stored_params".into(),
        ]);
        h
    }

    pub fn to_table(&self) -> Result<String> {
        let mut out = format!("{COMPARISON_MAGIC} {FORMAT_VERSION}\n# {}\n", serde_json::to_string(&self.metadata)?);
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        writer.write_record(Self::header(self.metadata.m))?;
        for row in &self.rows {
            let mut cells = vec![row.seed.to_string(), row.method.clone()];
            cells.extend(row.target.as_slice().iter().map(|v| format_real(*v)));
            cells.push(objective_cell(row.target_objective));
            cells.extend(row.exact.as_slice().iter().map(|v| format_real(*v)));
            cells.push(objective_cell(row.exact_objective));
            cells.push(format_real(row.exact_distance));
            cells.push(row.peak_stored_params.to_string());
            writer.write_record(&cells)?;
        }
        out.push_str(std::str::from_utf8(&writer.into_inner()?)?);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_atomic(path, self.to_table()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut lines = text.splitn(3, '\n');
        let magic = lines.next().unwrap_or_default();
        match magic.strip_prefix(COMPARISON_MAGIC).map(str::trim) {
            Some(v) if v == FORMAT_VERSION.to_string() => {}
            Some(v) => bail!("{}: comparison format version {v} is not supported", path.display()),
            None => bail!("{}: not a comparison table", path.display()),
        }
        let meta_line = lines.next().and_then(|l| l.strip_prefix("# ")).context("missing comparison metadata")?;
        let metadata: ComparisonMetadata = serde_json::from_str(meta_line)?;
        let m = metadata.m;
        let mut reader = csv::Reader::from_reader(lines.next().unwrap_or_default().as_bytes());
        if reader.headers()?.iter().collect::<Vec<_>>() != Self::header(m) {
            bail!("{}: unexpected comparison columns", path.display());
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let cell = |i: usize| record.get(i).context("short comparison row");
            let real = |i: usize| -> Result<f64> { Ok(cell(i)?.parse()?) };
            let vector = |start: usize| -> Result<MeasurementVector> {
                Ok(MeasurementVector::new((start..=start + m).map(real).collect::<Result<_>>()?)?)
            };
            rows.push(ComparisonRow {
                seed: cell(0)?.parse()?,
                method: cell(1)?.to_string(),
                target: vector(2)?,
                target_objective: parse_objective(cell(m + 3)?)?,
                exact: vector(m + 4)?,
                exact_objective: parse_objective(cell(2 * m + 5)?)?,
                exact_distance: real(2 * m + 6)?,
                peak_stored_params: cell(2 * m + 7)?.parse()?,
            });
        }
        Ok(ComparisonTable { metadata, rows })
    }

    /// Rows for one method, in seed order.
    pub fn method(&self, name: &str) -> Vec<&ComparisonRow> {
        self.rows.iter().filter(|r| r.method == name).collect()
    }
}
