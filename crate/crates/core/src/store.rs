//! Persistence of policy sets, datasets, traces and CMDPs.
//!
//! Structured files are JSON with keys in declaration order, two-space
//! indentation, scalar arrays on one line and every real number written
//! with 17 significant digits (`1.2345678901234567e-1`). Tables (datasets,
//! traces) are comma-separated with `#`-prefixed header lines carrying a
//! magic tag and the metadata as one JSON line. Every writer goes through a
//! temporary file and an atomic rename, and identical inputs produce
//! byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::aim::{ActivePolicy, AimPolicy, GEOMETRY_TOL};
use crate::cmdp::{Cmdp, ConstraintSpec, DeterministicPolicy, MeasurementVector, PolicyId};
use crate::envs::{DatasetMetadata, TransitionDataset, TransitionSample};
use crate::error::{Error, Result};
use crate::learner::{PolicyRecord, RoundRecord, RoundStatus, TraceMetadata, TrainTrace};

pub const FORMAT_VERSION: u32 = 1;

const WEIGHT_SUM_TOL: f64 = 1e-9;
const DATASET_MAGIC: &str = "# aimrl-dataset";
const TRACE_MAGIC: &str = "# aimrl-trace";

/// Formats a real with 17 significant digits.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_value(out: &mut String, value: &Value, indent: usize) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) if !n.is_f64() => write!(out, "{u}").unwrap(),
            (_, Some(i), _) if !n.is_f64() => write!(out, "{i}").unwrap(),
            (_, _, Some(f)) => out.push_str(&format_real(f)),
            _ => out.push_str(&n.to_string()),
        },
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("strings serialize")),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
            } else if items.iter().all(|v| !v.is_array() && !v.is_object()) {
                out.push('[');
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_value(out, v, indent);
                }
                out.push(']');
            } else {
                out.push_str("[\n");
                for (i, v) in items.iter().enumerate() {
                    push_indent(out, indent + 1);
                    write_value(out, v, indent + 1);
                    out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
                }
                push_indent(out, indent);
                out.push(']');
            }
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            for (i, (k, v)) in map.iter().enumerate() {
                push_indent(out, indent + 1);
                out.push_str(&serde_json::to_string(k).expect("keys serialize"));
                out.push_str(": ");
                write_value(out, v, indent + 1);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            push_indent(out, indent);
            out.push('}');
        }
    }
}

fn push_indent(out: &mut String, level: usize) {
    for _ in 0..level {
        out.push_str("  ");
    }
}

fn write_compact(out: &mut String, value: &Value) {
    match value {
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_compact(out, v);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, v)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("keys serialize"));
                out.push(':');
                write_compact(out, v);
            }
            out.push('}');
        }
        scalar => write_value(out, scalar, 0),
    }
}

/// Renders `value` in the structured text format.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let value = serde_json::to_value(value).map_err(|e| Error::InvalidArgument(format!("serializing: {e}")))?;
    let mut out = String::new();
    write_value(&mut out, &value, 0);
    out.push('\n');
    Ok(out)
}

fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let value = serde_json::to_value(value).map_err(|e| Error::InvalidArgument(format!("serializing: {e}")))?;
    let mut out = String::new();
    write_compact(&mut out, &value);
    Ok(out)
}

/// Writes `contents` to a temporary file next to `path` and renames it
/// into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json_string(value)?.as_bytes())
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a versioned envelope: checks `format_version` before decoding the
/// rest so future files fail with an explicit error.
fn load_versioned<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    check_version(path, value.get("format_version"))?;
    serde_json::from_value(value).map_err(|e| Error::format(path, e.to_string()))
}

fn check_version(path: &Path, v: Option<&Value>) -> Result<()> {
    let found = v
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::format(path, "missing or non-integer format_version"))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(Error::UnsupportedVersion {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

/// Provenance stored with a policy set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySetMetadata {
    pub config_digest: String,
    pub seed: u64,
    /// Training step at export.
    pub round: usize,
    pub mixer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySetEntry {
    pub policy_id: PolicyId,
    pub measurement: MeasurementVector,
    pub parameters: crate::learner::PolicyParams,
}

/// On-disk form of a mixed policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySetFile {
    pub format_version: u32,
    pub m: usize,
    pub tau: Vec<f64>,
    pub policies: Vec<PolicySetEntry>,
    pub weights: Vec<f64>,
    pub target: MeasurementVector,
    pub metadata: PolicySetMetadata,
}

/// A loaded policy set with rebuilt deterministic policies, in the order
/// of the mixture's active set.
#[derive(Debug, Clone)]
pub struct LoadedPolicySet {
    pub policy: AimPolicy,
    pub tau: ConstraintSpec,
    pub records: Vec<PolicyRecord>,
    pub policies: Vec<DeterministicPolicy>,
    pub metadata: PolicySetMetadata,
}

impl LoadedPolicySet {
    pub fn lookup(&self, id: PolicyId) -> Option<&DeterministicPolicy> {
        self.policies.iter().find(|p| p.id == id)
    }
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return Err(Error::Invariant(format!("weight {w} is negative or not finite")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Invariant(format!("weights sum to {total}, not 1")));
    }
    Ok(())
}

fn build_policy_set(
    mu: &AimPolicy,
    records: &[PolicyRecord],
    tau: &ConstraintSpec,
    metadata: &PolicySetMetadata,
) -> Result<PolicySetFile> {
    let target = mu.target().ok_or(Error::EmptyPolicy)?;
    check_weights(mu.weights())?;
    mu.check_mixture(GEOMETRY_TOL)?;
    if target.m() != tau.m() {
        return Err(Error::dim("policy set thresholds", target.m(), tau.m()));
    }
    let mut policies = Vec::with_capacity(mu.len());
    for active in mu.active() {
        let record = records
            .iter()
            .find(|r| r.id == active.policy)
            .ok_or_else(|| Error::Invariant(format!("no parameters for active policy {}", active.policy)))?;
        record.policy()?;
        policies.push(PolicySetEntry {
            policy_id: active.policy,
            measurement: active.x.clone(),
            parameters: record.params.clone(),
        });
    }
    Ok(PolicySetFile {
        format_version: FORMAT_VERSION,
        m: tau.m(),
        tau: tau.tau().to_vec(),
        policies,
        weights: mu.weights().to_vec(),
        target: target.clone(),
        metadata: metadata.clone(),
    })
}

/// Writes a mixed policy with the parameters of its active members.
/// Refuses to write anything that would fail to load.
pub fn save_policy_set(
    path: &Path,
    mu: &AimPolicy,
    records: &[PolicyRecord],
    tau: &ConstraintSpec,
    metadata: &PolicySetMetadata,
) -> Result<()> {
    save_json(path, &build_policy_set(mu, records, tau, metadata)?)
}

pub fn load_policy_set(path: &Path) -> Result<LoadedPolicySet> {
    let file: PolicySetFile = load_versioned(path)?;
    let tau = ConstraintSpec::new(file.tau.clone()).map_err(|e| Error::format(path, e.to_string()))?;
    if tau.m() != file.m || file.target.m() != file.m {
        return Err(Error::format(path, "m disagrees with tau or target"));
    }
    if file.policies.len() != file.weights.len() {
        return Err(Error::Invariant(format!(
            "{} weights for {} policies",
            file.weights.len(),
            file.policies.len()
        )));
    }
    check_weights(&file.weights)?;
    let mut records = Vec::with_capacity(file.policies.len());
    let mut policies = Vec::with_capacity(file.policies.len());
    let mut active = Vec::with_capacity(file.policies.len());
    for entry in &file.policies {
        if entry.measurement.m() != file.m {
            return Err(Error::format(path, format!("policy {} has the wrong measurement size", entry.policy_id)));
        }
        if active.iter().any(|a: &ActivePolicy| a.policy == entry.policy_id) {
            return Err(Error::Invariant(format!("policy {} listed twice", entry.policy_id)));
        }
        let record = PolicyRecord {
            id: entry.policy_id,
            params: entry.parameters.clone(),
        };
        policies.push(record.policy().map_err(|e| Error::format(path, e.to_string()))?);
        records.push(record);
        active.push(ActivePolicy {
            policy: entry.policy_id,
            x: entry.measurement.clone(),
        });
    }
    let policy = AimPolicy::from_parts(active, file.weights, file.target)?;
    Ok(LoadedPolicySet {
        policy,
        tau,
        records,
        policies,
        metadata: file.metadata,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CmdpFile {
    format_version: u32,
    cmdp: Cmdp,
    tau: Option<Vec<f64>>,
}

pub fn save_cmdp(path: &Path, cmdp: &Cmdp, tau: Option<&ConstraintSpec>) -> Result<()> {
    save_json(
        path,
        &CmdpFile {
            format_version: FORMAT_VERSION,
            cmdp: cmdp.clone(),
            tau: tau.map(|t| t.tau().to_vec()),
        },
    )
}

pub fn load_cmdp(path: &Path) -> Result<(Cmdp, Option<ConstraintSpec>)> {
    let file: CmdpFile = load_versioned(path)?;
    file.cmdp.validate().map_err(|e| Error::format(path, e.to_string()))?;
    let tau = file.tau.map(ConstraintSpec::new).transpose()?;
    if let Some(t) = &tau {
        if t.m() != file.cmdp.n_costs() {
            return Err(Error::dim("stored thresholds", file.cmdp.n_costs(), t.m()));
        }
    }
    Ok((file.cmdp, tau))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    format_version: u32,
    metadata: DatasetMetadata,
    samples: Vec<TransitionSample>,
}

/// Dataset in the structured format.
pub fn save_dataset_json(path: &Path, dataset: &TransitionDataset) -> Result<()> {
    dataset.validate()?;
    save_json(
        path,
        &DatasetFile {
            format_version: FORMAT_VERSION,
            metadata: dataset.metadata.clone(),
            samples: dataset.samples.clone(),
        },
    )
}

pub fn load_dataset_json(path: &Path) -> Result<TransitionDataset> {
    let file: DatasetFile = load_versioned(path)?;
    TransitionDataset::new(file.metadata, file.samples).map_err(|e| Error::format(path, e.to_string()))
}

/// Splits the `#` header of a table into the metadata JSON and the body.
fn split_header<'a>(path: &Path, text: &'a str, magic: &str) -> Result<(&'a str, &'a str)> {
    let mut lines = text.splitn(3, '\n');
    let first = lines.next().unwrap_or_default();
    let version = first
        .strip_prefix(magic)
        .map(str::trim)
        .ok_or_else(|| Error::format(path, format!("expected a {magic:?} header line")))?;
    let found: u64 = version
        .parse()
        .map_err(|_| Error::format(path, format!("bad version field {version:?}")))?;
    check_version(path, Some(&Value::from(found)))?;
    let meta = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| Error::format(path, "missing metadata line"))?;
    Ok((meta, lines.next().unwrap_or_default()))
}

fn table_header(magic: &str, metadata_line: &str) -> String {
    format!("{magic} {FORMAT_VERSION}\n# {metadata_line}\n")
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn csv_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, e.to_string())
}

fn parse_field<T: std::str::FromStr>(path: &Path, row: usize, name: &str, raw: Option<&str>) -> Result<T> {
    let raw = raw.ok_or_else(|| Error::format(path, format!("row {row}: missing column {name}")))?;
    raw.parse()
        .map_err(|_| Error::format(path, format!("row {row}: cannot parse {name} from {raw:?}")))
}

/// Dataset as a comma-separated table, one sample per line.
///
/// Columns: `episode_id, step_index, state, action, next_state, reward,
/// cost_0 .. cost_{m-1}, behavior_propensity`.
pub fn dataset_to_table(dataset: &TransitionDataset) -> Result<String> {
    let m = dataset.m();
    let mut w = csv_writer();
    let mut header: Vec<String> = ["episode_id", "step_index", "state", "action", "next_state", "reward"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..m).map(|k| format!("cost_{k}")));
    header.push("behavior_propensity".into());
    w.write_record(&header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for s in &dataset.samples {
        let mut row = vec![
            s.episode_id.to_string(),
            s.step_index.to_string(),
            s.state.to_string(),
            s.action.to_string(),
            s.next_state.to_string(),
            format_real(s.reward),
        ];
        row.extend(s.cost.iter().map(|c| format_real(*c)));
        row.push(format_real(s.behavior_propensity));
        w.write_record(&row).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?)
        .expect("csv output is utf-8");
    Ok(table_header(DATASET_MAGIC, &to_json_line(&dataset.metadata)?) + &body)
}

pub fn save_dataset_table(path: &Path, dataset: &TransitionDataset) -> Result<()> {
    dataset.validate()?;
    write_atomic(path, dataset_to_table(dataset)?.as_bytes())
}

pub fn load_dataset_table(path: &Path) -> Result<TransitionDataset> {
    let text = read_to_string(path)?;
    let (meta, body) = split_header(path, &text, DATASET_MAGIC)?;
    let metadata: DatasetMetadata = serde_json::from_str(meta).map_err(|e| csv_error(path, e))?;
    let m = metadata.m;
    let mut reader = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() != m + 7 {
        return Err(Error::format(path, format!("expected {} columns, found {}", m + 7, headers.len())));
    }
    let mut samples = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let f = |j: usize| rec.get(j);
        samples.push(TransitionSample {
            episode_id: parse_field(path, i, "episode_id", f(0))?,
            step_index: parse_field(path, i, "step_index", f(1))?,
            state: parse_field(path, i, "state", f(2))?,
            action: parse_field(path, i, "action", f(3))?,
            next_state: parse_field(path, i, "next_state", f(4))?,
            reward: parse_field(path, i, "reward", f(5))?,
            cost: (0..m)
                .map(|k| parse_field(path, i, "cost", f(6 + k)))
                .collect::<Result<_>>()?,
            behavior_propensity: parse_field(path, i, "behavior_propensity", f(6 + m))?,
        });
    }
    TransitionDataset::new(metadata, samples).map_err(|e| Error::format(path, e.to_string()))
}

/// Loads a dataset in either format, by extension: `.json` is structured,
/// anything else is the table.
pub fn load_dataset(path: &Path) -> Result<TransitionDataset> {
    if path.extension().is_some_and(|e| e == "json") {
        load_dataset_json(path)
    } else {
        load_dataset_table(path)
    }
}

pub fn save_dataset(path: &Path, dataset: &TransitionDataset) -> Result<()> {
    if path.extension().is_some_and(|e| e == "json") {
        save_dataset_json(path, dataset)
    } else {
        save_dataset_table(path, dataset)
    }
}

/// Training trace as a table, one round per line.
///
/// Columns: `t, lambda_0 .. lambda_{m-1}, policy, x_r, x_c0 .. x_c{m-1},
/// lagrangian, target_r, target_c0 .. target_c{m-1}, active,
/// stored_params, status`. Target cells are empty before the first export.
pub fn trace_to_table(trace: &TrainTrace) -> Result<String> {
    let m = trace.metadata.m;
    let mut w = csv_writer();
    let mut header = vec!["t".to_string()];
    header.extend((0..m).map(|k| format!("lambda_{k}")));
    header.push("policy".into());
    header.push("x_r".into());
    header.extend((0..m).map(|k| format!("x_c{k}")));
    header.push("lagrangian".into());
    header.push("target_r".into());
    header.extend((0..m).map(|k| format!("target_c{k}")));
    header.extend(["active", "stored_params", "status"].map(String::from));
    w.write_record(&header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for r in &trace.records {
        let mut row = vec![r.t.to_string()];
        row.extend(r.lambda.iter().map(|l| format_real(*l)));
        row.push(r.policy.0.to_string());
        row.extend(r.x_pi.as_slice().iter().map(|v| format_real(*v)));
        row.push(format_real(r.lagrangian));
        match &r.target {
            Some(x) => row.extend(x.as_slice().iter().map(|v| format_real(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), m + 1)),
        }
        row.push(r.active.to_string());
        row.push(r.stored_params.to_string());
        row.push(r.status.name().into());
        w.write_record(&row).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?)
        .expect("csv output is utf-8");
    Ok(table_header(TRACE_MAGIC, &to_json_line(&trace.metadata)?) + &body)
}

pub fn save_trace(path: &Path, trace: &TrainTrace) -> Result<()> {
    write_atomic(path, trace_to_table(trace)?.as_bytes())
}

pub fn load_trace(path: &Path) -> Result<TrainTrace> {
    let text = read_to_string(path)?;
    let (meta, body) = split_header(path, &text, TRACE_MAGIC)?;
    let metadata: TraceMetadata = serde_json::from_str(meta).map_err(|e| csv_error(path, e))?;
    let m = metadata.m;
    let mut reader = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let n_cols = reader.headers().map_err(|e| csv_error(path, e))?.len();
    if n_cols != 3 * m + 8 {
        return Err(Error::format(path, format!("expected {} columns, found {n_cols}", 3 * m + 8)));
    }
    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let mut row = Row { path, index: i, cells: rec.iter() };
        let t = row.parse("t")?;
        let lambda = row.reals(m, "lambda")?;
        let policy = PolicyId(row.parse("policy")?);
        let x_pi = MeasurementVector::new(row.reals(m + 1, "x")?)?;
        let lagrangian = row.parse("lagrangian")?;
        let target_cells: Vec<Option<&str>> = (0..=m).map(|_| row.cells.next()).collect();
        let target = if target_cells.iter().all(|c| c.is_some_and(str::is_empty)) {
            None
        } else {
            Some(MeasurementVector::new(
                target_cells
                    .into_iter()
                    .map(|c| parse_field::<f64>(path, i, "target", c))
                    .collect::<Result<Vec<f64>>>()?,
            )?)
        };
        let active = row.parse("active")?;
        let stored_params = row.parse("stored_params")?;
        let status = match row.cells.next() {
            Some("exported") => RoundStatus::Exported,
            Some("held") => RoundStatus::Held,
            Some("failed") => RoundStatus::Failed,
            other => return Err(Error::format(path, format!("row {i}: unknown status {other:?}"))),
        };
        records.push(RoundRecord {
            t,
            lambda,
            policy,
            x_pi,
            lagrangian,
            target,
            active,
            stored_params,
            status,
        });
    }
    Ok(TrainTrace { metadata, records })
}

struct Row<'a, I> {
    path: &'a Path,
    index: usize,
    cells: I,
}

impl<'a, 'r, I: Iterator<Item = &'r str>> Row<'a, I> {
    fn parse<T: std::str::FromStr>(&mut self, name: &str) -> Result<T> {
        parse_field(self.path, self.index, name, self.cells.next())
    }

    fn reals(&mut self, n: usize, name: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.parse(name)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{collect_dataset, example1_cmdp, marketing_cmdp, StochasticPolicy};
    use crate::learner::{train, MixerKind, PolicyParams, Problem, TrainConfig};

    fn mv(v: &[f64]) -> MeasurementVector {
        MeasurementVector::new(v.to_vec()).unwrap()
    }

    fn two_policy_set() -> (AimPolicy, Vec<PolicyRecord>) {
        let mu = AimPolicy::from_parts(
            vec![
                ActivePolicy {
                    policy: PolicyId(1),
                    x: mv(&[0.0, 0.0]),
                },
                ActivePolicy {
                    policy: PolicyId(2),
                    x: mv(&[1.0, 1.0]),
                },
            ],
            vec![0.7, 0.3],
            mv(&[0.3, 0.3]),
        )
        .unwrap();
        let records = (1..=2)
            .map(|i| PolicyRecord {
                id: PolicyId(i),
                params: PolicyParams::Tabular {
                    n_actions: 2,
                    actions: vec![i as usize - 1, 0],
                },
            })
            .collect();
        (mu, records)
    }

    #[test]
    fn reals_use_seventeen_digits() {
        assert_eq!(format_real(0.1), "1.0000000000000001e-1");
        assert_eq!(format_real(1.0), "1.0000000000000000e0");
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789, f64::MIN_POSITIVE] {
            assert_eq!(format_real(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn policy_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.json");
        let (mu, records) = two_policy_set();
        let tau = ConstraintSpec::new(vec![0.3]).unwrap();
        save_policy_set(&path, &mu, &records, &tau, &PolicySetMetadata::default()).unwrap();
        let loaded = load_policy_set(&path).unwrap();
        assert_eq!(loaded.policy, mu);
        assert_eq!(loaded.policies[1].actions(), &[1, 0]);
        let first = fs::read(&path).unwrap();
        save_policy_set(&path, &mu, &records, &tau, &PolicySetMetadata::default()).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn single_policy_set_has_unit_weight() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.json");
        let mu = AimPolicy::single(PolicyId(4), mv(&[1.0, 0.5]));
        let rec = PolicyRecord {
            id: PolicyId(4),
            params: PolicyParams::Tabular {
                n_actions: 3,
                actions: vec![2, 1],
            },
        };
        let tau = ConstraintSpec::new(vec![1.0]).unwrap();
        save_policy_set(&path, &mu, &[rec], &tau, &PolicySetMetadata::default()).unwrap();
        let file: PolicySetFile = load_json(&path).unwrap();
        assert_eq!(file.policies.len(), 1);
        assert_eq!(file.weights, vec![1.0]);
    }

    #[test]
    fn bad_weights_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let (mu, records) = two_policy_set();
        let tau = ConstraintSpec::new(vec![0.3]).unwrap();
        save_policy_set(&path, &mu, &records, &tau, &PolicySetMetadata::default()).unwrap();
        let text = fs::read_to_string(&path).unwrap();

        let tampered = text.replace("6.9999999999999996e-1", "6.0000000000000000e-1");
        assert_ne!(tampered, text);
        fs::write(&path, &tampered).unwrap();
        assert!(matches!(load_policy_set(&path), Err(Error::Invariant(_))));

        let future = text.replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&path, future).unwrap();
        assert!(matches!(
            load_policy_set(&path),
            Err(Error::UnsupportedVersion { found: 2, supported: 1 })
        ));

        let unchecked = AimPolicy::from_parts_unchecked(mu.active().to_vec(), vec![0.6, 0.39], mv(&[0.3, 0.3]));
        let fresh = dir.path().join("never.json");
        assert!(save_policy_set(&fresh, &unchecked, &records, &tau, &PolicySetMetadata::default()).is_err());
        assert!(!fresh.exists());
    }

    #[test]
    fn missing_parameters_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let (mu, records) = two_policy_set();
        let tau = ConstraintSpec::new(vec![0.3]).unwrap();
        let path = dir.path().join("x.json");
        assert!(save_policy_set(&path, &mu, &records[..1], &tau, &PolicySetMetadata::default()).is_err());
    }

    #[test]
    fn dataset_round_trips_in_both_formats() {
        let (cmdp, _) = marketing_cmdp(&Default::default()).unwrap();
        let behavior = StochasticPolicy::uniform(cmdp.n_states(), cmdp.n_actions());
        let ds = collect_dataset(&cmdp, &behavior, 50, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for name in ["d.csv", "d.json"] {
            let path = dir.path().join(name);
            save_dataset(&path, &ds).unwrap();
            assert_eq!(load_dataset(&path).unwrap(), ds);
        }
    }

    #[test]
    fn trace_and_cmdp_round_trip() {
        let (cmdp, tau) = example1_cmdp(0.3).unwrap();
        let out = train(
            Problem::Model(&cmdp),
            &tau,
            &TrainConfig {
                rounds: 120,
                export_every: 7,
                lambda_update_every: 3,
                mixer: MixerKind::AimGreedy,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        save_trace(&path, &out.trace).unwrap();
        assert_eq!(load_trace(&path).unwrap(), out.trace);

        let path = dir.path().join("cmdp.json");
        save_cmdp(&path, &cmdp, Some(&tau)).unwrap();
        let (back, back_tau) = load_cmdp(&path).unwrap();
        assert_eq!(back, cmdp);
        assert_eq!(back_tau.unwrap(), tau);
    }
}
