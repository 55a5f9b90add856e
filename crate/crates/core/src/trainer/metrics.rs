//! Per-iteration diagnostics and their JSONL / CSV sinks.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::{FipoError, Result};

/// One training iteration's record. Keys are stable; see [`METRIC_KEYS`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub schema_version: u32,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Shaped reward mean over kept trajectories.
    #[serde(rename = "reward/mean")]
    pub reward_mean: f64,
    /// Raw verifier accuracy over every sampled trajectory, kept or not.
    #[serde(rename = "reward/accuracy")]
    pub reward_accuracy: f64,
    #[serde(rename = "response_length/min")]
    pub length_min: f64,
    #[serde(rename = "response_length/q25")]
    pub length_q25: f64,
    #[serde(rename = "response_length/median")]
    pub length_median: f64,
    #[serde(rename = "response_length/mean")]
    pub length_mean: f64,
    #[serde(rename = "response_length/q75")]
    pub length_q75: f64,
    #[serde(rename = "response_length/max")]
    pub length_max: f64,
    pub policy_kl: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    #[serde(rename = "clip/policy_fraction")]
    pub policy_clip_fraction: f64,
    #[serde(rename = "clip/low_fraction")]
    pub low_clip_fraction: f64,
    #[serde(rename = "influence/mean_weight")]
    pub influence_mean_weight: f64,
    #[serde(rename = "influence/clip_fraction")]
    pub influence_clip_fraction: f64,
    #[serde(rename = "adv/length_weighted_mean")]
    pub length_weighted_mean_advantage: f64,
    pub sampled_batches: f64,
    pub ratio_overflows: u64,
    #[serde(rename = "eval/mean_at_k")]
    pub eval_mean_at_k: Option<f64>,
    #[serde(rename = "eval/consensus_at_k")]
    pub eval_consensus_at_k: Option<f64>,
    #[serde(rename = "eval/pass_at_k")]
    pub eval_pass_at_k: Option<f64>,
}

/// Every key of a metrics record, in file order.
pub const METRIC_KEYS: &[&str] = &[
    "schema_version",
    "step",
    "loss",
    "lr",
    "reward/mean",
    "reward/accuracy",
    "response_length/min",
    "response_length/q25",
    "response_length/median",
    "response_length/mean",
    "response_length/q75",
    "response_length/max",
    "policy_kl",
    "entropy",
    "grad_norm",
    "clip/policy_fraction",
    "clip/low_fraction",
    "influence/mean_weight",
    "influence/clip_fraction",
    "adv/length_weighted_mean",
    "sampled_batches",
    "ratio_overflows",
    "eval/mean_at_k",
    "eval/consensus_at_k",
    "eval/pass_at_k",
];

impl StepMetrics {
    /// True when every numeric field is finite and the length quantiles are
    /// ordered.
    pub fn is_well_formed(&self) -> bool {
        let scalars = [
            self.loss,
            self.lr,
            self.reward_mean,
            self.reward_accuracy,
            self.length_min,
            self.length_q25,
            self.length_median,
            self.length_mean,
            self.length_q75,
            self.length_max,
            self.policy_kl,
            self.entropy,
            self.grad_norm,
            self.policy_clip_fraction,
            self.low_clip_fraction,
            self.influence_mean_weight,
            self.influence_clip_fraction,
            self.length_weighted_mean_advantage,
            self.sampled_batches,
        ];
        let evals = [self.eval_mean_at_k, self.eval_consensus_at_k, self.eval_pass_at_k];
        scalars.iter().all(|v| v.is_finite())
            && evals.iter().flatten().all(|v| v.is_finite())
            && self.length_min <= self.length_q25
            && self.length_q25 <= self.length_median
            && self.length_median <= self.length_q75
            && self.length_q75 <= self.length_max
    }
}

/// Append-only JSONL writer.
pub struct MetricsSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| FipoError::io(path, e))?;
        Ok(MetricsSink {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| FipoError::io(path, e))?;
        Ok(MetricsSink {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.out, m)?;
        self.out.write_all(b"\n").map_err(|e| FipoError::io(&self.path, e))?;
        self.out.flush().map_err(|e| FipoError::io(&self.path, e))
    }
}

/// Reads a metrics file as raw JSON objects (tolerates extra keys).
pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<Map<String, Value>>> {
    let file = File::open(path).map_err(|e| FipoError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| FipoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(&line)? {
            Value::Object(m) => rows.push(m),
            _ => return Err(FipoError::Input(format!("{}:{}: not a JSON object", path.display(), i + 1))),
        }
    }
    Ok(rows)
}

fn csv_cell(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    }
}

/// Renders rows as CSV with the given column order.
pub fn rows_to_csv(rows: &[Map<String, Value>], keys: &[&str]) -> String {
    let mut out = keys.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = keys.iter().map(|k| csv_cell(row.get(*k))).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Mirrors a metrics JSONL file as CSV with [`METRIC_KEYS`] columns.
pub fn export_csv(jsonl: &Path, csv: &Path) -> Result<()> {
    let rows = read_metrics_jsonl(jsonl)?;
    std::fs::write(csv, rows_to_csv(&rows, METRIC_KEYS)).map_err(|e| FipoError::io(csv, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> StepMetrics {
        StepMetrics {
            schema_version: 1,
            step: 3,
            loss: -0.1,
            lr: 1e-3,
            reward_mean: 0.4,
            reward_accuracy: 0.3,
            length_min: 2.0,
            length_q25: 2.0,
            length_median: 3.0,
            length_mean: 3.5,
            length_q75: 4.0,
            length_max: 9.0,
            policy_kl: 1e-4,
            entropy: 1.2,
            grad_norm: 0.8,
            policy_clip_fraction: 0.01,
            low_clip_fraction: 0.0,
            influence_mean_weight: 1.01,
            influence_clip_fraction: 0.02,
            length_weighted_mean_advantage: 0.05,
            sampled_batches: 2.5,
            ratio_overflows: 0,
            eval_mean_at_k: None,
            eval_consensus_at_k: None,
            eval_pass_at_k: Some(0.9),
        }
    }

    #[test]
    fn serialized_keys_match_the_documented_list() {
        let v = serde_json::to_value(sample()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        let mut expected: Vec<&str> = METRIC_KEYS.to_vec();
        let mut got = keys.clone();
        expected.sort();
        got.sort();
        assert_eq!(got, expected);
        assert!(sample().is_well_formed());
    }

    #[test]
    fn jsonl_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut sink = MetricsSink::create(&p).unwrap();
        sink.write(&sample()).unwrap();
        sink.write(&StepMetrics { step: 4, ..sample() }).unwrap();
        drop(sink);
        let rows = read_metrics_jsonl(&p).unwrap();
        assert_eq!(rows.len(), 2);
        let back: StepMetrics = serde_json::from_value(Value::Object(rows[1].clone())).unwrap();
        assert_eq!(back.step, 4);
        let csv = rows_to_csv(&rows, METRIC_KEYS);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].split(',').count(), METRIC_KEYS.len());
        assert!(lines[1].ends_with(",,,0.9"));
    }
}
