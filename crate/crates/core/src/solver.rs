//! Merging weights from few-shot losses.
//!
//! Each candidate model is scored on a small held-out set from the target
//! domain; its weight is `softmax(-loss / tau)` over the candidate pool.
//! Lower loss means more weight, and `tau` controls how sharply the mass
//! concentrates on the best candidate.

use std::io::BufRead;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

/// Temperature used when none is given, in nats.
pub const DEFAULT_TAU: f64 = 1.0;

/// Task id given to pooled example sets.
pub const UNIFIED_TASK_ID: &str = "unified";

#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error("tau must be positive (got {0})")]
    Tau(f64),
    #[error("loss report has no candidates")]
    EmptyReport,
    #[error("candidate {id:?}: loss {value} is not finite")]
    NonFiniteLoss { id: String, value: f64 },
    #[error("candidate {id:?}: loss {value} is negative")]
    NegativeLoss { id: String, value: f64 },
    #[error("candidate {0:?} has no losses")]
    NoLosses(String),
    #[error("duplicate candidate {0:?}")]
    DuplicateCandidate(String),
    #[error("candidate {0:?} is not in the report")]
    MissingCandidate(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("few-shot set: {0}")]
    Examples(String),
    #[error("cannot pool decoder and encoder examples")]
    MixedForms,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleForm {
    Decoder,
    Encoder,
}

/// One held-out example, in either prompt/answer or retrieval form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Example {
    Decoder {
        input: String,
        target: String,
    },
    Encoder {
        query: String,
        pos: Vec<String>,
        #[serde(default)]
        neg: Vec<String>,
    },
}

impl Example {
    pub fn form(&self) -> ExampleForm {
        match self {
            Example::Decoder { .. } => ExampleForm::Decoder,
            Example::Encoder { .. } => ExampleForm::Encoder,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        match self {
            Example::Decoder { target, .. } if target.is_empty() => {
                Err("decoder example has an empty target".into())
            }
            Example::Encoder { pos, .. } if pos.is_empty() => {
                Err("encoder example has no positive passage".into())
            }
            _ => Ok(()),
        }
    }
}

/// Held-out examples from one task, all of one form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSet {
    task_id: String,
    examples: Vec<Example>,
}

impl FewShotSet {
    pub fn new(task_id: impl Into<String>, examples: Vec<Example>) -> Result<Self> {
        if examples.is_empty() {
            return Err(SolverError::Examples("set is empty".into()));
        }
        let form = examples[0].form();
        for (i, e) in examples.iter().enumerate() {
            e.check()
                .map_err(|msg| SolverError::Examples(format!("example {i}: {msg}")))?;
            if e.form() != form {
                return Err(SolverError::MixedForms);
            }
        }
        Ok(Self {
            task_id: task_id.into(),
            examples,
        })
    }

    /// Reads one example per non-blank line. Decoder rows are
    /// `{"input": .., "target": ..}`; encoder rows are
    /// `{"query": .., "pos": [..], "neg": [..]}`.
    pub fn from_jsonl(task_id: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |source| SolverError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = std::fs::File::open(path).map_err(io)?;
        let mut examples = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let example: Example = serde_json::from_str(&line).map_err(|e| {
                SolverError::Schema(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            examples.push(example);
        }
        Self::new(task_id, examples)
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn form(&self) -> ExampleForm {
        self.examples[0].form()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Concatenates sets in input order under the task id `"unified"`, for a
/// single merged model serving every task.
pub fn pool_examples(sets: &[FewShotSet]) -> Result<FewShotSet> {
    let first = sets
        .first()
        .ok_or_else(|| SolverError::Examples("nothing to pool".into()))?;
    if sets.iter().any(|s| s.form() != first.form()) {
        return Err(SolverError::MixedForms);
    }
    let examples = sets.iter().flat_map(|s| s.examples.iter().cloned()).collect();
    FewShotSet::new(UNIFIED_TASK_ID, examples)
}

/// Per-example losses of one candidate (nats) and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLosses {
    pub losses: Vec<f64>,
    pub aggregate: f64,
}

impl CandidateLosses {
    fn new(id: &str, losses: Vec<f64>) -> Result<Self> {
        if losses.is_empty() {
            return Err(SolverError::NoLosses(id.to_string()));
        }
        for &value in &losses {
            if !value.is_finite() {
                return Err(SolverError::NonFiniteLoss { id: id.to_string(), value });
            }
            if value < 0.0 {
                return Err(SolverError::NegativeLoss { id: id.to_string(), value });
            }
        }
        let aggregate = losses.iter().sum::<f64>() / losses.len() as f64;
        Ok(Self { losses, aggregate })
    }
}

/// Few-shot losses per candidate, in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossReport {
    format_version: u32,
    candidates: IndexMap<String, CandidateLosses>,
}

#[derive(Deserialize)]
struct RawReport {
    candidates: IndexMap<String, RawCandidate>,
}

#[derive(Deserialize)]
struct RawCandidate {
    losses: Vec<f64>,
}

impl LossReport {
    pub fn new() -> Self {
        Self {
            format_version: crate::FORMAT_VERSION,
            candidates: IndexMap::new(),
        }
    }

    /// Adds a candidate; the aggregate is the mean of `losses`.
    pub fn insert(&mut self, id: impl Into<String>, losses: Vec<f64>) -> Result<()> {
        let id = id.into();
        if self.candidates.contains_key(&id) {
            return Err(SolverError::DuplicateCandidate(id));
        }
        let entry = CandidateLosses::new(&id, losses)?;
        self.candidates.insert(id, entry);
        Ok(())
    }

    pub fn from_pairs<I, S>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut report = Self::new();
        for (id, losses) in pairs {
            report.insert(id, losses)?;
        }
        Ok(report)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CandidateLosses> {
        self.candidates.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &CandidateLosses)> {
        self.candidates.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.candidates.keys().map(String::as_str)
    }

    pub fn aggregates(&self) -> IndexMap<String, f64> {
        self.candidates
            .iter()
            .map(|(k, v)| (k.clone(), v.aggregate))
            .collect()
    }

    /// Parses `{"candidates": {id: {"losses": [..]}}}`. Aggregates present in
    /// the input are ignored and recomputed.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawReport =
            serde_json::from_str(text).map_err(|e| SolverError::Schema(e.to_string()))?;
        if raw.candidates.is_empty() {
            return Err(SolverError::Schema("\"candidates\" is empty".into()));
        }
        Self::from_pairs(raw.candidates.into_iter().map(|(k, v)| (k, v.losses)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Reads a loss report produced by any external scoring pipeline.
pub fn load_external_losses(path: impl AsRef<Path>) -> Result<LossReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| SolverError::Io {
        path: path.display().to_string(),
        source,
    })?;
    LossReport::from_json(&text)
}

/// Removes the target's own entry so the softmax ranges over the candidate
/// pool only.
pub fn drop_target_candidate(report: &LossReport, target_id: &str) -> Result<LossReport> {
    if !report.candidates.contains_key(target_id) {
        return Err(SolverError::MissingCandidate(target_id.to_string()));
    }
    let mut out = report.clone();
    out.candidates.shift_remove(target_id);
    Ok(out)
}

/// Solved merging weights, keyed by candidate id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    #[serde(default = "format_version")]
    pub format_version: u32,
    pub tau: f64,
    pub weights: IndexMap<String, f64>,
    /// Aggregate losses the weights were solved from.
    #[serde(default)]
    pub losses: IndexMap<String, f64>,
    #[serde(default)]
    pub joint: bool,
}

fn format_version() -> u32 {
    crate::FORMAT_VERSION
}

impl WeightVector {
    pub fn values(&self) -> Vec<f64> {
        self.weights.values().copied().collect()
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.weights.get(id).copied()
    }
}

/// `softmax(-losses / tau)` with the maximum logit subtracted first.
///
/// Weights of candidates far worse than the best may underflow to exactly 0.
pub fn softmax_weights(losses: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(SolverError::Tau(tau));
    }
    if losses.is_empty() {
        return Err(SolverError::EmptyReport);
    }
    if let Some(&value) = losses.iter().find(|l| !l.is_finite()) {
        return Err(SolverError::NonFiniteLoss { id: String::new(), value });
    }
    let logits: Vec<f64> = losses.iter().map(|l| -l / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Weights over every candidate in `report`, in report order.
pub fn solve_weights(report: &LossReport, tau: f64) -> Result<WeightVector> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(SolverError::Tau(tau));
    }
    if report.is_empty() {
        return Err(SolverError::EmptyReport);
    }
    for (id, c) in report.iter() {
        if !c.aggregate.is_finite() {
            return Err(SolverError::NonFiniteLoss { id: id.to_string(), value: c.aggregate });
        }
    }
    let aggregates: Vec<f64> = report.iter().map(|(_, c)| c.aggregate).collect();
    let weights = softmax_weights(&aggregates, tau)?;
    Ok(WeightVector {
        format_version: crate::FORMAT_VERSION,
        tau,
        weights: report.ids().map(String::from).zip(weights).collect(),
        losses: report.aggregates(),
        joint: false,
    })
}
