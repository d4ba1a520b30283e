//! Forgetting and recovery on synthetic tasks.
//!
//! A small MLP is trained on a mixture of tasks (the base), fine-tuned on each
//! task separately, and then merged back with the base and its peers. The
//! report records target-task and other-task accuracy for every merge.

mod mlp;
mod report;
mod tasks;

use indexmap::IndexMap;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{CheckpointError, TensorMap};
use crate::merge::{cocktail_merge, mono_specialist_merge, zero_shot_merge, MergeError, MergeMode};
use crate::solver::{solve_weights, LossReport, SolverError, WeightVector, DEFAULT_TAU};

pub use mlp::{evaluate_accuracy, mlp_loss, train_mlp, Layer, MlpParams, TrainHyper, LAYER_NAMES};
pub use report::{ExperimentReport, ReportHeader, ReportRow, SolvedWeights};
pub use tasks::{make_tasks, make_tasks_with, Dataset, SyntheticTask, TaskGeometry};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid lab config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty example set")]
    EmptyExamples,
    #[error("non-finite training loss {loss} in epoch {epoch}")]
    NonFiniteLoss { epoch: usize, loss: f64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<LabError>,
    },
}

pub type Result<T> = std::result::Result<T, LabError>;

trait Context<T> {
    fn context(self, f: impl FnOnce() -> String) -> Result<T>;
}

impl<T, E: Into<LabError>> Context<T> for std::result::Result<T, E> {
    fn context(self, f: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| LabError::Context { context: f(), source: Box::new(e.into()) })
    }
}

/// Everything except the seed that determines a run: task geometry, model
/// size and the two training recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub geometry: TaskGeometry,
    pub hidden: usize,
    /// Target-task rows included in the base model's training mixture; the
    /// base sees every training row of the other tasks.
    pub base_target_examples: usize,
    pub base_lr: f64,
    pub base_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub batch_size: usize,
}

impl Default for Scenario {
    /// The frozen scenario the lab's acceptance thresholds refer to.
    ///
    /// The target task is under-represented in the base mixture and has a
    /// larger fine-tuning set than its peers: the base is mediocre on it,
    /// fine-tuning overshoots on it and erodes the other tasks, and the peers
    /// stay close enough to the base that their few-shot losses are stable.
    fn default() -> Self {
        Scenario {
            geometry: TaskGeometry {
                n_tasks: 5,
                d_feat: 6,
                n_classes: 4,
                context: 3.0,
                separation: 4.0,
                sigma: 1.0,
                n_train: 200,
                target_train_multiplier: 5,
                n_dev: 100,
                n_test: 1000,
            },
            hidden: 16,
            base_target_examples: 40,
            base_lr: 0.1,
            base_epochs: 20,
            finetune_lr: 0.05,
            finetune_epochs: 10,
            batch_size: 16,
        }
    }
}

impl Scenario {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Scenario::default()),
            other => Err(LabError::Config(format!("unknown preset {other:?} (known: default)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(LabError::Config("hidden and batch_size must be positive".into()));
        }
        if self.base_target_examples == 0 || self.base_target_examples > self.geometry.n_train {
            return Err(LabError::Config(format!(
                "base_target_examples must be in 1..={}",
                self.geometry.n_train
            )));
        }
        for (name, lr) in [("base_lr", self.base_lr), ("finetune_lr", self.finetune_lr)] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(LabError::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// One experiment: the target is always task 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub seed: u64,
    pub scenario: Scenario,
    pub alpha_grid: Vec<f64>,
    /// Few-shot set sizes for weight solving, drawn from the front of the
    /// target's held-out split.
    pub example_counts: Vec<usize>,
    pub modes: Vec<MergeMode>,
    pub tau: f64,
}

impl LabConfig {
    pub fn new(seed: u64) -> Self {
        let scenario = Scenario::default();
        LabConfig {
            seed,
            example_counts: vec![5, scenario.geometry.n_dev],
            scenario,
            alpha_grid: default_alpha_grid(),
            modes: vec![MergeMode::MonoSpecialist, MergeMode::General],
            tau: DEFAULT_TAU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.alpha_grid.is_empty() || self.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(LabError::Config("alpha grid must be non-empty with values in [0, 1]".into()));
        }
        let n_dev = self.scenario.geometry.n_dev;
        if self.example_counts.is_empty() || self.example_counts.iter().any(|&n| n == 0 || n > n_dev) {
            return Err(LabError::Config(format!("example counts must be in 1..={n_dev}")));
        }
        if self.modes.is_empty() {
            return Err(LabError::Config("no merge modes selected".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(SolverError::Tau(self.tau).into());
        }
        Ok(())
    }
}

/// `0, 0.1, ..., 1`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Independent seed for one stage of a run.
fn stage_seed(seed: u64, stage: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng.next_u64()
}

// Task generation uses streams 1..=n_tasks; stages sit far above that.
const STAGE_INIT: u64 = 1 << 32;
const STAGE_BASE: u64 = STAGE_INIT + 1;
const STAGE_FINETUNE: u64 = STAGE_INIT + 1000;

pub const BASE_ID: &str = "base";

/// Checkpoint id of the model fine-tuned on `task_id`.
pub fn finetuned_id(task_id: &str) -> String {
    format!("ft-{task_id}")
}

struct Evaluator<'a> {
    tasks: &'a [SyntheticTask],
}

impl Evaluator<'_> {
    /// `(target accuracy, macro-average over the other tasks)`.
    fn score(&self, map: &TensorMap) -> Result<(f64, f64)> {
        let params = MlpParams::from_map(map)?;
        let accs = self
            .tasks
            .iter()
            .map(|t| evaluate_accuracy(&params, &t.test))
            .collect::<Result<Vec<f64>>>()?;
        let others = &accs[1..];
        Ok((accs[0], others.iter().sum::<f64>() / others.len() as f64))
    }
}

/// Trains base and fine-tuned models, merges them over the α grid and
/// example counts, and scores every model on the test splits.
pub fn run_forgetting_experiment(config: &LabConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let s = &config.scenario;
    let g = &s.geometry;
    let seed = config.seed;
    let tasks = make_tasks_with(seed, g).context(|| format!("seed {seed}: task generation"))?;
    let target = &tasks[0];

    let init = MlpParams::init(g.d_in(), s.hidden, g.n_classes, stage_seed(seed, STAGE_INIT));
    let mut mixture = target.train.head(s.base_target_examples);
    tasks[1..].iter().for_each(|t| mixture.extend(&t.train));
    let base_hyper = TrainHyper {
        lr: s.base_lr,
        epochs: s.base_epochs,
        batch_size: s.batch_size,
        seed: stage_seed(seed, STAGE_BASE),
    };
    let base_map = train_mlp(&init, &mixture, &base_hyper)
        .and_then(|p| p.to_map())
        .context(|| format!("seed {seed}: base training"))?;
    // Fine-tuning starts from the stored (F32) base so that merges at the
    // ends of the α range reproduce the stored models exactly.
    let base = MlpParams::from_map(&base_map)?;

    let mut finetuned = Vec::with_capacity(tasks.len());
    for (k, task) in tasks.iter().enumerate() {
        let hyper = TrainHyper {
            lr: s.finetune_lr,
            epochs: s.finetune_epochs,
            batch_size: s.batch_size,
            seed: stage_seed(seed, STAGE_FINETUNE + k as u64),
        };
        let map = train_mlp(&base, &task.train, &hyper)
            .and_then(|p| p.to_map())
            .context(|| format!("seed {seed}: fine-tuning on {}", task.task_id))?;
        finetuned.push(map);
    }
    let target_map = &finetuned[0];

    let eval = Evaluator { tasks: &tasks };
    let mut rows = Vec::new();
    let (t, o) = eval.score(&base_map)?;
    rows.push(ReportRow::reference("base", BASE_ID, t, o));
    let target_id = finetuned_id(&target.task_id);
    let (t, o) = eval.score(target_map)?;
    rows.push(ReportRow::reference("fine-tuned", &target_id, t, o));

    // Candidate pool for loss-derived weights: the base and the peers.
    let mut candidate_ids = vec![BASE_ID.to_string()];
    candidate_ids.extend(tasks[1..].iter().map(|t| finetuned_id(&t.task_id)));
    let candidates: Vec<&TensorMap> = std::iter::once(&base_map).chain(&finetuned[1..]).collect();
    let candidate_params = candidates
        .iter()
        .map(|m| MlpParams::from_map(m))
        .collect::<Result<Vec<_>>>()?;

    let mut solved = Vec::new();
    for &n in &config.example_counts {
        let examples = target.dev.head(n);
        let mut losses = LossReport::new();
        for (id, params) in candidate_ids.iter().zip(&candidate_params) {
            losses.insert(id.clone(), vec![mlp_loss(params, &examples)?])?;
        }
        let weights = solve_weights(&losses, config.tau).context(|| format!("seed {seed}: solving weights for n={n}"))?;
        solved.push(SolvedWeights { n_examples: n, weights });
    }

    let mono_pool = format!("{target_id}+{BASE_ID}");
    let full_pool = format!("{target_id}+{}", candidate_ids.join("+"));
    let peer_pool = candidate_ids.join("+");
    for &mode in &config.modes {
        match mode {
            MergeMode::MonoSpecialist => {
                for &alpha in &config.alpha_grid {
                    let merged = mono_specialist_merge(target_map, &base_map, alpha)
                        .context(|| format!("seed {seed}: mono merge at alpha {alpha}"))?;
                    let (t, o) = eval.score(&merged)?;
                    rows.push(ReportRow::merged(mode, Some(alpha), &mono_pool, None, t, o));
                }
            }
            MergeMode::General => {
                for sw in &solved {
                    let w = sw.weights.values();
                    for &alpha in &config.alpha_grid {
                        let merged = cocktail_merge(target_map, &candidates, &w, alpha)
                            .context(|| format!("seed {seed}: merge at alpha {alpha}, n={}", sw.n_examples))?;
                        let (t, o) = eval.score(&merged)?;
                        rows.push(ReportRow::merged(mode, Some(alpha), &full_pool, Some(sw.n_examples), t, o));
                    }
                }
            }
            MergeMode::NoFineTune => {
                for sw in &solved {
                    let merged = zero_shot_merge(&candidates, &sw.weights.values())
                        .context(|| format!("seed {seed}: zero-shot merge, n={}", sw.n_examples))?;
                    let (t, o) = eval.score(&merged)?;
                    rows.push(ReportRow::merged(mode, None, &peer_pool, Some(sw.n_examples), t, o));
                }
            }
        }
    }

    Ok(ExperimentReport {
        header: ReportHeader {
            format_version: crate::FORMAT_VERSION,
            tool: "cocktail".into(),
            version: crate::VERSION.into(),
            seed,
            target_task: target.task_id.clone(),
            other_tasks: tasks[1..].iter().map(|t| t.task_id.clone()).collect(),
            other_average: "macro".into(),
            tau: config.tau,
            scenario: s.clone(),
        },
        rows,
        weights: solved,
    })
}

/// Max absolute weight difference between two solutions over the same pool.
pub fn max_weight_delta(a: &WeightVector, b: &WeightVector) -> f64 {
    let ids: IndexMap<&str, ()> = a.weights.keys().chain(b.weights.keys()).map(|k| (k.as_str(), ())).collect();
    ids.keys()
        .map(|id| (a.get(id).unwrap_or(0.0) - b.get(id).unwrap_or(0.0)).abs())
        .fold(0.0, f64::max)
}
