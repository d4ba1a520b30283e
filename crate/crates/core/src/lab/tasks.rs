use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabError, Result};

/// Row-major feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d_in: usize,
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn empty(d_in: usize) -> Self {
        Dataset { d_in, x: Vec::new(), y: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d_in..(i + 1) * self.d_in]
    }

    /// The first `n` rows (all of them if `n` exceeds the length).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            d_in: self.d_in,
            x: self.x[..n * self.d_in].to_vec(),
            y: self.y[..n].to_vec(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.d_in);
        for &i in indices {
            out.x.extend_from_slice(self.row(i));
            out.y.push(self.y[i]);
        }
        out
    }

    pub fn extend(&mut self, other: &Dataset) {
        assert_eq!(self.d_in, other.d_in, "feature width mismatch");
        self.x.extend_from_slice(&other.x);
        self.y.extend_from_slice(&other.y);
    }
}

/// One synthetic classification task.
///
/// Inputs are `[context | features]`: a one-hot context block of width
/// `n_tasks` marking which task the row belongs to, followed by a Gaussian
/// mixture over `d_feat` dimensions with task-specific class means.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub task_id: String,
    pub index: usize,
    pub n_classes: usize,
    /// Class means, `n_classes` rows of width `d_in`.
    pub means: Vec<Vec<f64>>,
    pub train: Dataset,
    /// Held-out split the few-shot merging examples are drawn from.
    pub dev: Dataset,
    pub test: Dataset,
}

impl SyntheticTask {
    pub fn d_in(&self) -> usize {
        self.train.d_in
    }
}

/// Shape of the task family. `separation` is the norm of every class mean
/// in the feature block; `context` scales the one-hot task marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGeometry {
    pub n_tasks: usize,
    pub d_feat: usize,
    pub n_classes: usize,
    pub context: f64,
    pub separation: f64,
    pub sigma: f64,
    pub n_train: usize,
    /// Task 0 gets `n_train * target_train_multiplier` training rows.
    pub target_train_multiplier: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

impl TaskGeometry {
    pub fn d_in(&self) -> usize {
        self.n_tasks + self.d_feat
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(LabError::Config(msg.to_string()));
        if self.n_tasks < 2 {
            return bad("n_tasks must be at least 2");
        }
        if self.d_feat == 0 {
            return bad("degenerate dims: no feature dimensions");
        }
        if self.n_classes < 2 {
            return bad("degenerate dims: n_classes must be at least 2");
        }
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 || self.target_train_multiplier == 0 {
            return bad("every split needs at least one row");
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return bad("sigma must be positive");
        }
        if !self.context.is_finite() || !self.separation.is_finite() {
            return bad("context and separation must be finite");
        }
        Ok(())
    }
}

/// Tasks with the default geometry for the given dims: `d_in` must leave room
/// for the `n_tasks`-wide context block.
pub fn make_tasks(seed: u64, n_tasks: usize, d_in: usize, n_classes: usize) -> Result<Vec<SyntheticTask>> {
    if d_in <= n_tasks {
        return Err(LabError::Config(format!(
            "degenerate dims: d_in {d_in} leaves no feature dimensions after {n_tasks} context dims"
        )));
    }
    let geometry = TaskGeometry {
        n_tasks,
        d_feat: d_in - n_tasks,
        n_classes,
        ..super::Scenario::default().geometry
    };
    make_tasks_with(seed, &geometry)
}

/// Each task draws from its own ChaCha stream, so task `k` depends only on
/// `(seed, k)` and the geometry.
pub fn make_tasks_with(seed: u64, geometry: &TaskGeometry) -> Result<Vec<SyntheticTask>> {
    geometry.validate()?;
    Ok((0..geometry.n_tasks).map(|k| make_task(seed, k, geometry)).collect())
}

fn make_task(seed: u64, k: usize, g: &TaskGeometry) -> SyntheticTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    let d_in = g.d_in();
    let means: Vec<Vec<f64>> = (0..g.n_classes)
        .map(|_| {
            let mut mean = vec![0.0; d_in];
            mean[k] = g.context;
            let proto: Vec<f64> = (0..g.d_feat).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = proto.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for (m, p) in mean[g.n_tasks..].iter_mut().zip(&proto) {
                *m = p / norm * g.separation;
            }
            mean
        })
        .collect();
    let n_train = if k == 0 { g.n_train * g.target_train_multiplier } else { g.n_train };
    let mut sample = |n: usize| {
        let mut y: Vec<usize> = (0..n).map(|i| i % g.n_classes).collect();
        y.shuffle(&mut rng);
        let mut x = Vec::with_capacity(n * d_in);
        for &label in &y {
            for &m in &means[label] {
                let z: f64 = StandardNormal.sample(&mut rng);
                x.push(m + g.sigma * z);
            }
        }
        Dataset { d_in, x, y }
    };
    let train = sample(n_train);
    let dev = sample(g.n_dev);
    let test = sample(g.n_test);
    SyntheticTask {
        task_id: format!("task{k}"),
        index: k,
        n_classes: g.n_classes,
        means,
        train,
        dev,
        test,
    }
}
