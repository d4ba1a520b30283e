use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tasks::Dataset;
use super::{LabError, Result};
use crate::checkpoint::{Dtype, TensorMap};

/// Tensor names in layer order: two tanh hidden layers and a linear output.
pub const LAYER_NAMES: [&str; 3] = ["fc1", "fc2", "out"];

/// Dense layer, `w` is `[n_in, n_out]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Layer { n_in, n_out, w: vec![0.0; n_in * n_out], b: vec![0.0; n_out] }
    }

    /// `out[r] = x[r] @ w + b` for each row of `x`.
    fn forward(&self, x: &[f64], rows: usize, out: &mut Vec<f64>) {
        out.clear();
        out.resize(rows * self.n_out, 0.0);
        for r in 0..rows {
            let o = &mut out[r * self.n_out..(r + 1) * self.n_out];
            o.copy_from_slice(&self.b);
            for (i, &xi) in x[r * self.n_in..(r + 1) * self.n_in].iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let w = &self.w[i * self.n_out..(i + 1) * self.n_out];
                o.iter_mut().zip(w).for_each(|(o, &w)| *o += xi * w);
            }
        }
    }
}

/// Parameters of the lab's `d_in -> h -> h -> n_classes` tanh MLP.
///
/// Held in f64 while training; checkpoints store them as F32.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: [Layer; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

struct Activations {
    a1: Vec<f64>,
    a2: Vec<f64>,
    logits: Vec<f64>,
}

impl MlpParams {
    /// Weights ~ N(0, 1/fan_in), biases zero.
    pub fn init(d_in: usize, hidden: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |n_in: usize, n_out: usize| {
            let scale = 1.0 / (n_in as f64).sqrt();
            let mut l = Layer::zeros(n_in, n_out);
            l.w.iter_mut().for_each(|w| {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = z * scale;
            });
            l
        };
        MlpParams {
            layers: [layer(d_in, hidden), layer(hidden, hidden), layer(hidden, n_classes)],
        }
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams { layers: self.layers.clone().map(|l| Layer::zeros(l.n_in, l.n_out)) }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].n_out
    }

    pub fn n_classes(&self) -> usize {
        self.layers[2].n_out
    }

    /// `(name, shape)` of every tensor, sorted by name.
    pub fn tensor_shapes(d_in: usize, hidden: usize, n_classes: usize) -> Vec<(String, Vec<usize>)> {
        let dims = [(d_in, hidden), (hidden, hidden), (hidden, n_classes)];
        let mut out: Vec<(String, Vec<usize>)> = LAYER_NAMES
            .iter()
            .zip(dims)
            .flat_map(|(name, (i, o))| [(format!("{name}.b"), vec![o]), (format!("{name}.w"), vec![i, o])])
            .collect();
        out.sort();
        out
    }

    /// Every parameter, in a fixed order, for finite-difference checks.
    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b).copied()).collect()
    }

    pub fn flat_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn to_map(&self) -> Result<TensorMap> {
        let mut builder = TensorMap::builder();
        for (name, layer) in LAYER_NAMES.iter().zip(&self.layers) {
            builder.insert_f64(format!("{name}.w"), Dtype::F32, vec![layer.n_in, layer.n_out], &layer.w)?;
            builder.insert_f64(format!("{name}.b"), Dtype::F32, vec![layer.n_out], &layer.b)?;
        }
        Ok(builder.finish())
    }

    /// Requires exactly the MLP's tensor set with consistent shapes.
    pub fn from_map(map: &TensorMap) -> Result<Self> {
        let shape_of = |name: &str| -> Result<Vec<usize>> {
            map.meta(name)
                .map(|m| m.shape.clone())
                .ok_or_else(|| LabError::Shape(format!("missing tensor {name}")))
        };
        let w1 = shape_of("fc1.w")?;
        let w3 = shape_of("out.w")?;
        if w1.len() != 2 || w3.len() != 2 {
            return Err(LabError::Shape("weights must be rank 2".into()));
        }
        let (d_in, hidden, n_classes) = (w1[0], w1[1], w3[1]);
        let expected = Self::tensor_shapes(d_in, hidden, n_classes);
        let names: Vec<&str> = map.names().collect();
        if names.len() != expected.len() {
            return Err(LabError::Shape(format!("expected {} tensors, found {}", expected.len(), names.len())));
        }
        for (name, shape) in &expected {
            let actual = shape_of(name)?;
            if &actual != shape {
                return Err(LabError::Shape(format!("{name}: expected {shape:?}, found {actual:?}")));
            }
        }
        let dims = [(d_in, hidden), (hidden, hidden), (hidden, n_classes)];
        let mut layers = Vec::with_capacity(3);
        for (name, (i, o)) in LAYER_NAMES.iter().zip(dims) {
            layers.push(Layer {
                n_in: i,
                n_out: o,
                w: map.to_f64(&format!("{name}.w"))?,
                b: map.to_f64(&format!("{name}.b"))?,
            });
        }
        let layers: [Layer; 3] = layers.try_into().expect("three layers");
        Ok(MlpParams { layers })
    }

    fn check_width(&self, data: &Dataset) -> Result<()> {
        if data.d_in != self.d_in() {
            return Err(LabError::Shape(format!(
                "model expects {} inputs, data has {}",
                self.d_in(),
                data.d_in
            )));
        }
        if let Some(&y) = data.y.iter().find(|&&y| y >= self.n_classes()) {
            return Err(LabError::Shape(format!("label {y} out of range for {} classes", self.n_classes())));
        }
        Ok(())
    }

    fn activations(&self, x: &[f64], rows: usize) -> Activations {
        let (mut a1, mut a2, mut logits) = (Vec::new(), Vec::new(), Vec::new());
        self.layers[0].forward(x, rows, &mut a1);
        a1.iter_mut().for_each(|v| *v = v.tanh());
        self.layers[1].forward(&a1, rows, &mut a2);
        a2.iter_mut().for_each(|v| *v = v.tanh());
        self.layers[2].forward(&a2, rows, &mut logits);
        Activations { a1, a2, logits }
    }

    /// Logits for every row of `data`, row-major.
    pub fn logits(&self, data: &Dataset) -> Vec<f64> {
        self.activations(&data.x, data.len()).logits
    }

    /// Mean cross-entropy over `data` and its gradient.
    pub fn loss_and_gradient(&self, data: &Dataset) -> Result<(f64, MlpParams)> {
        self.check_width(data)?;
        if data.is_empty() {
            return Err(LabError::EmptyExamples);
        }
        let rows = data.len();
        let Activations { a1, a2, logits } = self.activations(&data.x, rows);
        let (h, c) = (self.hidden(), self.n_classes());
        let inv = 1.0 / rows as f64;
        let mut loss = 0.0;
        // dL/dlogits = (softmax - onehot) / rows
        let mut g3 = logits;
        for (r, g) in g3.chunks_mut(c).enumerate() {
            let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in g.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            let y = data.y[r];
            loss -= (g[y] / total).ln();
            g.iter_mut().for_each(|v| *v = *v / total * inv);
            g[y] -= inv;
        }
        let mut grad = self.zeros_like();
        let g2 = backprop(&self.layers[2], &mut grad.layers[2], &a2, &g3, rows, Some(&a2));
        let g1 = backprop(&self.layers[1], &mut grad.layers[1], &a1, &g2, rows, Some(&a1));
        backprop(&self.layers[0], &mut grad.layers[0], &data.x, &g1, rows, None);
        debug_assert_eq!(g2.len(), rows * h);
        Ok((loss * inv, grad))
    }
}

/// Accumulates the layer gradient and returns the delta for the layer below,
/// multiplied by `1 - a^2` when the input came out of a tanh.
fn backprop(
    layer: &Layer,
    grad: &mut Layer,
    input: &[f64],
    delta: &[f64],
    rows: usize,
    tanh_input: Option<&[f64]>,
) -> Vec<f64> {
    let (n_in, n_out) = (layer.n_in, layer.n_out);
    for r in 0..rows {
        let d = &delta[r * n_out..(r + 1) * n_out];
        grad.b.iter_mut().zip(d).for_each(|(g, &d)| *g += d);
        for (i, &x) in input[r * n_in..(r + 1) * n_in].iter().enumerate() {
            grad.w[i * n_out..(i + 1) * n_out]
                .iter_mut()
                .zip(d)
                .for_each(|(g, &d)| *g += x * d);
        }
    }
    let Some(act) = tanh_input else {
        return Vec::new();
    };
    let mut below = vec![0.0; rows * n_in];
    for r in 0..rows {
        let d = &delta[r * n_out..(r + 1) * n_out];
        for i in 0..n_in {
            let w = &layer.w[i * n_out..(i + 1) * n_out];
            let s: f64 = w.iter().zip(d).map(|(w, d)| w * d).sum();
            let a = act[r * n_in + i];
            below[r * n_in + i] = s * (1.0 - a * a);
        }
    }
    below
}

/// Mini-batch SGD on softmax cross-entropy, shuffling once per epoch with
/// `hyper.seed`.
pub fn train_mlp(init: &MlpParams, data: &Dataset, hyper: &TrainHyper) -> Result<MlpParams> {
    init.check_width(data)?;
    if hyper.batch_size == 0 {
        return Err(LabError::Config("batch_size must be positive".into()));
    }
    if !hyper.lr.is_finite() || hyper.lr < 0.0 {
        return Err(LabError::Config(format!("learning rate {} must be finite and non-negative", hyper.lr)));
    }
    if data.is_empty() {
        return Err(LabError::EmptyExamples);
    }
    let mut params = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let (loss, grad) = params.loss_and_gradient(&data.select(batch))?;
            if !loss.is_finite() {
                return Err(LabError::NonFiniteLoss { epoch, loss });
            }
            if hyper.lr == 0.0 {
                continue;
            }
            for (p, g) in params.layers.iter_mut().zip(&grad.layers) {
                p.w.iter_mut().zip(&g.w).for_each(|(p, g)| *p -= hyper.lr * g);
                p.b.iter_mut().zip(&g.b).for_each(|(p, g)| *p -= hyper.lr * g);
            }
        }
    }
    Ok(params)
}

/// Fraction of rows whose argmax class (lowest index on ties) is the label.
pub fn evaluate_accuracy(params: &MlpParams, data: &Dataset) -> Result<f64> {
    params.check_width(data)?;
    if data.is_empty() {
        return Err(LabError::EmptyExamples);
    }
    let c = params.n_classes();
    let logits = params.logits(data);
    let correct = logits
        .chunks(c)
        .zip(&data.y)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy in nats.
pub fn mlp_loss(params: &MlpParams, examples: &Dataset) -> Result<f64> {
    params.check_width(examples)?;
    if examples.is_empty() {
        return Err(LabError::EmptyExamples);
    }
    let c = params.n_classes();
    let logits = params.logits(examples);
    let total: f64 = logits
        .chunks(c)
        .zip(&examples.y)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    Ok(total / examples.len() as f64)
}
