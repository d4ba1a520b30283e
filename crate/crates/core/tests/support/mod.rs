//! Dense reference implementation of the toy transformer on nalgebra
//! matrices, shared by the evaluator tests.

// Each including test target uses a different subset.
#![allow(dead_code)]

use std::collections::BTreeMap;

use cocktail::checkpoint::{Dtype, TensorMap};
use cocktail::eval::{expected_tensors, ArchKind, ToyArchConfig, LAYER_NORM_EPS};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Weights = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

/// Random weights of a visible scale (std 0.4), non-trivial gains and biases.
/// Values are rounded through f32 so the oracle sees what the map stores.
pub fn random_weights(cfg: &ToyArchConfig, seed: u64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.4).unwrap();
    expected_tensors(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let offset = if name.ends_with(".g") { 1.0 } else { 0.0 };
            let values = (0..n)
                .map(|_| (offset + normal.sample(&mut rng)) as f32 as f64)
                .collect();
            (name, (shape, values))
        })
        .collect()
}

pub fn to_map(weights: &Weights) -> TensorMap {
    let mut b = TensorMap::builder();
    for (name, (shape, values)) in weights {
        b.insert_f64(name.clone(), Dtype::F32, shape.clone(), values).unwrap();
    }
    b.finish()
}

/// Decoded copy of a map's tensors.
pub fn weights_of(map: &TensorMap) -> Weights {
    map.metas()
        .map(|m| (m.name.clone(), (m.shape.clone(), map.to_f64(&m.name).unwrap())))
        .collect()
}

pub struct Oracle<'a> {
    pub cfg: &'a ToyArchConfig,
    pub w: &'a Weights,
}

impl Oracle<'_> {
    pub fn mat(&self, name: &str) -> DMatrix<f64> {
        let (shape, v) = &self.w[name];
        DMatrix::from_row_slice(shape[0], shape[1], v)
    }

    pub fn vec(&self, name: &str) -> DVector<f64> {
        DVector::from_column_slice(&self.w[name].1)
    }

    pub fn layer_norm(&self, x: &DMatrix<f64>, prefix: &str) -> DMatrix<f64> {
        let g = self.vec(&format!("{prefix}.g"));
        let b = self.vec(&format!("{prefix}.b"));
        let mut out = x.clone();
        for mut row in out.row_iter_mut() {
            let mean = row.mean();
            let var = row.map(|v| (v - mean).powi(2)).mean();
            let centered = row.map(|v| (v - mean) / (var + LAYER_NORM_EPS).sqrt());
            for j in 0..row.len() {
                row[j] = centered[j] * g[j] + b[j];
            }
        }
        out
    }

    pub fn hidden(&self, ids: &[u32]) -> DMatrix<f64> {
        let d = self.cfg.d_model;
        let tok = self.mat("tok_emb");
        let pos = self.mat("pos_emb");
        let t = ids.len();
        let mut x = DMatrix::from_fn(t, d, |i, j| tok[(ids[i] as usize, j)] + pos[(i, j)]);
        let causal = self.cfg.kind == ArchKind::Decoder;
        let hd = d / self.cfg.n_heads;
        for l in 0..self.cfg.n_layers {
            let p = format!("blocks.{l}");
            let h = self.layer_norm(&x, &format!("{p}.ln1"));
            let q = &h * self.mat(&format!("{p}.attn.wq"));
            let k = &h * self.mat(&format!("{p}.attn.wk"));
            let v = &h * self.mat(&format!("{p}.attn.wv"));
            let mut heads = DMatrix::zeros(t, d);
            for head in 0..self.cfg.n_heads {
                let qh = q.columns(head * hd, hd);
                let kh = k.columns(head * hd, hd);
                let vh = v.columns(head * hd, hd);
                let mut scores = (qh * kh.transpose()) / (hd as f64).sqrt();
                for i in 0..t {
                    let visible = if causal { i + 1 } else { t };
                    let max = (0..visible).map(|j| scores[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = (0..visible).map(|j| (scores[(i, j)] - max).exp()).sum();
                    for j in 0..t {
                        scores[(i, j)] = if j < visible { (scores[(i, j)] - max).exp() / total } else { 0.0 };
                    }
                }
                heads.columns_mut(head * hd, hd).copy_from(&(scores * vh));
            }
            x += heads * self.mat(&format!("{p}.attn.wo"));
            let h = self.layer_norm(&x, &format!("{p}.ln2"));
            let b1 = self.vec(&format!("{p}.mlp.b1")).transpose();
            let mut a = &h * self.mat(&format!("{p}.mlp.w1"));
            for mut row in a.row_iter_mut() {
                row += &b1;
            }
            // tanh-approximated GELU
            a.apply(|v| *v = 0.5 * *v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (*v + 0.044715 * v.powi(3))).tanh()));
            let b2 = self.vec(&format!("{p}.mlp.b2")).transpose();
            let mut m = a * self.mat(&format!("{p}.mlp.w2"));
            for mut row in m.row_iter_mut() {
                row += &b2;
            }
            x += m;
        }
        self.layer_norm(&x, "ln_f")
    }

    /// Mean-pooled final hidden state, L2-normalised.
    pub fn embed(&self, ids: &[u32]) -> DVector<f64> {
        let mean = self.hidden(ids).row_mean().transpose();
        let norm = mean.norm();
        mean / norm
    }

    pub fn logits(&self, ids: &[u32]) -> DMatrix<f64> {
        let mut z = self.hidden(ids) * self.mat("head.w");
        let b = self.vec("head.b").transpose();
        for mut row in z.row_iter_mut() {
            row += &b;
        }
        z
    }
}
