use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ArchKind, EvalError, Result, ToyArchConfig};
use crate::checkpoint::{Dtype, TensorMap};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self (n x k) * rhs (k x m)`.
    fn matmul(&self, rhs: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, rhs.rows);
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (o, &b) in o.iter_mut().zip(rhs.row(k)) {
                    *o += aik * b;
                }
            }
        }
        out
    }

    fn add_row_vector(&mut self, v: &[f64]) {
        for r in 0..self.rows {
            self.row_mut(r).iter_mut().zip(v).for_each(|(x, b)| *x += b);
        }
    }

    fn add_assign(&mut self, other: &Matrix) {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

struct LayerNorm {
    gain: Vec<f64>,
    bias: Vec<f64>,
}

impl LayerNorm {
    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..x.rows {
            let row = out.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.gain).zip(&self.bias) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        out
    }
}

struct Block {
    ln1: LayerNorm,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ln2: LayerNorm,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

pub(crate) fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Forward-only transformer over `f64` copies of checkpoint weights.
pub struct ToyTransformer {
    config: ToyArchConfig,
    tok_emb: Matrix,
    pos_emb: Matrix,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Option<(Matrix, Vec<f64>)>,
}

/// Every tensor name and shape a checkpoint for `config` must contain.
pub fn expected_tensors(config: &ToyArchConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut out = vec![
        ("tok_emb".to_string(), vec![config.vocab_size, d]),
        ("pos_emb".to_string(), vec![config.max_seq_len, d]),
    ];
    for i in 0..config.n_layers {
        let p = format!("blocks.{i}");
        out.push((format!("{p}.ln1.g"), vec![d]));
        out.push((format!("{p}.ln1.b"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.attn.{w}"), vec![d, d]));
        }
        out.push((format!("{p}.ln2.g"), vec![d]));
        out.push((format!("{p}.ln2.b"), vec![d]));
        out.push((format!("{p}.mlp.w1"), vec![d, config.d_ff]));
        out.push((format!("{p}.mlp.b1"), vec![config.d_ff]));
        out.push((format!("{p}.mlp.w2"), vec![config.d_ff, d]));
        out.push((format!("{p}.mlp.b2"), vec![d]));
    }
    out.push(("ln_f.g".to_string(), vec![d]));
    out.push(("ln_f.b".to_string(), vec![d]));
    if config.kind == ArchKind::Decoder {
        out.push(("head.w".to_string(), vec![d, config.vocab_size]));
        out.push(("head.b".to_string(), vec![config.vocab_size]));
    }
    out.sort();
    out
}

/// Random weights for `config`: N(0, 0.02) matrices and embeddings, unit
/// layer-norm gains, zero biases. Stored as F32.
pub fn init_weights(config: &ToyArchConfig, seed: u64) -> Result<TensorMap> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let mut builder = TensorMap::builder();
    for (name, shape) in expected_tensors(config) {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = if name.ends_with(".g") {
            vec![1.0; n]
        } else if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
            vec![0.0; n]
        } else {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        builder.insert_f64(name, Dtype::F32, shape, &values)?;
    }
    Ok(builder.finish())
}

impl ToyTransformer {
    pub fn from_map(map: &TensorMap, config: &ToyArchConfig) -> Result<Self> {
        config.validate()?;
        let expected = expected_tensors(config);
        let mut problems = Vec::new();
        for (name, shape) in &expected {
            match map.meta(name) {
                None => problems.push(format!("{name}: missing")),
                Some(m) if &m.shape != shape => {
                    problems.push(format!("{name}: shape {:?}, expected {shape:?}", m.shape))
                }
                Some(m) if !m.dtype.is_floating() => {
                    problems.push(format!("{name}: dtype {} is not floating", m.dtype))
                }
                Some(_) => {}
            }
        }
        for name in map.names() {
            if !expected.iter().any(|(n, _)| n == name) {
                problems.push(format!("{name}: unexpected"));
            }
        }
        if !problems.is_empty() {
            return Err(EvalError::WeightMismatch(problems.join("; ")));
        }

        let vec = |name: &str| map.to_f64(name).map_err(EvalError::from);
        let mat = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            Ok(Matrix { rows, cols, data: vec(name)? })
        };
        let ln = |prefix: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                gain: vec(&format!("{prefix}.g"))?,
                bias: vec(&format!("{prefix}.b"))?,
            })
        };
        let d = config.d_model;
        let blocks = (0..config.n_layers)
            .map(|i| {
                let p = format!("blocks.{i}");
                Ok(Block {
                    ln1: ln(&format!("{p}.ln1"))?,
                    wq: mat(&format!("{p}.attn.wq"), d, d)?,
                    wk: mat(&format!("{p}.attn.wk"), d, d)?,
                    wv: mat(&format!("{p}.attn.wv"), d, d)?,
                    wo: mat(&format!("{p}.attn.wo"), d, d)?,
                    ln2: ln(&format!("{p}.ln2"))?,
                    w1: mat(&format!("{p}.mlp.w1"), d, config.d_ff)?,
                    b1: vec(&format!("{p}.mlp.b1"))?,
                    w2: mat(&format!("{p}.mlp.w2"), config.d_ff, d)?,
                    b2: vec(&format!("{p}.mlp.b2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = match config.kind {
            ArchKind::Decoder => Some((mat("head.w", d, config.vocab_size)?, vec("head.b")?)),
            ArchKind::Encoder => None,
        };
        Ok(Self {
            config: config.clone(),
            tok_emb: mat("tok_emb", config.vocab_size, d)?,
            pos_emb: mat("pos_emb", config.max_seq_len, d)?,
            blocks,
            ln_f: ln("ln_f")?,
            head,
        })
    }

    pub fn config(&self) -> &ToyArchConfig {
        &self.config
    }

    fn attention(&self, block: &Block, h: &Matrix, causal: bool) -> Matrix {
        let q = h.matmul(&block.wq);
        let k = h.matmul(&block.wk);
        let v = h.matmul(&block.wv);
        let t = h.rows;
        let heads = self.config.n_heads;
        let hd = self.config.d_model / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Matrix::zeros(t, self.config.d_model);
        let mut scores = vec![0.0; t];
        for head in 0..heads {
            let cols = head * hd..(head + 1) * hd;
            for i in 0..t {
                let visible = if causal { i + 1 } else { t };
                let qi = &q.row(i)[cols.clone()];
                for (j, s) in scores[..visible].iter_mut().enumerate() {
                    let kj = &k.row(j)[cols.clone()];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = scores[..visible].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in &mut scores[..visible] {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let oi = &mut out.data[i * self.config.d_model..(i + 1) * self.config.d_model];
                for (j, &p) in scores[..visible].iter().enumerate() {
                    let vj = &v.row(j)[cols.clone()];
                    for (o, &vv) in oi[cols.clone()].iter_mut().zip(vj) {
                        *o += p / total * vv;
                    }
                }
            }
        }
        out.matmul(&block.wo)
    }

    /// Final-layer-normed hidden states, one row per position. Decoders
    /// attend causally, encoders bidirectionally.
    pub(crate) fn hidden_states(&self, ids: &[u32]) -> Result<Matrix> {
        let t = ids.len();
        if t == 0 {
            return Err(EvalError::Sequence("empty token sequence".into()));
        }
        if t > self.config.max_seq_len {
            return Err(EvalError::Sequence(format!(
                "sequence of {t} tokens exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let d = self.config.d_model;
        let mut x = Matrix::zeros(t, d);
        for (pos, &id) in ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(EvalError::Sequence(format!(
                    "token id {id} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            let row = x.row_mut(pos);
            for ((o, a), b) in row
                .iter_mut()
                .zip(self.tok_emb.row(id as usize))
                .zip(self.pos_emb.row(pos))
            {
                *o = a + b;
            }
        }
        let causal = self.config.kind == ArchKind::Decoder;
        for block in &self.blocks {
            let h = block.ln1.apply(&x);
            x.add_assign(&self.attention(block, &h, causal));
            let h = block.ln2.apply(&x);
            let mut hidden = h.matmul(&block.w1);
            hidden.add_row_vector(&block.b1);
            hidden.data.iter_mut().for_each(|v| *v = gelu(*v));
            let mut mlp = hidden.matmul(&block.w2);
            mlp.add_row_vector(&block.b2);
            x.add_assign(&mlp);
        }
        Ok(self.ln_f.apply(&x))
    }

    /// Output-head logits, one row per position. Decoder only.
    pub(crate) fn logits(&self, ids: &[u32]) -> Result<Matrix> {
        let (w, b) = self
            .head
            .as_ref()
            .ok_or_else(|| EvalError::Kind("logits need a decoder".into()))?;
        let mut logits = self.hidden_states(ids)?.matmul(w);
        logits.add_row_vector(b);
        Ok(logits)
    }

    /// Row-wise logits as nested vectors, for inspection and tests.
    pub fn logits_rows(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>> {
        let m = self.logits(ids)?;
        Ok((0..m.rows).map(|r| m.row(r).to_vec()).collect())
    }

    /// Final hidden states as nested vectors.
    pub fn hidden_rows(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>> {
        let m = self.hidden_states(ids)?;
        Ok((0..m.rows).map(|r| m.row(r).to_vec()).collect())
    }

    /// L2-normalized mean of the final hidden states. An all-zero mean stays zero.
    pub fn embed(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let h = self.hidden_states(ids)?;
        let mut mean = vec![0.0; h.cols];
        for r in 0..h.rows {
            mean.iter_mut().zip(h.row(r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= h.rows as f64);
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            mean.iter_mut().for_each(|m| *m /= norm);
        }
        Ok(mean)
    }
}
