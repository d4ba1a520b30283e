//! Few-shot loss evaluation for toy checkpoints.
//!
//! Decoders are scored by token cross-entropy on the answer tokens only;
//! encoders by an InfoNCE-style contrastive loss over cosine similarities.
//! Real large checkpoints are scored elsewhere and their losses fed in with
//! [`crate::solver::load_external_losses`].

mod transformer;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointError, TensorMap};
use crate::solver::{CandidateLosses, Example, FewShotSet, LossReport, SolverError};

pub use transformer::{expected_tensors, init_weights, ToyTransformer, LAYER_NORM_EPS};

/// Similarity temperature of the contrastive loss.
pub const CONTRASTIVE_TEMPERATURE: f64 = 0.02;

/// How text examples become token sequences; recorded in reports.
pub const PROMPT_FORMAT: &str =
    "byte-level: ids(input) ++ ids(target), loss on target positions only; encoder texts embedded independently";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid architecture: {0}")]
    Config(String),
    #[error("weights do not match the architecture: {0}")]
    WeightMismatch(String),
    #[error("{0}")]
    Sequence(String),
    #[error("{0}")]
    Kind(String),
    #[error("example {index}: {reason}")]
    Example { index: usize, reason: String },
    #[error("candidate {id:?}: {source}")]
    Candidate {
        id: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Decoder,
    Encoder,
}

/// Dimensions of the toy transformer. Both kinds use pre-layer-norm blocks,
/// learned token and absolute position embeddings, multi-head attention, a
/// GELU MLP and a final layer norm; decoders add an untied output head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyArchConfig {
    pub kind: ArchKind,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ToyArchConfig {
    /// 16-token vocabulary, two layers of width 8.
    pub fn tiny(kind: ArchKind) -> Self {
        Self {
            kind,
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
        }
    }

    /// Byte vocabulary, sized for short text fixtures.
    pub fn byte_level(kind: ArchKind) -> Self {
        Self {
            kind,
            vocab_size: 256,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 96,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(EvalError::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(EvalError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| EvalError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenizedExample {
    Decoder {
        input_ids: Vec<u32>,
        target_ids: Vec<u32>,
    },
    Encoder {
        query_ids: Vec<u32>,
        positive_ids: Vec<Vec<u32>>,
        negative_ids: Vec<Vec<u32>>,
    },
}

fn bytes(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Byte-level tokenization: every UTF-8 byte is one token id.
pub fn tokenize(example: &Example) -> TokenizedExample {
    match example {
        Example::Decoder { input, target } => TokenizedExample::Decoder {
            input_ids: bytes(input),
            target_ids: bytes(target),
        },
        Example::Encoder { query, pos, neg } => TokenizedExample::Encoder {
            query_ids: bytes(query),
            positive_ids: pos.iter().map(|p| bytes(p)).collect(),
            negative_ids: neg.iter().map(|n| bytes(n)).collect(),
        },
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn wrap(index: usize) -> impl FnOnce(EvalError) -> EvalError {
    move |e| EvalError::Example {
        index,
        reason: e.to_string(),
    }
}

/// Cross-entropy of one example: mean over target positions of
/// `-log softmax(logits)[gold]`, predicting each target token from the
/// position before it.
pub fn decoder_example_loss(model: &ToyTransformer, input_ids: &[u32], target_ids: &[u32]) -> Result<f64> {
    if target_ids.is_empty() {
        return Err(EvalError::Sequence("empty target".into()));
    }
    if input_ids.is_empty() {
        return Err(EvalError::Sequence(
            "empty input: the first target token has no position to be predicted from".into(),
        ));
    }
    let total = input_ids.len() + target_ids.len();
    if total > model.config().max_seq_len {
        return Err(EvalError::Sequence(format!(
            "sequence of {total} tokens exceeds max_seq_len {}",
            model.config().max_seq_len
        )));
    }
    let mut ids = input_ids.to_vec();
    ids.extend_from_slice(&target_ids[..target_ids.len() - 1]);
    let logits = model.logits(&ids)?;
    let first = input_ids.len() - 1;
    let sum: f64 = target_ids
        .iter()
        .enumerate()
        .map(|(j, &gold)| {
            let row = logits.row(first + j);
            log_sum_exp(row) - row[gold as usize]
        })
        .sum();
    Ok((sum / target_ids.len() as f64).max(0.0))
}

/// Contrastive loss of one query against its first positive and all
/// negatives, at [`CONTRASTIVE_TEMPERATURE`].
pub fn encoder_example_loss(
    model: &ToyTransformer,
    query_ids: &[u32],
    positive_ids: &[Vec<u32>],
    negative_ids: &[Vec<u32>],
) -> Result<f64> {
    let positive = positive_ids
        .first()
        .ok_or_else(|| EvalError::Sequence("no positive passage".into()))?;
    let q = model.embed(query_ids)?;
    let mut sims = Vec::with_capacity(1 + negative_ids.len());
    for passage in std::iter::once(positive).chain(negative_ids) {
        let p = model.embed(passage)?;
        let cos: f64 = q.iter().zip(&p).map(|(a, b)| a * b).sum();
        sims.push(cos / CONTRASTIVE_TEMPERATURE);
    }
    Ok((log_sum_exp(&sims) - sims[0]).max(0.0))
}

fn losses_with(
    model: &ToyTransformer,
    examples: &[TokenizedExample],
) -> Result<CandidateLosses> {
    let mut losses = Vec::with_capacity(examples.len());
    for (index, example) in examples.iter().enumerate() {
        let loss = match (model.config().kind, example) {
            (ArchKind::Decoder, TokenizedExample::Decoder { input_ids, target_ids }) => {
                decoder_example_loss(model, input_ids, target_ids)
            }
            (
                ArchKind::Encoder,
                TokenizedExample::Encoder { query_ids, positive_ids, negative_ids },
            ) => encoder_example_loss(model, query_ids, positive_ids, negative_ids),
            (kind, _) => Err(EvalError::Kind(format!(
                "example form does not match a {kind:?} architecture"
            ))),
        }
        .map_err(wrap(index))?;
        losses.push(loss);
    }
    if losses.is_empty() {
        return Err(EvalError::Sequence("no examples to score".into()));
    }
    let aggregate = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(CandidateLosses { losses, aggregate })
}

/// Per-example decoder losses of one checkpoint and their mean.
pub fn decoder_loss(
    weights: &TensorMap,
    config: &ToyArchConfig,
    examples: &[TokenizedExample],
) -> Result<CandidateLosses> {
    if config.kind != ArchKind::Decoder {
        return Err(EvalError::Kind("decoder_loss needs a decoder architecture".into()));
    }
    losses_with(&ToyTransformer::from_map(weights, config)?, examples)
}

/// Per-example contrastive losses of one checkpoint and their mean.
pub fn encoder_loss(
    weights: &TensorMap,
    config: &ToyArchConfig,
    examples: &[TokenizedExample],
) -> Result<CandidateLosses> {
    if config.kind != ArchKind::Encoder {
        return Err(EvalError::Kind("encoder_loss needs an encoder architecture".into()));
    }
    losses_with(&ToyTransformer::from_map(weights, config)?, examples)
}

/// Scores every candidate on `set`, one worker per candidate. The report
/// keeps the candidates' order.
pub fn score_candidates(
    candidates: &[(String, &TensorMap)],
    config: &ToyArchConfig,
    set: &FewShotSet,
) -> Result<LossReport> {
    config.validate()?;
    let examples: Vec<TokenizedExample> = set.examples().iter().map(tokenize).collect();
    let scored = candidates
        .par_iter()
        .map(|(id, map)| {
            let losses = match config.kind {
                ArchKind::Decoder => decoder_loss(map, config, &examples),
                ArchKind::Encoder => encoder_loss(map, config, &examples),
            };
            losses.map_err(|e| EvalError::Candidate {
                id: id.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = LossReport::new();
    for ((id, _), losses) in candidates.iter().zip(scored) {
        report.insert(id.clone(), losses.losses)?;
    }
    Ok(report)
}
