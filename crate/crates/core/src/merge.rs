//! Weighted parameter averaging.
//!
//! All three forms reduce to one per-tensor kernel:
//!
//! ```text
//! general:    out = alpha * target + (1 - alpha) * sum_i w_i * candidate_i
//! mono:       out = alpha * target + (1 - alpha) * base
//! zero-shot:  out = sum_i w_i * candidate_i
//! ```
//!
//! Elements are accumulated in `f64` and rounded once to the output dtype.
//! Candidates are summed in order of content hash, so permuting the
//! (candidate, weight) pairs cannot change a single output bit. Terms whose
//! coefficient is exactly zero are skipped, which makes `alpha = 1` and
//! `alpha = 0` reproduce their input bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    hex, validate_compatibility, CheckpointError, CheckpointWriter, CompatReport, TensorMap,
    TensorSpec,
};

/// Tolerance on `|sum(w) - 1|` accepted by every merge entry point.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Default mixing factor between the target and the candidate pool.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum MergeError {
    #[error("incompatible checkpoints:\n{0}")]
    Incompatible(CompatReport),
    #[error("weights must sum to 1 (got {sum})")]
    Unnormalized { sum: f64 },
    #[error("weights must be finite and non-negative (got {0})")]
    InvalidWeight(f64),
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("alpha must lie in [0, 1] (got {0})")]
    Alpha(f64),
    #[error("{0}")]
    Recipe(String),
    #[error("non-floating tensor {0:?} differs across inputs")]
    NonFloatingDiffers(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("worker pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, MergeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeMode {
    /// Target plus a weighted candidate pool.
    #[serde(rename = "general")]
    General,
    /// Target plus its base model only.
    #[serde(rename = "mono")]
    MonoSpecialist,
    /// Weighted candidates, no target.
    #[serde(rename = "zero-shot")]
    NoFineTune,
}

impl MergeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeMode::General => "general",
            MergeMode::MonoSpecialist => "mono",
            MergeMode::NoFineTune => "zero-shot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub mode: MergeMode,
    pub alpha: f64,
    pub candidate_weights: Vec<f64>,
}

impl MergeRecipe {
    pub fn general(alpha: f64, candidate_weights: Vec<f64>) -> Self {
        Self {
            mode: MergeMode::General,
            alpha,
            candidate_weights,
        }
    }

    pub fn mono(alpha: f64) -> Self {
        Self {
            mode: MergeMode::MonoSpecialist,
            alpha,
            candidate_weights: vec![1.0],
        }
    }

    /// `alpha` is unused in this mode and recorded as 0.
    pub fn zero_shot(candidate_weights: Vec<f64>) -> Self {
        Self {
            mode: MergeMode::NoFineTune,
            alpha: 0.0,
            candidate_weights,
        }
    }

    pub fn validate(&self, has_target: bool, n_candidates: usize) -> Result<()> {
        match (self.mode, has_target) {
            (MergeMode::NoFineTune, true) => {
                return Err(MergeError::Recipe(
                    "zero-shot merges take no target model".into(),
                ))
            }
            (MergeMode::General | MergeMode::MonoSpecialist, false) => {
                return Err(MergeError::Recipe(format!(
                    "{} merges require a target model",
                    self.mode.as_str()
                )))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(MergeError::Alpha(self.alpha));
        }
        if n_candidates == 0 {
            return Err(MergeError::Recipe("at least one candidate is required".into()));
        }
        if self.mode == MergeMode::MonoSpecialist && n_candidates != 1 {
            return Err(MergeError::Recipe(format!(
                "mono merges take exactly one base model, got {n_candidates}"
            )));
        }
        if self.candidate_weights.len() != n_candidates {
            return Err(MergeError::WeightCount {
                expected: n_candidates,
                got: self.candidate_weights.len(),
            });
        }
        check_weights(&self.candidate_weights)
    }
}

/// Rejects negative or non-finite weights and sums off 1 by more than
/// [`WEIGHT_SUM_TOLERANCE`].
pub fn check_weights(weights: &[f64]) -> Result<()> {
    if let Some(&w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(MergeError::InvalidWeight(w));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(MergeError::Unnormalized { sum });
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct MergeOptions {
    /// Worker threads for per-tensor merging; `None` uses rayon's default.
    pub threads: Option<usize>,
}

struct Term<'a> {
    index: usize,
    weight: f64,
    map: &'a TensorMap,
}

/// A validated merge, ready to run against an output sink.
pub struct MergePlan<'a> {
    recipe: MergeRecipe,
    target: Option<&'a TensorMap>,
    target_hash: Option<[u8; 32]>,
    /// Candidates in summation order.
    terms: Vec<Term<'a>>,
    candidate_hashes: Vec<[u8; 32]>,
}

impl<'a> MergePlan<'a> {
    pub fn new(
        recipe: MergeRecipe,
        target: Option<&'a TensorMap>,
        candidates: &[&'a TensorMap],
    ) -> Result<Self> {
        recipe.validate(target.is_some(), candidates.len())?;
        let all: Vec<&TensorMap> = target.into_iter().chain(candidates.iter().copied()).collect();
        if all.len() > 1 {
            let report = validate_compatibility(&all);
            if !report.compatible {
                return Err(MergeError::Incompatible(report));
            }
        }
        let target_hash = target.map(TensorMap::content_hash).transpose()?;
        let candidate_hashes = candidates
            .iter()
            .map(|m| m.content_hash())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut terms: Vec<Term<'a>> = candidates
            .iter()
            .zip(&recipe.candidate_weights)
            .enumerate()
            .map(|(index, (map, &weight))| Term { index, weight, map })
            .collect();
        terms.sort_by(|a, b| {
            candidate_hashes[a.index]
                .cmp(&candidate_hashes[b.index])
                .then(a.weight.total_cmp(&b.weight))
        });
        Ok(Self {
            recipe,
            target,
            target_hash,
            terms,
            candidate_hashes,
        })
    }

    pub fn recipe(&self) -> &MergeRecipe {
        &self.recipe
    }

    /// Candidate indices (input order) in the order they are summed.
    pub fn summation_order(&self) -> Vec<usize> {
        self.terms.iter().map(|t| t.index).collect()
    }

    pub fn target_hash_hex(&self) -> Option<String> {
        self.target_hash.map(|h| hex(&h))
    }

    /// Content hashes of the candidates, in input order.
    pub fn candidate_hashes_hex(&self) -> Vec<String> {
        self.candidate_hashes.iter().map(|h| hex(h)).collect()
    }

    /// The map whose layout and dtypes the output inherits.
    fn reference(&self) -> &'a TensorMap {
        self.target.unwrap_or_else(|| {
            self.terms
                .iter()
                .min_by_key(|t| t.index)
                .expect("validated: at least one candidate")
                .map
        })
    }

    fn inputs(&self) -> impl Iterator<Item = &'a TensorMap> + '_ {
        self.target.into_iter().chain(self.terms.iter().map(|t| t.map))
    }

    /// Output bytes for one tensor. Resident memory is a few buffers the
    /// size of this tensor, independent of the number of inputs.
    pub fn merge_tensor(&self, name: &str) -> Result<Vec<u8>> {
        let reference = self.reference();
        let meta = reference
            .meta(name)
            .ok_or_else(|| CheckpointError::UnknownTensor(name.to_string()))?;

        if !meta.dtype.is_floating() {
            let bytes = reference.bytes(name)?.into_owned();
            for map in self.inputs() {
                if *map.bytes(name)? != *bytes {
                    return Err(MergeError::NonFloatingDiffers(name.to_string()));
                }
            }
            return Ok(bytes);
        }

        let mut scratch = Vec::with_capacity(meta.element_count());
        let mut pool: Option<Vec<f64>> = None;
        for term in &self.terms {
            if term.weight == 0.0 {
                continue;
            }
            meta.dtype.decode_f64(&term.map.bytes(name)?, &mut scratch);
            accumulate(&mut pool, term.weight, &scratch);
        }

        let out = match self.target {
            None => pool,
            Some(target) => {
                let alpha = self.recipe.alpha;
                let mut out = None;
                if alpha != 0.0 {
                    meta.dtype.decode_f64(&target.bytes(name)?, &mut scratch);
                    accumulate(&mut out, alpha, &scratch);
                }
                if alpha != 1.0 {
                    if let Some(pool) = pool {
                        accumulate(&mut out, 1.0 - alpha, &pool);
                    }
                }
                out
            }
        };
        let out = out.unwrap_or_else(|| vec![0.0; meta.element_count()]);
        let mut bytes = Vec::new();
        meta.dtype.encode_f64(&out, &mut bytes);
        Ok(bytes)
    }

    fn specs(&self) -> Vec<TensorSpec> {
        self.reference()
            .metas()
            .map(|m| TensorSpec {
                name: m.name.clone(),
                dtype: m.dtype,
                shape: m.shape.clone(),
            })
            .collect()
    }

    fn with_pool<R: Send>(&self, options: &MergeOptions, f: impl FnOnce() -> R + Send) -> Result<R> {
        match options.threads {
            None => Ok(f()),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| MergeError::Pool(e.to_string()))?;
                Ok(pool.install(f))
            }
        }
    }

    /// Runs the merge into an in-memory map.
    pub fn run(&self, options: &MergeOptions) -> Result<TensorMap> {
        let reference = self.reference();
        let names: Vec<&str> = reference.names().collect();
        let merged = self.with_pool(options, || {
            names
                .par_iter()
                .map(|name| self.merge_tensor(name).map(|b| (*name, b)))
                .collect::<Result<Vec<_>>>()
        })??;
        let mut builder = TensorMap::builder();
        for (name, bytes) in merged {
            let meta = reference.meta(name).expect("name from reference");
            builder.insert_bytes(name, meta.dtype, meta.shape.clone(), bytes)?;
        }
        for (k, v) in reference.metadata() {
            builder.metadata(k.clone(), v.clone());
        }
        Ok(builder.finish())
    }

    /// Streams the merge to a container file. At most one tensor per worker
    /// is in flight; the file appears only once every tensor is written.
    pub fn run_to_file(&self, path: impl AsRef<Path>, options: &MergeOptions) -> Result<()> {
        let reference = self.reference();
        let mut writer = CheckpointWriter::create(path, self.specs(), reference.metadata())?;
        let names: Vec<&str> = reference.names().collect();
        self.with_pool(options, || -> Result<()> {
            let window = rayon::current_num_threads().max(1);
            for chunk in names.chunks(window) {
                let merged = chunk
                    .par_iter()
                    .map(|name| self.merge_tensor(name))
                    .collect::<Result<Vec<_>>>()?;
                for (name, bytes) in chunk.iter().zip(merged) {
                    writer.write_tensor(name, &bytes)?;
                }
            }
            Ok(())
        })??;
        writer.finish()?;
        Ok(())
    }
}

fn accumulate(acc: &mut Option<Vec<f64>>, coef: f64, values: &[f64]) {
    match acc {
        None => *acc = Some(values.iter().map(|&v| coef * v).collect()),
        Some(acc) => acc
            .iter_mut()
            .zip(values)
            .for_each(|(a, &v)| *a += coef * v),
    }
}

/// `alpha * target + (1 - alpha) * sum_i w_i * candidate_i`.
pub fn cocktail_merge(
    target: &TensorMap,
    candidates: &[&TensorMap],
    weights: &[f64],
    alpha: f64,
) -> Result<TensorMap> {
    MergePlan::new(
        MergeRecipe::general(alpha, weights.to_vec()),
        Some(target),
        candidates,
    )?
    .run(&MergeOptions::default())
}

/// `alpha * target + (1 - alpha) * base`.
pub fn mono_specialist_merge(target: &TensorMap, base: &TensorMap, alpha: f64) -> Result<TensorMap> {
    MergePlan::new(MergeRecipe::mono(alpha), Some(target), &[base])?.run(&MergeOptions::default())
}

/// `sum_i w_i * candidate_i`, for when no target fine-tune exists.
pub fn zero_shot_merge(candidates: &[&TensorMap], weights: &[f64]) -> Result<TensorMap> {
    MergePlan::new(MergeRecipe::zero_shot(weights.to_vec()), None, candidates)?
        .run(&MergeOptions::default())
}

/// One input checkpoint as recorded in a provenance sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub id: String,
    pub path: String,
    pub sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverRecord {
    pub tau: f64,
    pub joint: bool,
    /// Aggregate loss per candidate id.
    pub losses: IndexMap<String, f64>,
}

/// Audit record written next to every merged checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeProvenance {
    pub format_version: u32,
    pub tool: String,
    pub version: String,
    pub mode: MergeMode,
    pub alpha: f64,
    /// Candidate id to the weight actually applied.
    pub weights: IndexMap<String, f64>,
    pub target: Option<InputRecord>,
    pub candidates: Vec<InputRecord>,
    /// Candidate ids in summation order.
    pub summation_order: Vec<String>,
    pub solver: Option<SolverRecord>,
    pub output: InputRecord,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

/// `<output>.provenance.json`.
pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    output.with_file_name(name)
}

impl MergeProvenance {
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer_pretty(&mut tmp, self)?;
        std::io::Write::write_all(&mut tmp, b"\n")?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }
}

/// A checkpoint on disk together with the id it is known by.
pub struct NamedInput<'a> {
    pub id: String,
    pub path: PathBuf,
    pub map: &'a TensorMap,
}

/// Runs `plan` to `output` and writes the provenance sidecar beside it.
pub fn merge_to_file_with_provenance(
    plan: &MergePlan<'_>,
    target: Option<&NamedInput<'_>>,
    candidates: &[NamedInput<'_>],
    solver: Option<SolverRecord>,
    output: &Path,
    options: &MergeOptions,
) -> Result<MergeProvenance> {
    plan.run_to_file(output, options)?;
    let output_map = crate::checkpoint::read_checkpoint(output)?;
    let hashes = plan.candidate_hashes_hex();
    let weights = &plan.recipe().candidate_weights;
    let provenance = MergeProvenance {
        format_version: crate::FORMAT_VERSION,
        tool: "cocktail".into(),
        version: crate::VERSION.into(),
        mode: plan.recipe().mode,
        alpha: plan.recipe().alpha,
        weights: candidates
            .iter()
            .zip(weights)
            .map(|(c, &w)| (c.id.clone(), w))
            .collect(),
        target: target.map(|t| InputRecord {
            id: t.id.clone(),
            path: t.path.display().to_string(),
            sha256: plan.target_hash_hex().unwrap_or_default(),
            weight: Some(plan.recipe().alpha),
        }),
        candidates: candidates
            .iter()
            .zip(weights)
            .zip(&hashes)
            .map(|((c, &w), h)| InputRecord {
                id: c.id.clone(),
                path: c.path.display().to_string(),
                sha256: h.clone(),
                weight: Some(w),
            })
            .collect(),
        summation_order: plan
            .summation_order()
            .into_iter()
            .map(|i| candidates[i].id.clone())
            .collect(),
        solver,
        output: InputRecord {
            id: "output".into(),
            path: output.display().to_string(),
            sha256: output_map.content_hash_hex()?,
            weight: None,
        },
        notes: BTreeMap::new(),
    };
    provenance
        .write(&sidecar_path(output))
        .map_err(|source| CheckpointError::Io {
            path: sidecar_path(output),
            source,
        })?;
    Ok(provenance)
}
