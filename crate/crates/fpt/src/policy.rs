//! Freezing policies, initialization schemes, and parameter accounting.
//!
//! The core protocol trains only {input, output, layernorm, positions} while
//! the attention and feedforward groups stay frozen; everything else here is
//! the machinery for ablating that choice.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::models::{Model, ModelError, ParamGroup};
use crate::tensor::tape::ParamRef;
use crate::tensor::{gaussian, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy {0:?} has an empty trainable set")]
    EmptyTrainableSet(String),
    #[error("policy {0:?} does not train the output group; a frozen random head is never trained")]
    MissingOutput(String),
    #[error("unknown policy name {0:?}")]
    UnknownPolicy(String),
    #[error("statistics-only initialization requires a source checkpoint")]
    MissingSource,
    #[error("source/target architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("source checkpoint lacks tensor {0}")]
    MissingTensor(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Named set of trainable parameter groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub name: String,
    pub trainable_groups: BTreeSet<ParamGroup>,
}

impl FreezePolicy {
    pub fn new(
        name: &str,
        groups: impl IntoIterator<Item = ParamGroup>,
    ) -> Result<Self, PolicyError> {
        let trainable_groups: BTreeSet<ParamGroup> = groups.into_iter().collect();
        if trainable_groups.is_empty() {
            return Err(PolicyError::EmptyTrainableSet(name.to_string()));
        }
        if !trainable_groups.contains(&ParamGroup::Output) {
            return Err(PolicyError::MissingOutput(name.to_string()));
        }
        Ok(Self { name: name.to_string(), trainable_groups })
    }

    pub fn trains(&self, group: ParamGroup) -> bool {
        self.trainable_groups.contains(&group)
    }

    /// Case-insensitive lookup of the named policies used by the CLI and
    /// experiment configs.
    pub fn by_name(name: &str) -> Result<Self, PolicyError> {
        use ParamGroup::*;
        let groups: Vec<ParamGroup> = match name.to_ascii_lowercase().as_str() {
            "fpt" => vec![Input, Output, LayerNorm, Positions],
            "output_only" => vec![Output],
            "output_layernorm" => vec![Output, LayerNorm],
            "output_layernorm_input" => vec![Output, LayerNorm, Input],
            "output_input" => vec![Output, Input],
            "output_positions" => vec![Output, Positions],
            "full" => vec![Input, Output, LayerNorm, Positions, Attention, Feedforward],
            "fpt_feedforward" => vec![Input, Output, LayerNorm, Positions, Feedforward],
            "fpt_attention" => vec![Input, Output, LayerNorm, Positions, Attention],
            _ => return Err(PolicyError::UnknownPolicy(name.to_string())),
        };
        Self::new(name, groups)
    }
}

/// The frozen-transformer finetuning set: input, output, layer norm and
/// positional parameters train; attention and feedforward stay frozen.
pub fn fpt_policy() -> FreezePolicy {
    FreezePolicy::by_name("fpt").expect("fpt policy is well formed")
}

/// The trainable tensors selected by a policy. Everything else in the
/// registry has been flagged frozen.
pub struct TrainablePartition {
    pub trainable: Vec<ParamRef>,
}

/// Flags every registry parameter trainable or frozen according to the
/// policy and returns the trainable partition.
pub fn apply_policy(model: &Model, policy: &FreezePolicy) -> Result<TrainablePartition, PolicyError> {
    let mut trainable = Vec::new();
    for p in model.registry().iter() {
        let train = policy.trains(p.borrow().group);
        {
            let mut b = p.borrow_mut();
            b.trainable = train;
            if !train {
                b.grad = None;
            }
        }
        if train {
            trainable.push(p.clone());
        }
    }
    if trainable.is_empty() {
        return Err(PolicyError::EmptyTrainableSet(policy.name.clone()));
    }
    Ok(TrainablePartition { trainable })
}

/// Exact per-group scalar counts plus trainable/frozen totals for a policy.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCounts {
    pub by_group: BTreeMap<ParamGroup, usize>,
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
}

pub fn count_params(model: &Model, policy: &FreezePolicy) -> ParamCounts {
    let by_group = model.registry().group_scalars();
    let total: usize = by_group.values().sum();
    let trainable: usize = by_group
        .iter()
        .filter(|(g, _)| policy.trains(**g))
        .map(|(_, c)| c)
        .sum();
    ParamCounts { by_group, trainable, frozen: total - trainable, total }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// GPT-style defaults: Gaussian weights, zero biases, identity layer
    /// norm, orthogonal linear input layer.
    DefaultGaussian,
    /// Same as the default rule; kept as an explicit name for configs.
    OrthogonalInput,
    /// Redraw every tensor from a Gaussian matching the per-tensor mean and
    /// standard deviation of a source checkpoint.
    StatisticsOnly,
    /// Copy all tensors from a source checkpoint.
    FromCheckpoint,
}

#[derive(Debug, Clone)]
pub struct InitScheme {
    pub kind: InitKind,
    pub sigma: f32,
    pub source: Option<Checkpoint>,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self { kind: InitKind::DefaultGaussian, sigma: 0.02, source: None }
    }
}

impl InitScheme {
    pub fn statistics_only(source: Checkpoint) -> Self {
        Self { kind: InitKind::StatisticsOnly, sigma: 0.02, source: Some(source) }
    }

    pub fn from_checkpoint(source: Checkpoint) -> Self {
        Self { kind: InitKind::FromCheckpoint, sigma: 0.02, source: Some(source) }
    }
}

/// Post-construction step of model building: statistics-only redraw or
/// checkpoint copy. The default schemes are already applied by the builders.
pub fn apply_init_scheme(
    model: &mut Model,
    scheme: &InitScheme,
    rng: &mut ChaCha8Rng,
) -> Result<(), PolicyError> {
    match scheme.kind {
        InitKind::DefaultGaussian | InitKind::OrthogonalInput => Ok(()),
        InitKind::StatisticsOnly => {
            let source = scheme.source.as_ref().ok_or(PolicyError::MissingSource)?;
            init_statistics_only(model, source, rng)
        }
        InitKind::FromCheckpoint => {
            let source = scheme.source.as_ref().ok_or(PolicyError::MissingSource)?;
            crate::checkpoint::load_into(model, source)
                .map_err(|e| PolicyError::ArchitectureMismatch(e.to_string()))
        }
    }
}

/// Redraws every parameter tensor as Gaussian with the per-tensor empirical
/// mean and standard deviation of the source checkpoint.
pub fn init_statistics_only(
    model: &Model,
    source: &Checkpoint,
    rng: &mut ChaCha8Rng,
) -> Result<(), PolicyError> {
    if *model.spec() != source.spec {
        return Err(PolicyError::ArchitectureMismatch(format!(
            "target {:?} vs source {:?}",
            model.spec(),
            source.spec
        )));
    }
    for p in model.registry().iter() {
        let mut b = p.borrow_mut();
        let src = source
            .get(&b.name)
            .ok_or_else(|| PolicyError::MissingTensor(b.name.clone()))?;
        if src.shape() != b.value.shape() {
            return Err(PolicyError::ArchitectureMismatch(format!(
                "tensor {}: {:?} vs {:?}",
                b.name,
                b.value.shape(),
                src.shape()
            )));
        }
        let mean = src.mean();
        let std = src.std();
        b.value = Tensor::randn(b.value.shape(), mean, std, rng);
    }
    Ok(())
}

/// In-place orthogonal initialization of a 2-D tensor: orthonormal columns
/// when rows >= cols, orthonormal rows otherwise. Modified Gram-Schmidt QR
/// of the existing (Gaussian) entries, accumulated in f64.
pub fn orthogonalize(t: &mut Tensor) -> Result<(), TensorError> {
    if !t.is_matrix() {
        return Err(TensorError::NotMatrix { op: "orthogonalize", shape: t.shape().to_vec() });
    }
    let (m, n) = (t.rows(), t.cols());
    let tall = m >= n;
    let (rows, cols) = if tall { (m, n) } else { (n, m) };

    // column-major working copy of the tall orientation
    let mut q = vec![0.0f64; rows * cols];
    for i in 0..m {
        for j in 0..n {
            let v = t.data()[i * n + j] as f64;
            if tall {
                q[j * rows + i] = v;
            } else {
                q[i * rows + j] = v;
            }
        }
    }

    for j in 0..cols {
        for i in 0..j {
            let (qi, qj) = (i * rows, j * rows);
            let mut dot = 0.0;
            for r in 0..rows {
                dot += q[qi + r] * q[qj + r];
            }
            for r in 0..rows {
                q[qj + r] -= dot * q[qi + r];
            }
        }
        let qj = j * rows;
        let norm: f64 = q[qj..qj + rows].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "degenerate Gaussian draw in orthogonal init");
        for r in 0..rows {
            q[qj + r] /= norm;
        }
    }

    let data = t.data_mut();
    for i in 0..m {
        for j in 0..n {
            let v = if tall { q[j * rows + i] } else { q[i * rows + j] };
            data[i * n + j] = v as f32;
        }
    }
    Ok(())
}

/// Draws a fresh Gaussian matrix and orthogonalizes it.
pub fn init_orthogonal<R: Rng>(t: &mut Tensor, rng: &mut R) -> Result<(), TensorError> {
    for v in t.data_mut() {
        *v = gaussian(rng);
    }
    orthogonalize(t)
}

/// One row of the per-layer statistics table for attention and feedforward
/// tensors.
#[derive(Debug, Clone, Serialize)]
pub struct LayerStat {
    pub layer: usize,
    pub tensor: String,
    pub kind: &'static str,
    pub mean: f32,
    pub std: f32,
}

/// Per-layer mean/std of attention and feedforward weights and biases,
/// read from a checkpoint with `h{layer}.` tensor naming.
pub fn layer_statistics(ckpt: &Checkpoint) -> Vec<LayerStat> {
    let mut rows = Vec::new();
    for (name, group, t) in &ckpt.tensors {
        if !matches!(group, ParamGroup::Attention | ParamGroup::Feedforward) {
            continue;
        }
        let Some(layer) = name
            .strip_prefix('h')
            .and_then(|rest| rest.split('.').next())
            .and_then(|num| num.parse::<usize>().ok())
        else {
            continue;
        };
        let short = name.splitn(2, '.').nth(1).unwrap_or(name).to_string();
        let kind = if t.shape().first() == Some(&1) { "bias" } else { "weight" };
        rows.push(LayerStat { layer, tensor: short, kind, mean: t.mean(), std: t.std() });
    }
    rows.sort_by(|a, b| (a.layer, &a.tensor).cmp(&(b.layer, &b.tensor)));
    rows
}

pub fn layer_statistics_csv(rows: &[LayerStat]) -> String {
    let mut out = String::from("layer,tensor,kind,mean,std\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.layer, r.tensor, r.kind, r.mean, r.std));
    }
    out
}
