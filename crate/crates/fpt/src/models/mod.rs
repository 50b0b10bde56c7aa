//! Model construction: decoder-only transformer and the LSTM family, with
//! every trainable tensor registered under exactly one parameter group.

pub mod lstm;
pub mod transformer;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::tape::{ParamRef, Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub use lstm::{build_lstm, Lstm};
pub use transformer::{build_transformer, Transformer};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("batch mixes sequence lengths; LSTM forward requires equal lengths (use batch_size 1)")]
    UnequalLengths,
    #[error("operation requires a transformer model")]
    NotTransformer,
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("input token dimension {got} does not match d_in {want}")]
    BadTokenDim { got: usize, want: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The unit of freezing decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Input,
    Output,
    LayerNorm,
    Positions,
    Attention,
    Feedforward,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Input,
        ParamGroup::Output,
        ParamGroup::LayerNorm,
        ParamGroup::Positions,
        ParamGroup::Attention,
        ParamGroup::Feedforward,
    ];
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::Input => "input",
            ParamGroup::Output => "output",
            ParamGroup::LayerNorm => "layernorm",
            ParamGroup::Positions => "positions",
            ParamGroup::Attention => "attention",
            ParamGroup::Feedforward => "feedforward",
        };
        f.write_str(s)
    }
}

/// Named model parameter. `trainable` is set by the freeze policy; gradients
/// accumulate into `grad` only while trainable.
#[derive(Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

impl Param {
    pub fn trainable(name: &str, group: ParamGroup, value: Tensor) -> Self {
        Self {
            name: name.to_string(),
            group,
            value,
            grad: None,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

pub fn param_ref(p: Param) -> ParamRef {
    Rc::new(RefCell::new(p))
}

/// All parameters of one model; groups partition the registry.
#[derive(Default)]
pub struct ParamRegistry {
    params: Vec<ParamRef>,
}

impl ParamRegistry {
    pub fn push(&mut self, p: &ParamRef) -> Result<(), ModelError> {
        let name = p.borrow().name.clone();
        if self.params.iter().any(|q| q.borrow().name == name) {
            return Err(ModelError::DuplicateParam(name));
        }
        self.params.push(Rc::clone(p));
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamRef> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamRef> {
        self.params.iter().find(|p| p.borrow().name == name)
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.borrow().value.len()).sum()
    }

    pub fn group_scalars(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out = BTreeMap::new();
        for g in ParamGroup::ALL {
            out.insert(g, 0usize);
        }
        for p in &self.params {
            let b = p.borrow();
            *out.get_mut(&b.group).unwrap() += b.value.len();
        }
        out
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.borrow_mut().zero_grad();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Transformer,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutMode {
    LastToken,
    PerToken,
}

fn default_dropout() -> f32 {
    0.1
}

fn default_heads() -> usize {
    1
}

/// Architecture description; everything a builder or checkpoint header needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub n_layers: usize,
    pub n_dim: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    pub max_len: usize,
    pub d_in: usize,
    pub d_out: usize,
    #[serde(default)]
    pub lstm_residual: bool,
    #[serde(default)]
    pub lstm_positional: bool,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f32,
    #[serde(default = "default_readout")]
    pub readout_mode: ReadoutMode,
}

fn default_readout() -> ReadoutMode {
    ReadoutMode::LastToken
}

impl ModelSpec {
    pub fn transformer(n_layers: usize, n_dim: usize, n_heads: usize) -> Self {
        Self {
            family: ModelFamily::Transformer,
            n_layers,
            n_dim,
            n_heads,
            max_len: 64,
            d_in: 16,
            d_out: 10,
            lstm_residual: false,
            lstm_positional: false,
            dropout_rate: default_dropout(),
            readout_mode: ReadoutMode::LastToken,
        }
    }

    pub fn lstm(n_layers: usize, n_dim: usize) -> Self {
        Self {
            family: ModelFamily::Lstm,
            n_layers,
            n_dim,
            n_heads: 1,
            max_len: 64,
            d_in: 16,
            d_out: 10,
            lstm_residual: false,
            lstm_positional: false,
            dropout_rate: default_dropout(),
            readout_mode: ReadoutMode::LastToken,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 || self.n_dim == 0 || self.d_in == 0 || self.d_out == 0 {
            return Err(ModelError::Config(
                "n_layers, n_dim, d_in and d_out must be positive".into(),
            ));
        }
        if self.max_len == 0 {
            return Err(ModelError::Config("max_len must be positive".into()));
        }
        if self.family == ModelFamily::Transformer {
            if self.n_heads == 0 {
                return Err(ModelError::Config("n_heads must be positive".into()));
            }
            if self.n_dim % self.n_heads != 0 {
                return Err(ModelError::Config(format!(
                    "n_dim {} not divisible by n_heads {}",
                    self.n_dim, self.n_heads
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// One training batch: token sequences plus their targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub sequences: Vec<Tensor>,
    pub targets: Targets,
}

#[derive(Debug, Clone)]
pub enum Targets {
    /// One class id per example; read out at the last token.
    Classes(Vec<usize>),
    /// Per-token bit targets at designated answer positions. `bits[e]` holds
    /// `answer_positions[e].len() * d_out` values in {0, 1}.
    Bits {
        bits: Vec<Vec<f32>>,
        answer_positions: Vec<Vec<usize>>,
    },
    /// Per-token class targets at designated positions (next-token LM).
    TokenClasses {
        classes: Vec<Vec<usize>>,
        answer_positions: Vec<Vec<usize>>,
    },
}

/// Post-softmax attention weights of one layer/head.
#[derive(Debug, Clone)]
pub struct AttentionCapture {
    pub layer: usize,
    pub head: usize,
    /// l×l, rows sum to 1 over the causal prefix, strict upper triangle 0.
    pub weights: Tensor,
}

/// Result of one forward pass; the tape is kept so the caller can attach a
/// loss and run backward.
pub struct ForwardPass {
    pub tape: Tape,
    /// Readout logits: [batch, d_out] for last-token, [sum answers, d_out]
    /// for per-token readout.
    pub logits: Var,
    /// Hidden states feeding the head, same row layout as `logits`.
    pub features: Var,
    pub attention: Vec<AttentionCapture>,
}

pub enum Model {
    Transformer(Transformer),
    Lstm(Lstm),
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        match self {
            Model::Transformer(m) => &m.spec,
            Model::Lstm(m) => &m.spec,
        }
    }

    pub fn registry(&self) -> &ParamRegistry {
        match self {
            Model::Transformer(m) => &m.registry,
            Model::Lstm(m) => &m.registry,
        }
    }

    pub fn forward_pass(
        &self,
        batch: &Batch,
        train_mode: bool,
        rng: &mut ChaCha8Rng,
        capture_attention: bool,
    ) -> Result<ForwardPass, ModelError> {
        match self {
            Model::Transformer(m) => m.forward_pass(batch, train_mode, rng, capture_attention),
            Model::Lstm(m) => {
                if capture_attention {
                    return Err(ModelError::NotTransformer);
                }
                m.forward_pass(batch, train_mode, rng)
            }
        }
    }

    /// Eval-mode logits as a plain tensor.
    pub fn forward(&self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<Tensor, ModelError> {
        let pass = self.forward_pass(batch, false, rng, false)?;
        Ok(pass.tape.to_tensor(pass.logits))
    }

    /// Keeps the first `x` transformer blocks (parameters shared) and
    /// attaches a fresh output head.
    pub fn truncate_layers(
        &self,
        x: usize,
        sigma: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<Model, ModelError> {
        match self {
            Model::Transformer(m) => Ok(Model::Transformer(m.truncate_layers(x, sigma, rng)?)),
            Model::Lstm(_) => Err(ModelError::NotTransformer),
        }
    }
}

/// Validates batch shapes and returns per-example (offset, len) in the
/// flattened example-major layout.
pub(crate) fn batch_layout(
    spec: &ModelSpec,
    batch: &Batch,
) -> Result<Vec<(usize, usize)>, ModelError> {
    let mut offsets = Vec::with_capacity(batch.sequences.len());
    let mut off = 0;
    for seq in &batch.sequences {
        let l = seq.rows();
        if l > spec.max_len {
            return Err(ModelError::TooLong { len: l, max_len: spec.max_len });
        }
        if seq.cols() != spec.d_in {
            return Err(ModelError::BadTokenDim { got: seq.cols(), want: spec.d_in });
        }
        offsets.push((off, l));
        off += l;
    }
    Ok(offsets)
}

/// Gathers readout feature rows and applies the linear head.
pub(crate) fn apply_head(
    tape: &mut Tape,
    hidden: Var,
    head_w: &ParamRef,
    row_indices: &[usize],
) -> Result<(Var, Var), ModelError> {
    let features = tape.gather_rows(hidden, row_indices);
    let w = tape.param(head_w);
    let logits = tape.matmul(features, w)?;
    Ok((features, logits))
}

/// Default-scheme Gaussian weight init (biases zero, layer norm identity).
pub(crate) fn gaussian_param<R: Rng>(
    name: &str,
    group: ParamGroup,
    shape: &[usize],
    sigma: f32,
    rng: &mut R,
) -> ParamRef {
    param_ref(Param::trainable(name, group, Tensor::randn(shape, 0.0, sigma, rng)))
}

pub(crate) fn zeros_param(name: &str, group: ParamGroup, shape: &[usize]) -> ParamRef {
    param_ref(Param::trainable(name, group, Tensor::zeros(shape)))
}

pub(crate) fn ones_param(name: &str, group: ParamGroup, shape: &[usize]) -> ParamRef {
    param_ref(Param::trainable(name, group, Tensor::full(shape, 1.0)))
}
