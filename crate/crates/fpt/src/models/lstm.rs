//! Stacked unidirectional LSTM with optional residual connections and
//! learned positional embeddings, sharing the input/output layer layout of
//! the transformer. One pre-layer norm per stacked layer keeps the layernorm
//! finetuning group well defined.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::tape::{ParamRef, Tape};
use crate::tensor::Tensor;

use super::{
    gaussian_param, ones_param, zeros_param, Batch, ForwardPass, Model, ModelError, ModelFamily,
    ModelSpec, ParamGroup, ParamRegistry, ReadoutMode, Targets,
};
use super::transformer::LN_EPS;

pub(crate) struct LstmLayer {
    pub ln_g: ParamRef,
    pub ln_b: ParamRef,
    /// input-to-gates, n_dim x 4 n_dim, gate order [i, f, g, o]
    pub wx: ParamRef,
    /// hidden-to-gates, n_dim x 4 n_dim
    pub wh: ParamRef,
    pub b: ParamRef,
}

impl LstmLayer {
    fn params(&self) -> Vec<&ParamRef> {
        vec![&self.ln_g, &self.ln_b, &self.wx, &self.wh, &self.b]
    }
}

pub struct Lstm {
    pub(crate) spec: ModelSpec,
    pub(crate) input_w: ParamRef,
    pub(crate) input_b: ParamRef,
    pub(crate) positions: Option<ParamRef>,
    pub(crate) layers: Vec<LstmLayer>,
    pub(crate) head_w: ParamRef,
    pub(crate) registry: ParamRegistry,
}

fn layer_init<R: Rng>(layer: usize, n: usize, sigma: f32, rng: &mut R) -> LstmLayer {
    let p = |s: &str| format!("l{layer}.{s}");
    LstmLayer {
        ln_g: ones_param(&p("ln.g"), ParamGroup::LayerNorm, &[1, n]),
        ln_b: zeros_param(&p("ln.b"), ParamGroup::LayerNorm, &[1, n]),
        wx: gaussian_param(&p("cell.wx"), ParamGroup::Feedforward, &[n, 4 * n], sigma, rng),
        wh: gaussian_param(&p("cell.wh"), ParamGroup::Feedforward, &[n, 4 * n], sigma, rng),
        b: zeros_param(&p("cell.b"), ParamGroup::Feedforward, &[1, 4 * n]),
    }
}

impl Lstm {
    pub fn build(spec: &ModelSpec, sigma: f32, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        spec.validate()?;
        if spec.family != ModelFamily::Lstm {
            return Err(ModelError::Config("spec.family must be lstm".into()));
        }
        let n = spec.n_dim;

        let mut input_w = Tensor::randn(&[spec.d_in, n], 0.0, 1.0, rng);
        crate::policy::orthogonalize(&mut input_w)?;
        let input_w = super::param_ref(super::Param::trainable(
            "input.w",
            ParamGroup::Input,
            input_w,
        ));
        let input_b = zeros_param("input.b", ParamGroup::Input, &[1, n]);
        let positions = spec.lstm_positional.then(|| {
            gaussian_param("positions", ParamGroup::Positions, &[spec.max_len, n], sigma, rng)
        });
        let layers: Vec<LstmLayer> =
            (0..spec.n_layers).map(|l| layer_init(l, n, sigma, rng)).collect();
        let head_w = gaussian_param("head.w", ParamGroup::Output, &[n, spec.d_out], sigma, rng);

        let mut registry = ParamRegistry::default();
        registry.push(&input_w)?;
        registry.push(&input_b)?;
        if let Some(p) = &positions {
            registry.push(p)?;
        }
        for l in &layers {
            for p in l.params() {
                registry.push(p)?;
            }
        }
        registry.push(&head_w)?;

        Ok(Self { spec: spec.clone(), input_w, input_b, positions, layers, head_w, registry })
    }

    pub fn forward_pass(
        &self,
        batch: &Batch,
        train_mode: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass, ModelError> {
        let spec = &self.spec;
        let bsz = batch.sequences.len();
        let l = batch.sequences.first().map(|s| s.rows()).unwrap_or(0);
        if batch.sequences.iter().any(|s| s.rows() != l) {
            return Err(ModelError::UnequalLengths);
        }
        if l > spec.max_len {
            return Err(ModelError::TooLong { len: l, max_len: spec.max_len });
        }
        for s in &batch.sequences {
            if s.cols() != spec.d_in {
                return Err(ModelError::BadTokenDim { got: s.cols(), want: spec.d_in });
            }
        }
        let n = spec.n_dim;
        let drop = spec.dropout_rate;
        let total = bsz * l;

        let mut tape = Tape::new(train_mode);

        // timestep-major flattening: row t*bsz + e
        let mut flat = vec![0.0f32; total * spec.d_in];
        for (e, seq) in batch.sequences.iter().enumerate() {
            let d = seq.data();
            for t in 0..l {
                let dst = (t * bsz + e) * spec.d_in;
                flat[dst..dst + spec.d_in].copy_from_slice(&d[t * spec.d_in..(t + 1) * spec.d_in]);
            }
        }
        let x0 = tape.constant(total, spec.d_in, flat);
        let w_in = tape.param(&self.input_w);
        let b_in = tape.param(&self.input_b);
        let embedded = tape.matmul(x0, w_in)?;
        let mut h = tape.add_row(embedded, b_in)?;

        if let Some(positions) = &self.positions {
            let pos = tape.param(positions);
            let idx: Vec<usize> = (0..l).flat_map(|t| std::iter::repeat(t).take(bsz)).collect();
            let pos_rows = tape.gather_rows(pos, &idx);
            h = tape.add(h, pos_rows)?;
        }

        for layer in &self.layers {
            let g = tape.param(&layer.ln_g);
            let b = tape.param(&layer.ln_b);
            let normed = tape.layer_norm(h, g, b, LN_EPS)?;

            let wx = tape.param(&layer.wx);
            let wh = tape.param(&layer.wh);
            let bias = tape.param(&layer.b);

            let mut hcur = tape.constant(bsz, n, vec![0.0; bsz * n]);
            let mut c = tape.constant(bsz, n, vec![0.0; bsz * n]);
            let mut steps = Vec::with_capacity(l);
            for t in 0..l {
                let xt = tape.slice_rows(normed, t * bsz, bsz);
                let gx = tape.matmul(xt, wx)?;
                let gh = tape.matmul(hcur, wh)?;
                let gates = tape.add(gx, gh)?;
                let gates = tape.add_row(gates, bias)?;
                let i_gate = tape.slice_cols(gates, 0, n);
                let i_gate = tape.sigmoid(i_gate);
                let f_gate = tape.slice_cols(gates, n, n);
                let f_gate = tape.sigmoid(f_gate);
                let g_gate = tape.slice_cols(gates, 2 * n, n);
                let g_gate = tape.tanh(g_gate);
                let o_gate = tape.slice_cols(gates, 3 * n, n);
                let o_gate = tape.sigmoid(o_gate);
                let fc = tape.mul(f_gate, c)?;
                let ig = tape.mul(i_gate, g_gate)?;
                c = tape.add(fc, ig)?;
                let ct = tape.tanh(c);
                hcur = tape.mul(o_gate, ct)?;
                steps.push(hcur);
            }
            let mut out = tape.concat_rows(&steps)?;
            out = tape.dropout(out, drop, rng);
            h = if spec.lstm_residual { tape.add(out, h)? } else { out };
        }

        let row_indices = lstm_readout_rows(spec, batch, bsz, l)?;
        let (features, logits) = super::apply_head(&mut tape, h, &self.head_w, &row_indices)?;

        Ok(ForwardPass { tape, logits, features, attention: Vec::new() })
    }
}

fn lstm_readout_rows(
    spec: &ModelSpec,
    batch: &Batch,
    bsz: usize,
    l: usize,
) -> Result<Vec<usize>, ModelError> {
    match (&spec.readout_mode, &batch.targets) {
        (ReadoutMode::LastToken, _) => Ok((0..bsz).map(|e| (l - 1) * bsz + e).collect()),
        (ReadoutMode::PerToken, Targets::Bits { answer_positions, .. })
        | (ReadoutMode::PerToken, Targets::TokenClasses { answer_positions, .. }) => {
            let mut rows = Vec::new();
            for (e, positions) in answer_positions.iter().enumerate() {
                for &p in positions {
                    if p >= l {
                        return Err(ModelError::Config(format!(
                            "answer position {p} outside sequence of length {l}"
                        )));
                    }
                    rows.push(p * bsz + e);
                }
            }
            Ok(rows)
        }
        (ReadoutMode::PerToken, Targets::Classes(_)) => Err(ModelError::Config(
            "per-token readout requires per-token targets".into(),
        )),
    }
}

/// Builds an LSTM wrapped in [`Model`], applying the requested
/// initialization scheme.
pub fn build_lstm(
    spec: &ModelSpec,
    init: &crate::policy::InitScheme,
    rng: &mut ChaCha8Rng,
) -> Result<Model, ModelError> {
    let m = Lstm::build(spec, init.sigma, rng)?;
    let mut model = Model::Lstm(m);
    crate::policy::apply_init_scheme(&mut model, init, rng)
        .map_err(|e| ModelError::Config(e.to_string()))?;
    Ok(model)
}
