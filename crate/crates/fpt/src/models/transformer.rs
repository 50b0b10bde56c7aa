//! GPT-style decoder-only transformer: pre-norm blocks, causal multi-head
//! self-attention with 1/sqrt(d_k) temperature, 4x GELU MLP, learned
//! positional embeddings, final layer norm, bias-free linear head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::tape::{ParamRef, Tape};
use crate::tensor::Tensor;

use super::{
    apply_head, batch_layout, gaussian_param, ones_param, zeros_param, AttentionCapture, Batch,
    ForwardPass, Model, ModelError, ModelFamily, ModelSpec, ParamGroup, ParamRegistry,
    ReadoutMode, Targets,
};

pub const LN_EPS: f32 = 1e-5;

pub(crate) struct Block {
    pub ln1_g: ParamRef,
    pub ln1_b: ParamRef,
    pub wq: ParamRef,
    pub bq: ParamRef,
    pub wk: ParamRef,
    pub bk: ParamRef,
    pub wv: ParamRef,
    pub bv: ParamRef,
    pub wproj: ParamRef,
    pub bproj: ParamRef,
    pub ln2_g: ParamRef,
    pub ln2_b: ParamRef,
    pub mlp_w1: ParamRef,
    pub mlp_b1: ParamRef,
    pub mlp_w2: ParamRef,
    pub mlp_b2: ParamRef,
}

impl Block {
    fn params(&self) -> Vec<&ParamRef> {
        vec![
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wproj, &self.bproj, &self.ln2_g, &self.ln2_b, &self.mlp_w1, &self.mlp_b1,
            &self.mlp_w2, &self.mlp_b2,
        ]
    }
}

pub struct Transformer {
    pub(crate) spec: ModelSpec,
    pub(crate) input_w: ParamRef,
    pub(crate) input_b: ParamRef,
    pub(crate) positions: ParamRef,
    pub(crate) blocks: Vec<Block>,
    pub(crate) final_g: ParamRef,
    pub(crate) final_b: ParamRef,
    pub(crate) head_w: ParamRef,
    pub(crate) registry: ParamRegistry,
}

fn block_init<R: Rng>(layer: usize, n: usize, sigma: f32, rng: &mut R) -> Block {
    let p = |s: &str| format!("h{layer}.{s}");
    Block {
        ln1_g: ones_param(&p("ln1.g"), ParamGroup::LayerNorm, &[1, n]),
        ln1_b: zeros_param(&p("ln1.b"), ParamGroup::LayerNorm, &[1, n]),
        wq: gaussian_param(&p("attn.wq"), ParamGroup::Attention, &[n, n], sigma, rng),
        bq: zeros_param(&p("attn.bq"), ParamGroup::Attention, &[1, n]),
        wk: gaussian_param(&p("attn.wk"), ParamGroup::Attention, &[n, n], sigma, rng),
        bk: zeros_param(&p("attn.bk"), ParamGroup::Attention, &[1, n]),
        wv: gaussian_param(&p("attn.wv"), ParamGroup::Attention, &[n, n], sigma, rng),
        bv: zeros_param(&p("attn.bv"), ParamGroup::Attention, &[1, n]),
        wproj: gaussian_param(&p("attn.wproj"), ParamGroup::Attention, &[n, n], sigma, rng),
        bproj: zeros_param(&p("attn.bproj"), ParamGroup::Attention, &[1, n]),
        ln2_g: ones_param(&p("ln2.g"), ParamGroup::LayerNorm, &[1, n]),
        ln2_b: zeros_param(&p("ln2.b"), ParamGroup::LayerNorm, &[1, n]),
        mlp_w1: gaussian_param(&p("mlp.w1"), ParamGroup::Feedforward, &[n, 4 * n], sigma, rng),
        mlp_b1: zeros_param(&p("mlp.b1"), ParamGroup::Feedforward, &[1, 4 * n]),
        mlp_w2: gaussian_param(&p("mlp.w2"), ParamGroup::Feedforward, &[4 * n, n], sigma, rng),
        mlp_b2: zeros_param(&p("mlp.b2"), ParamGroup::Feedforward, &[1, n]),
    }
}

impl Transformer {
    /// Default-scheme construction: Gaussian weights with the given sigma,
    /// zero biases, identity layer norms, orthogonal linear input layer.
    pub fn build(spec: &ModelSpec, sigma: f32, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        spec.validate()?;
        if spec.family != ModelFamily::Transformer {
            return Err(ModelError::Config("spec.family must be transformer".into()));
        }
        let n = spec.n_dim;

        let mut input_w =
            Tensor::randn(&[spec.d_in, n], 0.0, 1.0, rng);
        crate::policy::orthogonalize(&mut input_w)?;
        let input_w = super::param_ref(super::Param::trainable(
            "input.w",
            ParamGroup::Input,
            input_w,
        ));
        let input_b = zeros_param("input.b", ParamGroup::Input, &[1, n]);
        let positions =
            gaussian_param("positions", ParamGroup::Positions, &[spec.max_len, n], sigma, rng);
        let blocks: Vec<Block> =
            (0..spec.n_layers).map(|l| block_init(l, n, sigma, rng)).collect();
        let final_g = ones_param("final_ln.g", ParamGroup::LayerNorm, &[1, n]);
        let final_b = zeros_param("final_ln.b", ParamGroup::LayerNorm, &[1, n]);
        let head_w = gaussian_param("head.w", ParamGroup::Output, &[n, spec.d_out], sigma, rng);

        let mut registry = ParamRegistry::default();
        for p in [&input_w, &input_b, &positions] {
            registry.push(p)?;
        }
        for b in &blocks {
            for p in b.params() {
                registry.push(p)?;
            }
        }
        for p in [&final_g, &final_b, &head_w] {
            registry.push(p)?;
        }

        Ok(Self {
            spec: spec.clone(),
            input_w,
            input_b,
            positions,
            blocks,
            final_g,
            final_b,
            head_w,
            registry,
        })
    }

    pub fn forward_pass(
        &self,
        batch: &Batch,
        train_mode: bool,
        rng: &mut ChaCha8Rng,
        capture_attention: bool,
    ) -> Result<ForwardPass, ModelError> {
        let spec = &self.spec;
        let layout = batch_layout(spec, batch)?;
        let total: usize = layout.iter().map(|(_, l)| l).sum();
        let n = spec.n_dim;
        let n_heads = spec.n_heads;
        let d_k = n / n_heads;
        let drop = spec.dropout_rate;

        let mut tape = Tape::new(train_mode);

        // Flattened example-major input [total, d_in].
        let mut flat = Vec::with_capacity(total * spec.d_in);
        for seq in &batch.sequences {
            flat.extend_from_slice(seq.data());
        }
        let x0 = tape.constant(total, spec.d_in, flat);

        let w_in = tape.param(&self.input_w);
        let b_in = tape.param(&self.input_b);
        let embedded = tape.matmul(x0, w_in)?;
        let embedded = tape.add_row(embedded, b_in)?;

        // positions are added per example: row (off + t) gets p_t
        let pos = tape.param(&self.positions);
        let pos_idx: Vec<usize> = layout.iter().flat_map(|&(_, l)| 0..l).collect();
        let pos_rows = tape.gather_rows(pos, &pos_idx);
        let mut h = tape.add(embedded, pos_rows)?;

        let mut attention = Vec::new();

        // one causal mask per distinct sequence length
        let causal_mask = |l: usize| -> Vec<bool> {
            let mut m = vec![false; l * l];
            for i in 0..l {
                for j in 0..=i {
                    m[i * l + j] = true;
                }
            }
            m
        };

        for (layer_idx, block) in self.blocks.iter().enumerate() {
            // attention sub-block
            let g1 = tape.param(&block.ln1_g);
            let b1 = tape.param(&block.ln1_b);
            let normed = tape.layer_norm(h, g1, b1, LN_EPS)?;

            let wq = tape.param(&block.wq);
            let bq = tape.param(&block.bq);
            let wk = tape.param(&block.wk);
            let bk = tape.param(&block.bk);
            let wv = tape.param(&block.wv);
            let bv = tape.param(&block.bv);
            let q = tape.matmul(normed, wq)?;
            let q = tape.add_row(q, bq)?;
            let q = tape.scale(q, 1.0 / (d_k as f32).sqrt());
            let k = tape.matmul(normed, wk)?;
            let k = tape.add_row(k, bk)?;
            let v = tape.matmul(normed, wv)?;
            let v = tape.add_row(v, bv)?;

            let mut example_outputs = Vec::with_capacity(layout.len());
            for (ex, &(off, l)) in layout.iter().enumerate() {
                let mask = causal_mask(l);
                let qe = tape.slice_rows(q, off, l);
                let ke = tape.slice_rows(k, off, l);
                let ve = tape.slice_rows(v, off, l);
                let mut head_outputs = Vec::with_capacity(n_heads);
                for hd in 0..n_heads {
                    let qh = tape.slice_cols(qe, hd * d_k, d_k);
                    let kh = tape.slice_cols(ke, hd * d_k, d_k);
                    let vh = tape.slice_cols(ve, hd * d_k, d_k);
                    let scores = tape.matmul_nt(qh, kh)?;
                    let weights = tape.softmax_rows(scores, Some(&mask))?;
                    if capture_attention && ex == 0 {
                        attention.push(AttentionCapture {
                            layer: layer_idx,
                            head: hd,
                            weights: tape.to_tensor(weights),
                        });
                    }
                    let weights = tape.dropout(weights, drop, rng);
                    head_outputs.push(tape.matmul(weights, vh)?);
                }
                example_outputs.push(tape.concat_cols(&head_outputs)?);
            }
            let attn = tape.concat_rows(&example_outputs)?;
            let wp = tape.param(&block.wproj);
            let bp = tape.param(&block.bproj);
            let attn = tape.matmul(attn, wp)?;
            let attn = tape.add_row(attn, bp)?;
            let attn = tape.dropout(attn, drop, rng);
            h = tape.add(h, attn)?;

            // MLP sub-block
            let g2 = tape.param(&block.ln2_g);
            let b2 = tape.param(&block.ln2_b);
            let normed = tape.layer_norm(h, g2, b2, LN_EPS)?;
            let w1 = tape.param(&block.mlp_w1);
            let b1m = tape.param(&block.mlp_b1);
            let w2 = tape.param(&block.mlp_w2);
            let b2m = tape.param(&block.mlp_b2);
            let inner = tape.matmul(normed, w1)?;
            let inner = tape.add_row(inner, b1m)?;
            let inner = tape.gelu(inner);
            let mlp = tape.matmul(inner, w2)?;
            let mlp = tape.add_row(mlp, b2m)?;
            let mlp = tape.dropout(mlp, drop, rng);
            h = tape.add(h, mlp)?;
        }

        let fg = tape.param(&self.final_g);
        let fb = tape.param(&self.final_b);
        let h = tape.layer_norm(h, fg, fb, LN_EPS)?;

        let row_indices = readout_rows(spec, batch, &layout)?;
        let (features, logits) = apply_head(&mut tape, h, &self.head_w, &row_indices)?;

        Ok(ForwardPass { tape, logits, features, attention })
    }

    /// New model reusing the first `x` blocks (and input, positions, final
    /// norm) of this one, with a freshly initialized output head.
    pub fn truncate_layers(
        &self,
        x: usize,
        sigma: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<Transformer, ModelError> {
        if x == 0 || x > self.spec.n_layers {
            return Err(ModelError::Config(format!(
                "truncation depth {x} outside 1..={}",
                self.spec.n_layers
            )));
        }
        let mut spec = self.spec.clone();
        spec.n_layers = x;
        let n = spec.n_dim;

        let blocks: Vec<Block> = self.blocks[..x]
            .iter()
            .map(|b| Block {
                ln1_g: b.ln1_g.clone(),
                ln1_b: b.ln1_b.clone(),
                wq: b.wq.clone(),
                bq: b.bq.clone(),
                wk: b.wk.clone(),
                bk: b.bk.clone(),
                wv: b.wv.clone(),
                bv: b.bv.clone(),
                wproj: b.wproj.clone(),
                bproj: b.bproj.clone(),
                ln2_g: b.ln2_g.clone(),
                ln2_b: b.ln2_b.clone(),
                mlp_w1: b.mlp_w1.clone(),
                mlp_b1: b.mlp_b1.clone(),
                mlp_w2: b.mlp_w2.clone(),
                mlp_b2: b.mlp_b2.clone(),
            })
            .collect();
        let head_w = gaussian_param("head.w", ParamGroup::Output, &[n, spec.d_out], sigma, rng);

        let mut registry = ParamRegistry::default();
        for p in [&self.input_w, &self.input_b, &self.positions] {
            registry.push(p)?;
        }
        for b in &blocks {
            for p in b.params() {
                registry.push(p)?;
            }
        }
        for p in [&self.final_g, &self.final_b, &head_w] {
            registry.push(p)?;
        }

        Ok(Transformer {
            spec,
            input_w: self.input_w.clone(),
            input_b: self.input_b.clone(),
            positions: self.positions.clone(),
            blocks,
            final_g: self.final_g.clone(),
            final_b: self.final_b.clone(),
            head_w,
            registry,
        })
    }
}

/// Rows of the flattened hidden matrix fed to the output head.
pub(crate) fn readout_rows(
    spec: &ModelSpec,
    batch: &Batch,
    layout: &[(usize, usize)],
) -> Result<Vec<usize>, ModelError> {
    match (&spec.readout_mode, &batch.targets) {
        (ReadoutMode::LastToken, _) => {
            Ok(layout.iter().map(|&(off, l)| off + l - 1).collect())
        }
        (ReadoutMode::PerToken, Targets::Bits { answer_positions, .. })
        | (ReadoutMode::PerToken, Targets::TokenClasses { answer_positions, .. }) => {
            let mut rows = Vec::new();
            for (&(off, l), positions) in layout.iter().zip(answer_positions) {
                for &p in positions {
                    if p >= l {
                        return Err(ModelError::Config(format!(
                            "answer position {p} outside sequence of length {l}"
                        )));
                    }
                    rows.push(off + p);
                }
            }
            Ok(rows)
        }
        (ReadoutMode::PerToken, Targets::Classes(_)) => Err(ModelError::Config(
            "per-token readout requires per-token targets".into(),
        )),
    }
}

/// Builds a transformer wrapped in [`Model`], applying the requested
/// initialization scheme.
pub fn build_transformer(
    spec: &ModelSpec,
    init: &crate::policy::InitScheme,
    rng: &mut ChaCha8Rng,
) -> Result<Model, ModelError> {
    let t = Transformer::build(spec, init.sigma, rng)?;
    let mut model = Model::Transformer(t);
    crate::policy::apply_init_scheme(&mut model, init, rng)
        .map_err(|e| ModelError::Config(e.to_string()))?;
    Ok(model)
}
