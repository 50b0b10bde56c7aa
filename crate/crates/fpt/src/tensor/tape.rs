//! Reverse-mode autodiff over 2-D f32 values.
//!
//! A `Tape` is an append-only graph built during one forward pass. Variables
//! are indices into the tape, so the graph is acyclic by construction and
//! backward is a single reverse sweep. Parameter leaves accumulate their
//! gradients into the shared [`Param`] storage, which survives across tapes.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use super::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, Tensor, TensorError};
use crate::models::Param;

pub type ParamRef = Rc<RefCell<Param>>;

/// Handle to a tape value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf(Option<ParamRef>),
    Matmul { a: Var, b: Var },
    /// a · bᵀ
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// row-broadcast bias add: bias is 1×n
    AddRow { a: Var, bias: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f32 },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Gelu { a: Var },
    SoftmaxRows { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    Dropout { a: Var, keep: Vec<f32> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    Transpose { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    CrossEntropyLogits { logits: Var, probs: Vec<f32>, targets: Vec<usize> },
    BceLogits { logits: Var, targets: Vec<f32> },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    needs_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f32>>,
    train_mode: bool,
}

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Tape {
    pub fn new(train_mode: bool) -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), train_mode }
    }

    pub fn train_mode(&self) -> bool {
        self.train_mode
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f32>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { rows, cols, data, needs_grad, op });
        self.grads.push(Vec::new());
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(vec![n.rows, n.cols], n.data.clone()).expect("tape node is consistent")
    }

    /// Gradient of the last `backward` call with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        let g = &self.grads[v.0];
        if g.is_empty() { None } else { Some(g) }
    }

    /// Constant leaf: gradients never flow into it.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f32>) -> Var {
        self.push(rows, cols, data, false, Op::Leaf(None))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), false, Op::Leaf(None))
    }

    /// Differentiable leaf that is not a parameter; its gradient is readable
    /// via [`Tape::grad`].
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f32>) -> Var {
        self.push(rows, cols, data, true, Op::Leaf(None))
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), true, Op::Leaf(None))
    }

    /// Parameter leaf. Gradients flow through it always, and accumulate into
    /// `param.grad` only when the parameter is trainable.
    pub fn param(&mut self, p: &ParamRef) -> Var {
        let (rows, cols, data, trainable) = {
            let b = p.borrow();
            (b.value.rows(), b.value.cols(), b.value.data().to_vec(), b.trainable)
        };
        self.push(rows, cols, data, trainable, Op::Leaf(Some(Rc::clone(p))))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, ng, Op::Matmul { a, b }))
    }

    /// a[m×k] · b[n×k]ᵀ -> m×n
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, ng, Op::MatmulNT { a, b }))
    }

    fn elementwise_shapes(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(usize, usize), TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: vec![sa.0, sa.1],
                right: vec![sb.0, sb.1],
            });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, n) = self.elementwise_shapes("add", a, b)?;
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, ng, Op::Add { a, b }))
    }

    /// Adds a 1×n bias row to every row of a.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        let (br, bn) = self.shape(bias);
        if br != 1 || bn != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: vec![m, n],
                right: vec![br, bn],
            });
        }
        let bv = self.value(bias).to_vec();
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(&bv) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(m, n, out, ng, Op::AddRow { a, bias }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, n) = self.elementwise_shapes("sub", a, b)?;
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, ng, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, n) = self.elementwise_shapes("mul", a, b)?;
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, ng, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f32> = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.needs(a);
        self.push(m, n, out, ng, Op::Scale { a, c })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f32> = self.value(a).iter().map(|x| x.tanh()).collect();
        let ng = self.needs(a);
        self.push(m, n, out, ng, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f32> = self.value(a).iter().map(|x| sigmoid(*x)).collect();
        let ng = self.needs(a);
        self.push(m, n, out, ng, Op::Sigmoid { a })
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f32> = self.value(a).iter().map(|x| gelu_scalar(*x)).collect();
        let ng = self.needs(a);
        self.push(m, n, out, ng, Op::Gelu { a })
    }

    /// Row-wise softmax. Masked (false) positions get weight exactly 0 and
    /// receive no gradient. Stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows mask",
                    left: vec![m, n],
                    right: vec![mk.len()],
                });
            }
        }
        let x = self.value(a);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let unmasked = |j: usize| mask.map_or(true, |mk| mk[i * n + j]);
            let mut maxv = f32::NEG_INFINITY;
            for j in 0..n {
                if unmasked(j) && row[j] > maxv {
                    maxv = row[j];
                }
            }
            if maxv == f32::NEG_INFINITY {
                return Err(TensorError::AllMasked { row: i });
            }
            let mut denom = 0.0f32;
            for j in 0..n {
                if unmasked(j) {
                    let e = (row[j] - maxv).exp();
                    out[i * n + j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= denom;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(m, n, out, ng, Op::SoftmaxRows { a }))
    }

    /// Per-row layer norm with affine scale/shift. gamma and beta are 1×n.
    pub fn layer_norm(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<Var, TensorError> {
        let (m, n) = self.shape(a);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(v);
            if s != (1, n) {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "gamma" { "layer_norm gamma" } else { "layer_norm beta" },
                    left: vec![m, n],
                    right: vec![s.0, s.1],
                });
            }
        }
        let x = self.value(a);
        let mut xhat = vec![0.0f32; m * n];
        let mut inv_std = vec![0.0f32; m];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mean) * istd;
            }
        }
        let g = self.value(gamma).to_vec();
        let b = self.value(beta).to_vec();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = g[j] * xhat[i * n + j] + b[j];
            }
        }
        let ng = self.needs(a) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(m, n, out, ng, Op::LayerNorm { a, gamma, beta, xhat, inv_std }))
    }

    /// Inverted-scaling dropout: identity in eval mode.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f32, rng: &mut R) -> Var {
        if !self.train_mode || rate <= 0.0 {
            return a;
        }
        let (m, n) = self.shape(a);
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f32> = (0..m * n)
            .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { scale })
            .collect();
        let out: Vec<f32> = self.value(a).iter().zip(&keep).map(|(x, k)| x * k).collect();
        let ng = self.needs(a);
        self.push(m, n, out, ng, Op::Dropout { a, keep })
    }

    /// Contiguous row slice [start, start+len).
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= m, "slice_rows out of range");
        let out = self.value(a)[start * n..(start + len) * n].to_vec();
        let ng = self.needs(a);
        self.push(len, n, out, ng, Op::SliceRows { a, start })
    }

    /// Contiguous column slice [start, start+len).
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= n, "slice_cols out of range");
        let x = self.value(a);
        let mut out = vec![0.0f32; m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len].copy_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let ng = self.needs(a);
        self.push(m, len, out, ng, Op::SliceCols { a, start })
    }

    /// Row gather; indices may repeat. Doubles as embedding lookup when `a`
    /// is an embedding matrix.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (m, n) = self.shape(a);
        assert!(idx.iter().all(|&i| i < m), "gather_rows index out of range");
        let x = self.value(a);
        let mut out = vec![0.0f32; idx.len() * n];
        for (r, &i) in idx.iter().enumerate() {
            out[r * n..(r + 1) * n].copy_from_slice(&x[i * n..(i + 1) * n]);
        }
        let ng = self.needs(a);
        self.push(idx.len(), n, out, ng, Op::GatherRows { a, idx: idx.to_vec() })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![m],
                    right: vec![pm, pn],
                });
            }
            total += pn;
        }
        let mut out = vec![0.0f32; m * total];
        let mut off = 0;
        for &p in parts {
            let (_, pn) = self.shape(p);
            let x = self.value(p);
            for i in 0..m {
                out[i * total + off..i * total + off + pn]
                    .copy_from_slice(&x[i * pn..(i + 1) * pn]);
            }
            off += pn;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(m, total, out, ng, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Vertical stack; all parts share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).1;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![n],
                    right: vec![pm, pn],
                });
            }
            total += pm;
        }
        let mut out = Vec::with_capacity(total * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(total, n, out, ng, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let x = self.value(a);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let ng = self.needs(a);
        self.push(n, m, out, ng, Op::Transpose { a })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).iter().sum();
        let ng = self.needs(a);
        self.push(1, 1, vec![s], ng, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let len = self.value(a).len();
        let s: f32 = self.value(a).iter().sum::<f32>() / len as f32;
        let ng = self.needs(a);
        self.push(1, 1, vec![s], ng, Op::Mean { a })
    }

    /// Mean cross-entropy of row-wise softmax against integer class targets.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var, TensorError> {
        let (m, n) = self.shape(logits);
        if targets.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_logits",
                left: vec![m, n],
                right: vec![targets.len()],
            });
        }
        assert!(targets.iter().all(|&t| t < n), "class target out of range");
        let x = self.value(logits);
        let mut probs = vec![0.0f32; m * n];
        let mut loss = 0.0f64;
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let maxv = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for j in 0..n {
                let e = (row[j] - maxv).exp();
                probs[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                probs[i * n + j] /= denom;
            }
            loss -= (probs[i * n + targets[i]].max(1e-30) as f64).ln();
        }
        let loss = (loss / m as f64) as f32;
        let ng = self.needs(logits);
        Ok(self.push(
            1,
            1,
            vec![loss],
            ng,
            Op::CrossEntropyLogits { logits, probs, targets: targets.to_vec() },
        ))
    }

    /// Mean binary cross-entropy with logits against {0,1} targets.
    pub fn bce_logits(&mut self, logits: Var, targets: &[f32]) -> Result<Var, TensorError> {
        let (m, n) = self.shape(logits);
        if targets.len() != m * n {
            return Err(TensorError::ShapeMismatch {
                op: "bce_logits",
                left: vec![m, n],
                right: vec![targets.len()],
            });
        }
        let x = self.value(logits);
        let mut loss = 0.0f64;
        for (z, t) in x.iter().zip(targets) {
            // max(z,0) - z t + ln(1 + exp(-|z|)), numerically stable
            loss += (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()) as f64;
        }
        let loss = (loss / (m * n) as f64) as f32;
        let ng = self.needs(logits);
        Ok(self.push(1, 1, vec![loss], ng, Op::BceLogits { logits, targets: targets.to_vec() }))
    }

    /// Reverse sweep from a scalar loss. Gradients of trainable parameters
    /// accumulate additively into their `Param::grad` buffers; repeated calls
    /// without zeroing therefore add up.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let (m, n) = self.shape(loss);
        if m != 1 || n != 1 {
            return Err(TensorError::NonScalarLoss(vec![m, n]));
        }
        for g in &mut self.grads {
            g.clear();
        }
        self.grads[loss.0] = vec![1.0];

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.propagate(i, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Var) {
        if self.grads[v.0].is_empty() {
            let len = self.nodes[v.0].data.len();
            self.grads[v.0] = vec![0.0; len];
        }
    }

    fn add_grad(&mut self, v: Var, contrib: &[f32]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        self.ensure_grad(v);
        for (g, c) in self.grads[v.0].iter_mut().zip(contrib) {
            *g += c;
        }
    }

    fn propagate(&mut self, i: usize, g: &[f32]) {
        let (m, n) = (self.nodes[i].rows, self.nodes[i].cols);
        // Ops that need structured access are handled with local buffers to
        // keep the borrow checker out of the way; these copies are small
        // relative to the matmuls.
        match &self.nodes[i].op {
            Op::Leaf(p) => {
                if let Some(p) = p {
                    let mut pb = p.borrow_mut();
                    if pb.trainable {
                        let grad = pb.grad.get_or_insert_with(|| {
                            Tensor::zeros(&[m, n])
                        });
                        for (pg, c) in grad.data_mut().iter_mut().zip(g) {
                            *pg += c;
                        }
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (_, k) = self.shape(a);
                if self.needs(a) {
                    // dA = g · Bᵀ
                    let mut da = vec![0.0f32; m * k];
                    matmul_nt_acc(g, self.value(b), &mut da, m, n, k);
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    // dB = Aᵀ · g
                    let mut db = vec![0.0f32; k * n];
                    matmul_tn_acc(self.value(a), g, &mut db, k, m, n);
                    self.add_grad(b, &db);
                }
            }
            Op::MatmulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (_, k) = self.shape(a);
                if self.needs(a) {
                    // y = A·Bᵀ, dA = g · B
                    let mut da = vec![0.0f32; m * k];
                    matmul_nn_acc(g, self.value(b), &mut da, m, n, k);
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    // dB = gᵀ · A
                    let mut db = vec![0.0f32; n * k];
                    matmul_tn_acc(g, self.value(a), &mut db, n, m, k);
                    self.add_grad(b, &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            Op::AddRow { a, bias } => {
                let (a, bias) = (*a, *bias);
                self.add_grad(a, g);
                if self.needs(bias) {
                    let mut db = vec![0.0f32; n];
                    for row in g.chunks(n) {
                        for (d, c) in db.iter_mut().zip(row) {
                            *d += c;
                        }
                    }
                    self.add_grad(bias, &db);
                }
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, g);
                if self.needs(b) {
                    let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                    self.add_grad(b, &neg);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da: Vec<f32> = g.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f32> = g.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                    self.add_grad(b, &db);
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<f32> = g.iter().map(|v| v * c).collect();
                self.add_grad(a, &da);
            }
            Op::Tanh { a } => {
                let a = *a;
                let da: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let da: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Gelu { a } => {
                let a = *a;
                let da: Vec<f32> = g
                    .iter()
                    .zip(self.value(a))
                    .map(|(g, x)| g * gelu_grad(*x))
                    .collect();
                self.add_grad(a, &da);
            }
            Op::SoftmaxRows { a } => {
                let a = *a;
                let y = &self.nodes[i].data;
                let mut da = vec![0.0f32; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        da[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_grad(a, &da);
            }
            Op::LayerNorm { a, gamma, beta, xhat, inv_std } => {
                let (a, gamma, beta) = (*a, *gamma, *beta);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                if self.needs(beta) {
                    let mut db = vec![0.0f32; n];
                    for row in g.chunks(n) {
                        for (d, c) in db.iter_mut().zip(row) {
                            *d += c;
                        }
                    }
                    self.add_grad(beta, &db);
                }
                if self.needs(gamma) {
                    let mut dg = vec![0.0f32; n];
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                    self.add_grad(gamma, &dg);
                }
                if self.needs(a) {
                    let gv = self.value(gamma).to_vec();
                    let mut da = vec![0.0f32; m * n];
                    for r in 0..m {
                        let mut mean_dxhat = 0.0f32;
                        let mut mean_dxhat_xhat = 0.0f32;
                        for j in 0..n {
                            let dxh = g[r * n + j] * gv[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[r * n + j];
                        }
                        mean_dxhat /= n as f32;
                        mean_dxhat_xhat /= n as f32;
                        for j in 0..n {
                            let dxh = g[r * n + j] * gv[j];
                            da[r * n + j] = inv_std[r]
                                * (dxh - mean_dxhat - xhat[r * n + j] * mean_dxhat_xhat);
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::Dropout { a, keep } => {
                let a = *a;
                let da: Vec<f32> = g.iter().zip(keep).map(|(g, k)| g * k).collect();
                self.add_grad(a, &da);
            }
            Op::SliceRows { a, start } => {
                let (a, start) = (*a, *start);
                if self.needs(a) {
                    let (am, an) = self.shape(a);
                    let mut da = vec![0.0f32; am * an];
                    da[start * an..start * an + g.len()].copy_from_slice(g);
                    self.add_grad(a, &da);
                }
            }
            Op::SliceCols { a, start } => {
                let (a, start) = (*a, *start);
                if self.needs(a) {
                    let (am, an) = self.shape(a);
                    let mut da = vec![0.0f32; am * an];
                    for r in 0..m {
                        for j in 0..n {
                            da[r * an + start + j] = g[r * n + j];
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::GatherRows { a, idx } => {
                let a = *a;
                let idx = idx.clone();
                if self.needs(a) {
                    let (am, an) = self.shape(a);
                    let mut da = vec![0.0f32; am * an];
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            da[src * an + j] += g[r * n + j];
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let (_, pn) = self.shape(p);
                    if self.needs(p) {
                        let mut dp = vec![0.0f32; m * pn];
                        for r in 0..m {
                            dp[r * pn..(r + 1) * pn]
                                .copy_from_slice(&g[r * n + off..r * n + off + pn]);
                        }
                        self.add_grad(p, &dp);
                    }
                    off += pn;
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let (pm, pn) = self.shape(p);
                    if self.needs(p) {
                        self.add_grad(p, &g[off..off + pm * pn]);
                    }
                    off += pm * pn;
                }
            }
            Op::Transpose { a } => {
                let a = *a;
                if self.needs(a) {
                    // this node is n? rows = original cols
                    let (am, an) = self.shape(a);
                    let mut da = vec![0.0f32; am * an];
                    for r in 0..m {
                        for j in 0..n {
                            da[j * an + r] = g[r * n + j];
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::Sum { a } => {
                let a = *a;
                let len = self.value(a).len();
                let da = vec![g[0]; len];
                self.add_grad(a, &da);
            }
            Op::Mean { a } => {
                let a = *a;
                let len = self.value(a).len();
                let da = vec![g[0] / len as f32; len];
                self.add_grad(a, &da);
            }
            Op::CrossEntropyLogits { logits, probs, targets } => {
                let logits = *logits;
                if self.needs(logits) {
                    let (lm, ln) = self.shape(logits);
                    let mut da = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        da[r * ln + t] -= 1.0;
                    }
                    let scale = g[0] / lm as f32;
                    for v in &mut da {
                        *v *= scale;
                    }
                    self.add_grad(logits, &da);
                }
            }
            Op::BceLogits { logits, targets } => {
                let logits = *logits;
                if self.needs(logits) {
                    let x = self.value(logits);
                    let scale = g[0] / x.len() as f32;
                    let da: Vec<f32> = x
                        .iter()
                        .zip(targets)
                        .map(|(z, t)| scale * (sigmoid(*z) - t))
                        .collect();
                    self.add_grad(logits, &da);
                }
            }
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of a scalar function of one flat input.
    fn central_diff(
        f: &dyn Fn(&[f32]) -> f32,
        x: &[f32],
        h: f32,
    ) -> Vec<f32> {
        let mut out = vec![0.0f32; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            out[i] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn assert_close(got: &[f32], want: &[f32], rel: f32) {
        for (g, w) in got.iter().zip(want) {
            let denom = w.abs().max(1e-2);
            assert!(
                (g - w).abs() / denom <= rel,
                "gradient mismatch: got {g}, oracle {w}"
            );
        }
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut t = Tape::new(false);
        let i2 = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let v = t.constant(2, 1, vec![3.0, 4.0]);
        let y = t.matmul(i2, v).unwrap();
        assert_eq!(t.value(y), &[3.0, 4.0]);

        let a = t.constant(1, 1, vec![2.0]);
        let b = t.constant(1, 1, vec![5.0]);
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y), &[10.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new(false);
        let a = t.constant(2, 3, vec![0.0; 6]);
        let b = t.constant(2, 2, vec![0.0; 4]);
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_single_unmasked() {
        let mut t = Tape::new(false);
        let a = t.constant(1, 3, vec![0.0, 0.0, 0.0]);
        let y = t.softmax_rows(a, None).unwrap();
        for v in t.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }

        let a = t.constant(1, 2, vec![4.2, 100.0]);
        let y = t.softmax_rows(a, Some(&[true, false])).unwrap();
        assert_eq!(t.value(y), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_direct_formula_oracle() {
        // extended-precision exp/normalize of [1,2,3]
        let logits = [1.0f64, 2.0, 3.0];
        let denom: f64 = logits.iter().map(|v| v.exp()).sum();
        let want: Vec<f32> = logits.iter().map(|v| (v.exp() / denom) as f32).collect();
        let mut t = Tape::new(false);
        let a = t.constant(1, 3, vec![1.0, 2.0, 3.0]);
        let y = t.softmax_rows(a, None).unwrap();
        for (g, w) in t.value(y).iter().zip(&want) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let mut t = Tape::new(false);
        let a = t.constant(1, 2, vec![1.0, 2.0]);
        assert!(matches!(
            t.softmax_rows(a, Some(&[false, false])),
            Err(TensorError::AllMasked { row: 0 })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one_masked_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (m, n) = (4, 6);
            let data: Vec<f32> = (0..m * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mask: Vec<bool> = (0..m * n).map(|i| i % n <= i / n + 1).collect();
            let mut t = Tape::new(false);
            let a = t.constant(m, n, data);
            let y = t.softmax_rows(a, Some(&mask)).unwrap();
            let v = t.value(y);
            for r in 0..m {
                let s: f32 = v[r * n..(r + 1) * n].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                for j in 0..n {
                    if !mask[r * n + j] {
                        assert_eq!(v[r * n + j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let mut t = Tape::new(false);
        let a = t.constant(1, 4, vec![7.0; 4]);
        let g = t.constant(1, 4, vec![1.0; 4]);
        let b = t.constant(1, 4, vec![0.0; 4]);
        let y = t.layer_norm(a, g, b, 1e-5).unwrap();
        for v in t.value(y) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut t = Tape::new(false);
        let a = t.constant(1, 2, vec![1.0, -1.0]);
        let g = t.constant(1, 2, vec![1.0, 1.0]);
        let b = t.constant(1, 2, vec![0.0, 0.0]);
        let y = t.layer_norm(a, g, b, 1e-12).unwrap();
        let v = t.value(y);
        assert!((v[0] - 1.0).abs() < 1e-5 && (v[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_mean_std_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut t = Tape::new(false);
        let a = t.constant(1, 8, data);
        let g = t.constant(1, 8, vec![1.0; 8]);
        let b = t.constant(1, 8, vec![0.0; 8]);
        let y = t.layer_norm(a, g, b, 1e-5).unwrap();
        let v = t.value(y);
        let mean: f32 = v.iter().sum::<f32>() / 8.0;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / 8.0).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-3);
    }

    #[test]
    fn gelu_reference_points() {
        let mut t = Tape::new(false);
        let a = t.constant(1, 4, vec![0.0, 1.0, 8.0, -8.0]);
        let y = t.gelu(a);
        let v = t.value(y);
        assert_eq!(v[0], 0.0);
        // extended-precision tanh-approximation at x=1
        let c = (2.0f64 / std::f64::consts::PI).sqrt();
        let want = 0.5 * (1.0 + (c * (1.0 + 0.044715)).tanh());
        assert!((v[1] as f64 - want).abs() < 1e-4);
        assert!((v[2] - 8.0).abs() < 1e-3);
        assert!(v[3].abs() < 1e-3);
    }

    #[test]
    fn backward_sum_gives_ones_and_quadratic_gives_2w() {
        let mut t = Tape::new(true);
        let w = t.leaf(2, 3, vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25]);
        let loss = t.sum(w);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0; 6]);

        let mut t = Tape::new(true);
        let data = vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25];
        let w = t.leaf(2, 3, data.clone());
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        let want: Vec<f32> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(t.grad(w).unwrap(), want.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new(true);
        let w = t.leaf(2, 2, vec![1.0; 4]);
        assert!(matches!(t.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn double_backward_doubles_param_grads() {
        use crate::models::{Param, ParamGroup};
        let p: ParamRef = Rc::new(RefCell::new(Param::trainable(
            "w",
            ParamGroup::Input,
            Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap(),
        )));
        let mut t = Tape::new(true);
        let w = t.param(&p);
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        let after_one: Vec<f32> = p.borrow().grad.as_ref().unwrap().data().to_vec();
        t.backward(loss).unwrap();
        let after_two: Vec<f32> = p.borrow().grad.as_ref().unwrap().data().to_vec();
        for (a, b) in after_one.iter().zip(&after_two) {
            assert!((2.0 * a - b).abs() < 1e-6);
        }
    }

    /// Every differentiable op vs central finite differences on random
    /// inputs in [-2, 2].
    #[test]
    fn ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let h = 1e-2f32; // f32 forward evals; 1e-2 balances truncation/rounding

        type Builder = fn(&mut Tape, Var) -> Var;
        let cases: Vec<(&str, usize, usize, Builder)> = vec![
            ("tanh", 3, 4, |t, x| {
                let y = t.tanh(x);
                t.sum(y)
            }),
            ("sigmoid", 3, 4, |t, x| {
                let y = t.sigmoid(x);
                t.sum(y)
            }),
            ("gelu", 3, 4, |t, x| {
                let y = t.gelu(x);
                t.sum(y)
            }),
            ("softmax", 2, 5, |t, x| {
                let y = t.softmax_rows(x, None).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("matmul_left", 3, 4, |t, x| {
                let w = t.constant(4, 2, (0..8).map(|i| 0.3 * i as f32 - 1.0).collect());
                let y = t.matmul(x, w).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("matmul_right", 4, 2, |t, x| {
                let a = t.constant(3, 4, (0..12).map(|i| 0.2 * i as f32 - 1.0).collect());
                let y = t.matmul(a, x).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("layer_norm_x", 2, 6, |t, x| {
                let g = t.constant(1, 6, vec![1.2, 0.8, -0.5, 1.0, 0.3, 2.0]);
                let b = t.constant(1, 6, vec![0.1, -0.2, 0.3, 0.0, 0.5, -1.0]);
                let y = t.layer_norm(x, g, b, 1e-5).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("layer_norm_gamma", 1, 6, |t, x| {
                let a = t.constant(2, 6, (0..12).map(|i| (i as f32 * 0.7).sin()).collect());
                let b = t.constant(1, 6, vec![0.0; 6]);
                let y = t.layer_norm(a, x, b, 1e-5).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("transpose", 3, 4, |t, x| {
                let y = t.transpose(x);
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("slice_gather_concat", 4, 6, |t, x| {
                let a = t.slice_rows(x, 1, 2);
                let b = t.slice_cols(a, 2, 3);
                let c = t.gather_rows(x, &[0, 3]);
                let d = t.slice_cols(c, 0, 3);
                let e = t.concat_cols(&[b, d]).unwrap();
                let sq = t.mul(e, e).unwrap();
                t.sum(sq)
            }),
            ("mean", 3, 4, |t, x| {
                let sq = t.mul(x, x).unwrap();
                t.mean(sq)
            }),
            ("bce", 2, 4, |t, x| {
                let targets = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
                t.bce_logits(x, &targets).unwrap()
            }),
            ("cross_entropy", 3, 5, |t, x| {
                t.cross_entropy_logits(x, &[0, 3, 2]).unwrap()
            }),
            ("add_row_bias", 1, 4, |t, x| {
                let a = t.constant(3, 4, (0..12).map(|i| 0.1 * i as f32).collect());
                let y = t.add_row(a, x).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
        ];

        for (name, m, n, build) in cases {
            let x0: Vec<f32> = (0..m * n).map(|_| rng.gen_range(-2.0..2.0)).collect();

            let f = |xs: &[f32]| -> f32 {
                let mut t = Tape::new(false);
                let x = t.leaf(m, n, xs.to_vec());
                let loss = build(&mut t, x);
                t.value(loss)[0]
            };
            let oracle = central_diff(&f, &x0, h);

            let mut t = Tape::new(false);
            let x = t.leaf(m, n, x0.clone());
            let loss = build(&mut t, x);
            t.backward(loss).unwrap();
            let got = t.grad(x).unwrap();
            assert!(got.len() == oracle.len(), "{name}");
            for (g, w) in got.iter().zip(&oracle) {
                let denom = w.abs().max(0.05);
                assert!(
                    (g - w).abs() / denom <= 1e-2,
                    "{name}: autodiff {g} vs finite-diff {w}"
                );
            }
            // keep the helper honest
            assert_close(got, &oracle, 1e-1);
        }
    }

    #[test]
    fn dropout_eval_identity_train_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // eval mode: identity (same Var, bit-identical values)
        let mut t = Tape::new(false);
        let a = t.constant(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = t.dropout(a, 0.5, &mut rng);
        assert_eq!(a, y);

        // train mode: E[out] == in, 3-sigma over 1e5 samples of a single unit
        let rate = 0.3f32;
        let n = 100_000usize;
        let mut sum = 0.0f64;
        let mut t = Tape::new(true);
        let a = t.constant(1, n, vec![1.0; n]);
        let y = t.dropout(a, rate, &mut rng);
        for v in t.value(y) {
            sum += *v as f64;
        }
        let mean = sum / n as f64;
        // per-element variance of inverted dropout of 1.0: p/(1-p)
        let sigma = ((rate as f64) / (1.0 - rate as f64) / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}, sigma {sigma}");
    }

    #[test]
    fn dropout_gradient_uses_same_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new(true);
        let x = t.leaf(1, 64, vec![1.0; 64]);
        let y = t.dropout(x, 0.5, &mut rng);
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap().to_vec();
        let v = t.value(y);
        for (gi, vi) in g.iter().zip(v) {
            assert_eq!(*gi, *vi); // input was all-ones, grad == mask scaling
        }
    }
}
