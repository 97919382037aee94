//! Reverse-mode automatic differentiation over an operation tape.
//!
//! A [`Tape`] is an arena of nodes recorded during a forward pass; each
//! node stores its value, the operation that produced it, and enough
//! saved state to run the backward rule. Replaying the tape in reverse
//! populates gradients for every grad-requiring ancestor of the loss.
//!
//! Tapes are single-writer: one tape per rollout/training thread.
//! Parameter values enter as shared `Arc` snapshots, so concurrent tapes
//! never copy or mutate the trainable parameters.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::kernels;
use crate::numeric::params::ParamId;
use crate::numeric::tensor::Tensor;

const RMS_EPS: f64 = 1e-8;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
}

enum Storage {
    Owned(Vec<f64>),
    Shared(Arc<Vec<f64>>),
}

impl Storage {
    fn as_slice(&self) -> &[f64] {
        match self {
            Storage::Owned(v) => v,
            Storage::Shared(v) => v,
        }
    }
}

struct MoeSlotSave {
    expert: usize,
    pre_act: Vec<f64>,
    act: Vec<f64>,
    expert_out: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddConstVec(Var),
    Exp(Var),
    Ln(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    MinElem(Var, Var),
    MatMul(Var, Var),
    Gelu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    SoftmaxRows { x: Var },
    LogSoftmaxRows { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Gather { x: Var, idx: Vec<(usize, usize)> },
    SegmentSum { x: Var, seg: usize },
    Sum(Var),
    MeanRows(Var),
    DotConst(Var, Vec<f64>),
    CausalAttention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    MoeExperts {
        x: Var,
        gate: Var,
        expert_params: Vec<[Var; 4]>,
        selections: Vec<Vec<usize>>,
        saved: Vec<Vec<MoeSlotSave>>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Storage,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Ordered record of forward operations with backward rules.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    param_bindings: Vec<(ParamId, Var)>,
    consumed: bool,
}

impl Tape {
    pub fn new(grad_enabled: bool) -> Self {
        Tape { nodes: Vec::new(), grad_enabled, param_bindings: Vec::new(), consumed: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.idx].value.as_slice()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let n = &self.nodes[v.idx];
        assert_eq!(n.rows * n.cols, 1, "scalar_value on non-scalar node");
        n.value.as_slice()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.idx];
        (n.rows, n.cols)
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.idx].grad.as_deref()
    }

    /// Parameter bindings recorded by [`Tape::param`], in binding order.
    pub fn param_bindings(&self) -> &[(ParamId, Var)] {
        &self.param_bindings
    }

    fn push(&mut self, rows: usize, cols: usize, value: Storage, needs_grad: bool, op: Op) -> Var {
        assert!(!self.consumed, "tape already consumed by backward");
        let needs_grad = needs_grad && self.grad_enabled;
        let grad = needs_grad.then(|| vec![0.0; rows * cols]);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { rows, cols, value, grad, needs_grad, op });
        Var { idx: self.nodes.len() - 1 }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.idx].needs_grad
    }

    // ─── node constructors ──────────────────────────────────────────

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len());
        self.push(rows, cols, Storage::Owned(data), false, Op::Leaf)
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.rows_cols();
        self.leaf(r, c, t.data.clone())
    }

    /// Leaf that participates in differentiation (used by gradient_check).
    pub fn input_grad(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.rows_cols();
        self.push(r, c, Storage::Owned(t.data.clone()), true, Op::Leaf)
    }

    /// Bind a shared parameter snapshot. Repeat bindings of the same
    /// parameter return the original node so gradients accumulate once.
    pub fn param(&mut self, id: ParamId, data: &Arc<Vec<f64>>, rows: usize, cols: usize) -> Var {
        if let Some(&(_, var)) = self.param_bindings.iter().find(|(pid, _)| *pid == id) {
            return var;
        }
        assert_eq!(rows * cols, data.len());
        let var = self.push(rows, cols, Storage::Shared(Arc::clone(data)), true, Op::Leaf);
        self.param_bindings.push((id, var));
        var
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "add shape mismatch");
        let v: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(r, c, Storage::Owned(v), needs, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "sub shape mismatch");
        let v: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(r, c, Storage::Owned(v), needs, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "mul shape mismatch");
        let v: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(r, c, Storage::Owned(v), needs, Op::Mul(a, b))
    }

    /// [r x c] + [1 x c] broadcast over rows.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Var {
        let (r, c) = self.shape(m);
        assert_eq!(self.shape(bias), (1, c), "bias shape mismatch");
        let bv = self.value(bias).to_vec();
        let mut v = self.value(m).to_vec();
        for row in v.chunks_exact_mut(c) {
            for (o, b) in row.iter_mut().zip(&bv) {
                *o += b;
            }
        }
        let needs = self.needs(m) || self.needs(bias);
        self.push(r, c, Storage::Owned(v), needs, Op::AddBias(m, bias))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        let needs = self.needs(a);
        self.push(r, c, Storage::Owned(v), needs, Op::Scale(a, factor))
    }

    /// Elementwise add of a constant vector (same element count).
    pub fn add_const_vec(&mut self, a: Var, consts: &[f64]) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r * c, consts.len());
        let v: Vec<f64> = self.value(a).iter().zip(consts).map(|(x, y)| x + y).collect();
        let needs = self.needs(a);
        self.push(r, c, Storage::Owned(v), needs, Op::AddConstVec(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a).iter().map(|x| x.exp()).collect();
        let needs = self.needs(a);
        self.push(r, c, Storage::Owned(v), needs, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a).iter().map(|x| x.ln()).collect();
        let needs = self.needs(a);
        self.push(r, c, Storage::Owned(v), needs, Op::Ln(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let needs = self.needs(a);
        self.push(r, c, Storage::Owned(v), needs, Op::Clamp { x: a, lo, hi })
    }

    /// Elementwise minimum; ties route the gradient to the first input.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "min shape mismatch");
        let v: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x.min(*y)).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(r, c, Storage::Owned(v), needs, Op::MinElem(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (r, k) = self.shape(a);
        let (k2, c) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let v = kernels::matmul(self.value(a), self.value(b), r, k, c);
        let needs = self.needs(a) || self.needs(b);
        self.push(r, c, Storage::Owned(v), needs, Op::MatMul(a, b))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let needs = self.needs(a);
        self.push(r, c, Storage::Owned(v), needs, Op::Gelu(a))
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c), "gain shape mismatch");
        let gv = self.value(gain).to_vec();
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        let mut inv_rms = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms[i] = inv;
            for j in 0..c {
                out[i * c + j] = gv[j] * row[j] * inv;
            }
        }
        let needs = self.needs(x) || self.needs(gain);
        self.push(r, c, Storage::Owned(out), needs, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Row-wise masked softmax; masked entries map to exactly 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(m) = mask {
            assert_eq!(m.len(), r * c, "mask shape mismatch");
        }
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            kernels::row_softmax_masked(
                &xv[i * c..(i + 1) * c],
                mask.map(|m| &m[i * c..(i + 1) * c]),
                i,
                &mut out[i * c..(i + 1) * c],
                None,
            )?;
        }
        let needs = self.needs(x);
        Ok(self.push(r, c, Storage::Owned(out), needs, Op::SoftmaxRows { x }))
    }

    /// Row-wise masked log-softmax; masked entries hold `-inf` and are
    /// never gathered, so no gradient flows through them.
    pub fn log_softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(m) = mask {
            assert_eq!(m.len(), r * c, "mask shape mismatch");
        }
        let xv = self.value(x);
        let mut probs = vec![0.0; c];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            kernels::row_softmax_masked(
                &xv[i * c..(i + 1) * c],
                mask.map(|m| &m[i * c..(i + 1) * c]),
                i,
                &mut probs,
                Some(&mut out[i * c..(i + 1) * c]),
            )?;
        }
        let needs = self.needs(x);
        Ok(self.push(r, c, Storage::Owned(out), needs, Op::LogSoftmaxRows { x }))
    }

    /// Row lookup: out[t, :] = table[ids[t], :].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (rows, d) = self.shape(table);
        let tv = self.value(table);
        let mut out = vec![0.0; ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            assert!(id < rows, "embedding id out of range");
            out[t * d..(t + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(ids.len(), d, Storage::Owned(out), needs, Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Gather scalar entries (row, col) into a vector.
    pub fn gather(&mut self, x: Var, idx: &[(usize, usize)]) -> Var {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let v: Vec<f64> = idx
            .iter()
            .map(|&(i, j)| {
                assert!(i < r && j < c, "gather index out of range");
                xv[i * c + j]
            })
            .collect();
        let needs = self.needs(x);
        self.push(1, idx.len(), Storage::Owned(v), needs, Op::Gather { x, idx: idx.to_vec() })
    }

    /// Sum each consecutive block of `seg` entries of a vector.
    pub fn segment_sum(&mut self, x: Var, seg: usize) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(r, 1, "segment_sum expects a vector");
        assert!(seg > 0 && c % seg == 0, "segment size must divide length");
        let v: Vec<f64> = self.value(x).chunks_exact(seg).map(|ch| ch.iter().sum()).collect();
        let needs = self.needs(x);
        self.push(1, c / seg, Storage::Owned(v), needs, Op::SegmentSum { x, seg })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().sum::<f64>();
        let needs = self.needs(a);
        self.push(1, 1, Storage::Owned(vec![v]), needs, Op::Sum(a))
    }

    /// Column means over rows: [r x c] -> [1 x c].
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut v = vec![0.0; c];
        for row in av.chunks_exact(c) {
            for (o, x) in v.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in v.iter_mut() {
            *o /= r as f64;
        }
        let needs = self.needs(a);
        self.push(1, c, Storage::Owned(v), needs, Op::MeanRows(a))
    }

    /// Dot product with a constant vector -> scalar.
    pub fn dot_const(&mut self, a: Var, w: &[f64]) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r * c, w.len());
        let v = self.value(a).iter().zip(w).map(|(x, y)| x * y).sum::<f64>();
        let needs = self.needs(a);
        self.push(1, 1, Storage::Owned(vec![v]), needs, Op::DotConst(a, w.to_vec()))
    }

    /// Multi-head causal self-attention over packed [seq x dim] tensors.
    /// Position i attends only to positions <= i; each row's values are
    /// therefore independent of any later position.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (s, d) = self.shape(q);
        assert_eq!(self.shape(k), (s, d));
        assert_eq!(self.shape(v), (s, d));
        assert!(heads > 0 && d % heads == 0, "head count must divide dim");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut probs = vec![0.0; heads * s * s];
        let mut out = vec![0.0; s * d];
        let mut scores = vec![0.0; s];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..s {
                let qi = &qv[i * d + off..i * d + off + dh];
                let mut maxv = f64::NEG_INFINITY;
                for (j, sc) in scores.iter_mut().enumerate().take(i + 1) {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    *sc = dot * scale;
                    if *sc > maxv {
                        maxv = *sc;
                    }
                }
                let mut denom = 0.0;
                for sc in scores.iter_mut().take(i + 1) {
                    *sc = (*sc - maxv).exp();
                    denom += *sc;
                }
                let arow = &mut probs[(h * s + i) * s..(h * s + i) * s + i + 1];
                for (a, sc) in arow.iter_mut().zip(scores.iter().take(i + 1)) {
                    *a = sc / denom;
                }
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let a = probs[(h * s + i) * s + j];
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += a * x;
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(s, d, Storage::Owned(out), needs, Op::CausalAttention { q, k, v, heads, probs })
    }

    /// Sparse mixture layer: out[t] = sum over selected experts e of
    /// gate[t, e] * expert_e(x[t]). Expert weights are (w1, b1, w2, b2)
    /// with a GELU between the two affine maps. Selection weights are the
    /// raw gating probabilities of the selected experts, not renormalized.
    pub fn moe_experts(
        &mut self,
        x: Var,
        gate: Var,
        expert_params: &[[Var; 4]],
        selections: &[Vec<usize>],
    ) -> Var {
        let (s, d) = self.shape(x);
        let num_experts = expert_params.len();
        assert_eq!(self.shape(gate), (s, num_experts), "gate shape mismatch");
        assert_eq!(selections.len(), s, "one selection set per token");
        let hid = self.shape(expert_params[0][1]).1;
        for p in expert_params {
            assert_eq!(self.shape(p[0]), (d, hid));
            assert_eq!(self.shape(p[1]), (1, hid));
            assert_eq!(self.shape(p[2]), (hid, d));
            assert_eq!(self.shape(p[3]), (1, d));
        }
        let needs = self.grad_enabled
            && (self.needs(x)
                || self.needs(gate)
                || expert_params.iter().any(|p| p.iter().any(|&v| self.needs(v))));

        let mut out = vec![0.0; s * d];
        let mut saved: Vec<Vec<MoeSlotSave>> = Vec::with_capacity(if needs { s } else { 0 });
        for (t, sel) in selections.iter().enumerate() {
            let xt = &self.value(x)[t * d..(t + 1) * d];
            let mut token_saves = Vec::with_capacity(if needs { sel.len() } else { 0 });
            let mut acc = vec![0.0; d];
            for &e in sel {
                assert!(e < num_experts, "expert index out of range");
                let w1 = self.value(expert_params[e][0]);
                let b1 = self.value(expert_params[e][1]);
                let w2 = self.value(expert_params[e][2]);
                let b2 = self.value(expert_params[e][3]);
                let mut pre = b1.to_vec();
                for (i, &xv) in xt.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &w1[i * hid..(i + 1) * hid];
                    for (p, w) in pre.iter_mut().zip(wrow) {
                        *p += xv * w;
                    }
                }
                let act: Vec<f64> = pre.iter().map(|&u| kernels::gelu(u)).collect();
                let mut expert_out = b2.to_vec();
                for (m, &av) in act.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let wrow = &w2[m * d..(m + 1) * d];
                    for (o, w) in expert_out.iter_mut().zip(wrow) {
                        *o += av * w;
                    }
                }
                let g = self.value(gate)[t * num_experts + e];
                for (a, y) in acc.iter_mut().zip(&expert_out) {
                    *a += g * y;
                }
                if needs {
                    token_saves.push(MoeSlotSave { expert: e, pre_act: pre, act, expert_out });
                }
            }
            out[t * d..(t + 1) * d].copy_from_slice(&acc);
            if needs {
                saved.push(token_saves);
            }
        }
        self.push(
            s,
            d,
            Storage::Owned(out),
            needs,
            Op::MoeExperts {
                x,
                gate,
                expert_params: expert_params.to_vec(),
                selections: selections.to_vec(),
                saved,
            },
        )
    }

    // ─── backward ───────────────────────────────────────────────────

    /// Populate gradients of every grad-requiring ancestor of `loss`.
    /// Gradients accumulate additively across multiple uses of a node.
    /// The tape's operation records are cleared afterwards; a second
    /// backward on the same tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(Error::LossNotScalar { rows: r, cols: c });
        }
        if !self.grad_enabled || !self.needs(loss) {
            // Nothing upstream requires gradients; clearing is still the contract.
            self.clear_ops();
            return Ok(());
        }
        if let Some(g) = self.nodes[loss.idx].grad.as_mut() {
            g[0] = 1.0;
        }
        for idx in (0..=loss.idx).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop_node(idx, &op);
        }
        self.clear_ops();
        Ok(())
    }

    fn clear_ops(&mut self) {
        for node in self.nodes.iter_mut() {
            node.op = Op::Leaf;
        }
        self.consumed = true;
    }

    fn add_grad(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.nodes[v.idx].grad.as_mut() {
            f(g);
        }
    }

    fn backprop_node(&mut self, idx: usize, op: &Op) {
        let go = match &self.nodes[idx].grad {
            Some(g) => g.clone(),
            None => return,
        };
        let (rows, cols) = (self.nodes[idx].rows, self.nodes[idx].cols);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(*a, |g| {
                    for (x, y) in g.iter_mut().zip(&go) {
                        *x += y;
                    }
                });
                self.add_grad(*b, |g| {
                    for (x, y) in g.iter_mut().zip(&go) {
                        *x += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, |g| {
                    for (x, y) in g.iter_mut().zip(&go) {
                        *x += y;
                    }
                });
                self.add_grad(*b, |g| {
                    for (x, y) in g.iter_mut().zip(&go) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).to_vec();
                let bv = self.value(*b).to_vec();
                self.add_grad(*a, |g| {
                    for ((x, y), bb) in g.iter_mut().zip(&go).zip(&bv) {
                        *x += y * bb;
                    }
                });
                self.add_grad(*b, |g| {
                    for ((x, y), aa) in g.iter_mut().zip(&go).zip(&av) {
                        *x += y * aa;
                    }
                });
            }
            Op::AddBias(m, bias) => {
                self.add_grad(*m, |g| {
                    for (x, y) in g.iter_mut().zip(&go) {
                        *x += y;
                    }
                });
                self.add_grad(*bias, |g| {
                    for row in go.chunks_exact(cols) {
                        for (x, y) in g.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Scale(a, f) => {
                let f = *f;
                self.add_grad(*a, |g| {
                    for (x, y) in g.iter_mut().zip(&go) {
                        *x += f * y;
                    }
                });
            }
            Op::AddConstVec(a) => {
                self.add_grad(*a, |g| {
                    for (x, y) in g.iter_mut().zip(&go) {
                        *x += y;
                    }
                });
            }
            Op::Exp(a) => {
                let out = self.value(Var { idx }).to_vec();
                self.add_grad(*a, |g| {
                    for ((x, y), o) in g.iter_mut().zip(&go).zip(&out) {
                        *x += y * o;
                    }
                });
            }
            Op::Ln(a) => {
                let av = self.value(*a).to_vec();
                self.add_grad(*a, |g| {
                    for ((x, y), v) in g.iter_mut().zip(&go).zip(&av) {
                        *x += y / v;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).to_vec();
                let (lo, hi) = (*lo, *hi);
                self.add_grad(*x, |g| {
                    for ((gx, gy), v) in g.iter_mut().zip(&go).zip(&xv) {
                        if *v >= lo && *v <= hi {
                            *gx += gy;
                        }
                    }
                });
            }
            Op::MinElem(a, b) => {
                let av = self.value(*a).to_vec();
                let bv = self.value(*b).to_vec();
                self.add_grad(*a, |g| {
                    for (i, (gx, gy)) in g.iter_mut().zip(&go).enumerate() {
                        if av[i] <= bv[i] {
                            *gx += gy;
                        }
                    }
                });
                self.add_grad(*b, |g| {
                    for (i, (gx, gy)) in g.iter_mut().zip(&go).enumerate() {
                        if bv[i] < av[i] {
                            *gx += gy;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (r, k) = self.shape(*a);
                let c = cols;
                let av = self.value(*a).to_vec();
                let bv = self.value(*b).to_vec();
                self.add_grad(*a, |g| kernels::matmul_grad_a(&go, &bv, r, k, c, g));
                self.add_grad(*b, |g| kernels::matmul_grad_b(&av, &go, r, k, c, g));
            }
            Op::Gelu(a) => {
                let av = self.value(*a).to_vec();
                self.add_grad(*a, |g| {
                    for ((x, y), v) in g.iter_mut().zip(&go).zip(&av) {
                        *x += y * kernels::gelu_grad(*v);
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x).to_vec();
                let gv = self.value(*gain).to_vec();
                let c = cols;
                self.add_grad(*gain, |g| {
                    for i in 0..rows {
                        let inv = inv_rms[i];
                        for j in 0..c {
                            g[j] += go[i * c + j] * xv[i * c + j] * inv;
                        }
                    }
                });
                self.add_grad(*x, |g| {
                    for i in 0..rows {
                        let inv = inv_rms[i];
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += go[i * c + j] * gv[j] * xv[i * c + j];
                        }
                        let coef = inv * inv * inv * dot / c as f64;
                        for j in 0..c {
                            g[i * c + j] += go[i * c + j] * gv[j] * inv - xv[i * c + j] * coef;
                        }
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let p = self.value(Var { idx }).to_vec();
                let c = cols;
                self.add_grad(*x, |g| {
                    for i in 0..rows {
                        let prow = &p[i * c..(i + 1) * c];
                        let grow = &go[i * c..(i + 1) * c];
                        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[i * c + j] += prow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows { x } => {
                let lp = self.value(Var { idx }).to_vec();
                let c = cols;
                self.add_grad(*x, |g| {
                    for i in 0..rows {
                        let grow = &go[i * c..(i + 1) * c];
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..c {
                            let p = lp[i * c + j].exp();
                            g[i * c + j] += grow[j] - p * gsum;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = cols;
                self.add_grad(*table, |g| {
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += go[t * d + j];
                        }
                    }
                });
            }
            Op::Gather { x, idx: gidx } => {
                let (_, c) = self.shape(*x);
                self.add_grad(*x, |g| {
                    for (n, &(i, j)) in gidx.iter().enumerate() {
                        g[i * c + j] += go[n];
                    }
                });
            }
            Op::SegmentSum { x, seg } => {
                let seg = *seg;
                self.add_grad(*x, |g| {
                    for (n, chunk) in g.chunks_exact_mut(seg).enumerate() {
                        for v in chunk {
                            *v += go[n];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.add_grad(*a, |g| {
                    for x in g.iter_mut() {
                        *x += go[0];
                    }
                });
            }
            Op::MeanRows(a) => {
                let (r, _) = self.shape(*a);
                let inv = 1.0 / r as f64;
                self.add_grad(*a, |g| {
                    for row in g.chunks_exact_mut(cols) {
                        for (x, y) in row.iter_mut().zip(&go) {
                            *x += y * inv;
                        }
                    }
                });
            }
            Op::DotConst(a, w) => {
                self.add_grad(*a, |g| {
                    for (x, y) in g.iter_mut().zip(w) {
                        *x += go[0] * y;
                    }
                });
            }
            Op::CausalAttention { q, k, v, heads, probs } => {
                let (s, d) = self.shape(*q);
                let heads = *heads;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qv = self.value(*q).to_vec();
                let kv = self.value(*k).to_vec();
                let vv = self.value(*v).to_vec();
                let mut dq = vec![0.0; s * d];
                let mut dk = vec![0.0; s * d];
                let mut dv = vec![0.0; s * d];
                let mut da = vec![0.0; s];
                let mut ds = vec![0.0; s];
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..s {
                        let goi = &go[i * d + off..i * d + off + dh];
                        let arow = &probs[(h * s + i) * s..(h * s + i) * s + i + 1];
                        let mut dot = 0.0;
                        for j in 0..=i {
                            let vj = &vv[j * d + off..j * d + off + dh];
                            da[j] = goi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dot += arow[j] * da[j];
                        }
                        for j in 0..=i {
                            ds[j] = arow[j] * (da[j] - dot);
                        }
                        for j in 0..=i {
                            let a = arow[j];
                            let dsj = ds[j] * scale;
                            let dvj = &mut dv[j * d + off..j * d + off + dh];
                            for (o, g) in dvj.iter_mut().zip(goi) {
                                *o += a * g;
                            }
                            let kj = &kv[j * d + off..j * d + off + dh];
                            let dqi = &mut dq[i * d + off..i * d + off + dh];
                            for (o, x) in dqi.iter_mut().zip(kj) {
                                *o += dsj * x;
                            }
                            let qi = &qv[i * d + off..i * d + off + dh];
                            let dkj = &mut dk[j * d + off..j * d + off + dh];
                            for (o, x) in dkj.iter_mut().zip(qi) {
                                *o += dsj * x;
                            }
                        }
                    }
                }
                self.add_grad(*q, |g| {
                    for (x, y) in g.iter_mut().zip(&dq) {
                        *x += y;
                    }
                });
                self.add_grad(*k, |g| {
                    for (x, y) in g.iter_mut().zip(&dk) {
                        *x += y;
                    }
                });
                self.add_grad(*v, |g| {
                    for (x, y) in g.iter_mut().zip(&dv) {
                        *x += y;
                    }
                });
            }
            Op::MoeExperts { x, gate, expert_params, selections, saved } => {
                let (s, d) = self.shape(*x);
                let num_experts = expert_params.len();
                let hid = self.shape(expert_params[0][1]).1;
                let xv = self.value(*x).to_vec();
                let gv = self.value(*gate).to_vec();
                let mut dx = vec![0.0; s * d];
                let mut dgate = vec![0.0; s * num_experts];
                let mut dw1 = vec![vec![0.0; d * hid]; num_experts];
                let mut db1 = vec![vec![0.0; hid]; num_experts];
                let mut dw2 = vec![vec![0.0; hid * d]; num_experts];
                let mut db2 = vec![vec![0.0; d]; num_experts];
                for (t, sel_saves) in saved.iter().enumerate() {
                    let got = &go[t * d..(t + 1) * d];
                    let xt = &xv[t * d..(t + 1) * d];
                    for save in sel_saves {
                        let e = save.expert;
                        debug_assert!(selections[t].contains(&e));
                        let g = gv[t * num_experts + e];
                        let w1 = self.value(expert_params[e][0]);
                        let w2 = self.value(expert_params[e][2]);
                        dgate[t * num_experts + e] +=
                            got.iter().zip(&save.expert_out).map(|(a, b)| a * b).sum::<f64>();
                        let dy: Vec<f64> = got.iter().map(|v| g * v).collect();
                        for (o, v) in db2[e].iter_mut().zip(&dy) {
                            *o += v;
                        }
                        let mut du = vec![0.0; hid];
                        for m in 0..hid {
                            let w2row = &w2[m * d..(m + 1) * d];
                            let a = save.act[m];
                            if a != 0.0 {
                                for (o, v) in dw2[e][m * d..(m + 1) * d].iter_mut().zip(&dy) {
                                    *o += a * v;
                                }
                            }
                            let da: f64 = w2row.iter().zip(&dy).map(|(a, b)| a * b).sum();
                            du[m] = kernels::gelu_grad(save.pre_act[m]) * da;
                        }
                        for (o, v) in db1[e].iter_mut().zip(&du) {
                            *o += v;
                        }
                        let dxt = &mut dx[t * d..(t + 1) * d];
                        for i in 0..d {
                            let w1row = &w1[i * hid..(i + 1) * hid];
                            let xi = xt[i];
                            if xi != 0.0 {
                                for (o, v) in dw1[e][i * hid..(i + 1) * hid].iter_mut().zip(&du) {
                                    *o += xi * v;
                                }
                            }
                            dxt[i] += w1row.iter().zip(&du).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                self.add_grad(*x, |g| {
                    for (a, b) in g.iter_mut().zip(&dx) {
                        *a += b;
                    }
                });
                self.add_grad(*gate, |g| {
                    for (a, b) in g.iter_mut().zip(&dgate) {
                        *a += b;
                    }
                });
                for (e, params) in expert_params.iter().enumerate() {
                    self.add_grad(params[0], |g| {
                        for (a, b) in g.iter_mut().zip(&dw1[e]) {
                            *a += b;
                        }
                    });
                    self.add_grad(params[1], |g| {
                        for (a, b) in g.iter_mut().zip(&db1[e]) {
                            *a += b;
                        }
                    });
                    self.add_grad(params[2], |g| {
                        for (a, b) in g.iter_mut().zip(&dw2[e]) {
                            *a += b;
                        }
                    });
                    self.add_grad(params[3], |g| {
                        for (a, b) in g.iter_mut().zip(&db2[e]) {
                            *a += b;
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_sum_is_ones() {
        // loss = sum(x), x shape [3] -> grad(x) = [1, 1, 1]
        let mut tape = Tape::new(true);
        let x = tape.input_grad(&Tensor::new(vec![3], vec![0.5, -2.0, 7.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_is_two_x() {
        // loss = sum(x * x), x = [2, -1] -> grad(x) = [4, -2]
        let mut tape = Tape::new(true);
        let x = tape.input_grad(&Tensor::new(vec![2], vec![2.0, -1.0]));
        let sq = tape.mul(x, x);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, -2.0]);
    }

    #[test]
    fn backward_accumulates_across_uses() {
        // loss = sum(x) + sum(x) -> grad(x) = [2, 2]
        let mut tape = Tape::new(true);
        let x = tape.input_grad(&Tensor::new(vec![2], vec![1.0, 2.0]));
        let s1 = tape.sum(x);
        let s2 = tape.sum(x);
        let loss = tape.add(s1, s2);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new(true);
        let x = tape.input_grad(&Tensor::new(vec![2], vec![1.0, 2.0]));
        match tape.backward(x) {
            Err(Error::LossNotScalar { .. }) => {}
            other => panic!("expected LossNotScalar, got {other:?}"),
        }
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new(true);
        let x = tape.input_grad(&Tensor::new(vec![2], vec![1.0, 2.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        match tape.backward(loss) {
            Err(Error::TapeConsumed) => {}
            other => panic!("expected TapeConsumed, got {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let logits = Tensor::new(vec![1, 4], vec![0.2, -1.3, 0.9, 0.4]);
        let target = 2usize;
        let mut tape = Tape::new(true);
        let x = tape.input_grad(&logits);
        let lsm = tape.log_softmax_rows(x, None).unwrap();
        let picked = tape.gather(lsm, &[(0, target)]);
        let nll = tape.sum(picked);
        let loss = tape.scale(nll, -1.0);
        tape.backward(loss).unwrap();
        let grad = tape.grad(x).unwrap().to_vec();

        let probs = kernels::softmax_rows(&logits).unwrap();
        for j in 0..4 {
            let expected = probs.data[j] - if j == target { 1.0 } else { 0.0 };
            assert!((grad[j] - expected).abs() < 1e-12, "j={j}");
        }
    }

    #[test]
    fn min_elem_routes_gradient_to_smaller_branch() {
        let mut tape = Tape::new(true);
        let a = tape.input_grad(&Tensor::new(vec![2], vec![1.0, 5.0]));
        let b = tape.input_grad(&Tensor::new(vec![2], vec![3.0, 2.0]));
        let m = tape.min_elem(a, b);
        let loss = tape.sum(m);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn no_grad_tape_computes_identical_values() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.1, 1.2, 0.9, -2.0, 0.05]);
        let run = |grad: bool| -> Vec<f64> {
            let mut tape = Tape::new(grad);
            let v = if grad { tape.input_grad(&x) } else { tape.leaf_tensor(&x) };
            let g = tape.gelu(v);
            let s = tape.softmax_rows(g, None).unwrap();
            tape.value(s).to_vec()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn masked_softmax_matches_plain_on_unmasked_rest() {
        let mut tape = Tape::new(false);
        let x = tape.leaf(1, 4, vec![0.7, -0.2, 0.7, 1.1]);
        let mask = vec![false, true, false, false];
        let p = tape.softmax_rows(x, Some(&mask)).unwrap();
        let pv = tape.value(p);
        assert_eq!(pv[1], 0.0);
        let s: f64 = pv.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
