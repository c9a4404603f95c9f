//! Tape-style computation graph with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the tape order is already a
//! topological order and `backward` walks it in reverse. Parameters enter the
//! graph as copies of their current value tagged with their [`ParamId`];
//! after `backward` the caller pulls their gradients out with
//! [`Graph::param_grads`].

use rand::Rng;
use statrs::function::erf::erf;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One row of the in-batch debiased cross-entropy: which column holds the
/// positive item, and which columns are the user's own items (not negatives).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CeRow {
    pub target: usize,
    pub excluded: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax {
        x: Var,
        temperature: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    WeightedSum {
        w: Var,
        xs: Vec<Var>,
    },
    RowWeightedSum {
        w: Var,
        xs: Vec<Var>,
    },
    TopKRenorm {
        scores: Var,
        mask: Vec<bool>,
        totals: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<Vec<f64>>,
    },
    Sum(Var),
    Mean(Var),
    DebiasedCe {
        logits: Var,
        rows: Vec<CeRow>,
        probs: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    dropout_rng: Option<StreamRng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Training-mode graph drawing dropout masks from `rng`.
    pub fn training(rng: StreamRng) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            dropout_rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => false,
            _ => self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Gelu(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::Softmax { x, .. } | Op::Dropout { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols(xs) => xs.clone(),
            Op::GatherRows(a, _) => vec![*a],
            Op::WeightedSum { w, xs } | Op::RowWeightedSum { w, xs } => {
                let mut v = vec![*w];
                v.extend_from_slice(xs);
                v
            }
            Op::TopKRenorm { scores, .. } => vec![*scores],
            Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::DebiasedCe { logits, .. } => vec![*logits],
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any
    /// flowed to it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    // ----- leaves -----

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient (used by gradient checks).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bring a parameter onto the tape. Frozen parameters enter untracked, so
    /// no gradient is ever produced for them.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            requires_grad: !p.frozen,
        });
        Var(self.nodes.len() - 1)
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::shape("matmul", va.dims(), vb.dims()));
        }
        let mut out = Tensor::zeros(va.rows(), vb.cols());
        gemm(va, false, vb, false, &mut out, 0.0);
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape("matmul_nt", va.dims(), vb.dims()));
        }
        let mut out = Tensor::zeros(va.rows(), vb.rows());
        gemm(va, false, vb, true, &mut out, 0.0);
        self.push(out, Op::MatMulNt(a, b), "matmul_nt")
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    // ----- elementwise -----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        if da != db {
            return Err(Error::shape(op, da, db));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.rows(), va.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Add a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::shape("add_row", va.dims(), vb.dims()));
        }
        let mut out = va.clone();
        let cols = va.cols();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        debug_assert_eq!(out.cols(), cols);
        self.push(out, Op::AddRow(a, bias), "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c), "scale")
    }

    /// Exact-erf GELU: `x · Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), "gelu")
    }

    /// Row-wise softmax of `x / temperature`, max-subtracted.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Contract(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let vx = self.value(x);
        let mut out = vx.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r), temperature);
        }
        self.push(out, Op::Softmax { x, temperature }, "softmax")
    }

    /// Row-wise layer norm with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = vx.cols();
        if vg.dims() != (1, n) || vb.dims() != (1, n) {
            return Err(Error::shape("layer_norm", vx.dims(), vg.dims()));
        }
        let mut xhat = Tensor::zeros(vx.rows(), n);
        let mut out = Tensor::zeros(vx.rows(), n);
        let mut inv_std = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            if var + eps <= 0.0 {
                return Err(Error::Contract(
                    "layer_norm division by zero (zero variance with eps = 0)".into(),
                ));
            }
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * vg.data()[c] + vb.data()[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).rows();
        for &x in xs {
            if self.value(x).rows() != rows {
                return Err(Error::shape("concat_cols", self.value(xs[0]).dims(), self.value(x).dims()));
            }
        }
        let cols: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &x in xs {
                let src = self.value(x).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(out, Op::ConcatCols(xs.to_vec()), "concat_cols")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.rows()) {
            return Err(Error::OutOfRange {
                what: "gather row",
                index: bad,
                len: va.rows(),
            });
        }
        let out = va.gather_rows(idx);
        self.push(out, Op::GatherRows(a, idx.to_vec()), "gather_rows")
    }

    /// `Σ_j w[j] · xs[j]` with one weight row `w: 1 × K` shared by all rows.
    pub fn weighted_sum(&mut self, w: Var, xs: &[Var]) -> Result<Var> {
        let vw = self.value(w);
        if vw.dims() != (1, xs.len()) {
            return Err(Error::shape("weighted_sum", vw.dims(), (1, xs.len())));
        }
        let dims = self.value(xs[0]).dims();
        let mut out = Tensor::zeros(dims.0, dims.1);
        for (j, &x) in xs.iter().enumerate() {
            let vx = self.value(x);
            if vx.dims() != dims {
                return Err(Error::shape("weighted_sum", dims, vx.dims()));
            }
            let wj = vw.data()[j];
            if wj == 0.0 {
                continue;
            }
            out.scaled_add_assign(wj, vx);
        }
        self.push(out, Op::WeightedSum { w, xs: xs.to_vec() }, "weighted_sum")
    }

    /// Per-row mixture: `out[r] = Σ_j w[r, j] · xs[j][r]`. Terms with an
    /// exactly zero weight are skipped, so they cannot influence the result.
    pub fn row_weighted_sum(&mut self, w: Var, xs: &[Var]) -> Result<Var> {
        let vw = self.value(w);
        let dims = self.value(xs[0]).dims();
        if vw.dims() != (dims.0, xs.len()) {
            return Err(Error::shape("row_weighted_sum", vw.dims(), (dims.0, xs.len())));
        }
        let mut out = Tensor::zeros(dims.0, dims.1);
        for (j, &x) in xs.iter().enumerate() {
            let vx = self.value(x);
            if vx.dims() != dims {
                return Err(Error::shape("row_weighted_sum", dims, vx.dims()));
            }
            for r in 0..dims.0 {
                let wj = vw.get(r, j);
                if wj == 0.0 {
                    continue;
                }
                for (o, v) in out.row_mut(r).iter_mut().zip(vx.row(r)) {
                    *o += wj * v;
                }
            }
        }
        self.push(out, Op::RowWeightedSum { w, xs: xs.to_vec() }, "row_weighted_sum")
    }

    /// Keep the masked entries of each row of `scores` and renormalize them to
    /// sum to one; unmasked entries become exactly zero. The mask is treated
    /// as a constant (straight-through on the selected entries).
    pub fn topk_renorm(&mut self, scores: Var, mask: Vec<bool>) -> Result<Var> {
        let vs = self.value(scores);
        if mask.len() != vs.len() {
            return Err(Error::Shape {
                op: "topk_renorm",
                left: vs.shape(),
                right: vec![mask.len()],
            });
        }
        let mut out = Tensor::zeros(vs.rows(), vs.cols());
        let mut totals = Vec::with_capacity(vs.rows());
        for r in 0..vs.rows() {
            let m = &mask[r * vs.cols()..(r + 1) * vs.cols()];
            let total: f64 = vs.row(r).iter().zip(m).filter(|(_, &k)| k).map(|(s, _)| s).sum();
            if !(total > 0.0) {
                return Err(Error::Contract(format!("top-k selection in row {r} has zero mass")));
            }
            for c in 0..vs.cols() {
                if m[c] {
                    out.set(r, c, vs.get(r, c) / total);
                }
            }
            totals.push(total);
        }
        self.push(out, Op::TopKRenorm { scores, mask, totals }, "topk_renorm")
    }

    /// Inverted dropout. Identity on evaluation graphs or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate {p} not in [0, 1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x.0].value.len();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::from_vec(vx.rows(), vx.cols(), data)?;
        self.push(out, Op::Dropout { x, mask }, "dropout")
    }

    /// Multi-head causal self-attention over packed variable-length segments.
    /// Rows of `q`, `k`, `v` are positions; each segment attends only within
    /// itself and only to earlier-or-equal positions.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.dims() != vk.dims() || vq.dims() != vv.dims() {
            return Err(Error::shape("causal_attention", vq.dims(), vk.dims()));
        }
        let d = vq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(vq.rows(), d);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            if seg.start + seg.len > vq.rows() {
                return Err(Error::OutOfRange {
                    what: "attention segment end",
                    index: seg.start + seg.len,
                    len: vq.rows(),
                });
            }
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = vec![0.0; seg.len * seg.len];
                for i in 0..seg.len {
                    let qi = &vq.row(seg.start + i)[c0..c0 + dh];
                    let row = &mut p[i * seg.len..(i + 1) * seg.len];
                    for j in 0..=i {
                        let kj = &vk.row(seg.start + j)[c0..c0 + dh];
                        row[j] = scale * dot(qi, kj);
                    }
                    softmax_in_place(&mut row[..=i], 1.0);
                    let orow = &mut out.row_mut(seg.start + i)[c0..c0 + dh];
                    for j in 0..=i {
                        let vj = &vv.row(seg.start + j)[c0..c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += row[j] * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            "causal_attention",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::filled(1, 1, s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s = va.sum() / va.len() as f64;
        self.push(Tensor::filled(1, 1, s), Op::Mean(a), "mean")
    }

    /// Mean over rows of `-log(exp(d_t) / Σ_{c allowed} exp(d_c))` with
    /// debiased logits `d_c = logits[r, c] - log_pop[c]`. Allowed columns are
    /// the target plus every column not listed in the row's `excluded`.
    pub fn debiased_ce(&mut self, logits: Var, rows: Vec<CeRow>, log_pop: Vec<f64>) -> Result<Var> {
        let vl = self.value(logits);
        if rows.is_empty() {
            return Err(Error::Contract("cross-entropy over an empty batch".into()));
        }
        if vl.rows() != rows.len() || vl.cols() != log_pop.len() {
            return Err(Error::shape("debiased_ce", vl.dims(), (rows.len(), log_pop.len())));
        }
        let c = vl.cols();
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(rows.len());
        for (r, row) in rows.iter().enumerate() {
            if row.target >= c {
                return Err(Error::OutOfRange {
                    what: "target column",
                    index: row.target,
                    len: c,
                });
            }
            let mut allowed = vec![true; c];
            for &e in &row.excluded {
                if e != row.target {
                    allowed[e] = false;
                }
            }
            let d: Vec<f64> = (0..c).map(|j| vl.get(r, j) - log_pop[j]).collect();
            let m = (0..c).filter(|&j| allowed[j]).map(|j| d[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).filter(|&j| allowed[j]).map(|j| (d[j] - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - d[row.target];
            let p: Vec<f64> = (0..c)
                .map(|j| if allowed[j] { (d[j] - lse).exp() } else { 0.0 })
                .collect();
            probs.push(p);
        }
        let loss = total / rows.len() as f64;
        self.push(
            Tensor::filled(1, 1, loss),
            Op::DebiasedCe { logits, rows, probs },
            "debiased_ce",
        )
    }

    // ----- backward -----

    /// Populate gradients of the scalar `loss` for every tracked node.
    /// Previous gradients are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).dims() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                backprop_node(&self.nodes, &mut self.grads, i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradients of every tracked parameter touched by the last backward.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => self.grads.get(i).and_then(Option::as_ref).map(|g| (id, g)),
                _ => None,
            })
            .collect()
    }

    /// Add this graph's parameter gradients into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, g);
        }
    }

}

fn grad_buf<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], v: Var) -> &'a mut Tensor {
    let (r, c) = nodes[v.0].value.dims();
    grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
}

/// Push `g` (the gradient of node `i`) into the gradients of its inputs.
/// Inputs always precede `i` on the tape, so `grads[i]` is never touched.
fn backprop_node(nodes: &[Node], grads: &mut [Option<Tensor>], i: usize, g: &Tensor) {
    let tracked = |v: Var| nodes[v.0].requires_grad;
    match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if tracked(*a) {
                    let vb = &nodes[b.0].value;
                    gemm(g, false, &vb, true, grad_buf(grads, nodes, *a), 1.0);
                }
                if tracked(*b) {
                    let va = &nodes[a.0].value;
                    gemm(&va, true, g, false, grad_buf(grads, nodes, *b), 1.0);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ; da = g b; db = gᵀ a
                if tracked(*a) {
                    let vb = &nodes[b.0].value;
                    gemm(g, false, &vb, false, grad_buf(grads, nodes, *a), 1.0);
                }
                if tracked(*b) {
                    let va = &nodes[a.0].value;
                    gemm(g, true, &va, false, grad_buf(grads, nodes, *b), 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if tracked(v) {
                        grad_buf(grads, nodes, v).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if tracked(*a) {
                    grad_buf(grads, nodes, *a).add_assign(g);
                }
                if tracked(*b) {
                    grad_buf(grads, nodes, *b).scaled_add_assign(-1.0, g);
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let vb = &nodes[b.0].value;
                    let buf = grad_buf(grads, nodes, *a);
                    for ((o, gv), y) in buf.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += gv * y;
                    }
                }
                if tracked(*b) {
                    let va = &nodes[a.0].value;
                    let buf = grad_buf(grads, nodes, *b);
                    for ((o, gv), x) in buf.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += gv * x;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if tracked(*a) {
                    grad_buf(grads, nodes, *a).add_assign(g);
                }
                if tracked(*bias) {
                    let buf = grad_buf(grads, nodes, *bias);
                    for r in 0..g.rows() {
                        for (o, gv) in buf.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if tracked(*a) {
                    grad_buf(grads, nodes, *a).scaled_add_assign(*c, g);
                }
            }
            Op::Gelu(a) => {
                if tracked(*a) {
                    let va = &nodes[a.0].value;
                    let buf = grad_buf(grads, nodes, *a);
                    for ((o, gv), x) in buf.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += gv * gelu_grad(*x);
                    }
                }
            }
            Op::Softmax { x, temperature } => {
                if tracked(*x) {
                    let y = &nodes[i].value;
                    let buf = grad_buf(grads, nodes, *x);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in buf.row_mut(r).iter_mut().enumerate() {
                            *o += yr[c] * (gr[c] - s) / temperature;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = xhat.cols();
                if tracked(*gamma) {
                    let buf = grad_buf(grads, nodes, *gamma);
                    for r in 0..g.rows() {
                        for c in 0..n {
                            buf.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                if tracked(*beta) {
                    let buf = grad_buf(grads, nodes, *beta);
                    for r in 0..g.rows() {
                        for c in 0..n {
                            buf.data_mut()[c] += g.get(r, c);
                        }
                    }
                }
                if tracked(*x) {
                    let gam = &nodes[gamma.0].value;
                    let buf = grad_buf(grads, nodes, *x);
                    let nf = n as f64;
                    for r in 0..g.rows() {
                        let dxhat: Vec<f64> = (0..n).map(|c| g.get(r, c) * gam.data()[c]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / nf;
                        let m2 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum::<f64>() / nf;
                        let row = buf.row_mut(r);
                        for c in 0..n {
                            row[c] += inv_std[r] * (dxhat[c] - m1 - xhat.get(r, c) * m2);
                        }
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for &x in xs {
                    let w = nodes[x.0].value.cols();
                    if tracked(x) {
                        let buf = grad_buf(grads, nodes, x);
                        for r in 0..g.rows() {
                            for (o, gv) in buf.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += gv;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows(a, idx) => {
                if tracked(*a) {
                    let buf = grad_buf(grads, nodes, *a);
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, gv) in buf.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::WeightedSum { w, xs } => {
                let vw = &nodes[w.0].value;
                if tracked(*w) {
                    let dots: Vec<f64> = xs
                        .iter()
                        .map(|x| dot(g.data(), nodes[x.0].value.data()))
                        .collect();
                    let buf = grad_buf(grads, nodes, *w);
                    for (o, d) in buf.data_mut().iter_mut().zip(dots) {
                        *o += d;
                    }
                }
                for (j, &x) in xs.iter().enumerate() {
                    if tracked(x) {
                        grad_buf(grads, nodes, x).scaled_add_assign(vw.data()[j], g);
                    }
                }
            }
            Op::RowWeightedSum { w, xs } => {
                let vw = &nodes[w.0].value;
                if tracked(*w) {
                    let mut dw = Tensor::zeros(vw.rows(), vw.cols());
                    for (j, &x) in xs.iter().enumerate() {
                        let vx = &nodes[x.0].value;
                        for r in 0..g.rows() {
                            dw.set(r, j, dot(g.row(r), vx.row(r)));
                        }
                    }
                    grad_buf(grads, nodes, *w).add_assign(&dw);
                }
                for (j, &x) in xs.iter().enumerate() {
                    if tracked(x) {
                        let buf = grad_buf(grads, nodes, x);
                        for r in 0..g.rows() {
                            let wj = vw.get(r, j);
                            if wj == 0.0 {
                                continue;
                            }
                            for (o, gv) in buf.row_mut(r).iter_mut().zip(g.row(r)) {
                                *o += wj * gv;
                            }
                        }
                    }
                }
            }
            Op::TopKRenorm { scores, mask, totals } => {
                if tracked(*scores) {
                    let y = &nodes[i].value;
                    let buf = grad_buf(grads, nodes, *scores);
                    let cols = y.cols();
                    for r in 0..y.rows() {
                        let m = &mask[r * cols..(r + 1) * cols];
                        let s: f64 = (0..cols).filter(|&c| m[c]).map(|c| g.get(r, c) * y.get(r, c)).sum();
                        for c in 0..cols {
                            if m[c] {
                                buf.data_mut()[r * cols + c] += (g.get(r, c) - s) / totals[r];
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if tracked(*x) {
                    let buf = grad_buf(grads, nodes, *x);
                    for ((o, gv), m) in buf.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *o += gv * m;
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let vq = &nodes[q.0].value;
                let vk = &nodes[k.0].value;
                let vv = &nodes[v.0].value;
                let d = vq.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(vq.rows(), d);
                let mut dk = Tensor::zeros(vq.rows(), d);
                let mut dv = Tensor::zeros(vq.rows(), d);
                for (s, seg) in segments.iter().enumerate() {
                    for h in 0..*heads {
                        let p = &probs[s * heads + h];
                        let c0 = h * dh;
                        let n = seg.len;
                        // dA[i][j] = dO_i · V_j ; dV_j += Σ_i A[i][j] dO_i
                        for i in 0..n {
                            let go = &g.row(seg.start + i)[c0..c0 + dh];
                            let prow = &p[i * n..(i + 1) * n];
                            let mut da = vec![0.0; i + 1];
                            for j in 0..=i {
                                let vj = &vv.row(seg.start + j)[c0..c0 + dh];
                                da[j] = dot(go, vj);
                                let dvj = &mut dv.row_mut(seg.start + j)[c0..c0 + dh];
                                for (o, x) in dvj.iter_mut().zip(go) {
                                    *o += prow[j] * x;
                                }
                            }
                            let sdot: f64 = (0..=i).map(|j| prow[j] * da[j]).sum();
                            let qi = vq.row(seg.start + i)[c0..c0 + dh].to_vec();
                            for j in 0..=i {
                                let ds = prow[j] * (da[j] - sdot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = vk.row(seg.start + j)[c0..c0 + dh].to_vec();
                                for (o, x) in dq.row_mut(seg.start + i)[c0..c0 + dh].iter_mut().zip(&kj) {
                                    *o += ds * x;
                                }
                                for (o, x) in dk.row_mut(seg.start + j)[c0..c0 + dh].iter_mut().zip(&qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if tracked(var) {
                        grad_buf(grads, nodes, var).add_assign(&grad);
                    }
                }
            }
            Op::Sum(a) => {
                if tracked(*a) {
                    let gv = g.data()[0];
                    grad_buf(grads, nodes, *a).data_mut().iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::Mean(a) => {
                if tracked(*a) {
                    let n = nodes[a.0].value.len() as f64;
                    let gv = g.data()[0] / n;
                    grad_buf(grads, nodes, *a).data_mut().iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::DebiasedCe {
                logits, rows, probs, ..
            } => {
                if tracked(*logits) {
                    let scale = g.data()[0] / rows.len() as f64;
                    let buf = grad_buf(grads, nodes, *logits);
                    for (r, row) in rows.iter().enumerate() {
                        let out = buf.row_mut(r);
                        for (o, p) in out.iter_mut().zip(&probs[r]) {
                            *o += scale * p;
                        }
                        out[row.target] -= scale;
                    }
                }
            }
        }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stable softmax of `row / temperature`, in place.
pub fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - m) / temperature).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}
