//! Tape-based reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably and records every op in
//! creation order, which is also a topological order. [`Graph::backward`]
//! walks the tape in reverse and returns parameter gradients without
//! touching the store, so several graphs can share one set of parameters.

use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::{self, axpy, dot, Tensor2};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Square(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normed: Tensor2,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: NodeId,
    },
    CausalSoftmax {
        x: NodeId,
    },
    SelectRows {
        sources: Vec<NodeId>,
        map: Vec<(usize, usize)>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    CrossEntropySum {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor2,
    },
    TopKLogSumExp {
        logits: NodeId,
        weights: Tensor2,
    },
    SumAll(NodeId),
}

struct Node {
    value: Option<Tensor2>,
    op: Op,
}

/// A recorded computation.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

fn dim_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(Error::Dimension { op, detail })
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.value(*p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    fn push(&mut self, value: Tensor2, op: Op) -> NodeId {
        self.nodes.push(Node { value: Some(value), op });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor2) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_bt(self.value(b))?;
        Ok(self.push(v, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return dim_err("add", format!("{:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        if self.shape(b) != (1, cols) {
            return dim_err("add_row", format!("{:?} + {:?}", (rows, cols), self.shape(b)));
        }
        let mut v = self.value(a).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..rows {
            for (x, bv) in v.row_mut(r).iter_mut().zip(&bias) {
                *x += bv;
            }
        }
        Ok(self.push(v, Op::AddRow(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return dim_err("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b)));
        }
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor2::from_vec(r, c, data)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut v = src.clone();
        v.data_mut().iter_mut().for_each(|x| *x = tensor::gelu(*x));
        self.push(v, Op::Gelu(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().for_each(|x| *x *= *x);
        self.push(v, Op::Square(a))
    }

    /// `x W (+ b)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Row-wise layer norm with `1 × n` affine parameters.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if self.shape(gamma) != (1, cols) || self.shape(beta) != (1, cols) {
            return dim_err("layer_norm", format!("input {:?}", (rows, cols)));
        }
        let src = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normed = Tensor2::zeros(rows, cols);
        let mut out = Tensor2::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            inv_std.push(tensor::normalize_row(src.row(r), normed.row_mut(r)));
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = normed.get(r, c) * g[c] + b[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = tensor::softmax_rows(self.value(x));
        self.push(v, Op::Softmax { x })
    }

    /// Softmax of a square score matrix where row `i` only sees columns `≤ i`.
    /// Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if rows != cols {
            return dim_err("causal_softmax", format!("non-square {:?}", (rows, cols)));
        }
        let mut v = self.value(x).clone();
        for r in 0..rows {
            let row = v.row_mut(r);
            tensor::softmax_in_place(&mut row[..=r]);
            row[r + 1..].iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(self.push(v, Op::CausalSoftmax { x }))
    }

    /// Output row `t` is row `map[t].1` of `sources[map[t].0]`. Covers
    /// gathers, row concatenation and reordering.
    pub fn select_rows(&mut self, sources: &[NodeId], map: &[(usize, usize)]) -> Result<NodeId> {
        let cols = match sources.first() {
            Some(&s) => self.shape(s).1,
            None => return dim_err("select_rows", "no sources".into()),
        };
        for &s in sources {
            if self.shape(s).1 != cols {
                return dim_err("select_rows", "sources differ in width".into());
            }
        }
        let mut out = Tensor2::zeros(map.len(), cols);
        for (t, &(s, r)) in map.iter().enumerate() {
            let src = match sources.get(s) {
                Some(&n) => self.value(n),
                None => return dim_err("select_rows", format!("source {s} out of range")),
            };
            if r >= src.rows() {
                return dim_err("select_rows", format!("row {r} of {} rows", src.rows()));
            }
            out.row_mut(t).copy_from_slice(src.row(r));
        }
        Ok(self.push(
            out,
            Op::SelectRows {
                sources: sources.to_vec(),
                map: map.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if start + len > cols {
            return dim_err("slice_cols", format!("{start}+{len} > {cols}"));
        }
        let src = self.value(x);
        let mut out = Tensor2::zeros(rows, len);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p).0,
            None => return dim_err("concat_cols", "no parts".into()),
        };
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return dim_err("concat_cols", "parts differ in height".into());
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p);
                out.row_mut(r)[off..off + src.cols()].copy_from_slice(src.row(r));
                off += src.cols();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Sum over rows of `-log softmax(logits)[row, target]`, as a `1 × 1`.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.shape(logits);
        if targets.len() != rows {
            return dim_err("cross_entropy", format!("{} targets for {rows} rows", targets.len()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return dim_err("cross_entropy", format!("target {t} >= {cols}"));
        }
        let src = self.value(logits);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            total += tensor::log_sum_exp(src.row(r)) - src.get(r, t);
        }
        let probs = tensor::softmax_rows(src);
        Ok(self.push(
            Tensor2::scalar(total),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Per-row `log Σ_{j ∈ TopK(row)} exp(row_j)` as a `rows × 1` column.
    /// `k` is clipped to the row width; ties go to the lower index.
    pub fn top_k_log_sum_exp(&mut self, logits: NodeId, k: usize) -> Result<NodeId> {
        if k == 0 {
            return dim_err("top_k_log_sum_exp", "k must be at least 1".into());
        }
        let src = self.value(logits);
        let (rows, cols) = src.shape();
        let mut out = Tensor2::zeros(rows, 1);
        let mut weights = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let row = src.row(r);
            let idx = top_k_indices(row, k);
            let sel: Vec<f64> = idx.iter().map(|&j| row[j]).collect();
            let lse = tensor::log_sum_exp(&sel);
            out.set(r, 0, lse);
            for &j in &idx {
                weights.set(r, j, (row[j] - lse).exp());
            }
        }
        Ok(self.push(out, Op::TopKLogSumExp { logits, weights }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor2::scalar(s), Op::SumAll(x))
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return dim_err("backward", format!("loss has shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor2::scalar(1.0));
        let mut out = Gradients {
            per_param: vec![None; self.store.len()],
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(p) => acc_opt(&mut out.per_param[p.0], g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(*b))?;
                    let gb = self.value(*a).matmul_at(&g)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.matmul_at(self.value(*a))?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        axpy(1.0, g.row(r), gb.data_mut());
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = hadamard(&g, self.value(*b));
                    let gb = hadamard(&g, self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        *gv *= tensor::gelu_grad(*xv);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        *gv *= 2.0 * xv;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normed,
                    inv_std,
                } => {
                    let (rows, cols) = normed.shape();
                    let gam = self.value(*gamma).data();
                    let mut gg = Tensor2::zeros(1, cols);
                    let mut gbeta = Tensor2::zeros(1, cols);
                    let mut gx = Tensor2::zeros(rows, cols);
                    let n = cols as f64;
                    let mut dn = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let nr = normed.row(r);
                        for c in 0..cols {
                            gg.data_mut()[c] += gr[c] * nr[c];
                            gbeta.data_mut()[c] += gr[c];
                            dn[c] = gr[c] * gam[c];
                        }
                        let mean_dn = dn.iter().sum::<f64>() / n;
                        let mean_dn_n = dot(&dn, nr) / n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dn[c] - mean_dn - nr[c] * mean_dn_n);
                        }
                    }
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gbeta);
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax { x } | Op::CausalSoftmax { x } => {
                    let y = self.nodes[i].value.as_ref().expect("softmax output");
                    let mut gx = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s = dot(yr, gr);
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - s);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SelectRows { sources, map } => {
                    let mut parts: Vec<Option<Tensor2>> = vec![None; sources.len()];
                    for (t, &(s, r)) in map.iter().enumerate() {
                        let part = parts[s].get_or_insert_with(|| {
                            let (rr, cc) = self.shape(sources[s]);
                            Tensor2::zeros(rr, cc)
                        });
                        axpy(1.0, g.row(t), part.row_mut(r));
                    }
                    for (s, part) in parts.into_iter().enumerate() {
                        if let Some(part) = part {
                            acc(&mut grads, sources[s], part);
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Tensor2::zeros(rows, cols);
                    for r in 0..rows {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut gp = Tensor2::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        off += cols;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::CrossEntropySum { logits, targets, probs } => {
                    let s = g.get(0, 0);
                    let mut gl = probs.scale(s);
                    for (r, &t) in targets.iter().enumerate() {
                        let v = gl.get(r, t);
                        gl.set(r, t, v - s);
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::TopKLogSumExp { logits, weights } => {
                    let mut gl = weights.clone();
                    for r in 0..gl.rows() {
                        let s = g.get(r, 0);
                        gl.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::SumAll(x) => {
                    let (rows, cols) = self.shape(*x);
                    acc(&mut grads, *x, Tensor2::filled(rows, cols, g.get(0, 0)));
                }
            }
        }
        Ok(out)
    }
}

/// Indices of the `k` largest entries (clipped to `row.len()`), ties to the
/// lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k.min(row.len()));
    idx
}

fn hadamard(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor2::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn acc(grads: &mut [Option<Tensor2>], id: NodeId, g: Tensor2) {
    acc_opt(&mut grads[id.0], g);
}

fn acc_opt(slot: &mut Option<Tensor2>, g: Tensor2) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}
