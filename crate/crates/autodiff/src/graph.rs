//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so the backward pass is a single reverse sweep. Values
//! stay readable after `backward`, but the record cannot be differentiated
//! twice.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddBias {
        a: usize,
        bias: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Concat {
        parts: Vec<(usize, usize)>,
    },
    Slice {
        a: usize,
        start: usize,
        width: usize,
    },
    Embedding {
        table: usize,
        indices: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Exp {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    LogSoftmax {
        a: usize,
    },
    MaskedFill {
        a: usize,
        mask: Vec<bool>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        denom: f64,
    },
    Mean {
        a: usize,
    },
    Sum {
        a: usize,
    },
    SumLast {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        map: Vec<usize>,
    },
    SelectRows {
        a: usize,
        rows: Vec<usize>,
    },
    Gather {
        a: usize,
        cols: Vec<usize>,
    },
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    Minimum {
        a: usize,
        b: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward computation and its reverse pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, usize>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, usize>,
}

impl Gradients {
    /// Gradient with respect to a recorded variable, `None` if it does not
    /// influence the loss or does not require gradients.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&i| self.grads[i].as_ref())
    }

    /// Parameter gradients aligned with `store`, zero-filled for parameters
    /// that were not used.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.0 < self.nodes.len() {
            Ok(v.0)
        } else {
            Err(Error::ForeignVar(v.0))
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Free input that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a stored parameter into the record. Repeated calls return the
    /// same variable so its gradient is accumulated once.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&i) = self.params.get(&id) {
            return Var(i);
        }
        let v = self.variable(store.get(id).clone());
        self.params.insert(id, v.0);
        v
    }

    /// `a[.., k] · b[k, n]`; leading dimensions of `a` are kept.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if bv.shape().len() != 2 || av.shape().is_empty() || av.last_dim() != bv.shape()[0] {
            return Err(mismatch("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a: ai, b: bi }, &[ai, bi]))
    }

    /// Batched product of `[n, m, k]` with `[n, k, p]` (or `[n, p, k]` when
    /// `trans_b`), giving `[n, m, p]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, p) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch("bmm", sa, sb));
        }
        let mut out = vec![0.0; batch * m * p];
        for i in 0..batch {
            let a_blk = &av.data()[i * m * k..(i + 1) * m * k];
            let b_blk = &bv.data()[i * k * p..(i + 1) * k * p];
            let c_blk = &mut out[i * m * p..(i + 1) * m * p];
            if trans_b {
                gemm_nt(a_blk, b_blk, c_blk, m, k, p);
            } else {
                gemm_nn(a_blk, b_blk, c_blk, m, k, p);
            }
        }
        let value = Tensor::new(vec![batch, m, p], out)?;
        Ok(self.push(value, Op::Bmm { a: ai, b: bi, trans_b }, &[ai, bi]))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op(ai, bi), &[ai, bi]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("minimum", a, b, f64::min, |a, b| Op::Minimum { a, b })
    }

    /// Adds a `[last_dim]` vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(bias)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let n = av.last_dim();
        if bv.shape() != [n] {
            return Err(mismatch("add_bias", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { a: ai, bias: bi }, &[ai, bi]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let data = av.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale { a: ai, factor }, &[ai]))
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let first = idx.first().ok_or(Error::ShapeMismatch {
            op: "concat",
            lhs: vec![],
            rhs: vec![],
        })?;
        let lead = self.nodes[*first].value.shape()[..self.nodes[*first].value.shape().len() - 1].to_vec();
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(mismatch("concat", self.nodes[*first].value.shape(), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in idx.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        let parts = idx.iter().copied().zip(widths).collect();
        Ok(self.push(value, Op::Concat { parts }, &idx))
    }

    /// Columns `start..start + width` of the last dimension.
    pub fn slice(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let n = av.last_dim();
        if start + width > n {
            return Err(Error::IndexOutOfRange {
                op: "slice",
                index: start + width,
                size: n,
            });
        }
        let data = av
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice { a: ai, start, width }, &[ai]))
    }

    /// Rows of a `[vocab, dim]` table selected by `indices`, giving `[len, dim]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let ti = self.check(table)?;
        let tv = &self.nodes[ti].value;
        if tv.shape().len() != 2 {
            return Err(mismatch("embedding", tv.shape(), &[indices.len()]));
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &ix in indices {
            if ix >= vocab {
                return Err(Error::IndexOutOfRange {
                    op: "embedding",
                    index: ix,
                    size: vocab,
                });
            }
            data.extend_from_slice(&tv.data()[ix * dim..(ix + 1) * dim]);
        }
        let value = Tensor::new(vec![indices.len(), dim], data)?;
        let op = Op::Embedding {
            table: ti,
            indices: indices.to_vec(),
        };
        Ok(self.push(value, op, &[ti]))
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let xv = &self.nodes[xi].value;
        let n = xv.last_dim();
        let (gv, bv) = (&self.nodes[gi].value, &self.nodes[bi].value);
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(mismatch("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x: xi,
            gain: gi,
            bias: bi,
            xhat,
            rstd,
        };
        Ok(self.push(value, op, &[xi, gi, bi]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op(ai), &[ai]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::gelu, |a| Op::Gelu { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), |a| Op::Relu { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, |a| Op::Exp { a })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |x| x.clamp(lo, hi), |a| Op::Clamp { a, lo, hi })
    }

    fn rowwise(&mut self, a: Var, log: bool) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let n = av.last_dim();
        let mut out = vec![0.0; av.len()];
        for (src, dst) in av.data().chunks(n.max(1)).zip(out.chunks_mut(n.max(1))) {
            if log {
                let lse = kernels::log_sum_exp(src);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s - lse;
                }
            } else {
                kernels::softmax_row(src, dst);
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let op = if log {
            Op::LogSoftmax { a: ai }
        } else {
            Op::Softmax { a: ai }
        };
        Ok(self.push(value, op, &[ai]))
    }

    /// Softmax over the last dimension (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise(a, false)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise(a, true)
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        if mask.len() != av.len() {
            return Err(mismatch("masked_fill", av.shape(), &[mask.len()]));
        }
        let data = av
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let op = Op::MaskedFill {
            a: ai,
            mask: mask.to_vec(),
        };
        Ok(self.push(out, op, &[ai]))
    }

    /// Weighted mean cross-entropy of `[rows, classes]` logits against class
    /// indices. Rows with zero weight are ignored; with no weighted rows the
    /// loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let li = self.check(logits)?;
        let lv = &self.nodes[li].value;
        let (rows, classes) = (lv.rows(), lv.last_dim());
        if targets.len() != rows || weights.len() != rows {
            return Err(mismatch("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        let denom: f64 = weights.iter().sum();
        for r in 0..rows {
            let row = &lv.data()[r * classes..(r + 1) * classes];
            let t = targets[r];
            if t >= classes {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: classes,
                });
            }
            kernels::softmax_row(row, &mut probs[r * classes..(r + 1) * classes]);
            if weights[r] != 0.0 {
                total += weights[r] * (kernels::log_sum_exp(row) - row[t]);
            }
        }
        let loss = if denom == 0.0 { 0.0 } else { total / denom };
        let op = Op::CrossEntropy {
            logits: li,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
            denom,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[li]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let m = av.data().iter().sum::<f64>() / av.len().max(1) as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean { a: ai }, &[ai]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s = self.nodes[ai].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { a: ai }, &[ai]))
    }

    /// Sums over the last dimension, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let n = av.last_dim().max(1);
        let data: Vec<f64> = av.data().chunks(n).map(|c| c.iter().sum()).collect();
        let mut shape = av.shape().to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SumLast { a: ai }, &[ai]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { a: ai }, &[ai]))
    }

    /// Reorders dimensions: output dimension `i` is input dimension `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let rank = av.shape().len();
        let mut seen = vec![false; rank];
        for &ax in axes {
            if ax >= rank || std::mem::replace(&mut seen[ax], true) {
                return Err(mismatch("permute", av.shape(), axes));
            }
        }
        if axes.len() != rank {
            return Err(mismatch("permute", av.shape(), axes));
        }
        let (shape, map) = kernels::permute_map(av.shape(), axes);
        let data = map.iter().map(|&i| av.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Permute { a: ai, map }, &[ai]))
    }

    /// Picks rows of `a` viewed as `[rows, last_dim]`.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let (total, n) = (av.rows(), av.last_dim());
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= total {
                return Err(Error::IndexOutOfRange {
                    op: "select_rows",
                    index: r,
                    size: total,
                });
            }
            data.extend_from_slice(&av.data()[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(vec![rows.len(), n], data)?;
        let op = Op::SelectRows {
            a: ai,
            rows: rows.to_vec(),
        };
        Ok(self.push(value, op, &[ai]))
    }

    /// One entry per row: `out[r] = a[r, cols[r]]`.
    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let (rows, n) = (av.rows(), av.last_dim());
        if cols.len() != rows {
            return Err(mismatch("gather", av.shape(), &[cols.len()]));
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(Error::IndexOutOfRange {
                    op: "gather",
                    index: c,
                    size: n,
                });
            }
            data.push(av.data()[r * n + c]);
        }
        let value = Tensor::new(vec![rows], data)?;
        let op = Op::Gather {
            a: ai,
            cols: cols.to_vec(),
        };
        Ok(self.push(value, op, &[ai]))
    }

    /// Reverse sweep from a scalar loss. The record is consumed afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Consumed);
        }
        let li = self.check(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[li].value.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.data();
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[j].requires_grad {
                let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
                f(slot);
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k, n) = (nodes[*a].value.rows(), nodes[*a].value.last_dim(), out.last_dim());
                acc(*a, &mut |da| gemm_nt(g, val(*b), da, m, n, k));
                acc(*b, &mut |db| gemm_tn(val(*a), g, db, k, m, n));
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = nodes[*a].value.shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let p = out.shape()[2];
                for bi in 0..batch {
                    let gs = &g[bi * m * p..(bi + 1) * m * p];
                    let a_blk = &val(*a)[bi * m * k..(bi + 1) * m * k];
                    let b_blk = &val(*b)[bi * k * p..(bi + 1) * k * p];
                    if *trans_b {
                        acc(*a, &mut |da| {
                            gemm_nn(gs, b_blk, &mut da[bi * m * k..(bi + 1) * m * k], m, p, k)
                        });
                        acc(*b, &mut |db| {
                            gemm_tn(gs, a_blk, &mut db[bi * k * p..(bi + 1) * k * p], p, m, k)
                        });
                    } else {
                        acc(*a, &mut |da| {
                            gemm_nt(gs, b_blk, &mut da[bi * m * k..(bi + 1) * m * k], m, p, k)
                        });
                        acc(*b, &mut |db| {
                            gemm_tn(a_blk, gs, &mut db[bi * k * p..(bi + 1) * k * p], k, m, p)
                        });
                    }
                }
            }
            Op::Add { a, b } => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul { a, b } => {
                acc(*a, &mut |d| {
                    for ((x, gy), bv) in d.iter_mut().zip(g).zip(val(*b)) {
                        *x += gy * bv;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, gy), av) in d.iter_mut().zip(g).zip(val(*a)) {
                        *x += gy * av;
                    }
                });
            }
            Op::Minimum { a, b } => {
                // ties route to `a`, matching f64::min's choice of the first operand
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        if av[j] <= bv[j] {
                            d[j] += g[j];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        if bv[j] < av[j] {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::AddBias { a, bias } => {
                acc(*a, &mut |d| add_into(d, g));
                let n = out.last_dim();
                acc(*bias, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale { a, factor } => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y));
            }
            Op::Concat { parts } => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut offset = 0;
                for &(p, w) in parts {
                    acc(p, &mut |d| {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { a, start, width } => {
                let n = nodes[*a].value.last_dim();
                acc(*a, &mut |d| {
                    for (r, gr) in g.chunks(*width).enumerate() {
                        add_into(&mut d[r * n + start..r * n + start + width], gr);
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let dim = out.last_dim();
                acc(*table, &mut |d| {
                    for (r, &ix) in indices.iter().enumerate() {
                        add_into(&mut d[ix * dim..(ix + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = out.last_dim();
                let gv = val(*gain);
                acc(*x, &mut |d| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let nf = n as f64;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            d[r * n + j] += rs / nf * (nf * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for gr in g.chunks(n) {
                        add_into(d, gr);
                    }
                });
            }
            Op::Gelu { a } => {
                acc(*a, &mut |d| {
                    for ((x, gy), &av) in d.iter_mut().zip(g).zip(val(*a)) {
                        *x += gy * kernels::gelu_grad(av);
                    }
                });
            }
            Op::Relu { a } => {
                acc(*a, &mut |d| {
                    for ((x, gy), &av) in d.iter_mut().zip(g).zip(val(*a)) {
                        if av > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Exp { a } => {
                acc(*a, &mut |d| {
                    for ((x, gy), y) in d.iter_mut().zip(g).zip(out.data()) {
                        *x += gy * y;
                    }
                });
            }
            Op::Clamp { a, lo, hi } => {
                acc(*a, &mut |d| {
                    for ((x, gy), &av) in d.iter_mut().zip(g).zip(val(*a)) {
                        if av >= *lo && av <= *hi {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let n = out.last_dim();
                acc(*a, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let n = out.last_dim();
                acc(*a, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..n {
                            dr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::MaskedFill { a, mask } => {
                acc(*a, &mut |d| {
                    for ((x, gy), &m) in d.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *x += gy;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                denom,
            } => {
                if *denom == 0.0 {
                    return;
                }
                let n = nodes[*logits].value.last_dim();
                acc(*logits, &mut |d| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let s = g[0] * w / denom;
                        for j in 0..n {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[r * n + j] += s * (probs[r * n + j] - onehot);
                        }
                    }
                });
            }
            Op::Mean { a } => {
                let n = nodes[*a].value.len().max(1) as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Sum { a } => {
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::SumLast { a } => {
                let n = nodes[*a].value.last_dim().max(1);
                acc(*a, &mut |d| {
                    for (dr, gy) in d.chunks_mut(n).zip(g) {
                        dr.iter_mut().for_each(|x| *x += gy);
                    }
                });
            }
            Op::Reshape { a } => acc(*a, &mut |d| add_into(d, g)),
            Op::Permute { a, map } => {
                acc(*a, &mut |d| {
                    for (gy, &src) in g.iter().zip(map) {
                        d[src] += gy;
                    }
                });
            }
            Op::SelectRows { a, rows } => {
                let n = out.last_dim();
                acc(*a, &mut |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut d[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                });
            }
            Op::Gather { a, cols } => {
                let n = nodes[*a].value.last_dim();
                acc(*a, &mut |d| {
                    for (r, &c) in cols.iter().enumerate() {
                        d[r * n + c] += g[r];
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
