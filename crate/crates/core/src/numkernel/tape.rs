//! Dynamic reverse-mode tape.
//!
//! Every forward pass records onto a fresh [`Tape`]. Nodes are appended in
//! execution order, so operands always precede their consumers and the
//! backward sweep is a plain reverse iteration.

use super::kernels;
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
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
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    DivCol(Var, Var),
    ScaleBy(Var, Var, usize),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Embedding(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros of length `n` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, n: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t.detached(), Op::Leaf, rg)
    }

    /// Records a copy of a parameter tensor as a leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t.detached(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// Same value, no gradient flows back through the result.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).detached();
        self.push(t, Op::Leaf, false)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        assert!(t.ndim() <= 2, "expected a matrix, got shape {:?}", t.shape());
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(
            k,
            k2,
            "matmul inner extents differ: {:?} x {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a);
        let out = kernels::transpose(self.value(a).data(), m, n);
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&[n, m], out), Op::Transpose(a), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&shape, out), op, rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&shape, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, kernels::gelu, Op::Gelu(a))
    }

    /// `a[m×n] + row[n]`, broadcasting the row over `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.dims2(a);
        assert_eq!(self.value(row).len(), n, "add_row width mismatch");
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(Tensor::new(&[m, n], out), Op::AddRow(a, row), rg)
    }

    /// Divides row `r` of `a[m×n]` by `col[r]` (`col` has `m` values).
    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        let (m, n) = self.dims2(a);
        assert_eq!(self.value(col).len(), m, "div_col height mismatch");
        let c = self.value(col).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for (chunk, d) in out.chunks_mut(n).zip(&c) {
            chunk.iter_mut().for_each(|o| *o /= d);
        }
        let rg = self.rg(&[a, col]);
        self.push(Tensor::new(&[m, n], out), Op::DivCol(a, col), rg)
    }

    /// `a` scaled by the single entry `s[index]`.
    pub fn scale_by(&mut self, a: Var, s: Var, index: usize) -> Var {
        let w = self.value(s).data()[index];
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * w).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, s]);
        self.push(Tensor::new(&shape, out), Op::ScaleBy(a, s, index), rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for (x, o) in ta.data().chunks(n).zip(out.chunks_mut(n)) {
            kernels::softmax_slice(x, None, o);
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&shape, out), Op::Softmax(a), rg)
    }

    /// Softmax over the last dimension among positions where `mask` is true;
    /// masked positions come out as exactly 0.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Var {
        let ta = self.value(a);
        assert_eq!(mask.len(), ta.len(), "mask shape mismatch");
        let n = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for ((x, m), o) in ta.data().chunks(n).zip(mask.chunks(n)).zip(out.chunks_mut(n)) {
            kernels::softmax_slice(x, Some(m), o);
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        // Zeros are fixed points of the softmax Jacobian, so the unmasked
        // backward rule is exact here.
        self.push(Tensor::new(&shape, out), Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let mut out = vec![0.0; ta.len()];
        for (x, o) in ta.data().chunks(n).zip(out.chunks_mut(n)) {
            kernels::log_softmax_slice(x, o);
        }
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&shape, out), Op::LogSoftmax(a), rg)
    }

    /// Last-dimension layer normalization followed by `gain ⊙ x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (m, n) = self.dims2(x);
        assert_eq!(self.value(gain).len(), n, "layernorm gain width");
        assert_eq!(self.value(bias).len(), n, "layernorm bias width");
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for (xr, hr) in self.value(x).data().chunks(n).zip(xhat.chunks_mut(n)) {
            inv_std.push(kernels::layernorm_row(xr, hr));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(n) {
            for ((o, gi), bi) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            Tensor::new(&[m, n], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Per-row L2 norms as an `m×1` column.
    pub fn l2_norm_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a);
        let out = self.value(a).data().chunks(n).map(kernels::l2_norm).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&[m, 1], out), Op::L2NormRows(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let n = self.dims2(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, c) = self.dims2(p);
            assert_eq!(c, n, "concat_rows width mismatch");
            rows += m;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(&[rows, n], out), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let m = self.dims2(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.dims2(p);
                assert_eq!(r, m, "concat_cols height mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(&[m, total], out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, range: std::ops::Range<usize>) -> Var {
        let (m, n) = self.dims2(a);
        assert!(range.start < range.end && range.end <= m, "row slice {range:?} of {m}");
        let out = self.value(a).data()[range.start * n..range.end * n].to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&[range.len(), n], out), Op::SliceRows(a, range.start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, range: std::ops::Range<usize>) -> Var {
        let (m, n) = self.dims2(a);
        assert!(range.start < range.end && range.end <= n, "col slice {range:?} of {n}");
        let t = self.value(a);
        let mut out = Vec::with_capacity(m * range.len());
        for r in 0..m {
            out.extend_from_slice(&t.row(r)[range.clone()]);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&[m, range.len()], out), Op::SliceCols(a, range.start), rg)
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = self.dims2(table);
        assert!(!ids.is_empty(), "embedding lookup of no ids");
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range {v}");
            out.extend_from_slice(t.row(id));
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::new(&[ids.len(), d], out),
            Op::Embedding(table, ids.to_vec()),
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits`, skipping rows whose target is `None`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let (m, n) = self.dims2(logits);
        assert_eq!(targets.len(), m, "one target per logits row");
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        let mut count = 0;
        for (r, (x, p)) in self
            .value(logits)
            .data()
            .chunks(n)
            .zip(probs.chunks_mut(n))
            .enumerate()
        {
            let Some(t) = targets[r] else { continue };
            assert!(t < n, "target {t} out of range {n}");
            kernels::softmax_slice(x, None, p);
            let mut lp = vec![0.0; n];
            kernels::log_softmax_slice(x, &mut lp);
            total -= lp[t];
            count += 1;
        }
        assert!(count > 0, "cross_entropy with every target ignored");
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                if want(*a) {
                    acc(grads, *a, &kernels::matmul_bt(g, val(*b), m, n, k));
                }
                if want(*b) {
                    acc(grads, *b, &kernels::matmul_at(val(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims2(*a);
                acc(grads, *a, &kernels::transpose(g, n, m));
            }
            Op::Add(a, b) => {
                if want(*a) {
                    acc(grads, *a, g);
                }
                if want(*b) {
                    acc(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(grads, *a, g);
                }
                if want(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    acc(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let d: Vec<f64> = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                    acc(grads, *a, &d);
                }
                if want(*b) {
                    let d: Vec<f64> = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                    acc(grads, *b, &d);
                }
            }
            Op::Div(a, b) => {
                if want(*a) {
                    let d: Vec<f64> = g.iter().zip(val(*b)).map(|(g, y)| g / y).collect();
                    acc(grads, *a, &d);
                }
                if want(*b) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .zip(val(*b))
                        .map(|((g, o), y)| -g * o / y)
                        .collect();
                    acc(grads, *b, &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                acc(grads, *a, &d);
            }
            Op::AddScalar(a) => acc(grads, *a, g),
            Op::AddRow(a, row) => {
                if want(*a) {
                    acc(grads, *a, g);
                }
                if want(*row) {
                    let n = out.cols();
                    let mut d = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (s, x) in d.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                    acc(grads, *row, &d);
                }
            }
            Op::DivCol(a, col) => {
                let n = out.cols();
                let c = val(*col);
                if want(*a) {
                    let mut d = g.to_vec();
                    for (chunk, cv) in d.chunks_mut(n).zip(c) {
                        chunk.iter_mut().for_each(|x| *x /= cv);
                    }
                    acc(grads, *a, &d);
                }
                if want(*col) {
                    let d: Vec<f64> = g
                        .chunks(n)
                        .zip(out.data().chunks(n))
                        .zip(c)
                        .map(|((gr, or), cv)| {
                            -gr.iter().zip(or).map(|(x, y)| x * y).sum::<f64>() / cv
                        })
                        .collect();
                    acc(grads, *col, &d);
                }
            }
            Op::ScaleBy(a, s, index) => {
                let w = val(*s)[*index];
                if want(*a) {
                    let d: Vec<f64> = g.iter().map(|x| x * w).collect();
                    acc(grads, *a, &d);
                }
                if want(*s) {
                    let mut d = vec![0.0; val(*s).len()];
                    d[*index] = g.iter().zip(val(*a)).map(|(x, y)| x * y).sum();
                    acc(grads, *s, &d);
                }
            }
            Op::Exp(a) => {
                let d: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                acc(grads, *a, &d);
            }
            Op::Log(a) => {
                let d: Vec<f64> = g.iter().zip(val(*a)).map(|(g, x)| g / x).collect();
                acc(grads, *a, &d);
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| g * kernels::gelu_grad(x))
                    .collect();
                acc(grads, *a, &d);
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let mut d = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(out.data().chunks(n)).zip(d.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((o, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                acc(grads, *a, &d);
            }
            Op::LogSoftmax(a) => {
                let n = out.cols();
                let mut d = vec![0.0; g.len()];
                for ((gr, lr), dr) in g.chunks(n).zip(out.data().chunks(n)).zip(d.chunks_mut(n)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, gi), li) in dr.iter_mut().zip(gr).zip(lr) {
                        *o = gi - li.exp() * total;
                    }
                }
                acc(grads, *a, &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gv = val(*gain);
                if want(*gain) {
                    let mut d = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((s, gi), hi) in d.iter_mut().zip(gr).zip(hr) {
                            *s += gi * hi;
                        }
                    }
                    acc(grads, *gain, &d);
                }
                if want(*bias) {
                    let mut d = vec![0.0; n];
                    for gr in g.chunks(n) {
                        for (s, gi) in d.iter_mut().zip(gr) {
                            *s += gi;
                        }
                    }
                    acc(grads, *bias, &d);
                }
                if want(*x) {
                    let nf = n as f64;
                    let mut d = vec![0.0; g.len()];
                    for (((gr, hr), dr), is) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(d.chunks_mut(n))
                        .zip(inv_std)
                    {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / nf;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for ((o, di), hi) in dr.iter_mut().zip(&dh).zip(hr) {
                            *o = is * (di - mean_dh - hi * mean_dhh);
                        }
                    }
                    acc(grads, *x, &d);
                }
            }
            Op::L2NormRows(a) => {
                let n = self.value(*a).cols();
                let mut d = vec![0.0; self.value(*a).len()];
                for (((xr, dr), gi), norm) in val(*a)
                    .chunks(n)
                    .zip(d.chunks_mut(n))
                    .zip(g)
                    .zip(out.data())
                {
                    if *norm > 0.0 {
                        for (o, xi) in dr.iter_mut().zip(xr) {
                            *o = gi * xi / norm;
                        }
                    }
                }
                acc(grads, *a, &d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if want(*p) {
                        acc(grads, *p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut start = 0;
                for p in parts {
                    let (m, w) = self.dims2(*p);
                    if want(*p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * total + start..r * total + start + w]);
                        }
                        acc(grads, *p, &d);
                    }
                    start += w;
                }
            }
            Op::SliceRows(a, start) => {
                let n = out.cols();
                let mut d = vec![0.0; self.value(*a).len()];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                acc(grads, *a, &d);
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims2(*a);
                let w = out.cols();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(grads, *a, &d);
            }
            Op::Embedding(table, ids) => {
                let d_model = out.cols();
                let mut d = vec![0.0; self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d_model {
                        d[id * d_model + c] += g[r * d_model + c];
                    }
                }
                acc(grads, *table, &d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let n = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                let mut d = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for c in 0..n {
                        d[r * n + c] = probs[r * n + c] * scale;
                    }
                    d[r * n + t] -= scale;
                }
                acc(grads, *logits, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(*a).len()];
                acc(grads, *a, &d);
            }
        }
    }
}
