use std::rc::Rc;

use super::kernels::{self, MatmulPlan, ScanGrads, ScanInputs};
use super::Tensor;
use crate::error::{Error, Result};

/// Additive mask value for forbidden attention entries. Finite so that `exp`
/// underflows to zero instead of producing NaN.
pub const MASK_SENTINEL: f64 = -1e30;

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    Tanh(Var),
    Silu(Var),
    Softplus(Var),
    AddBias(Var, Var),
    MulConst(Var, Rc<Tensor>),
    MatMul(Var, Var, MatmulPlan),
    Transpose(Var),
    SplitHeads(Var),
    MergeHeads(Var),
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    RepeatEachRow(Var, usize),
    TileRows(Var),
    ReverseRows(Var),
    Reshape(Var),
    CausalConv(Var, Var),
    Scan { u: Var, delta: Var, b: Var, c: Var, a: Var, d: Var, states: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Counters collected by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct BackwardStats {
    /// Number of nodes whose backward rule ran (leaves included).
    pub visited: usize,
    /// Per-node visit counts, indexed by [`Var::index`].
    pub visits: Vec<u32>,
}

/// Records primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so inputs always precede their
/// consumers and a single reverse sweep is a valid topological traversal.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient of a leaf after [`backward`](Self::backward). Interior gradients are
    /// released during the sweep. `None` for leaves that do not require grad.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_ref()).map(|g| {
            Tensor::new(node.value.shape(), g.clone()).expect("grad has value shape")
        })
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(what, sa, sb));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.derived(out, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.derived(out, Op::Scale(a, s), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.derived(out, Op::Exp(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.derived(out, Op::Tanh(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(silu);
        self.derived(out, Op::Silu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.derived(out, Op::Softplus(a), &[a])
    }

    /// Adds a `[cols]` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.numel() != c {
            return Err(shape_err("add_bias", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            row.iter_mut().zip(vb.data()).for_each(|(o, b)| *o += b);
        }
        Ok(self.derived(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Elementwise product with a constant tensor that never receives gradient.
    pub fn mul_const(&mut self, x: Var, c: Rc<Tensor>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != c.shape() {
            return Err(shape_err("mul_const", vx.shape(), c.shape()));
        }
        let data = vx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(vx.shape(), data)?;
        Ok(self.derived(out, Op::MulConst(x, c), &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out_shape, plan) = kernels::matmul_plan(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; out_shape.iter().product()];
        kernels::batched_gemm(&plan, self.value(a).data(), self.value(b).data(), &mut out, false, false, 1.0, 0.0);
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.derived(out, Op::MatMul(a, b, plan), &[a, b]))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.shape();
        if s.len() < 2 {
            return Err(Error::Shape(format!("transpose needs rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut shape = s.to_vec();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let out = transpose_data(v.data(), r, c);
        let out = Tensor::new(&shape, out)?;
        Ok(self.derived(out, Op::Transpose(a), &[a]))
    }

    /// `[L, H*dh]` to `[H, L, dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() != 2 || heads == 0 || v.cols() % heads != 0 {
            return Err(Error::Shape(format!("split_heads({heads}) on {:?}", v.shape())));
        }
        let (l, d) = (v.rows(), v.cols());
        let dh = d / heads;
        let mut out = vec![0.0; l * d];
        for i in 0..l {
            for h in 0..heads {
                out[(h * l + i) * dh..(h * l + i + 1) * dh]
                    .copy_from_slice(&v.data()[i * d + h * dh..i * d + (h + 1) * dh]);
            }
        }
        let out = Tensor::new(&[heads, l, dh], out)?;
        Ok(self.derived(out, Op::SplitHeads(a), &[a]))
    }

    /// `[H, L, dh]` to `[L, H*dh]`.
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() != 3 {
            return Err(Error::Shape(format!("merge_heads on {:?}", v.shape())));
        }
        let (heads, l, dh) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let out = merge_heads_data(v.data(), heads, l, dh);
        let out = Tensor::new(&[l, heads * dh], out)?;
        Ok(self.derived(out, Op::MergeHeads(a), &[a]))
    }

    /// Softmax over the last dim of `logits + mask`. `mask` is `[L, L']` and is
    /// broadcast over leading dims. Rows whose every entry is masked yield zeros.
    pub fn masked_softmax(&mut self, logits: Var, mask: Option<&Tensor>) -> Result<Var> {
        let v = self.value(logits);
        let s = v.shape();
        if s.len() < 2 {
            return Err(Error::Shape(format!("masked_softmax needs rank >= 2, got {s:?}")));
        }
        let (l, lk) = (s[s.len() - 2], s[s.len() - 1]);
        if let Some(m) = mask {
            if m.shape() != [l, lk] {
                return Err(shape_err("masked_softmax mask", m.shape(), &[l, lk]));
            }
        }
        let mut out = v.clone();
        for (ri, row) in out.data_mut().chunks_mut(lk).enumerate() {
            if let Some(m) = mask {
                let mrow = m.row(ri % l);
                row.iter_mut().zip(mrow).for_each(|(x, mv)| *x += mv);
            }
            softmax_row(row);
        }
        Ok(self.derived(out, Op::MaskedSoftmax(logits), &[logits]))
    }

    /// Per-row standardisation over the last dim followed by `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(shape_err("layer_norm params", vx.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        Ok(self.derived(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.derived(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        self.derived(out, Op::Mean(a), &[a])
    }

    /// Rows `[start, end)` of `a` viewed as `[rows, cols]`; result is 2-D.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if start >= end || end > v.rows() {
            return Err(Error::Shape(format!("slice_rows {start}..{end} of {:?}", v.shape())));
        }
        let out = v.slice_rows(start, end);
        Ok(self.derived(out, Op::SliceRows(a, start), &[a]))
    }

    /// Columns `[start, end)` of a 2-D `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        let c = v.cols();
        if v.ndim() != 2 || start >= end || end > c {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {:?}", v.shape())));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(v.rows() * w);
        for row in v.data().chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        let out = Tensor::new(&[v.rows(), w], out)?;
        Ok(self.derived(out, Op::SliceCols(a, start), &[a]))
    }

    /// Stacks 2-D inputs with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.ndim() != 2 || v.cols() != c {
                return Err(shape_err("concat_rows", self.shape(parts[0]), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(&[rows, c], data)?;
        Ok(self.derived(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins 2-D inputs with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.ndim() != 2 || v.rows() != r {
                return Err(shape_err("concat_cols", self.shape(parts[0]), v.shape()));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[r, total], data)?;
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Repeats each row `n` times in place: rows `[a, b]` become `[a, a, b, b]` for n=2.
    pub fn repeat_each_row(&mut self, a: Var, n: usize) -> Result<Var> {
        let v = self.value(a);
        let c = v.cols();
        let mut data = Vec::with_capacity(v.numel() * n);
        for row in v.data().chunks(c) {
            for _ in 0..n {
                data.extend_from_slice(row);
            }
        }
        let out = Tensor::new(&[v.rows() * n, c], data)?;
        Ok(self.derived(out, Op::RepeatEachRow(a, n), &[a]))
    }

    /// Tiles the whole matrix `n` times: rows `[a, b]` become `[a, b, a, b]` for n=2.
    pub fn tile_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let v = self.value(a);
        let mut data = Vec::with_capacity(v.numel() * n);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(&[v.rows() * n, v.cols()], data)?;
        Ok(self.derived(out, Op::TileRows(a), &[a]))
    }

    pub fn reverse_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = reverse_rows_data(v.data(), v.cols());
        let out = Tensor::new(v.shape(), out).expect("same shape");
        self.derived(out, Op::ReverseRows(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(a), &[a]))
    }

    /// Depthwise causal convolution of `x: [L, C]` with `kernel: [C, 4]`.
    pub fn causal_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        if vx.ndim() != 2 || vk.shape() != [vx.cols(), kernels::CONV_WIDTH] {
            return Err(shape_err("causal_conv", vx.shape(), vk.shape()));
        }
        let y = kernels::causal_conv_forward(vx.data(), vk.data(), vx.rows(), vx.cols());
        let out = Tensor::new(vx.shape(), y)?;
        Ok(self.derived(out, Op::CausalConv(x, kernel), &[x, kernel]))
    }

    /// Selective scan: `u, delta: [L, C]`, `b, c: [L, S]`, `a: [C, S]`, `d: [C]`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, b: Var, c: Var, a: Var, d: Var) -> Result<Var> {
        let inputs = self.scan_inputs(u, delta, b, c, a, d)?;
        let (y, states) = kernels::selective_scan_forward(inputs);
        let out = Tensor::new(self.shape(u), y)?;
        Ok(self.derived(out, Op::Scan { u, delta, b, c, a, d, states }, &[u, delta, b, c, a, d]))
    }

    fn scan_inputs(&self, u: Var, delta: Var, b: Var, c: Var, a: Var, d: Var) -> Result<ScanInputs<'_>> {
        let vu = self.value(u);
        if vu.ndim() != 2 {
            return Err(Error::Shape(format!("scan input must be [L, C], got {:?}", vu.shape())));
        }
        let (len, channels) = (vu.rows(), vu.cols());
        let state = self.value(a).cols();
        let checks: [(&str, Var, [usize; 2]); 4] = [
            ("delta", delta, [len, channels]),
            ("B", b, [len, state]),
            ("C", c, [len, state]),
            ("A", a, [channels, state]),
        ];
        for (name, v, want) in checks {
            if self.shape(v) != want {
                return Err(shape_err(&format!("scan {name}"), self.shape(v), &want));
            }
        }
        if self.value(d).numel() != channels {
            return Err(shape_err("scan D", self.shape(d), &[channels]));
        }
        Ok(ScanInputs {
            u: vu.data(),
            delta: self.value(delta).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            a: self.value(a).data(),
            d_skip: self.value(d).data(),
            len,
            channels,
            state,
        })
    }

    /// Mean cross-entropy of `logits: [B, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let k = v.cols();
        if v.rows() != labels.len() || labels.iter().any(|&l| l >= k) {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {:?} with labels {labels:?}",
                v.shape()
            )));
        }
        let mut probs = v.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            softmax_row(row);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        let out = Tensor::scalar(loss / labels.len() as f64);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.derived(out, op, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`, seeding `∂loss/∂loss = 1`.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardStats> {
        self.backward_with_seed(loss, 1.0)
    }

    /// Reverse sweep with an explicit seed gradient (useful for averaging over batches).
    pub fn backward_with_seed(&mut self, loss: Var, seed: f64) -> Result<BackwardStats> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        let mut stats = BackwardStats { visited: 0, visits: vec![0; n] };
        if !self.nodes[loss.0].requires_grad {
            return Ok(stats);
        }
        self.grads[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            stats.visited += 1;
            stats.visits[i] += 1;
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let gy = self.grads[i].take().expect("checked above");
            self.propagate(i, &gy);
        }
        Ok(stats)
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.grad_buf(v) {
            f(g);
        }
    }

    fn acc_map(&mut self, v: Var, gy: &[f64], f: impl Fn(usize, f64) -> f64) {
        self.acc(v, |g| g.iter_mut().zip(gy).enumerate().for_each(|(i, (o, &d))| *o += f(i, d)));
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn propagate(&mut self, i: usize, gy: &[f64]) {
        // Take the op out so `self` can be borrowed mutably for gradient buffers.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => unreachable!("leaves are skipped"),
            Op::Add(a, b) => {
                self.acc_map(*a, gy, |_, d| d);
                self.acc_map(*b, gy, |_, d| d);
            }
            Op::Sub(a, b) => {
                self.acc_map(*a, gy, |_, d| d);
                self.acc_map(*b, gy, |_, d| -d);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).to_vec(), self.val(*b).to_vec());
                self.acc_map(*a, gy, |j, d| d * vb[j]);
                self.acc_map(*b, gy, |j, d| d * va[j]);
            }
            Op::Neg(a) => self.acc_map(*a, gy, |_, d| -d),
            Op::Scale(a, s) => {
                let s = *s;
                self.acc_map(*a, gy, |_, d| d * s);
            }
            Op::Exp(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_map(*a, gy, |j, d| d * y[j]);
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_map(*a, gy, |j, d| d * (1.0 - y[j] * y[j]));
            }
            Op::Silu(a) => {
                let x = self.val(*a).to_vec();
                self.acc_map(*a, gy, |j, d| {
                    let s = sigmoid(x[j]);
                    d * s * (1.0 + x[j] * (1.0 - s))
                });
            }
            Op::Softplus(a) => {
                let x = self.val(*a).to_vec();
                self.acc_map(*a, gy, |j, d| d * sigmoid(x[j]));
            }
            Op::AddBias(x, bias) => {
                self.acc_map(*x, gy, |_, d| d);
                let c = self.nodes[bias.0].value.numel();
                self.acc(*bias, |g| {
                    for row in gy.chunks(c) {
                        g.iter_mut().zip(row).for_each(|(o, d)| *o += d);
                    }
                });
            }
            Op::MulConst(x, c) => {
                let c = c.clone();
                self.acc_map(*x, gy, |j, d| d * c.data()[j]);
            }
            Op::MatMul(a, b, plan) => {
                let (a, b, plan) = (*a, *b, *plan);
                let va = self.nodes[a.0].value.data().to_vec();
                let vb = self.nodes[b.0].value.data().to_vec();
                let mut da = self.grad_buf(a).map(|g| g.to_vec());
                let mut db = self.grad_buf(b).map(|g| g.to_vec());
                kernels::matmul_backward(&plan, &va, &vb, gy, da.as_deref_mut(), db.as_deref_mut());
                if let Some(da) = da {
                    self.grads[a.0] = Some(da);
                }
                if let Some(db) = db {
                    self.grads[b.0] = Some(db);
                }
            }
            Op::Transpose(a) => {
                let s = self.nodes[i].value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = transpose_data(gy, r, c);
                self.acc_map(*a, &back, |_, d| d);
            }
            Op::SplitHeads(a) => {
                let s = self.nodes[i].value.shape();
                let back = merge_heads_data(gy, s[0], s[1], s[2]);
                self.acc_map(*a, &back, |_, d| d);
            }
            Op::MergeHeads(a) => {
                let s = self.nodes[a.0].value.shape();
                let (heads, l, dh) = (s[0], s[1], s[2]);
                let d = heads * dh;
                self.acc(*a, |g| {
                    for li in 0..l {
                        for h in 0..heads {
                            for j in 0..dh {
                                g[(h * l + li) * dh + j] += gy[li * d + h * dh + j];
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax(a) => {
                let y = self.nodes[i].value.data().to_vec();
                let lk = self.nodes[i].value.cols();
                self.acc(*a, |g| {
                    for ((grow, yrow), drow) in g.chunks_mut(lk).zip(y.chunks(lk)).zip(gy.chunks(lk)) {
                        let dot: f64 = yrow.iter().zip(drow).map(|(y, d)| y * d).sum();
                        for j in 0..lk {
                            grow[j] += yrow[j] * (drow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.nodes[gamma.0].value.numel();
                let gvals = self.val(*gamma).to_vec();
                self.acc(*gamma, |g| {
                    for (row, xr) in gy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            g[j] += row[j] * xr[j];
                        }
                    }
                });
                self.acc(*beta, |g| {
                    for row in gy.chunks(d) {
                        g.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                });
                self.acc(*x, |g| {
                    let mut dxhat = vec![0.0; d];
                    for (r, ((grow, drow), xr)) in
                        g.chunks_mut(d).zip(gy.chunks(d)).zip(xhat.chunks(d)).enumerate()
                    {
                        for j in 0..d {
                            dxhat[j] = drow[j] * gvals[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            grow[j] += rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let d = gy[0];
                self.acc(*a, |g| g.iter_mut().for_each(|o| *o += d));
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                let d = gy[0] / n;
                self.acc(*a, |g| g.iter_mut().for_each(|o| *o += d));
            }
            Op::SliceRows(a, start) => {
                let c = self.nodes[i].value.cols();
                let off = start * c;
                self.acc(*a, |g| {
                    g[off..off + gy.len()].iter_mut().zip(gy).for_each(|(o, d)| *o += d);
                });
            }
            Op::SliceCols(a, start) => {
                let w = self.nodes[i].value.cols();
                let c = self.nodes[a.0].value.cols();
                let start = *start;
                self.acc(*a, |g| {
                    for (grow, drow) in g.chunks_mut(c).zip(gy.chunks(w)) {
                        grow[start..start + w].iter_mut().zip(drow).for_each(|(o, d)| *o += d);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    let slice = &gy[off..off + n];
                    self.acc_map(p, slice, |_, d| d);
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    self.acc(p, |g| {
                        for (grow, drow) in g.chunks_mut(w).zip(gy.chunks(total)) {
                            grow.iter_mut().zip(&drow[col..col + w]).for_each(|(o, d)| *o += d);
                        }
                    });
                    col += w;
                }
            }
            Op::RepeatEachRow(a, n) => {
                let c = self.nodes[a.0].value.cols();
                let n = *n;
                self.acc(*a, |g| {
                    for (r, grow) in g.chunks_mut(c).enumerate() {
                        for k in 0..n {
                            let src = &gy[(r * n + k) * c..(r * n + k + 1) * c];
                            grow.iter_mut().zip(src).for_each(|(o, d)| *o += d);
                        }
                    }
                });
            }
            Op::TileRows(a) => {
                let m = self.nodes[a.0].value.numel();
                self.acc(*a, |g| {
                    for chunk in gy.chunks(m) {
                        g.iter_mut().zip(chunk).for_each(|(o, d)| *o += d);
                    }
                });
            }
            Op::ReverseRows(a) => {
                let c = self.nodes[a.0].value.cols();
                let back = reverse_rows_data(gy, c);
                self.acc_map(*a, &back, |_, d| d);
            }
            Op::Reshape(a) => self.acc_map(*a, gy, |_, d| d),
            Op::CausalConv(x, k) => {
                let (x, k) = (*x, *k);
                let vx = self.nodes[x.0].value.data().to_vec();
                let vk = self.nodes[k.0].value.data().to_vec();
                let (len, ch) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let mut dx = self.grad_buf(x).map(|g| g.to_vec());
                let mut dk = self.grad_buf(k).map(|g| g.to_vec());
                kernels::causal_conv_backward(&vx, &vk, gy, len, ch, dx.as_deref_mut(), dk.as_deref_mut());
                if let Some(dx) = dx {
                    self.grads[x.0] = Some(dx);
                }
                if let Some(dk) = dk {
                    self.grads[k.0] = Some(dk);
                }
            }
            Op::Scan { u, delta, b, c, a, d, states } => {
                let vars = [*u, *delta, *b, *c, *a, *d];
                let mut bufs: Vec<Option<Vec<f64>>> =
                    vars.iter().map(|&v| self.grad_buf(v).map(|g| g.to_vec())).collect();
                {
                    let inputs = self.scan_inputs(*u, *delta, *b, *c, *a, *d).expect("validated on forward");
                    let mut it = bufs.iter_mut();
                    let mut next = || it.next().expect("six buffers").as_deref_mut();
                    let grads = ScanGrads {
                        du: next(),
                        ddelta: next(),
                        db: next(),
                        dc: next(),
                        da: next(),
                        dd: next(),
                    };
                    kernels::selective_scan_backward(inputs, states, gy, grads);
                }
                for (v, buf) in vars.iter().zip(bufs) {
                    if let Some(buf) = buf {
                        self.grads[v.0] = Some(buf);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.nodes[logits.0].value.cols();
                let scale = gy[0] / labels.len() as f64;
                self.acc(*logits, |g| {
                    for (r, (grow, prow)) in g.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        for j in 0..k {
                            let target = if j == labels[r] { 1.0 } else { 0.0 };
                            grow[j] += scale * (prow[j] - target);
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

/// In-place softmax of one row that already includes the additive mask.
fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= MASK_SENTINEL * 0.5 {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn transpose_data(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for (bi, block) in src.chunks(r * c).enumerate() {
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = block[i * c + j];
            }
        }
    }
    out
}

fn merge_heads_data(src: &[f64], heads: usize, l: usize, dh: usize) -> Vec<f64> {
    let d = heads * dh;
    let mut out = vec![0.0; src.len()];
    for h in 0..heads {
        for i in 0..l {
            out[i * d + h * dh..i * d + (h + 1) * dh]
                .copy_from_slice(&src[(h * l + i) * dh..(h * l + i + 1) * dh]);
        }
    }
    out
}

fn reverse_rows_data(src: &[f64], c: usize) -> Vec<f64> {
    src.chunks(c).rev().flatten().copied().collect()
}
