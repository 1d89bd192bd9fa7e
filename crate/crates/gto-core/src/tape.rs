//! Reverse-mode automatic differentiation on dense rank-2 tensors.
//!
//! A [`Tape`] is an append-only arena of operations. Every op validates its
//! shapes, records the values it needs for the backward pass, and returns a
//! [`Var`] handle. `backward` walks the arena once in reverse. Tapes live for
//! one forward pass (one training window) and are dropped afterwards; they
//! are deliberately `!Send` — tensors may cross workers, tapes may not.

use crate::error::{err, GtoError, Result};
use crate::real::{r, Real};
use crate::tensor::{self, Tensor};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::marker::PhantomData;

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Silu,
    Gelu,
    /// Leaky rectifier with a fixed negative slope.
    PRelu(f64),
}

impl Activation {
    pub fn parse(s: &str) -> Result<Activation> {
        if let Some(rest) = s.strip_prefix("prelu:") {
            let alpha: f64 = rest
                .parse()
                .map_err(|_| err!(Config, "bad prelu slope {rest:?}"))?;
            return Ok(Activation::PRelu(alpha));
        }
        match s {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            "gelu" => Ok(Activation::Gelu),
            "prelu" => Ok(Activation::PRelu(0.01)),
            _ => Err(err!(Config, "unknown activation kind {s:?}")),
        }
    }

    pub fn name(&self) -> alloc::string::String {
        match self {
            Activation::Relu => "relu".into(),
            Activation::Silu => "silu".into(),
            Activation::Gelu => "gelu".into(),
            Activation::PRelu(a) => alloc::format!("prelu:{a}"),
        }
    }
}

fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

fn act_value<R: Real>(x: R, kind: Activation) -> R {
    match kind {
        Activation::Relu => x.max(R::zero()),
        Activation::Silu => x * sigmoid(x),
        Activation::Gelu => {
            let c0 = r::<R>(0.7978845608028654); // sqrt(2/pi)
            let c1 = r::<R>(0.044715);
            let t = (c0 * (x + c1 * x * x * x)).tanh();
            r::<R>(0.5) * x * (R::one() + t)
        }
        Activation::PRelu(a) => {
            if x > R::zero() {
                x
            } else {
                r::<R>(a) * x
            }
        }
    }
}

fn act_deriv<R: Real>(x: R, kind: Activation) -> R {
    match kind {
        Activation::Relu => {
            if x > R::zero() {
                R::one()
            } else {
                R::zero()
            }
        }
        Activation::Silu => {
            let s = sigmoid(x);
            s * (R::one() + x * (R::one() - s))
        }
        Activation::Gelu => {
            let c0 = r::<R>(0.7978845608028654);
            let c1 = r::<R>(0.044715);
            let t = (c0 * (x + c1 * x * x * x)).tanh();
            let half = r::<R>(0.5);
            half * (R::one() + t)
                + half * x * (R::one() - t * t) * c0 * (R::one() + r::<R>(3.0) * c1 * x * x)
        }
        Activation::PRelu(a) => {
            if x > R::zero() {
                R::one()
            } else {
                r::<R>(a)
            }
        }
    }
}

enum Op<R: Real> {
    Leaf,
    MatMul(Var, Var),
    /// c = a . b^T
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    DivElem(Var, Var),
    Scale(Var, R),
    AddScalar(Var, R),
    /// [n,c] + broadcast of [1,c]
    AddRow(Var, Var),
    /// [n,c] * broadcast of [1,c]
    MulRow(Var, Var),
    /// [1,c] replicated n times
    BroadcastRows(Var),
    GatherRows(Var, Arc<Vec<u32>>),
    SegmentMean {
        v: Var,
        seg: Arc<Vec<u32>>,
        counts: Arc<Vec<u32>>,
    },
    ConcatCols(Var, Var),
    SliceCols {
        v: Var,
        from: usize,
    },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: R,
    },
    Act(Var, Activation),
    SumAll(Var),
    SqrtElem(Var),
    /// Copy of x with `values` written at (rows, channel); grads there stop.
    OverwriteRowsCol {
        x: Var,
        channel: usize,
        rows: Arc<Vec<u32>>,
    },
}

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
    grad: Option<Tensor<R>>,
}

pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    back_done: bool,
    _not_send: PhantomData<*const ()>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            back_done: false,
            _not_send: PhantomData,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<R>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn grad_or_zeros(&self, v: Var) -> Tensor<R> {
        let n = &self.nodes[v.0];
        n.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(n.value.rows(), n.value.cols()))
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    // -- arithmetic ---------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(err!(Dim, "matmul {ar}x{ac} . {br}x{bc}"));
        }
        let out = tensor::matmul_nn(self.value(a), self.value(b));
        let req = self.req(a) || self.req(b);
        Ok(self.push(out, Op::MatMul(a, b), req))
    }

    /// a . b^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != bc {
            return Err(err!(Dim, "matmul_nt {ar}x{ac} . ({br}x{bc})^T"));
        }
        let out = tensor::matmul_nt(self.value(a), self.value(b));
        let req = self.req(a) || self.req(b);
        Ok(self.push(out, Op::MatMulNT(a, b), req))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            let (ar, ac) = self.value(a).shape();
            let (br, bc) = self.value(b).shape();
            return Err(err!(Dim, "{what}: {ar}x{ac} vs {br}x{bc}"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = tensor::add(self.value(a), self.value(b));
        let req = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Add(a, b), req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = tensor::sub(self.value(a), self.value(b));
        let req = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Sub(a, b), req))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul_elem")?;
        let out = Tensor::from_fn(self.value(a).rows(), self.value(a).cols(), |i, j| {
            self.value(a).at(i, j) * self.value(b).at(i, j)
        });
        let req = self.req(a) || self.req(b);
        Ok(self.push(out, Op::MulElem(a, b), req))
    }

    pub fn div_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div_elem")?;
        let out = Tensor::from_fn(self.value(a).rows(), self.value(a).cols(), |i, j| {
            self.value(a).at(i, j) / self.value(b).at(i, j)
        });
        let req = self.req(a) || self.req(b);
        Ok(self.push(out, Op::DivElem(a, b), req))
    }

    pub fn scale(&mut self, a: Var, k: R) -> Var {
        let out = self.value(a).map(|x| x * k);
        let req = self.req(a);
        self.push(out, Op::Scale(a, k), req)
    }

    pub fn add_scalar(&mut self, a: Var, k: R) -> Var {
        let out = self.value(a).map(|x| x + k);
        let req = self.req(a);
        self.push(out, Op::AddScalar(a, k), req)
    }

    /// [n,c] + [1,c] broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, c) = self.value(a).shape();
        if self.value(row).shape() != (1, c) {
            return Err(err!(Dim, "add_row wants [1,{c}]"));
        }
        let rv = self.value(row).data().to_vec();
        let out = Tensor::from_fn(n, c, |i, j| self.value(a).at(i, j) + rv[j]);
        let req = self.req(a) || self.req(row);
        Ok(self.push(out, Op::AddRow(a, row), req))
    }

    /// [n,c] * [1,c] broadcast over rows (per-column scaling).
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, c) = self.value(a).shape();
        if self.value(row).shape() != (1, c) {
            return Err(err!(Dim, "mul_row wants [1,{c}]"));
        }
        let rv = self.value(row).data().to_vec();
        let out = Tensor::from_fn(n, c, |i, j| self.value(a).at(i, j) * rv[j]);
        let req = self.req(a) || self.req(row);
        Ok(self.push(out, Op::MulRow(a, row), req))
    }

    /// Replicate a [1,c] row n times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (ar, c) = self.value(a).shape();
        if ar != 1 {
            return Err(err!(Dim, "broadcast_rows wants a [1,c] input"));
        }
        let rowv = self.value(a).data().to_vec();
        let out = Tensor::from_fn(n, c, |_, j| rowv[j]);
        let req = self.req(a);
        Ok(self.push(out, Op::BroadcastRows(a), req))
    }

    // -- indexing -----------------------------------------------------------

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<u32>>) -> Result<Var> {
        let (n, c) = self.value(a).shape();
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= n) {
            return Err(err!(Index, "gather row {bad} out of {n}"));
        }
        let mut out = Tensor::zeros(idx.len(), c);
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.value(a).row(i as usize));
        }
        let req = self.req(a);
        Ok(self.push(out, Op::GatherRows(a, idx), req))
    }

    /// Row s of the output is the mean of input rows whose segment id is s.
    /// Segments without members yield a zero row.
    pub fn segment_mean(&mut self, v: Var, seg: Arc<Vec<u32>>, num_segments: usize) -> Result<Var> {
        let (n, c) = self.value(v).shape();
        if seg.len() != n {
            return Err(err!(Dim, "segment list length {} for {n} rows", seg.len()));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s as usize >= num_segments) {
            return Err(err!(Index, "segment id {bad} out of {num_segments}"));
        }
        let mut counts = vec![0u32; num_segments];
        let mut out = Tensor::zeros(num_segments, c);
        for (row, &s) in seg.iter().enumerate() {
            counts[s as usize] += 1;
            let src = self.value(v).row(row).to_vec();
            let dst = out.row_mut(s as usize);
            for (d, x) in dst.iter_mut().zip(src) {
                *d = *d + x;
            }
        }
        for (s, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                let inv = R::one() / r::<R>(cnt as f64);
                for x in out.row_mut(s) {
                    *x = *x * inv;
                }
            }
        }
        let req = self.req(v);
        Ok(self.push(
            out,
            Op::SegmentMean {
                v,
                seg,
                counts: Arc::new(counts),
            },
            req,
        ))
    }

    // -- shape --------------------------------------------------------------

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ar != br {
            return Err(err!(Dim, "concat_cols row mismatch {ar} vs {br}"));
        }
        let mut out = Tensor::zeros(ar, ac + bc);
        for i in 0..ar {
            out.row_mut(i)[..ac].copy_from_slice(self.value(a).row(i));
            out.row_mut(i)[ac..].copy_from_slice(self.value(b).row(i));
        }
        let req = self.req(a) || self.req(b);
        Ok(self.push(out, Op::ConcatCols(a, b), req))
    }

    pub fn slice_cols(&mut self, v: Var, from: usize, to: usize) -> Result<Var> {
        let (n, c) = self.value(v).shape();
        if from >= to || to > c {
            return Err(err!(Dim, "slice_cols {from}..{to} of width {c}"));
        }
        let mut out = Tensor::zeros(n, to - from);
        for i in 0..n {
            out.row_mut(i).copy_from_slice(&self.value(v).row(i)[from..to]);
        }
        let req = self.req(v);
        Ok(self.push(out, Op::SliceCols { v, from }, req))
    }

    /// Inverse of `concat_cols` at the given column.
    pub fn split_cols(&mut self, v: Var, at: usize) -> Result<(Var, Var)> {
        let c = self.value(v).cols();
        if at == 0 || at >= c {
            return Err(err!(Dim, "split_cols at {at} of width {c}"));
        }
        let left = self.slice_cols(v, 0, at)?;
        let right = self.slice_cols(v, at, c)?;
        Ok((left, right))
    }

    /// Split into two equal halves; the width must be even.
    pub fn split_half(&mut self, v: Var) -> Result<(Var, Var)> {
        let c = self.value(v).cols();
        if c % 2 != 0 {
            return Err(err!(Dim, "cannot halve odd width {c}"));
        }
        self.split_cols(v, c / 2)
    }

    // -- nonlinear ----------------------------------------------------------

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, v: Var) -> Result<Var> {
        if !self.value(v).is_finite() {
            return Err(err!(Numeric, "softmax_rows on non-finite input"));
        }
        let (n, c) = self.value(v).shape();
        let mut out = Tensor::zeros(n, c);
        for i in 0..n {
            let row = self.value(v).row(i);
            let mx = row.iter().fold(R::neg_infinity(), |m, &x| m.max(x));
            let mut sum = R::zero();
            let dst = out.row_mut(i);
            for (d, &x) in dst.iter_mut().zip(row) {
                let e = (x - mx).exp();
                *d = e;
                sum = sum + e;
            }
            let inv = R::one() / sum;
            for d in dst.iter_mut() {
                *d = *d * inv;
            }
        }
        let req = self.req(v);
        Ok(self.push(out, Op::SoftmaxRows(v), req))
    }

    /// Per-row standardization followed by a [1,c] affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: R) -> Result<Var> {
        let (n, c) = self.value(x).shape();
        if c < 1 || eps <= R::zero() {
            return Err(err!(Config, "layer_norm wants c >= 1 and eps > 0"));
        }
        if self.value(gain).shape() != (1, c) || self.value(bias).shape() != (1, c) {
            return Err(err!(Dim, "layer_norm affine must be [1,{c}]"));
        }
        let gv = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let mut out = Tensor::zeros(n, c);
        let inv_c = R::one() / r::<R>(c as f64);
        for i in 0..n {
            let row = self.value(x).row(i);
            let mean = row.iter().fold(R::zero(), |a, &v| a + v) * inv_c;
            let var = row
                .iter()
                .fold(R::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_c;
            let rstd = R::one() / (var + eps).sqrt();
            for (j, (&v, d)) in row.iter().zip(out.row_mut(i)).enumerate() {
                *d = (v - mean) * rstd * gv[j] + bv[j];
            }
        }
        let req = self.req(x) || self.req(gain) || self.req(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, eps }, req))
    }

    pub fn activation(&mut self, v: Var, kind: Activation) -> Var {
        let out = self.value(v).map(|x| act_value(x, kind));
        let req = self.req(v);
        self.push(out, Op::Act(v, kind), req)
    }

    // -- reductions ---------------------------------------------------------

    pub fn sum_all(&mut self, v: Var) -> Var {
        let s = self
            .value(v)
            .data()
            .iter()
            .fold(R::zero(), |a, &x| a + x);
        let req = self.req(v);
        self.push(Tensor::scalar(s), Op::SumAll(v), req)
    }

    pub fn sqrt_elem(&mut self, v: Var) -> Var {
        let out = self.value(v).map(|x| x.sqrt());
        let req = self.req(v);
        self.push(out, Op::SqrtElem(v), req)
    }

    /// Overwrite one channel at the given rows with fixed values. The
    /// prescribed entries stop gradient flow.
    pub fn overwrite_rows_col(
        &mut self,
        x: Var,
        channel: usize,
        rows: Arc<Vec<u32>>,
        values: &[R],
    ) -> Result<Var> {
        let (n, c) = self.value(x).shape();
        if channel >= c {
            return Err(err!(Index, "channel {channel} out of {c}"));
        }
        if rows.len() != values.len() {
            return Err(err!(Dim, "{} rows but {} values", rows.len(), values.len()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i as usize >= n) {
            return Err(err!(Index, "row {bad} out of {n}"));
        }
        let mut out = self.value(x).clone();
        for (&row, &val) in rows.iter().zip(values) {
            out.set(row as usize, channel, val);
        }
        let req = self.req(x);
        Ok(self.push(out, Op::OverwriteRowsCol { x, channel, rows }, req))
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// reachable `requires_grad` node; a second call without a fresh tape is
    /// an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.back_done {
            return Err(err!(Usage, "backward called twice on one tape"));
        }
        if self.value(loss).shape() != (1, 1) {
            let (lr, lc) = self.value(loss).shape();
            return Err(err!(Usage, "backward wants a 1x1 loss, got {lr}x{lc}"));
        }
        self.back_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<R>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(R::one()));

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                // Disconnected leaves still get a (zero) gradient.
                node.grad = Some(Tensor::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(())
    }

    fn apply_backward(&self, i: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        // Accumulate `delta` into the gradient slot of `p` if p wants one.
        macro_rules! acc {
            ($p:expr, $delta:expr) => {
                if self.nodes[$p.0].requires_grad {
                    match &mut grads[$p.0] {
                        Some(t) => tensor::axpy(R::one(), &$delta, t),
                        slot @ None => *slot = Some($delta),
                    }
                }
            };
        }
        // Mutable access to the (zero-initialized) gradient of `p`.
        macro_rules! slot {
            ($p:expr) => {{
                let (pr, pc) = self.nodes[$p.0].value.shape();
                grads[$p.0].get_or_insert_with(|| Tensor::zeros(pr, pc))
            }};
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let da = tensor::matmul_nt(g, &self.nodes[b.0].value);
                    acc!(a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = tensor::matmul_tn(&self.nodes[a.0].value, g);
                    acc!(b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let da = tensor::matmul_nn(g, &self.nodes[b.0].value);
                    acc!(a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = tensor::matmul_tn(g, &self.nodes[a.0].value);
                    acc!(b, db);
                }
            }
            Op::Add(a, b) => {
                acc!(a, g.clone());
                acc!(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc!(a, g.clone());
                acc!(b, g.map(|x| -x));
            }
            Op::MulElem(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let bv = &self.nodes[b.0].value;
                    acc!(a, Tensor::from_fn(g.rows(), g.cols(), |i2, j| g.at(i2, j) * bv.at(i2, j)));
                }
                if self.nodes[b.0].requires_grad {
                    let av = &self.nodes[a.0].value;
                    acc!(b, Tensor::from_fn(g.rows(), g.cols(), |i2, j| g.at(i2, j) * av.at(i2, j)));
                }
            }
            Op::DivElem(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.nodes[a.0].requires_grad {
                    acc!(a, Tensor::from_fn(g.rows(), g.cols(), |i2, j| g.at(i2, j) / bv.at(i2, j)));
                }
                if self.nodes[b.0].requires_grad {
                    acc!(
                        b,
                        Tensor::from_fn(g.rows(), g.cols(), |i2, j| {
                            -g.at(i2, j) * av.at(i2, j) / (bv.at(i2, j) * bv.at(i2, j))
                        })
                    );
                }
            }
            Op::Scale(a, k) => {
                acc!(a, g.map(|x| x * *k));
            }
            Op::AddScalar(a, _) => {
                acc!(a, g.clone());
            }
            Op::AddRow(a, row) => {
                acc!(a, g.clone());
                if self.nodes[row.0].requires_grad {
                    let dst = slot!(row);
                    for i2 in 0..g.rows() {
                        for j in 0..g.cols() {
                            let v = dst.at(0, j) + g.at(i2, j);
                            dst.set(0, j, v);
                        }
                    }
                }
            }
            Op::MulRow(a, row) => {
                let rv = &self.nodes[row.0].value;
                if self.nodes[a.0].requires_grad {
                    acc!(a, Tensor::from_fn(g.rows(), g.cols(), |i2, j| g.at(i2, j) * rv.at(0, j)));
                }
                if self.nodes[row.0].requires_grad {
                    let av = &self.nodes[a.0].value;
                    let dst = slot!(row);
                    for i2 in 0..g.rows() {
                        for j in 0..g.cols() {
                            let v = dst.at(0, j) + g.at(i2, j) * av.at(i2, j);
                            dst.set(0, j, v);
                        }
                    }
                }
            }
            Op::BroadcastRows(a) => {
                if self.nodes[a.0].requires_grad {
                    let dst = slot!(a);
                    for i2 in 0..g.rows() {
                        for j in 0..g.cols() {
                            let v = dst.at(0, j) + g.at(i2, j);
                            dst.set(0, j, v);
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if self.nodes[a.0].requires_grad {
                    let dst = slot!(a);
                    for (k, &src) in idx.iter().enumerate() {
                        let grow = g.row(k);
                        let drow = dst.row_mut(src as usize);
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::SegmentMean { v, seg, counts } => {
                if self.nodes[v.0].requires_grad {
                    let dst = slot!(v);
                    for (row, &s) in seg.iter().enumerate() {
                        let inv = R::one() / r::<R>(counts[s as usize] as f64);
                        let grow = g.row(s as usize);
                        let drow = dst.row_mut(row);
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = *d + gv * inv;
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = self.nodes[a.0].value.cols();
                if self.nodes[a.0].requires_grad {
                    let dst = slot!(a);
                    for i2 in 0..g.rows() {
                        let grow = &g.row(i2)[..ac];
                        let drow = dst.row_mut(i2);
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = *d + gv;
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let dst = slot!(b);
                    for i2 in 0..g.rows() {
                        let grow = &g.row(i2)[ac..];
                        let drow = dst.row_mut(i2);
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::SliceCols { v, from } => {
                if self.nodes[v.0].requires_grad {
                    let dst = slot!(v);
                    for i2 in 0..g.rows() {
                        let grow = g.row(i2);
                        let drow = &mut dst.row_mut(i2)[*from..*from + grow.len()];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::SoftmaxRows(v) => {
                if self.nodes[v.0].requires_grad {
                    let y = &self.nodes[i].value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for i2 in 0..y.rows() {
                        let yr = y.row(i2);
                        let gr = g.row(i2);
                        let dot = yr
                            .iter()
                            .zip(gr)
                            .fold(R::zero(), |a, (&yv, &gv)| a + yv * gv);
                        for (d, (&yv, &gv)) in dx.row_mut(i2).iter_mut().zip(yr.iter().zip(gr)) {
                            *d = yv * (gv - dot);
                        }
                    }
                    acc!(v, dx);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let (n, c) = xv.shape();
                let inv_c = R::one() / r::<R>(c as f64);
                // Recompute per-row statistics; cheaper than saving them.
                for i2 in 0..n {
                    let row = xv.row(i2);
                    let mean = row.iter().fold(R::zero(), |a, &v| a + v) * inv_c;
                    let var = row
                        .iter()
                        .fold(R::zero(), |a, &v| a + (v - mean) * (v - mean))
                        * inv_c;
                    let rstd = R::one() / (var + *eps).sqrt();
                    let gr = g.row(i2);
                    if self.nodes[x.0].requires_grad {
                        let mut mean_gh = R::zero();
                        let mut mean_gh_xh = R::zero();
                        for j in 0..c {
                            let xh = (row[j] - mean) * rstd;
                            let gh = gr[j] * gv.at(0, j);
                            mean_gh = mean_gh + gh;
                            mean_gh_xh = mean_gh_xh + gh * xh;
                        }
                        mean_gh = mean_gh * inv_c;
                        mean_gh_xh = mean_gh_xh * inv_c;
                        let dst = slot!(x);
                        for j in 0..c {
                            let xh = (row[j] - mean) * rstd;
                            let gh = gr[j] * gv.at(0, j);
                            let v = dst.at(i2, j) + rstd * (gh - mean_gh - xh * mean_gh_xh);
                            dst.set(i2, j, v);
                        }
                    }
                    if self.nodes[gain.0].requires_grad {
                        let dst = slot!(gain);
                        for j in 0..c {
                            let xh = (row[j] - mean) * rstd;
                            let v = dst.at(0, j) + gr[j] * xh;
                            dst.set(0, j, v);
                        }
                    }
                    if self.nodes[bias.0].requires_grad {
                        let dst = slot!(bias);
                        for j in 0..c {
                            let v = dst.at(0, j) + gr[j];
                            dst.set(0, j, v);
                        }
                    }
                }
            }
            Op::Act(v, kind) => {
                if self.nodes[v.0].requires_grad {
                    let xv = &self.nodes[v.0].value;
                    acc!(
                        v,
                        Tensor::from_fn(g.rows(), g.cols(), |i2, j| {
                            g.at(i2, j) * act_deriv(xv.at(i2, j), *kind)
                        })
                    );
                }
            }
            Op::SumAll(v) => {
                if self.nodes[v.0].requires_grad {
                    let gs = g.at(0, 0);
                    let (vr, vc) = self.nodes[v.0].value.shape();
                    acc!(v, Tensor::filled(vr, vc, gs));
                }
            }
            Op::SqrtElem(v) => {
                if self.nodes[v.0].requires_grad {
                    let y = &self.nodes[i].value;
                    acc!(
                        v,
                        Tensor::from_fn(g.rows(), g.cols(), |i2, j| {
                            g.at(i2, j) / (r::<R>(2.0) * y.at(i2, j))
                        })
                    );
                }
            }
            Op::OverwriteRowsCol { x, channel, rows } => {
                if self.nodes[x.0].requires_grad {
                    let mut dx = g.clone();
                    for &row in rows.iter() {
                        dx.set(row as usize, *channel, R::zero());
                    }
                    acc!(x, dx);
                }
            }
        }
    }
}

/// Max relative disagreement between the tape gradient of `f` at `x` and a
/// central finite difference with step `h`. `f` must build a scalar.
pub fn finite_diff_check<R: Real>(
    f: &dyn Fn(&mut Tape<R>, Var) -> Var,
    x: &Tensor<R>,
    h: R,
) -> Result<R> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv);
    if tape.value(out).shape() != (1, 1) {
        return Err(err!(Usage, "finite_diff_check wants a scalar function"));
    }
    tape.backward(out)?;
    let analytic = tape.grad_or_zeros(xv);

    let eval = |pt: &Tensor<R>| -> R {
        let mut t = Tape::new();
        let v = t.leaf(pt.clone(), false);
        let o = f(&mut t, v);
        t.value(o).at(0, 0)
    };

    let mut worst = R::zero();
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = eval(&probe);
        probe.data_mut()[k] = orig - h;
        let down = eval(&probe);
        probe.data_mut()[k] = orig;
        let numeric = (up - down) / (r::<R>(2.0) * h);
        let a = analytic.data()[k];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + r::<R>(1e-12));
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Guard used by training: every gradient must be finite.
pub fn grads_are_finite<R: Real>(grads: &[Tensor<R>]) -> bool {
    grads.iter().all(|g| g.is_finite())
}

impl<R: Real> Tape<R> {
    /// Convenience: `leaf` for every tensor in a parameter list.
    pub fn leaves(&mut self, tensors: &[Tensor<R>], requires_grad: bool) -> Vec<Var> {
        tensors
            .iter()
            .map(|t| self.leaf(t.clone(), requires_grad))
            .collect()
    }
}

// A tape must stay on one worker; the handle type is freely copyable.
const _: () = {
    const fn assert_copy<T: Copy>() {}
    assert_copy::<Var>();
};

#[allow(dead_code)]
fn _not_send_probe(_: GtoError) {}
