//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and whatever the
//! backward rule needs. Nodes only reference earlier nodes, so a reverse
//! sweep over the tape is a valid topological order.

use std::hash::{DefaultHasher, Hash, Hasher};

use super::conv::ConvGeometry;
use super::kernels::{bilinear_taps, matmul_into, AxisTaps};
use super::{split_axis, Tensor};
use crate::error::{invalid, Result, RtcError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    PowScalar(Var, f64),
    Relu(Var),
    Abs(Var),
    Log(Var),
    Exp(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    /// Output flat index -> input flat index.
    Expand(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    /// Flat input index of the selected maximum for every output element.
    Max(Var, Vec<usize>),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    L2Normalize {
        input: Var,
        axis: usize,
        eps: f64,
        norms: Vec<f64>,
    },
    Bilinear {
        input: Var,
        ty: AxisTaps,
        tx: AxisTaps,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
enum DetachMode {
    Record(Vec<Tensor>),
    Replay(Vec<Tensor>, usize),
}

#[cfg(test)]
thread_local! {
    /// Corrupts the ReLU backward rule on the current thread; used to prove
    /// the gradient checker catches a broken rule.
    pub(crate) static SABOTAGE_RELU: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Recorded computation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    kinks: Option<DefaultHasher>,
    detach: DetachMode,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kinks: None,
            detach: DetachMode::Record(Vec::new()),
        }
    }

    /// A graph that hashes every discrete branch taken (ReLU gates, max
    /// positions, selections noted by callers) into [`kink_signature`](Self::kink_signature).
    pub fn with_kink_tracking() -> Self {
        Self {
            kinks: Some(DefaultHasher::new()),
            ..Self::new()
        }
    }

    /// A graph whose [`detach`](Self::detach) calls return the given values in order
    /// instead of the live ones. Used to differentiate numerically with stop-gradient
    /// targets held fixed.
    pub fn replaying(self, detached: Vec<Tensor>) -> Self {
        Self {
            detach: DetachMode::Replay(detached, 0),
            ..self
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks.as_ref().map(|h| h.finish())
    }

    /// Folds a caller-side discrete decision (top-K sets, argmax labels) into the signature.
    pub fn note_discrete<T: Hash>(&mut self, decision: &T) {
        if let Some(h) = self.kinks.as_mut() {
            decision.hash(h);
        }
    }

    /// Values recorded by `detach` so far.
    pub fn detached_values(&self) -> &[Tensor] {
        match &self.detach {
            DetachMode::Record(v) => v,
            DetachMode::Replay(v, _) => v,
        }
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Stop-gradient: a constant leaf carrying `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = match &mut self.detach {
            DetachMode::Record(saved) => {
                let value = self.nodes[v.0].value.clone();
                saved.push(value.clone());
                value
            }
            DetachMode::Replay(saved, cursor) => {
                let value = saved
                    .get(*cursor)
                    .cloned()
                    .ok_or_else(|| RtcError::Internal("replay ran out of detached values".into()))?;
                if value.shape() != self.nodes[v.0].value.shape() {
                    return Err(RtcError::Internal("replayed detach shape differs".into()));
                }
                *cursor += 1;
                value
            }
        };
        Ok(self.constant(value))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(RtcError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn hash_mask(&mut self, values: Option<Var>, extra: &[f64], pred: impl Fn(f64) -> bool) {
        let Self { nodes, kinks, .. } = self;
        if let Some(h) = kinks.as_mut() {
            let values = match values {
                Some(v) => nodes[v.0].value.data(),
                None => extra,
            };
            let mut word = 0u64;
            for (i, &v) in values.iter().enumerate() {
                if pred(v) {
                    word |= 1 << (i % 64);
                }
                if i % 64 == 63 {
                    word.hash(h);
                    word = 0;
                }
            }
            word.hash(h);
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(invalid(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        if self.value(b).data().contains(&0.0) {
            return Err(invalid("division by zero"));
        }
        let out = self.zip_map(a, b, |x, y| x / y);
        self.push("div", out, Op::Div(a, b), &[a, b])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.map(a, |x| x + s);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn sub_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.add_scalar(a, -s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.map(a, |x| x * s);
        self.push("mul_scalar", out, Op::MulScalar(a, s), &[a])
    }

    pub fn div_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        if s == 0.0 {
            return Err(invalid("division by zero scalar"));
        }
        self.mul_scalar(a, 1.0 / s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -1.0)
    }

    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Result<Var> {
        let out = self.map(a, |x| x.powf(p));
        self.push("pow", out, Op::PowScalar(a, p), &[a])
    }

    /// ReLU with derivative 0 at exactly 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.hash_mask(Some(a), &[], |v| v > 0.0);
        let out = self.map(a, |x| x.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.hash_mask(Some(a), &[], |v| v >= 0.0);
        let out = self.map(a, f64::abs);
        self.push("abs", out, Op::Abs(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(invalid("log of a non-positive value"));
        }
        let out = self.map(a, f64::ln);
        self.push("log", out, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    // ---- linear algebra and layout ----------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(invalid(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            m,
            k,
            n,
            &mut out,
            false,
        );
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(invalid(format!("transpose of rank-{} tensor", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], out)?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Broadcasts extent-1 axes of `a` up to `shape` (same rank).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &t)| s != t && s != 1) {
            return Err(invalid(format!("cannot expand {src:?} to {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..numel {
            let flat = idx
                .iter()
                .zip(&src)
                .fold(0, |acc, (&i, &e)| acc * e + if e == 1 { 0 } else { i });
            map.push(flat);
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let x = self.value(a).data();
        let out = Tensor::new(shape.to_vec(), map.iter().map(|&i| x[i]).collect())?;
        self.push("expand", out, Op::Expand(a, map), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat axis out of range"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len() && s.iter().enumerate().all(|(d, &e)| d == axis || e == base[d]);
            if !compatible {
                return Err(invalid(format!("concat of {base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push("concat", out, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// `out[i] = a.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, indices: &[usize], shape: &[usize]) -> Result<Var> {
        let x = self.value(a).data();
        if let Some(bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(invalid(format!("gather index {bad} out of {}", x.len())));
        }
        let out = Tensor::new(shape.to_vec(), indices.iter().map(|&i| x[i]).collect())?;
        self.push("gather", out, Op::Gather(a, indices.to_vec()), &[a])
    }

    /// Rows `rows` of a rank-2 tensor.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || rows.is_empty() {
            return Err(invalid("select_rows needs a matrix and at least one row"));
        }
        let idx: Vec<usize> = rows.iter().flat_map(|&r| (r * s[1])..(r * s[1] + s[1])).collect();
        self.gather(a, &idx, &[rows.len(), s[1]])
    }

    /// Columns `cols` of a rank-2 tensor.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || cols.is_empty() {
            return Err(invalid("select_cols needs a matrix and at least one column"));
        }
        let width = s[1];
        let idx: Vec<usize> = (0..s[0])
            .flat_map(|r| cols.iter().map(move |&c| r * width + c))
            .collect();
        self.gather(a, &idx, &[s[0], cols.len()])
    }

    // ---- reductions -------------------------------------------------------

    fn check_axis(&self, a: Var, axis: usize) -> Result<()> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(invalid(format!("axis {axis} for rank-{} tensor", s.len())));
        }
        Ok(())
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut out: Vec<usize> = shape.to_vec();
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
        out
    }

    fn axis_sums(&self, a: Var, axis: usize) -> (Vec<usize>, Vec<f64>) {
        let x = self.value(a);
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &x.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        (Self::reduced_shape(x.shape(), axis), out)
    }

    /// Sum over every element (shape `[1]`).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a, None), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let m = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(a, None), &[a])
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let (shape, out) = self.axis_sums(a, axis);
        let out = Tensor::new(shape, out)?;
        self.push("sum_axis", out, Op::Sum(a, Some(axis)), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let n = self.shape(a)[axis] as f64;
        let (shape, mut out) = self.axis_sums(a, axis);
        out.iter_mut().for_each(|v| *v /= n);
        let out = Tensor::new(shape, out)?;
        self.push("mean_axis", out, Op::Mean(a, Some(axis)), &[a])
    }

    /// Max over `axis`; the gradient goes to the first maximal element.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let x = self.value(a);
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut vals = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for j in 1..n {
                    let idx = (o * n + j) * inner + i;
                    if x.data()[idx] > x.data()[best] {
                        best = idx;
                    }
                }
                vals.push(x.data()[best]);
                arg.push(best);
            }
        }
        let out = Tensor::new(Self::reduced_shape(x.shape(), axis), vals)?;
        self.note_discrete(&arg);
        self.push("max_axis", out, Op::Max(a, arg), &[a])
    }

    /// `[c, h, w] -> [c]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(invalid(format!("global_avg_pool expects [c,h,w], got {s:?}")));
        }
        let flat = self.reshape(a, &[s[0], s[1] * s[2]])?;
        self.mean_axis(flat, 1)
    }

    // ---- normalisation ----------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let x = self.value(a);
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| x.data()[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (x.data()[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.push("softmax", out, Op::Softmax(a, axis), &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let x = self.value(a);
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| x.data()[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..n).map(|j| (x.data()[at(j)] - m).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[at(j)] = x.data()[at(j)] - lse;
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.push("log_softmax", out, Op::LogSoftmax(a, axis), &[a])
    }

    /// Unit-L2 slices along `axis`; slices with norm below `eps` are divided by `eps`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis(a, axis)?;
        if eps <= 0.0 {
            return Err(invalid("l2_normalize eps must be positive"));
        }
        let x = self.value(a);
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut norms = vec![0.0; outer * inner];
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let norm = (0..n).map(|j| x.data()[at(j)].powi(2)).sum::<f64>().sqrt();
                norms[o * inner + i] = norm;
                let d = norm.max(eps);
                for j in 0..n {
                    out[at(j)] = x.data()[at(j)] / d;
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.hash_mask(None, &norms, |v| v >= eps);
        self.push(
            "l2_normalize",
            out,
            Op::L2Normalize {
                input: a,
                axis,
                eps,
                norms,
            },
            &[a],
        )
    }

    // ---- spatial ----------------------------------------------------------

    /// Bilinear resize of `[c, h, w]` with half-pixel centres.
    pub fn bilinear_resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(invalid(format!("bilinear_resize of {s:?} to {out_h}x{out_w}")));
        }
        if s[1] == out_h && s[2] == out_w {
            let out = self.value(a).clone();
            let ty = bilinear_taps(out_h, out_h);
            let tx = bilinear_taps(out_w, out_w);
            return self.push("bilinear_resize", out, Op::Bilinear { input: a, ty, tx }, &[a]);
        }
        let ty = bilinear_taps(s[1], out_h);
        let tx = bilinear_taps(s[2], out_w);
        let out = resize_forward(self.value(a).data(), s[0], s[1], s[2], &ty, &tx);
        let out = Tensor::new(vec![s[0], out_h, out_w], out)?;
        self.push("bilinear_resize", out, Op::Bilinear { input: a, ty, tx }, &[a])
    }

    /// Cross-correlation of `[c_in, h, w]` with `[c_out, c_in, k, k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] || sk[2] != sk[3] {
            return Err(invalid(format!("conv2d of {si:?} with kernel {sk:?}")));
        }
        let geom = ConvGeometry::new(si[0], si[1], si[2], sk[2], stride, pad).ok_or_else(|| {
            invalid(format!(
                "conv2d: {}x{} input, k={}, stride={stride}, pad={pad} has no valid output",
                si[1], si[2], sk[2]
            ))
        })?;
        let c_out = sk[0];
        let cols = if geom.k == 1 && geom.stride == 1 && geom.pad == 0 {
            self.value(input).data().to_vec()
        } else {
            geom.im2col(self.value(input).data())
        };
        let mut out = vec![0.0; c_out * geom.out_len()];
        matmul_into(
            self.value(kernel).data(),
            false,
            &cols,
            false,
            c_out,
            geom.patch_len(),
            geom.out_len(),
            &mut out,
            false,
        );
        let out = Tensor::new(vec![c_out, geom.out_h, geom.out_w], out)?;
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            &[input, kernel],
        )
    }

    /// Adds a per-channel bias `[c]` to `[c, h, w]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(bias) != [s[0]] {
            return Err(invalid("channel bias shape mismatch"));
        }
        let b = self.reshape(bias, &[s[0], 1, 1])?;
        let b = self.expand(b, &s)?;
        self.add(x, b)
    }

    // ---- backward ---------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(invalid(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| add_into(acc, g));
                self.accumulate(grads, *b, |acc| add_into(acc, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |acc| add_into(acc, g));
                self.accumulate(grads, *b, |acc| acc.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |acc| {
                    for ((d, s), q) in acc.iter_mut().zip(g).zip(vb) {
                        *d += s * q;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for ((d, s), p) in acc.iter_mut().zip(g).zip(va) {
                        *d += s * p;
                    }
                });
            }
            Op::Div(a, b) => {
                let vb = self.value(*b).data();
                self.accumulate(grads, *a, |acc| {
                    for ((d, s), q) in acc.iter_mut().zip(g).zip(vb) {
                        *d += s / q;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for (((d, s), q), out) in acc.iter_mut().zip(g).zip(vb).zip(y) {
                        *d -= s * out / q;
                    }
                });
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, |acc| add_into(acc, g)),
            Op::MulScalar(a, s) => {
                self.accumulate(grads, *a, |acc| acc.iter_mut().zip(g).for_each(|(d, v)| *d += v * s))
            }
            Op::PowScalar(a, p) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |acc| {
                    for ((d, s), v) in acc.iter_mut().zip(g).zip(x) {
                        *d += s * p * v.powf(p - 1.0);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                #[cfg(test)]
                let scale = if SABOTAGE_RELU.with(|c| c.get()) { 1.5 } else { 1.0 };
                #[cfg(not(test))]
                let scale = 1.0;
                self.accumulate(grads, *a, |acc| {
                    for ((d, s), v) in acc.iter_mut().zip(g).zip(x) {
                        if *v > 0.0 {
                            *d += s * scale;
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |acc| {
                    for ((d, s), v) in acc.iter_mut().zip(g).zip(x) {
                        if *v > 0.0 {
                            *d += s;
                        } else if *v < 0.0 {
                            *d -= s;
                        }
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |acc| {
                    for ((d, s), v) in acc.iter_mut().zip(g).zip(x) {
                        *d += s / v;
                    }
                });
            }
            Op::Exp(a) => self.accumulate(grads, *a, |acc| {
                for ((d, s), out) in acc.iter_mut().zip(g).zip(y) {
                    *d += s * out;
                }
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |acc| matmul_into(g, false, vb, true, m, n, k, acc, true));
                self.accumulate(grads, *b, |acc| matmul_into(va, true, g, false, k, m, n, acc, true));
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                self.accumulate(grads, *a, |acc| {
                    for i in 0..r {
                        for j in 0..c {
                            acc[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |acc| add_into(acc, g)),
            Op::Expand(a, map) => self.accumulate(grads, *a, |acc| {
                for (&src, s) in map.iter().zip(g) {
                    acc[src] += s;
                }
            }),
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut start = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis] * inner;
                    self.accumulate(grads, *p, |acc| {
                        for o in 0..outer {
                            let src = &g[o * total + start..o * total + start + len];
                            add_into(&mut acc[o * len..(o + 1) * len], src);
                        }
                    });
                    start += len;
                }
            }
            Op::Gather(a, idx) => self.accumulate(grads, *a, |acc| {
                for (&src, s) in idx.iter().zip(g) {
                    acc[src] += s;
                }
            }),
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let in_shape = self.shape(*a);
                let (outer, n, inner) = match axis {
                    Some(ax) => split_axis(in_shape, *ax),
                    None => (1, self.value(*a).numel(), 1),
                };
                let scale = if matches!(node.op, Op::Mean(..)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                self.accumulate(grads, *a, |acc| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                acc[(o * n + j) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::Max(a, arg) => self.accumulate(grads, *a, |acc| {
                for (&src, s) in arg.iter().zip(g) {
                    acc[src] += s;
                }
            }),
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                self.accumulate(grads, *a, |acc| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                acc[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                self.accumulate(grads, *a, |acc| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let total: f64 = (0..n).map(|j| g[at(j)]).sum();
                            for j in 0..n {
                                acc[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::L2Normalize {
                input,
                axis,
                eps,
                norms,
            } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                self.accumulate(grads, *input, |acc| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let norm = norms[o * inner + i];
                            if norm >= *eps {
                                let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                                for j in 0..n {
                                    acc[at(j)] += (g[at(j)] - y[at(j)] * dot) / norm;
                                }
                            } else {
                                for j in 0..n {
                                    acc[at(j)] += g[at(j)] / eps;
                                }
                            }
                        }
                    }
                });
            }
            Op::Bilinear { input, ty, tx } => {
                let s = self.shape(*input);
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (ty.lo.len(), tx.lo.len());
                self.accumulate(grads, *input, |acc| {
                    for ch in 0..c {
                        let plane = &mut acc[ch * h * w..(ch + 1) * h * w];
                        for oy in 0..oh {
                            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
                            for ox in 0..ow {
                                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                                let s = g[(ch * oh + oy) * ow + ox];
                                plane[y0 * w + x0] += s * (1.0 - fy) * (1.0 - fx);
                                plane[y0 * w + x1] += s * (1.0 - fy) * fx;
                                plane[y1 * w + x0] += s * fy * (1.0 - fx);
                                plane[y1 * w + x1] += s * fy * fx;
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let c_out = self.shape(*kernel)[0];
                let (p, n) = (geom.patch_len(), geom.out_len());
                self.accumulate(grads, *kernel, |acc| {
                    matmul_into(g, false, cols, true, c_out, n, p, acc, true)
                });
                let w = self.value(*kernel).data();
                self.accumulate(grads, *input, |acc| {
                    if geom.k == 1 && geom.stride == 1 && geom.pad == 0 {
                        matmul_into(w, true, g, false, p, c_out, n, acc, true);
                    } else {
                        let mut dcols = vec![0.0; p * n];
                        matmul_into(w, true, g, false, p, c_out, n, &mut dcols, false);
                        geom.col2im(&dcols, acc);
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(d, s)| *d += s);
}

fn resize_forward(x: &[f64], c: usize, h: usize, w: usize, ty: &AxisTaps, tx: &AxisTaps) -> Vec<f64> {
    let (oh, ow) = (ty.lo.len(), tx.lo.len());
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * oh + oy) * ow + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer of `v`; `None` when no path from the loss reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when unreached.
    pub fn tensor(&self, graph: &Graph, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => Tensor::new(graph.shape(v).to_vec(), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(graph.shape(v)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_and_gate() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn abs_gradient_is_sign() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[-3.0, 3.0]));
        let y = g.abs(x).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[-1.0, 1.0]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let b = g.param(t(&[2], &[3.0, 4.0]));
        let p = g.mul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 8.0]);
        let s = g.sum(p).unwrap();
        assert_eq!(g.backward(s).unwrap().get(a).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn quadratic_loss() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn domain_and_shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, -1.0]));
        let b = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
        assert!(matches!(g.add(a, b), Err(RtcError::InvalidInput(_))));
        assert!(matches!(g.log(a), Err(RtcError::InvalidInput(_))));
        let z = g.constant(t(&[2], &[0.0, 1.0]));
        assert!(g.div(a, z).is_err());
        let m = g.constant(t(&[2, 3], &[0.0; 6]));
        assert!(g.matmul(m, m).is_err());
        assert!(g.backward(a).is_err());
        assert!(g.sum_axis(m, 2).is_err());
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let p = g.matmul(a, i).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let c = g.constant(t(&[2, 1], &[0.0, 5.0]));
        let p = g.matmul(r, c).unwrap();
        assert_eq!(g.value(p).data(), &[0.0]);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[1.0, 2.0, 3.0, 6.0]));
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).item(), 3.0);
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[1.0; 4]);

        let c = g.constant(Tensor::full(&[2, 3, 3], 1.5));
        let p = g.global_avg_pool(c).unwrap();
        assert_eq!(g.value(p).data(), &[1.5, 1.5]);
    }

    #[test]
    fn max_ties_route_to_first() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1.0, 5.0, 5.0, 2.0, 2.0, 0.0]));
        let m = g.max_axis(x, 1).unwrap();
        assert_eq!(g.value(m).data(), &[5.0, 2.0]);
        let s = g.sum(m).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let x = g.constant(t(&[2], &[2f64.ln(), 0.0]));
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15 && (v[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.l2_normalize(x, 0, 1e-8).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        let u = g.constant(t(&[2], &[0.6, 0.8]));
        let y = g.l2_normalize(u, 0, 1e-8).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(u)) < 1e-15);
        let z = g.constant(Tensor::zeros(&[3]));
        let y = g.l2_normalize(z, 0, 1e-8).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 3]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.bilinear_resize(x, 2, 2).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let c = g.constant(Tensor::full(&[2, 3, 5], 0.7));
        for (h, w) in [(1, 1), (6, 10), (2, 3), (7, 4)] {
            let y = g.bilinear_resize(c, h, w).unwrap();
            assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn conv_identity_and_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let k0 = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let y = g.conv2d(x, k0, 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let k5 = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(g.conv2d(x, k5, 1, 0).is_err());
    }

    #[test]
    fn expand_sums_back() {
        let mut g = Graph::new();
        let b = g.param(t(&[2, 1], &[1.0, 2.0]));
        let e = g.expand(b, &[2, 3]).unwrap();
        assert_eq!(g.value(e).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let s = g.sum(e).unwrap();
        assert_eq!(g.backward(s).unwrap().get(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_and_gather_route_gradients() {
        let mut g = Graph::new();
        let a = g.param(t(&[1, 2], &[1.0, 2.0]));
        let b = g.param(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let picked = g.select_cols(c, &[1]).unwrap();
        assert_eq!(g.value(picked).data(), &[2.0, 4.0, 6.0]);
        let s = g.sum(picked).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[0.0, 1.0]);
        assert_eq!(grads.get(b).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn detach_blocks_and_replays() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[2.0]));
        let d = g.detach(x).unwrap();
        let p = g.mul(x, d).unwrap();
        let s = g.sum(p).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[2.0]);
        let saved = g.detached_values().to_vec();

        let mut h = Graph::new().replaying(saved);
        let x = h.param(t(&[1], &[5.0]));
        let d = h.detach(x).unwrap();
        assert_eq!(h.value(d).item(), 2.0);
        assert!(h.detach(x).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[1000.0]));
        assert!(matches!(g.exp(x), Err(RtcError::NonFinite { .. })));
    }

    #[test]
    fn kink_signature_tracks_relu_pattern() {
        let run = |v: f64| {
            let mut g = Graph::with_kink_tracking();
            let x = g.param(t(&[2], &[v, 1.0]));
            g.relu(x).unwrap();
            g.kink_signature().unwrap()
        };
        assert_eq!(run(0.5), run(0.7));
        assert_ne!(run(0.5), run(-0.5));
        assert!(Graph::new().kink_signature().is_none());
    }
}
