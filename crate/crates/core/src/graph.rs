//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in creation order, so the node list is already a
//! topological order and `backward` walks it once in reverse. A `Graph` is
//! owned by one thread; independent threads build independent graphs.

use crate::tensor::{Result, Tensor, TensorError};

/// Smallest value `log` will see; inputs below are clamped and get zero gradient.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Bmm(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Grl(Var, f64),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
    IndexSelect(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph holding forward values and, after `backward`, leaf gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    grl_bypass: bool,
}

/// Row-major `c = a · b` (+ `c` when `accumulate`), with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // op(a) is m×k, op(b) is k×n.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m·k, k·n and m·n
    // elements whose presence is asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, axis_len, inner)` for reducing `axis` of `shape`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

/// `[B, n, d]` (or `[n, d]`) viewed as `(B, n, d)`.
fn as_3d(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [n, d] => Some((1, n, d)),
        [b, n, d] => Some((b, n, d)),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes every GRL an identity in the backward pass too. Used only by
    /// finite-difference checks, which cannot observe a backward-only op.
    pub fn set_grl_bypass(&mut self, bypass: bool) {
        self.grl_bypass = bypass;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf. Gradients are retained for leaves with `requires_grad`.
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
        self.rg(v)
    }

    /// Gradient accumulated into a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    // ---- elementwise binary ----

    fn check_bcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let ok = sa == sb
            || self.value(b).numel() == 1
            || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb);
        if ok {
            Ok(())
        } else {
            Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check_bcast(op_name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    /// `a + b`; `b` may be a scalar or match the trailing axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// Natural log, with inputs clamped below at [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(LOG_FLOOR).ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.clamp(x, lo, f64::INFINITY)
    }

    /// Gradient reversal: identity forward, `-lambda` times the upstream gradient backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(TensorError::Config(format!(
                "gradient reversal weight must be non-negative, got {lambda}"
            )));
        }
        let value = self.value(x).clone();
        let rg = self.rg(x);
        Ok(self.push(value, Op::Grl(x, lambda), rg))
    }

    // ---- matrix ops ----

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), rg))
    }

    /// Batched matmul `[B×m×k] · [B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::Shape {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[i * k * n..],
                false,
                &mut out[i * m * n..],
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, Op::Bmm(a, b), rg))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, r, c) = as_3d(&s).ok_or_else(|| TensorError::Shape {
            op: "transpose",
            lhs: s.clone(),
            rhs: vec![],
        })?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            let o = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[o + j * r + i] = src[o + i * c + j];
                }
            }
        }
        let shape = if s.len() == 2 { vec![c, r] } else { vec![b, c, r] };
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    // ---- normalizers ----

    fn check_finite(&self, op: &'static str, x: Var) -> Result<()> {
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::Numeric {
                op,
                msg: "NaN input".into(),
            });
        }
        Ok(())
    }

    /// Softmax over the last axis, stabilised by per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite("softmax_rows", x)?;
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite("log_softmax_rows", x)?;
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    /// Layer normalisation over the last axis with variance epsilon `eps`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Shape {
                op: "reduce_axis",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let op = if mean {
            for v in out.iter_mut() {
                *v /= len as f64;
            }
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(removed_axis(&shape, axis), out)?, op, rg))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    // ---- structural ----

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same_rest = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(xs.to_vec(), axis), rg))
    }

    pub fn concat_last_axis(&mut self, xs: &[Var]) -> Result<Var> {
        let axis = self.shape(xs[0]).len() - 1;
        self.concat(xs, axis)
    }

    /// `[B, n, d]` (or `[n, d]`) into `[B·h, n, d/h]`, head-major within each batch item.
    pub fn split_heads(&mut self, x: Var, h: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, n, d) = as_3d(&s).ok_or_else(|| TensorError::Shape {
            op: "split_heads",
            lhs: s.clone(),
            rhs: vec![h],
        })?;
        if h == 0 || d % h != 0 {
            return Err(TensorError::Config(format!(
                "model width {d} is not divisible by {h} heads"
            )));
        }
        let dh = d / h;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..n {
                    let dst = ((bi * h + hi) * n + i) * dh;
                    let from = (bi * n + i) * d + hi * dh;
                    out[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![b * h, n, dh], out)?,
            Op::SplitHeads(x, h),
            rg,
        ))
    }

    /// Inverse of [`Graph::split_heads`]: `[B·h, n, d_h]` into `[B, n, h·d_h]`.
    pub fn merge_heads(&mut self, x: Var, h: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || h == 0 || s[0] % h != 0 {
            return Err(TensorError::Shape {
                op: "merge_heads",
                lhs: s,
                rhs: vec![h],
            });
        }
        let (b, n, dh) = (s[0] / h, s[1], s[2]);
        let d = dh * h;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..n {
                    let from = ((bi * h + hi) * n + i) * dh;
                    let dst = (bi * n + i) * d + hi * dh;
                    out[dst..dst + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![b, n, d], out)?, Op::MergeHeads(x, h), rg))
    }

    /// Selects slices along the first axis; indices may repeat.
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(TensorError::Shape {
                op: "index_select",
                lhs: s,
                rhs: idx.to_vec(),
            });
        }
        let inner: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::IndexSelect(x, idx.to_vec()),
            rg,
        ))
    }

    // ---- backward ----

    /// Reverse pass from a scalar `root`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let n = nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {
                let shape = nodes[i].value.shape().to_vec();
                match &mut self.leaf_grads[i] {
                    Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(Tensor::new(shape, g).expect("leaf grad shape")),
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(grads, *a, &|s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                acc(grads, *b, &|s| {
                    let nb = s.len();
                    for (k, y) in g.iter().enumerate() {
                        s[k % nb] += sign * y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.len();
                acc(grads, *a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * bv[k % nb];
                    }
                });
                acc(grads, *b, &|s| {
                    for k in 0..g.len() {
                        s[k % nb] += g[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.len();
                acc(grads, *a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / bv[k % nb];
                    }
                });
                acc(grads, *b, &|s| {
                    for k in 0..g.len() {
                        let d = bv[k % nb];
                        s[k % nb] -= g[k] * av[k] / (d * d);
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(grads, *x, &|s| s.iter_mut().zip(&g).for_each(|(a, y)| *a += c * y));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc(grads, *x, &|s| s.iter_mut().zip(&g).for_each(|(a, y)| *a += y));
            }
            Op::Grl(x, lambda) => {
                let c = if self.grl_bypass { 1.0 } else { -lambda };
                acc(grads, *x, &|s| s.iter_mut().zip(&g).for_each(|(a, y)| *a += c * y));
            }
            Op::Log(x) => {
                let xv = val(*x);
                acc(grads, *x, &|s| {
                    for k in 0..s.len() {
                        if xv[k] >= LOG_FLOOR {
                            s[k] += g[k] / xv[k];
                        }
                    }
                });
            }
            Op::Exp(x) => {
                acc(grads, *x, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * out[k];
                    }
                });
            }
            Op::Sqrt(x) => {
                acc(grads, *x, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / (2.0 * out[k]);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(grads, *x, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * gelu_parts(xv[k]).1;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(grads, *x, &|s| {
                    for k in 0..s.len() {
                        if xv[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                acc(grads, *x, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * out[k] * (1.0 - out[k]);
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                acc(grads, *x, &|s| {
                    for k in 0..s.len() {
                        if xv[k] >= *lo && xv[k] <= *hi {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(grads, *a, &|s| gemm(m, n, k, &g, false, bv, true, s, true));
                acc(grads, *b, &|s| gemm(k, m, n, av, true, &g, false, s, true));
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (val(*a), val(*b));
                acc(grads, *a, &|s| {
                    for t in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..],
                            false,
                            &bv[t * k * n..],
                            true,
                            &mut s[t * m * k..],
                            true,
                        );
                    }
                });
                acc(grads, *b, &|s| {
                    for t in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &av[t * m * k..],
                            true,
                            &g[t * m * n..],
                            false,
                            &mut s[t * k * n..],
                            true,
                        );
                    }
                });
            }
            Op::Transpose(x) => {
                let (b, r, c) = as_3d(nodes[x.0].value.shape()).expect("rank checked");
                acc(grads, *x, &|s| {
                    for bi in 0..b {
                        let o = bi * r * c;
                        for p in 0..r {
                            for q in 0..c {
                                s[o + p * c + q] += g[o + q * r + p];
                            }
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let d = nodes[i].value.last_dim();
                acc(grads, *x, &|s| {
                    for (r, (gr, yr)) in g.chunks(d).zip(out.chunks(d)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            s[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let d = nodes[i].value.last_dim();
                acc(grads, *x, &|s| {
                    for (r, (gr, yr)) in g.chunks(d).zip(out.chunks(d)).enumerate() {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..d {
                            s[r * d + j] += gr[j] - yr[j].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = nodes[gain.0].value.numel();
                let gv = val(*gain);
                acc(grads, *gain, &|s| {
                    for (k, y) in g.iter().enumerate() {
                        s[k % d] += y * xhat[k];
                    }
                });
                acc(grads, *bias, &|s| {
                    for (k, y) in g.iter().enumerate() {
                        s[k % d] += y;
                    }
                });
                acc(grads, *x, &|s| {
                    let dn = d as f64;
                    for (r, inv) in inv_std.iter().enumerate() {
                        let o = r * d;
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[o + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[o + j];
                        }
                        for j in 0..d {
                            let dh = g[o + j] * gv[j];
                            s[o + j] += inv / dn * (dn * dh - sum_dh - xhat[o + j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(grads, *x, &|s| s.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Mean(x) => {
                acc(grads, *x, &|s| {
                    let c = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|a| *a += c);
                });
            }
            Op::MeanAxis(x, axis) | Op::SumAxis(x, axis) => {
                let (outer, len, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                let c = if matches!(nodes[i].op, Op::MeanAxis(..)) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                acc(grads, *x, &|s| {
                    for o in 0..outer {
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            for q in 0..inner {
                                s[base + q] += c * g[o * inner + q];
                            }
                        }
                    }
                });
            }
            Op::Concat(xs, axis) => {
                let shape = nodes[i].value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = nodes[x.0].value.shape()[*axis];
                    acc(grads, x, &|s| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for q in 0..len * inner {
                                s[dst + q] += g[src + q];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::SplitHeads(x, h) => {
                let (b, n, d) = as_3d(nodes[x.0].value.shape()).expect("rank checked");
                let dh = d / h;
                acc(grads, *x, &|s| {
                    for bi in 0..b {
                        for hi in 0..*h {
                            for t in 0..n {
                                let from = ((bi * h + hi) * n + t) * dh;
                                let dst = (bi * n + t) * d + hi * dh;
                                for q in 0..dh {
                                    s[dst + q] += g[from + q];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads(x, h) => {
                let sx = nodes[x.0].value.shape();
                let (b, n, dh) = (sx[0] / h, sx[1], sx[2]);
                let d = dh * h;
                acc(grads, *x, &|s| {
                    for bi in 0..b {
                        for hi in 0..*h {
                            for t in 0..n {
                                let dst = ((bi * h + hi) * n + t) * dh;
                                let from = (bi * n + t) * d + hi * dh;
                                for q in 0..dh {
                                    s[dst + q] += g[from + q];
                                }
                            }
                        }
                    }
                });
            }
            Op::IndexSelect(x, idx) => {
                let inner: usize = nodes[x.0].value.shape()[1..].iter().product();
                acc(grads, *x, &|s| {
                    for (r, &src) in idx.iter().enumerate() {
                        for q in 0..inner {
                            s[src * inner + q] += g[r * inner + q];
                        }
                    }
                });
            }
        }
    }
}
