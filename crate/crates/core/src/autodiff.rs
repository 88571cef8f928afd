//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Operations append nodes to a [`Tape`]; [`Tape::backward`] replays the
//! recorded local rules in reverse order. A tape is single-use: build one per
//! forward pass and drop it at the step boundary.
//!
//! Broadcasting is limited to leading-axis repetition: in the binary
//! elementwise ops the right operand may have a shape equal to a suffix of the
//! left operand's shape, and is repeated across the remaining leading axes.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
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
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Gelu { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, cols: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Glu { x: Var, half: usize },
    Sum { x: Var },
    Mean { x: Var },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Concat { xs: Vec<Var>, widths: Vec<usize>, outer: usize, inner: usize },
    Slice { x: Var, outer: usize, len: usize, start: usize, width: usize, inner: usize },
    IndexSelect { x: Var, indices: Vec<usize>, row: usize },
    RepeatLeading { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, if `v` requires gradients and is reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, with zeros for detached or unreachable nodes.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn is_suffix(shape: &[usize], of: &[usize]) -> bool {
    shape.len() <= of.len() && of[of.len() - shape.len()..] == *shape
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact-erf GELU on a scalar.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

/// Row-major strides for `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `data` (laid out as `shape`) into the axis order `axes`.
fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let rank = out_shape.len();
    if rank == 0 {
        out.push(data[0]);
        return out;
    }
    // Odometer over the output index; the innermost axis is copied in a loop.
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = src_strides[last];
    loop {
        let base: usize = (0..last).map(|i| idx[i] * src_strides[i]).sum();
        for j in 0..inner_len {
            out.push(data[base + j * inner_stride]);
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
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
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf detached from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, 0.0);
        let needs = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, needs))
    }

    /// Batched product over matching leading axes: `[.., m, k] x [.., k, n]`,
    /// or `[.., m, k] x [.., n, k]^T` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() >= 2 && sa.len() == sb.len() && sa[..sa.len() - 2] == sb[..sb.len() - 2];
        if !ok {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            let bstr = if trans_b { (1, k) } else { (n, 1) };
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    (k, 1),
                    &bd[i * k * n..(i + 1) * k * n],
                    bstr,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let needs = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::BatchMatMul { a, b, batch, m, k, n, trans_b }, needs))
    }

    /// `x · wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let inp = *sx.last().unwrap_or(&1);
        if sw.len() != 2 || sw[1] != inp || sx.is_empty() {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let out_dim = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::shape("linear bias", self.shape(b), &[out_dim]));
            }
        }
        let rows = self.value(x).numel() / inp.max(1);
        let mut out = vec![0.0; rows * out_dim];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * out_dim..(r + 1) * out_dim].copy_from_slice(bd);
            }
        }
        gemm(
            rows,
            inp,
            out_dim,
            self.value(x).data(),
            (inp, 1),
            self.value(w).data(),
            (1, inp),
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = out_dim;
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.ng(&deps);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b, rows, inp, out: out_dim }, needs))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) {
            return Err(Error::shape(name, sa, sb));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let blen = bd.len().max(1);
        let data = if bd.len() == ad.len() {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % blen])).collect()
        };
        Tensor::new(sa.to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let needs = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let needs = self.ng(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let needs = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, needs))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.ng(&[x]);
        self.push(t, op, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale { x, c }, |v| c * v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid { x }, sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh { x }, f64::tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu { x }, gelu_scalar)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    z += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= z;
                }
            }
        }
        let needs = self.ng(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, outer, len, inner }, needs))
    }

    /// Normalizes the last axis, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::invalid("layernorm of a scalar"))?;
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::shape("layernorm", &shape, self.shape(gain)));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / cols.max(1);
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let needs = self.ng(&[x, gain, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, cols, xhat, inv_std }, needs))
    }

    /// Gated linear unit on the last axis: first half is content, second half gate.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().unwrap_or(&0);
        if w == 0 || !w.is_multiple_of(2) {
            return Err(Error::invalid(format!("glu needs an even last axis, got {shape:?}")));
        }
        let half = w / 2;
        let src = self.value(x).data();
        let rows = src.len() / w;
        let mut out = Vec::with_capacity(rows * half);
        for r in 0..rows {
            let row = &src[r * w..(r + 1) * w];
            for j in 0..half {
                out.push(row[j] * sigmoid(row[half + j]));
            }
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = half;
        let needs = self.ng(&[x]);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Glu { x, half }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let needs = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let needs = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::invalid(format!("bad permutation {axes:?} for {shape:?}")));
        }
        let data = permute_data(self.value(x).data(), &shape, axes);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        let needs = self.ng(&[x]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute { x, axes: axes.to_vec() }, needs))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = xs.iter().map(|&x| self.shape(x)[axis]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &w) in xs.iter().zip(&widths) {
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = self.ng(xs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { xs: xs.to_vec(), widths, outer, inner }, needs))
    }

    /// `x[.., start..start + len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(format!("slice {start}..{} on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let width = shape[axis];
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * width + start) * inner;
            out.extend_from_slice(&d[off..off + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let needs = self.ng(&[x]);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Slice { x, outer, len, start, width, inner }, needs))
    }

    /// Gathers entries of the leading axis.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.first().ok_or_else(|| Error::invalid("index_select of a scalar"))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("index {bad} out of range for leading extent {n}")));
        }
        let row: usize = shape[1..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut oshape = shape;
        oshape[0] = indices.len();
        let needs = self.ng(&[x]);
        Ok(self.push(Tensor::new(oshape, out)?, Op::IndexSelect { x, indices: indices.to_vec(), row }, needs))
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn repeat_leading(&mut self, x: Var, times: usize) -> Var {
        let src = self.value(x);
        let mut shape = vec![times];
        shape.extend_from_slice(src.shape());
        let data = src.data().repeat(times);
        let needs = self.ng(&[x]);
        self.push(Tensor::new(shape, data).expect("consistent"), Op::RepeatLeading { x }, needs)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::invalid(format!(
                "cross_entropy expects [n, C] logits with n = {} labels, got {shape:?}",
                labels.len()
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &d[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[labels[r]];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let needs = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            needs,
        ))
    }

    /// Populates gradients of the scalar `loss` with respect to every
    /// gradient-requiring node. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::invalid("backward already ran on this tape; record a new forward pass"));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("loss is not on this tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.needs_grad).map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        // Accumulates into the gradient buffer of `v`, skipping detached nodes.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                acc(a, &mut |ga| gemm(m, n, k, g, (n, 1), val(b), (1, n), ga, 1.0));
                acc(b, &mut |gb| gemm(k, m, n, val(a), (1, k), g, (n, 1), gb, 1.0));
            }
            &Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for i in 0..batch {
                        let bs = &bd[i * k * n..(i + 1) * k * n];
                        let strides = if trans_b { (k, 1) } else { (1, n) };
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            bs,
                            strides,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..batch {
                        let a_i = &ad[i * m * k..(i + 1) * m * k];
                        let g_i = &g[i * m * n..(i + 1) * m * n];
                        let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, g_i, (1, n), a_i, (k, 1), gb_i, 1.0);
                        } else {
                            gemm(k, m, n, a_i, (1, k), g_i, (n, 1), gb_i, 1.0);
                        }
                    }
                });
            }
            &Op::Linear { x, w, b, rows, inp, out } => {
                acc(x, &mut |gx| gemm(rows, out, inp, g, (out, 1), val(w), (inp, 1), gx, 1.0));
                acc(w, &mut |gw| gemm(out, rows, inp, g, (1, out), val(x), (inp, 1), gw, 1.0));
                if let Some(b) = b {
                    acc(b, &mut |gb| {
                        for r in 0..rows {
                            for (dst, src) in gb.iter_mut().zip(&g[r * out..(r + 1) * out]) {
                                *dst += src;
                            }
                        }
                    });
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                acc(b, &mut |gb| {
                    let bl = gb.len();
                    for (i, s) in g.iter().enumerate() {
                        gb[i % bl] += sign * s;
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (val(a), val(b));
                let bl = bd.len();
                acc(a, &mut |ga| {
                    for (i, s) in g.iter().enumerate() {
                        ga[i] += s * bd[i % bl];
                    }
                });
                acc(b, &mut |gb| {
                    for (i, s) in g.iter().enumerate() {
                        gb[i % bl] += s * ad[i];
                    }
                });
            }
            &Op::Scale { x, c } => acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s)),
            &Op::Sigmoid { x } => {
                let y = node.value.data();
                acc(x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            &Op::Tanh { x } => {
                let y = node.value.data();
                acc(x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            &Op::Gelu { x } => {
                let xd = val(x);
                acc(x, &mut |gx| {
                    for i in 0..gx.len() {
                        let v = xd[i];
                        gx[i] += g[i] * (normal_cdf(v) + v * normal_pdf(v));
                    }
                });
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, cols, xhat, inv_std } => {
                let cols = *cols;
                let gd = val(*gain);
                acc(*x, &mut |gx| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let rg = &g[r * cols..(r + 1) * cols];
                        let rh = &xhat[r * cols..(r + 1) * cols];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let gh = rg[c] * gd[c];
                            m1 += gh;
                            m2 += gh * rh[c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] += inv * (rg[c] * gd[c] - m1 - rh[c] * m2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (i, s) in g.iter().enumerate() {
                        gg[i % cols] += s * xhat[i];
                    }
                });
                acc(*bias, &mut |gb| {
                    for (i, s) in g.iter().enumerate() {
                        gb[i % cols] += s;
                    }
                });
            }
            &Op::Glu { x, half } => {
                let xd = val(x);
                acc(x, &mut |gx| {
                    let w = 2 * half;
                    for r in 0..g.len() / half.max(1) {
                        for j in 0..half {
                            let a = xd[r * w + j];
                            let s = sigmoid(xd[r * w + half + j]);
                            let go = g[r * half + j];
                            gx[r * w + j] += go * s;
                            gx[r * w + half + j] += go * a * s * (1.0 - s);
                        }
                    }
                });
            }
            &Op::Sum { x } => acc(x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean { x } => acc(x, &mut |gx| {
                let s = g[0] / gx.len().max(1) as f64;
                gx.iter_mut().for_each(|d| *d += s)
            }),
            &Op::Reshape { x } => acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += s)),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                acc(*x, &mut |gx| gx.iter_mut().zip(&back).for_each(|(d, s)| *d += s));
            }
            Op::Concat { xs, widths, outer, inner } => {
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&x, &w) in xs.iter().zip(widths) {
                    acc(x, &mut |gx| {
                        for o in 0..*outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + w) * inner];
                            let dst = &mut gx[o * w * inner..(o + 1) * w * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    });
                    off += w;
                }
            }
            &Op::Slice { x, outer, len, start, width, inner } => acc(x, &mut |gx| {
                for o in 0..outer {
                    let dst = &mut gx[(o * width + start) * inner..(o * width + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }),
            Op::IndexSelect { x, indices, row } => {
                let row = *row;
                acc(*x, &mut |gx| {
                    for (k, &i) in indices.iter().enumerate() {
                        let dst = &mut gx[i * row..(i + 1) * row];
                        dst.iter_mut().zip(&g[k * row..(k + 1) * row]).for_each(|(d, s)| *d += s);
                    }
                });
            }
            &Op::RepeatLeading { x } => acc(x, &mut |gx| {
                let l = gx.len();
                for (i, s) in g.iter().enumerate() {
                    gx[i % l] += s;
                }
            }),
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                acc(*logits, &mut |gl| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// Central-difference check of the gradient of a scalar function.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / (|numeric| + 1e-8)`. `f` must be deterministic;
/// a non-deterministic `f` gives a meaningless result.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    let analytic = tape.backward(loss)?.wrt(xv);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
