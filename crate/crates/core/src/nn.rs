//! Parameterized layers: linear, layernorm, MLP (GELU or GLU) and masked
//! multi-head attention.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] and are
//! bound to a tape through a [`Session`].

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamGroup, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;
/// Additive score for disallowed attention positions.
pub const MASK_FILL: f64 = -1e30;

/// Where new parameters go: store, init stream, name prefix and group.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub init: Initializer,
    pub group: ParamGroup,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, init: Initializer, group: ParamGroup, prefix: &str) -> Self {
        Builder { store, init, group, prefix: prefix.to_string() }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    /// A builder for a nested scope sharing this store.
    pub fn scope(&mut self, sub: &str) -> Builder<'_> {
        let prefix = self.name(sub);
        Builder { store: self.store, init: self.init, group: self.group, prefix }
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        let name = self.name(leaf);
        self.store.add_init(&self.init, name, self.group, shape)
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        let name = self.name(leaf);
        self.store.add_zeros(name, self.group, shape)
    }

    pub fn ones(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        let name = self.name(leaf);
        self.store.add_ones(name, self.group, shape)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let mut s = b.scope(name);
        let weight = s.uniform("weight", &[out_dim, in_dim]);
        let bias = bias.then(|| s.zeros("bias", &[out_dim]));
        Linear { weight, bias, in_dim, out_dim }
    }

    /// `x · weightᵀ + bias` over the last axis.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.p(self.weight);
        let b = self.bias.map(|id| s.p(id));
        s.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        LayerNorm { gain: s.ones("gain", &[dim]), bias: s.zeros("bias", &[dim]) }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.p(self.gain);
        let b = s.p(self.bias);
        s.tape.layernorm(x, g, b, LAYERNORM_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Glu,
}

/// `linear → activation → linear`, optionally residual.
///
/// With GLU the first projection is `2·hidden` wide and gated down to `hidden`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
    pub residual: bool,
}

impl Mlp {
    pub fn new(
        b: &mut Builder,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        activation: Activation,
        residual: bool,
    ) -> Result<Self> {
        if residual && in_dim != out_dim {
            return Err(Error::invalid(format!("residual MLP needs in == out, got {in_dim} -> {out_dim}")));
        }
        let mut s = b.scope(name);
        let width = match activation {
            Activation::Gelu => hidden,
            Activation::Glu => 2 * hidden,
        };
        let fc1 = Linear::new(&mut s, "fc1", in_dim, width, true);
        let fc2 = Linear::new(&mut s, "fc2", hidden, out_dim, true);
        Ok(Mlp { fc1, fc2, activation, residual })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = match self.activation {
            Activation::Gelu => s.tape.gelu(h),
            Activation::Glu => s.tape.glu(h)?,
        };
        let y = self.fc2.forward(s, h)?;
        if self.residual {
            s.tape.add(x, y)
        } else {
            Ok(y)
        }
    }
}

/// Boolean attention mask, `true` = attend allowed. Row = query, column = key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::invalid(format!(
                "mask {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                allowed.len()
            )));
        }
        Ok(Mask { rows, cols, allowed })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Mask { rows, cols, allowed }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    /// Additive score bias: 0 where allowed, [`MASK_FILL`] elsewhere.
    fn bias(&self) -> Result<Tensor> {
        for r in 0..self.rows {
            if !(0..self.cols).any(|c| self.get(r, c)) {
                return Err(Error::invalid(format!("attention mask row {r} has every key masked")));
            }
        }
        let data = self.allowed.iter().map(|&a| if a { 0.0 } else { MASK_FILL }).collect();
        Tensor::new(vec![self.rows, self.cols], data)
    }
}

/// Multi-head attention. The key projection has no bias: a key bias shifts
/// every score of a query equally and so never changes the output.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

pub struct AttentionOutput {
    /// `[batch, queries, d]`.
    pub out: Var,
    /// Post-softmax weights `[batch, heads, queries, keys]`, when requested.
    pub weights: Option<Var>,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!("model dim {dim} not divisible into {heads} heads")));
        }
        let mut s = b.scope(name);
        Ok(MultiHeadAttention {
            q: Linear::new(&mut s, "q", dim, dim, true),
            k: Linear::new(&mut s, "k", dim, dim, false),
            v: Linear::new(&mut s, "v", dim, dim, true),
            o: Linear::new(&mut s, "o", dim, dim, true),
            heads,
            head_dim: dim / heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// `[b, l, d] -> [b·h, l, hd]`.
    fn split(&self, s: &mut Session, x: Var) -> Result<Var> {
        let sh = s.tape.shape(x).to_vec();
        let (b, l) = (sh[0], sh[1]);
        let x = s.tape.reshape(x, &[b, l, self.heads, self.head_dim])?;
        let x = s.tape.permute(x, &[0, 2, 1, 3])?;
        s.tape.reshape(x, &[b * self.heads, l, self.head_dim])
    }

    /// Attends `q_in: [b, lq, d]` over `kv_in: [b, lk, d]`. The mask, if any,
    /// is `lq × lk` and shared across the batch.
    pub fn forward(
        &self,
        s: &mut Session,
        q_in: Var,
        kv_in: Var,
        mask: Option<&Mask>,
        want_weights: bool,
    ) -> Result<AttentionOutput> {
        let qs = s.tape.shape(q_in).to_vec();
        let ks = s.tape.shape(kv_in).to_vec();
        let d = self.dim();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != d || ks[2] != d {
            return Err(Error::shape("attention", &qs, &ks));
        }
        if ks[1] == 0 {
            return Err(Error::invalid("attention over an empty key set"));
        }
        let (b, lq, lk) = (qs[0], qs[1], ks[1]);
        let bias = match mask {
            Some(m) if m.rows() != lq || m.cols() != lk => {
                return Err(Error::shape("attention mask", &[m.rows(), m.cols()], &[lq, lk]))
            }
            Some(m) => Some(m.bias()?),
            None => None,
        };

        let q = self.q.forward(s, q_in)?;
        let k = self.k.forward(s, kv_in)?;
        let v = self.v.forward(s, kv_in)?;
        let q = self.split(s, q)?;
        let k = self.split(s, k)?;
        let v = self.split(s, v)?;

        let scores = s.tape.batch_matmul(q, k, true)?;
        let mut scores = s.tape.scale(scores, 1.0 / (self.head_dim as f64).sqrt());
        if let Some(bias) = bias {
            let bias = s.constant(bias);
            scores = s.tape.add(scores, bias)?;
        }
        let w = s.tape.softmax(scores, 2)?;
        let ctx = s.tape.batch_matmul(w, v, false)?;
        let ctx = s.tape.reshape(ctx, &[b, self.heads, lq, self.head_dim])?;
        let ctx = s.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = s.tape.reshape(ctx, &[b, lq, d])?;
        let out = self.o.forward(s, ctx)?;
        let weights = if want_weights { Some(s.tape.reshape(w, &[b, self.heads, lq, lk])?) } else { None };
        Ok(AttentionOutput { out, weights })
    }
}
