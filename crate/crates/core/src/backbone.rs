//! In-context tabular transformer.
//!
//! A grid holds one token per `(sample, feature)` cell plus a label token per
//! sample in the last column. Each block runs feature attention within every
//! sample, then sample attention within every column under the in-context
//! mask. Both stages are pre-layernorm with residual MLPs.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Activation, Builder, LayerNorm, Mask, Mlp, MultiHeadAttention};
use crate::params::{Initializer, ParamGroup, ParamId, ParamStore, Session};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    /// MLP hidden width inside each block.
    pub hidden: usize,
    pub max_classes: usize,
    pub decoder_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { d: 32, heads: 4, blocks: 3, hidden: 64, max_classes: 10, decoder_hidden: 64 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.blocks == 0 || self.hidden == 0 || self.decoder_hidden == 0 {
            return Err(Error::Invalid("blocks, hidden and decoder_hidden must be positive".into()));
        }
        if self.max_classes < 2 {
            return Err(Error::Invalid("max_classes must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln_feat: LayerNorm,
    pub feat_attn: MultiHeadAttention,
    pub ln_feat_mlp: LayerNorm,
    pub feat_mlp: Mlp,
    pub ln_samp: LayerNorm,
    pub samp_attn: MultiHeadAttention,
    pub ln_samp_mlp: LayerNorm,
    pub samp_mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub label_embed: ParamId,
    pub placeholder: ParamId,
    pub blocks: Vec<Block>,
    pub dec_ln: LayerNorm,
    pub decoder: Mlp,
}

/// Token grid `[n_train + n_test, features + 1, d]`; label token last.
#[derive(Clone, Copy, Debug)]
pub struct CellGrid {
    pub tokens: Var,
    pub n_train: usize,
    pub n_test: usize,
}

/// Which block and stage-1 attention maps to keep during a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Capture {
    pub feature_weights: bool,
    pub sample_weights: bool,
    pub grids: bool,
}

#[derive(Debug)]
pub struct BackboneOutput {
    /// `[n_test, n_classes]`.
    pub logits: Var,
    /// Per block `[n, heads, F+1, F+1]`, when captured.
    pub feature_weights: Vec<Var>,
    /// Per block `[F+1, heads, n, n]`, when captured.
    pub sample_weights: Vec<Var>,
    /// Grid after each block, when captured.
    pub grids: Vec<Var>,
}

/// Train rows and test rows both attend exactly to the train rows.
pub fn build_incontext_mask(n_train: usize, n_test: usize) -> Result<Mask> {
    if n_train == 0 {
        return Err(Error::Invalid("in-context mask needs at least one train row".into()));
    }
    let n = n_train + n_test;
    Ok(Mask::from_fn(n, n, |_, c| c < n_train))
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: Initializer, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let mut b = Builder::new(store, init, ParamGroup::Backbone, "backbone");
        let label_embed = b.uniform("label_embed", &[cfg.max_classes, d]);
        let placeholder = b.uniform("placeholder", &[d]);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let mut s = b.scope(&format!("block{i}"));
            blocks.push(Block {
                ln_feat: LayerNorm::new(&mut s, "ln_feat", d),
                feat_attn: MultiHeadAttention::new(&mut s, "feat_attn", d, cfg.heads)?,
                ln_feat_mlp: LayerNorm::new(&mut s, "ln_feat_mlp", d),
                feat_mlp: Mlp::new(&mut s, "feat_mlp", d, cfg.hidden, d, Activation::Gelu, false)?,
                ln_samp: LayerNorm::new(&mut s, "ln_samp", d),
                samp_attn: MultiHeadAttention::new(&mut s, "samp_attn", d, cfg.heads)?,
                ln_samp_mlp: LayerNorm::new(&mut s, "ln_samp_mlp", d),
                samp_mlp: Mlp::new(&mut s, "samp_mlp", d, cfg.hidden, d, Activation::Gelu, false)?,
            });
        }
        let mut dec = Builder::new(store, init, ParamGroup::Decoder, "decoder");
        let dec_ln = LayerNorm::new(&mut dec, "ln", d);
        let decoder = Mlp::new(&mut dec, "mlp", d, cfg.decoder_hidden, cfg.max_classes, Activation::Gelu, false)?;
        Ok(Backbone { cfg: cfg.clone(), label_embed, placeholder, blocks, dec_ln, decoder })
    }

    /// Appends the label column: class embeddings for train rows, the shared
    /// placeholder for test rows.
    pub fn embed_cells(
        &self,
        s: &mut Session,
        table: Var,
        train_labels: &[usize],
        n_classes: usize,
    ) -> Result<CellGrid> {
        let shape = s.tape.shape(table).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.d {
            return Err(Error::shape("embed_cells", &shape, &[0, 0, self.cfg.d]));
        }
        if n_classes < 1 || n_classes > self.cfg.max_classes {
            return Err(Error::Invalid(format!(
                "{n_classes} classes outside the supported range 1..={}",
                self.cfg.max_classes
            )));
        }
        if let Some(&bad) = train_labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Invalid(format!("label {bad} out of range for {n_classes} classes")));
        }
        let (n, f) = (shape[0], shape[1]);
        let n_train = train_labels.len();
        if n_train > n {
            return Err(Error::Invalid(format!("{n_train} train labels for {n} rows")));
        }
        let n_test = n - n_train;
        let d = self.cfg.d;
        let table_emb = s.p(self.label_embed);
        let mut parts = Vec::new();
        if n_train > 0 {
            parts.push(s.tape.index_select(table_emb, train_labels)?);
        }
        if n_test > 0 {
            let ph = s.p(self.placeholder);
            parts.push(s.tape.repeat_leading(ph, n_test));
        }
        let labels = s.tape.concat(&parts, 0)?;
        let labels = s.tape.reshape(labels, &[n, 1, d])?;
        let tokens = if f == 0 { labels } else { s.tape.concat(&[table, labels], 1)? };
        Ok(CellGrid { tokens, n_train, n_test })
    }

    fn block(
        &self,
        s: &mut Session,
        blk: &Block,
        x: Var,
        mask: &Mask,
        capture: Capture,
    ) -> Result<(Var, Option<Var>, Option<Var>)> {
        let h = blk.ln_feat.forward(s, x)?;
        let a = blk.feat_attn.forward(s, h, h, None, capture.feature_weights)?;
        let x = s.tape.add(x, a.out)?;
        let h = blk.ln_feat_mlp.forward(s, x)?;
        let h = blk.feat_mlp.forward(s, h)?;
        let x = s.tape.add(x, h)?;

        let xt = s.tape.permute(x, &[1, 0, 2])?;
        let h = blk.ln_samp.forward(s, xt)?;
        let b = blk.samp_attn.forward(s, h, h, Some(mask), capture.sample_weights)?;
        let xt = s.tape.add(xt, b.out)?;
        let h = blk.ln_samp_mlp.forward(s, xt)?;
        let h = blk.samp_mlp.forward(s, h)?;
        let xt = s.tape.add(xt, h)?;
        let x = s.tape.permute(xt, &[1, 0, 2])?;
        Ok((x, a.weights, b.weights))
    }

    /// Runs a single block; exposed for block-level tests.
    pub fn pfn_block(&self, s: &mut Session, index: usize, grid: CellGrid, mask: &Mask) -> Result<CellGrid> {
        let (tokens, _, _) = self.block(s, &self.blocks[index], grid.tokens, mask, Capture::default())?;
        Ok(CellGrid { tokens, ..grid })
    }

    /// Logits for the test rows, read from their label tokens.
    pub fn decode(&self, s: &mut Session, grid: CellGrid, n_classes: usize) -> Result<Var> {
        if grid.n_test == 0 {
            return Err(Error::Invalid("decode needs at least one test row".into()));
        }
        let f1 = s.tape.shape(grid.tokens)[1];
        let t = s.tape.slice(grid.tokens, 0, grid.n_train, grid.n_test)?;
        let t = s.tape.slice(t, 1, f1 - 1, 1)?;
        let t = s.tape.reshape(t, &[grid.n_test, self.cfg.d])?;
        let t = self.dec_ln.forward(s, t)?;
        let logits = self.decoder.forward(s, t)?;
        s.tape.slice(logits, 1, 0, n_classes)
    }

    /// Full pass from a fused `[n, F, d]` table; the first
    /// `train_labels.len()` rows are context.
    pub fn forward(
        &self,
        s: &mut Session,
        table: Var,
        train_labels: &[usize],
        n_classes: usize,
        capture: Capture,
    ) -> Result<BackboneOutput> {
        let grid = self.embed_cells(s, table, train_labels, n_classes)?;
        let mask = build_incontext_mask(grid.n_train, grid.n_test)?;
        let mut out = BackboneOutput {
            logits: grid.tokens,
            feature_weights: Vec::new(),
            sample_weights: Vec::new(),
            grids: Vec::new(),
        };
        let mut x = grid.tokens;
        for blk in &self.blocks {
            let (y, fw, sw) = self.block(s, blk, x, &mask, capture)?;
            x = y;
            out.feature_weights.extend(fw);
            out.sample_weights.extend(sw);
            if capture.grids {
                out.grids.push(x);
            }
        }
        out.logits = self.decode(s, CellGrid { tokens: x, ..grid }, n_classes)?;
        Ok(out)
    }
}

/// Row-wise softmax of a logits tensor.
pub fn probabilities(logits: &crate::Tensor) -> crate::Tensor {
    let c = logits.last_dim();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Attention mass per feature partition, read from feature-stage weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionMass {
    pub names: Vec<String>,
    pub masses: Vec<f64>,
    pub label_mass: f64,
}

/// Mean over samples, heads and query tokens of the post-softmax weight
/// landing on each partition cell. `weights` is `[n, heads, F+1, F+1]` with
/// the label token last; `partition` must cover `0..F` exactly once.
pub fn attention_mass_probe(weights: &crate::Tensor, partition: &[(String, Vec<usize>)]) -> Result<PartitionMass> {
    let sh = weights.shape();
    if sh.len() != 4 || sh[2] != sh[3] || sh[2] == 0 {
        return Err(Error::Invalid(format!("expected [n, heads, F+1, F+1] weights, got {sh:?}")));
    }
    let f1 = sh[3];
    let mut owner = vec![usize::MAX; f1 - 1];
    for (p, (name, cols)) in partition.iter().enumerate() {
        for &c in cols {
            if c >= f1 - 1 {
                return Err(Error::Invalid(format!("partition {name} names column {c} outside 0..{}", f1 - 1)));
            }
            if owner[c] != usize::MAX {
                return Err(Error::Invalid(format!("column {c} appears in more than one partition")));
            }
            owner[c] = p;
        }
    }
    if let Some(c) = owner.iter().position(|&o| o == usize::MAX) {
        return Err(Error::Invalid(format!("column {c} is not covered by the partition")));
    }
    let rows = weights.numel() / f1;
    let mut masses = vec![0.0; partition.len()];
    let mut label = 0.0;
    for r in 0..rows {
        let w = weights.row(r);
        for (c, &o) in owner.iter().enumerate() {
            masses[o] += w[c];
        }
        label += w[f1 - 1];
    }
    let inv = 1.0 / rows as f64;
    Ok(PartitionMass {
        names: partition.iter().map(|(n, _)| n.clone()).collect(),
        masses: masses.into_iter().map(|m| m * inv).collect(),
        label_mass: label * inv,
    })
}
