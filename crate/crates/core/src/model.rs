//! The assembled multimodal model: frozen tabular encoder, one projector
//! per non-tabular modality and the in-context backbone, all in one store.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::backbone::{Backbone, BackboneConfig, BackboneOutput, Capture};
use crate::data::Dataset;
use crate::encoders::TabularEncoder;
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamGroup, ParamStore, Session};
use crate::projector::{fuse_tokens, Partition, Projector, ProjectorConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub max_classes: usize,
    pub decoder_hidden: usize,
    /// Categorical vocabulary cap of the tabular encoder.
    pub vocab_cap: usize,
    /// Seed for backbone, decoder and encoder initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        ModelConfig {
            d: b.d,
            heads: b.heads,
            blocks: b.blocks,
            hidden: b.hidden,
            max_classes: b.max_classes,
            decoder_hidden: b.decoder_hidden,
            vocab_cap: 64,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            d: self.d,
            heads: self.heads,
            blocks: self.blocks,
            hidden: self.hidden,
            max_classes: self.max_classes,
            decoder_hidden: self.decoder_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityConfig {
    pub name: String,
    #[serde(default)]
    pub projector: ProjectorConfig,
}

#[derive(Clone, Debug)]
pub struct Mmpfn {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: TabularEncoder,
    pub backbone: Backbone,
    pub projectors: Vec<(String, Projector)>,
}

#[derive(Debug)]
pub struct ModelOutput {
    /// `[queries, n_classes]`.
    pub logits: Var,
    /// Fused `[n, F, d]` feature tokens entering the backbone.
    pub fused: Var,
    pub partition: Partition,
    /// Per modality, `[n, N, d]` projector head outputs.
    pub heads: Vec<Var>,
    pub backbone: BackboneOutput,
}

impl Mmpfn {
    /// A tabular-only model (no projectors).
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let init = Initializer::new(cfg.init_seed);
        let encoder = TabularEncoder::new(&mut store, init, cfg.d, cfg.vocab_cap);
        let backbone = Backbone::new(&mut store, init, &cfg.backbone())?;
        Ok(Mmpfn { cfg: cfg.clone(), store, encoder, backbone, projectors: Vec::new() })
    }

    /// Adds a freshly initialized projector for `modality`.
    pub fn add_projector(&mut self, modality: &ModalityConfig, encoder_dim: usize, seed: u64) -> Result<()> {
        if modality.name == "tabular" || modality.name.is_empty() {
            return Err(Error::Invalid(format!("modality name {:?} is reserved", modality.name)));
        }
        if self.projectors.iter().any(|(n, _)| *n == modality.name) {
            return Err(Error::Invalid(format!("duplicate modality {}", modality.name)));
        }
        let p = Projector::new(
            &mut self.store,
            Initializer::new(seed),
            &modality.name,
            &modality.projector,
            encoder_dim,
            self.cfg.d,
        )?;
        self.projectors.push((modality.name.clone(), p));
        Ok(())
    }

    /// Copies backbone, decoder and encoder parameters from a checkpoint.
    /// Fails before touching anything if a parameter is missing or misshapen.
    pub fn load_pretrained(&mut self, ckpt: &ParamStore) -> Result<()> {
        let groups = [ParamGroup::Backbone, ParamGroup::Decoder, ParamGroup::Encoder];
        self.store.load_groups(ckpt, &groups).map(|_| ())
    }

    /// Per-modality `[rows, N, d]` projector head outputs, without the backbone.
    pub fn projector_heads(&self, s: &mut Session, data: &Dataset, rows: &[usize]) -> Result<Vec<Var>> {
        let mut heads = Vec::with_capacity(self.projectors.len());
        for (name, p) in &self.projectors {
            let cls = s.constant(data.modality(name)?.select(rows).vectors);
            heads.push(p.forward(s, cls)?.heads);
        }
        Ok(heads)
    }

    /// Forward pass with `ctx` rows as labelled context and `query` rows to
    /// predict, in that order.
    pub fn forward(
        &self,
        s: &mut Session,
        data: &Dataset,
        ctx: &[usize],
        query: &[usize],
        capture: Capture,
    ) -> Result<ModelOutput> {
        if ctx.is_empty() {
            return Err(Error::Data("forward needs at least one context row".into()));
        }
        let rows: Vec<usize> = ctx.iter().chain(query).copied().collect();
        let cells = data.table.select(&rows);
        let tab = self.encoder.encode(&self.store, &data.table.specs, &cells, ctx.len())?;
        let tab = s.constant(tab);
        let mut tokens = Vec::with_capacity(self.projectors.len());
        let mut heads = Vec::with_capacity(self.projectors.len());
        for (name, p) in &self.projectors {
            let set = data.modality(name)?;
            let cls = s.constant(set.select(&rows).vectors);
            let out = p.forward(s, cls)?;
            tokens.push((name.clone(), out.tokens));
            heads.push(out.heads);
        }
        let (fused, partition) = fuse_tokens(s, tab, &tokens)?;
        let labels = data.labels_of(ctx);
        let backbone = self.backbone.forward(s, fused, &labels, data.n_classes, capture)?;
        Ok(ModelOutput { logits: backbone.logits, fused, partition, heads, backbone })
    }
}
