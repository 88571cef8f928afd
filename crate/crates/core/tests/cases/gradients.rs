//! Finite-difference checks of every trainable layer and of the whole
//! projector → pooler → backbone → decoder pipeline at width 8.

use mmpfn_core::backbone::{build_incontext_mask, Backbone, BackboneConfig, Capture};
use mmpfn_core::data::SyntheticTask;
use mmpfn_core::model::{Mmpfn, ModalityConfig, ModelConfig};
use mmpfn_core::nn::{Activation, Builder, LayerNorm, Linear, Mask, Mlp, MultiHeadAttention};
use mmpfn_core::projector::{Cap, Projector, ProjectorConfig, ProjectorKind};
use mmpfn_core::{param_grad_check, Initializer, ParamGroup, ParamStore, Result, Rng, Session, Tensor, Var};

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
const ALL: [ParamGroup; 4] = [ParamGroup::Backbone, ParamGroup::Decoder, ParamGroup::Projector, ParamGroup::Encoder];

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// A random linear readout, so no output direction has a vanishing gradient.
fn readout(s: &mut Session, out: Var, seed: u64) -> Result<Var> {
    let shape = s.tape.shape(out).to_vec();
    let r = s.constant(randn(&shape, seed));
    let p = s.tape.mul(out, r)?;
    Ok(s.tape.sum(p))
}

fn assert_check(store: &ParamStore, what: &str, per_tensor: usize, f: impl Fn(&mut Session) -> Result<Var>) {
    assert_check_groups(store, &ALL, what, per_tensor, f)
}

fn assert_check_groups(
    store: &ParamStore,
    groups: &[ParamGroup],
    what: &str,
    per_tensor: usize,
    f: impl Fn(&mut Session) -> Result<Var>,
) {
    let c = param_grad_check(store, groups, f, H, FLOOR, per_tensor).unwrap();
    assert!(c.checked > 0, "{what}: nothing checked");
    assert!(c.worst <= TOL, "{what}: relative error {:.3e} at {:?}", c.worst, c.worst_at);
}

pub fn linear_and_layernorm() {
    let mut store = ParamStore::new();
    let mut b = Builder::new(&mut store, Initializer::new(1), ParamGroup::Backbone, "t");
    let lin = Linear::new(&mut b, "lin", 5, 4, true);
    let ln = LayerNorm::new(&mut b, "ln", 4);
    // Move layernorm off its identity initialization.
    for (i, e) in store.entries_mut().iter_mut().enumerate() {
        let noise = randn(e.tensor.shape(), 100 + i as u64);
        e.tensor.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += 0.3 * n);
    }
    let x = randn(&[3, 5], 2);
    assert_check(&store, "linear+layernorm", usize::MAX, |s| {
        let xv = s.constant(x.clone());
        let h = lin.forward(s, xv)?;
        let h = ln.forward(s, h)?;
        readout(s, h, 3)
    });
}

pub fn mlps() {
    for (act, residual) in [(Activation::Gelu, false), (Activation::Glu, false), (Activation::Gelu, true)] {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, Initializer::new(4), ParamGroup::Projector, "t");
        let mlp = Mlp::new(&mut b, "mlp", 6, 5, 6, act, residual).unwrap();
        let x = randn(&[2, 3, 6], 5);
        assert_check(&store, &format!("mlp {act:?} residual={residual}"), usize::MAX, |s| {
            let xv = s.constant(x.clone());
            let h = mlp.forward(s, xv)?;
            readout(s, h, 6)
        });
    }
}

pub fn masked_attention() {
    let mut store = ParamStore::new();
    let mut b = Builder::new(&mut store, Initializer::new(7), ParamGroup::Backbone, "t");
    let attn = MultiHeadAttention::new(&mut b, "attn", 8, 2).unwrap();
    let q = randn(&[2, 5, 8], 8);
    let kv = randn(&[2, 5, 8], 9);
    let mask = Mask::from_fn(5, 5, |r, c| c <= r.max(1));
    assert_check(&store, "attention", usize::MAX, |s| {
        let qv = s.constant(q.clone());
        let kvv = s.constant(kv.clone());
        let o = attn.forward(s, qv, kvv, Some(&mask), false)?;
        readout(s, o.out, 10)
    });
}

pub fn pooler() {
    let mut store = ParamStore::new();
    let mut b = Builder::new(&mut store, Initializer::new(11), ParamGroup::Projector, "cap");
    let cap = Cap::new(&mut b, 8, 3, 2, true).unwrap();
    let tokens = randn(&[2, 6, 8], 12);
    assert_check(&store, "cap", usize::MAX, |s| {
        let t = s.constant(tokens.clone());
        let o = cap.forward(s, t)?;
        readout(s, o, 13)
    });
}

pub fn projector_variants() {
    let kinds = [
        (ProjectorKind::Linear, false),
        (ProjectorKind::Mlp, false),
        (ProjectorKind::MultiheadMlp, false),
        (ProjectorKind::Mgm, false),
        (ProjectorKind::Mgm, true),
    ];
    for (variant, cap) in kinds {
        let mut store = ParamStore::new();
        let cfg = ProjectorConfig { variant, n: 4, cap, k: 2, ..Default::default() };
        let p = Projector::new(&mut store, Initializer::new(14), "image", &cfg, 5, 8).unwrap();
        let cls = randn(&[3, 5], 15);
        assert_check(&store, &format!("projector {variant:?} cap={cap}"), 24, |s| {
            let c = s.constant(cls.clone());
            let o = p.forward(s, c)?;
            readout(s, o.tokens, 16)
        });
    }
}

pub fn backbone_block_and_decoder() {
    let mut store = ParamStore::new();
    let cfg = BackboneConfig { d: 8, heads: 2, blocks: 1, hidden: 8, max_classes: 3, decoder_hidden: 8 };
    let bb = Backbone::new(&mut store, Initializer::new(17), &cfg).unwrap();
    let table = randn(&[5, 3, 8], 18);
    let mask = build_incontext_mask(3, 2).unwrap();
    assert_check_groups(&store, &[ParamGroup::Backbone], "block", 12, |s| {
        let t = s.constant(table.clone());
        let grid = bb.embed_cells(s, t, &[0, 2, 1], 3)?;
        let g = bb.pfn_block(s, 0, grid, &mask)?;
        readout(s, g.tokens, 19)
    });
    assert_check(&store, "backbone+decoder", 12, |s| {
        let t = s.constant(table.clone());
        let out = bb.forward(s, t, &[0, 2, 1], 3, Capture::default())?;
        s.tape.cross_entropy(out.logits, &[1, 2])
    });
}

pub fn full_pipeline_width_8() {
    let cfg = ModelConfig {
        d: 8,
        heads: 2,
        blocks: 2,
        hidden: 16,
        max_classes: 3,
        decoder_hidden: 8,
        vocab_cap: 4,
        init_seed: 20,
    };
    let mut model = Mmpfn::new(&cfg).unwrap();
    let task = SyntheticTask::Xor { n_train: 6, n_test: 4, embed_dim: 5, noise: 0.1 };
    let data = task.generate(21).unwrap();
    let projector = ProjectorConfig { variant: ProjectorKind::Mgm, n: 4, cap: true, k: 2, ..Default::default() };
    model.add_projector(&ModalityConfig { name: "image".into(), projector }, 5, 22).unwrap();
    let trainable = [ParamGroup::Projector, ParamGroup::Backbone, ParamGroup::Decoder];
    let query_labels = data.labels_of(&data.test);
    let c = param_grad_check(
        &model.store,
        &trainable,
        |s| {
            let out = model.forward(s, &data, &data.train, &data.test, Capture::default())?;
            s.tape.cross_entropy(out.logits, &query_labels)
        },
        H,
        FLOOR,
        8,
    )
    .unwrap();
    let projector_params = model.store.entries().iter().filter(|e| e.group == ParamGroup::Projector).count();
    assert!(projector_params > 0 && c.checked > 100);
    assert!(c.worst <= TOL, "pipeline relative error {:.3e} at {:?}", c.worst, c.worst_at);
}

/// Every case, in order, for runners outside the test harness.
pub const CASES: &[(&str, fn())] = &[
    ("linear_and_layernorm", linear_and_layernorm),
    ("mlps", mlps),
    ("masked_attention", masked_attention),
    ("pooler", pooler),
    ("projector_variants", projector_variants),
    ("backbone_block_and_decoder", backbone_block_and_decoder),
    ("full_pipeline_width_8", full_pipeline_width_8),
];
