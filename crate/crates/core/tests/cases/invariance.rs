//! Permutation invariance, in-context masking and label leakage.

use mmpfn_core::backbone::Capture;
use mmpfn_core::data::{Dataset, SyntheticTask};
use mmpfn_core::model::{Mmpfn, ModalityConfig, ModelConfig};
use mmpfn_core::prior::{sample_prior_dataset, PriorConfig};
use mmpfn_core::projector::{ProjectorConfig, ProjectorKind};
use mmpfn_core::train::{fine_tune, loss_and_grads, predict, FineTuneConfig, QUERY_CHUNK};
use mmpfn_core::{ParamGroup, Session, Tensor};

fn model_and_data() -> (Mmpfn, Dataset) {
    let cfg = ModelConfig {
        d: 16,
        heads: 2,
        blocks: 2,
        hidden: 32,
        max_classes: 4,
        decoder_hidden: 16,
        vocab_cap: 8,
        init_seed: 3,
    };
    let mut model = Mmpfn::new(&cfg).unwrap();
    let task = SyntheticTask::ThreeSignal {
        n_train: 14,
        n_test: 7,
        embed_dim: 6,
        image_noise: 0.2,
        text_noise: 0.2,
        text_weight: 0.5,
    };
    let data = task.generate(4).unwrap();
    let image = ProjectorConfig { variant: ProjectorKind::Mgm, n: 3, cap: true, k: 2, ..Default::default() };
    let text = ProjectorConfig { variant: ProjectorKind::MultiheadMlp, n: 2, ..Default::default() };
    model.add_projector(&ModalityConfig { name: "image".into(), projector: image }, 6, 5).unwrap();
    model.add_projector(&ModalityConfig { name: "text".into(), projector: text }, 6, 6).unwrap();
    (model, data)
}

fn max_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300)).fold(0.0, f64::max)
}

pub fn train_row_permutation_leaves_predictions_unchanged() {
    let (model, data) = model_and_data();
    let base = predict(&model, &data, &data.train, &data.test).unwrap();
    let mut shuffled = data.train.clone();
    shuffled.reverse();
    shuffled.swap(0, 5);
    let permuted = predict(&model, &data, &shuffled, &data.test).unwrap();
    assert!(max_rel_diff(&base, &permuted) <= 1e-9);
}

pub fn feature_permutation_leaves_predictions_unchanged() {
    let (model, data) = model_and_data();
    let base = predict(&model, &data, &data.train, &data.test).unwrap();
    let mut swapped = data.clone();
    let cols: Vec<usize> = (0..data.table.n_cols()).rev().collect();
    swapped.table = data.table.columns(&cols);
    let permuted = predict(&model, &swapped, &swapped.train, &swapped.test).unwrap();
    assert!(max_rel_diff(&base, &permuted) <= 1e-9);
}

pub fn query_rows_never_attend_to_each_other() {
    let (model, data) = model_and_data();
    let mut s = Session::inference(&model.store);
    let cap = Capture { sample_weights: true, ..Default::default() };
    let out = model.forward(&mut s, &data, &data.train, &data.test, cap).unwrap();
    let n_ctx = data.train.len();
    let n = n_ctx + data.test.len();
    assert_eq!(out.backbone.sample_weights.len(), model.cfg.blocks);
    for w in &out.backbone.sample_weights {
        let w = s.value(*w);
        assert_eq!(&w.shape()[2..], &[n, n]);
        for (i, v) in w.data().iter().enumerate() {
            let (r, c) = ((i / n) % n, i % n);
            if c >= n_ctx {
                assert_eq!(*v, 0.0, "row {r} attends to query column {c}");
            }
        }
    }
}

pub fn editing_queries_leaves_context_activations_bit_identical() {
    let (model, data) = model_and_data();
    let mut edited = data.clone();
    for &r in &data.test {
        for cell in &mut edited.table.rows[r] {
            *cell = mmpfn_core::encoders::Cell::Num(1234.5);
        }
        for m in &mut edited.modalities {
            let dim = m.dim;
            m.vectors.data_mut()[r * dim..(r + 1) * dim].iter_mut().for_each(|v| *v = -7.0);
        }
    }
    let grids = |d: &Dataset| {
        let mut s = Session::inference(&model.store);
        let cap = Capture { grids: true, ..Default::default() };
        let out = model.forward(&mut s, d, &d.train, &d.test, cap).unwrap();
        let mut all = vec![s.value(out.fused).clone()];
        all.extend(out.backbone.grids.iter().map(|g| s.value(*g).clone()));
        (all, s.value(out.logits).clone())
    };
    let (a, la) = grids(&data);
    let (b, lb) = grids(&edited);
    let n_ctx = data.train.len();
    for (ga, gb) in a.iter().zip(&b) {
        let row = ga.numel() / ga.shape()[0];
        assert_eq!(ga.data()[..n_ctx * row], gb.data()[..n_ctx * row]);
    }
    assert_ne!(la, lb, "edited queries should change their own predictions");
}

pub fn poisoned_query_labels_only_reach_the_loss() {
    let (model, data) = model_and_data();
    let mut poisoned = data.clone();
    for &r in &data.test {
        poisoned.labels[r] = 1 - poisoned.labels[r];
    }
    let forward = |d: &Dataset| {
        let mut s = Session::inference(&model.store);
        let cap = Capture { grids: true, feature_weights: true, sample_weights: true };
        let out = model.forward(&mut s, d, &d.train, &d.test, cap).unwrap();
        let mut vals: Vec<Tensor> = out.backbone.grids.iter().map(|g| s.value(*g).clone()).collect();
        vals.push(s.value(out.logits).clone());
        vals
    };
    assert_eq!(forward(&data), forward(&poisoned));
    let trainable = [ParamGroup::Projector, ParamGroup::Backbone, ParamGroup::Decoder];
    let (l1, _) = loss_and_grads(&model, &data, &data.train, &data.test, &trainable).unwrap();
    let (l2, _) = loss_and_grads(&model, &poisoned, &data.train, &data.test, &trainable).unwrap();
    assert_ne!(l1, l2);
}

pub fn poisoned_prior_queries_only_reach_the_loss() {
    let (model, _) = model_and_data();
    let mut tabular = Mmpfn::new(&model.cfg).unwrap();
    tabular.store.load_matching(&model.store).unwrap();
    let prior = PriorConfig { classes: [2, 3], ..Default::default() };
    let task = sample_prior_dataset(&prior, 11).unwrap();
    let data = task.to_dataset().unwrap();
    let mut poisoned = data.clone();
    for &r in &data.test {
        poisoned.labels[r] = (poisoned.labels[r] + 1) % data.n_classes;
    }
    let logits = |d: &Dataset| predict(&tabular, d, &d.train, &d.test).unwrap();
    assert_eq!(logits(&data), logits(&poisoned));
    let groups = [ParamGroup::Backbone, ParamGroup::Decoder];
    let (l1, _) = loss_and_grads(&tabular, &data, &data.train, &data.test, &groups).unwrap();
    let (l2, _) = loss_and_grads(&tabular, &poisoned, &data.train, &data.test, &groups).unwrap();
    assert_ne!(l1, l2);
}

pub fn fine_tuning_never_touches_encoder_bytes() {
    let (mut model, data) = model_and_data();
    let before = model.store.group_bytes(ParamGroup::Encoder);
    let projector_before = model.store.group_bytes(ParamGroup::Projector);
    let cfg = FineTuneConfig { steps: 3, learning_rate: 1e-3, ..Default::default() };
    fine_tune(&mut model, &data, &cfg, 0).unwrap();
    assert_eq!(model.store.group_bytes(ParamGroup::Encoder), before);
    assert_ne!(model.store.group_bytes(ParamGroup::Projector), projector_before);

    let bad = FineTuneConfig { trainable: vec![ParamGroup::Encoder], ..cfg };
    assert!(fine_tune(&mut model, &data, &bad, 0).is_err());
}

pub fn chunked_prediction_matches_one_pass() {
    let (model, _) = model_and_data();
    let task = SyntheticTask::ThreeSignal {
        n_train: 20,
        n_test: QUERY_CHUNK + 45,
        embed_dim: 6,
        image_noise: 0.2,
        text_noise: 0.2,
        text_weight: 0.5,
    };
    let data = task.generate(8).unwrap();
    let chunked = predict(&model, &data, &data.train, &data.test).unwrap();
    let mut s = Session::inference(&model.store);
    let out = model.forward(&mut s, &data, &data.train, &data.test, Capture::default()).unwrap();
    let logits = s.value(out.logits);
    assert_eq!(chunked.shape(), logits.shape());
    for i in 0..data.test.len() {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for (p, v) in chunked.row(i).iter().zip(row) {
            assert!((p - (v - m).exp() / z).abs() <= 1e-12);
        }
    }
}

/// Every case, in order, for runners outside the test harness.
pub const CASES: &[(&str, fn())] = &[
    ("train_row_permutation_leaves_predictions_unchanged", train_row_permutation_leaves_predictions_unchanged),
    ("feature_permutation_leaves_predictions_unchanged", feature_permutation_leaves_predictions_unchanged),
    ("query_rows_never_attend_to_each_other", query_rows_never_attend_to_each_other),
    (
        "editing_queries_leaves_context_activations_bit_identical",
        editing_queries_leaves_context_activations_bit_identical,
    ),
    ("poisoned_query_labels_only_reach_the_loss", poisoned_query_labels_only_reach_the_loss),
    ("poisoned_prior_queries_only_reach_the_loss", poisoned_prior_queries_only_reach_the_loss),
    ("fine_tuning_never_touches_encoder_bytes", fine_tuning_never_touches_encoder_bytes),
    ("chunked_prediction_matches_one_pass", chunked_prediction_matches_one_pass),
];
