//! Optimizer, fine-tuning protocol and evaluation metrics.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backbone::{probabilities, Capture};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Mmpfn, ModalityConfig};
use crate::params::{ParamGroup, ParamStore, Session};
use crate::projector::cosine;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Moment buffers for every store entry, allocated lazily on first update.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, n_params: usize) -> Self {
        AdamW { cfg, step: 0, m: vec![None; n_params], v: vec![None; n_params] }
    }

    /// One decoupled-decay Adam step. `grads` is aligned with the store
    /// entries; `None` entries are left untouched. Non-finite gradients abort
    /// before any parameter changes.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Invalid("gradient list does not match the parameter store".into()));
        }
        for (e, g) in store.entries().iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != e.tensor.shape() {
                    return Err(Error::shape("adamw", g.shape(), e.tensor.shape()));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", e.name)));
                }
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (e, g)) in store.entries_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let theta = e.tensor.data_mut();
            for (((t, &gj), mj), vj) in theta.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *t -= lr * weight_decay * *t;
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *t -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub learning_rate: f64,
    /// Episodes averaged per optimizer step.
    pub batch_size: usize,
    pub steps: usize,
    pub seeds: Vec<u64>,
    /// Share of the train split used as context in each training episode.
    pub context_fraction: f64,
    pub optimizer: AdamWConfig,
    pub trainable: Vec<ParamGroup>,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            learning_rate: 1e-5,
            batch_size: 1,
            steps: 100,
            seeds: vec![0, 1, 2, 3, 4],
            context_fraction: 0.8,
            optimizer: AdamWConfig::default(),
            trainable: vec![ParamGroup::Projector, ParamGroup::Backbone, ParamGroup::Decoder],
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be finite and nonnegative", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Invalid("at least one seed is required".into()));
        }
        if !(self.context_fraction > 0.0 && self.context_fraction < 1.0) {
            return Err(Error::Invalid(format!("context fraction {} must lie in (0, 1)", self.context_fraction)));
        }
        if self.trainable.contains(&ParamGroup::Encoder) {
            return Err(Error::Invalid("modality encoders are frozen and cannot be trainable".into()));
        }
        Ok(())
    }
}

/// Outcome of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub accuracy: f64,
    pub loss_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub runs: Vec<SeedRun>,
    pub mean_accuracy: f64,
}

impl RunResult {
    pub fn from_runs(runs: Vec<SeedRun>) -> Self {
        let mean_accuracy = runs.iter().map(|r| r.accuracy).sum::<f64>() / runs.len().max(1) as f64;
        RunResult { runs, mean_accuracy }
    }
}

/// Splits `train` into context and query for one episode.
pub fn episode_split(train: &[usize], context_fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx = train.to_vec();
    rng.shuffle(&mut idx);
    let n_ctx = ((idx.len() as f64 * context_fraction).round() as usize).clamp(1, idx.len().saturating_sub(1).max(1));
    let query = idx.split_off(n_ctx);
    (idx, query)
}

/// Forward, cross-entropy on the query rows, backward. Returns the loss and
/// per-entry gradients. Any gradient on a non-trainable parameter is a
/// contract violation.
pub fn loss_and_grads(
    model: &Mmpfn,
    data: &Dataset,
    ctx: &[usize],
    query: &[usize],
    trainable: &[ParamGroup],
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut s = Session::new(&model.store, trainable);
    let out = model.forward(&mut s, data, ctx, query, Capture::default())?;
    let loss = s.tape.cross_entropy(out.logits, &data.labels_of(query))?;
    let value = s.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    let grads = s.param_grads(loss)?;
    for (e, g) in model.store.entries().iter().zip(&grads) {
        if g.is_some() && !trainable.contains(&e.group) {
            return Err(Error::Invalid(format!("frozen parameter {} received a gradient", e.name)));
        }
    }
    Ok((value, grads))
}

fn accumulate(acc: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>, scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        let Some(mut g) = g else { continue };
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
        match a {
            Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            None => *a = Some(g),
        }
    }
}

/// Fine-tunes `model` in place on the train split of `data` and returns the
/// loss trace. Step `t` draws its episodes from `Rng::derive(seed, t)`.
pub fn fine_tune(model: &mut Mmpfn, data: &Dataset, cfg: &FineTuneConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    data.validate()?;
    if data.train.len() < 2 {
        return Err(Error::Data("fine-tuning needs at least 2 train rows".into()));
    }
    let mut opt = AdamW::new(cfg.optimizer.clone(), model.store.len());
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = Rng::derive(seed, step as u64);
        let mut acc = vec![None; model.store.len()];
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let (ctx, query) = episode_split(&data.train, cfg.context_fraction, &mut rng);
            let (loss, grads) = loss_and_grads(model, data, &ctx, &query, &cfg.trainable)?;
            total += loss;
            accumulate(&mut acc, grads, 1.0 / cfg.batch_size as f64);
        }
        opt.update(&mut model.store, &acc, cfg.learning_rate)?;
        trace.push(total / cfg.batch_size as f64);
    }
    Ok(trace)
}

/// Queries scored per forward pass. Queries never attend to one another,
/// so chunking bounds memory without changing which rows each query sees.
pub const QUERY_CHUNK: usize = 128;

/// Class probabilities for `query` rows given `ctx` as context.
pub fn predict(model: &Mmpfn, data: &Dataset, ctx: &[usize], query: &[usize]) -> Result<Tensor> {
    if query.len() <= QUERY_CHUNK {
        let mut s = Session::inference(&model.store);
        let out = model.forward(&mut s, data, ctx, query, Capture::default())?;
        return Ok(probabilities(s.value(out.logits)));
    }
    let mut parts = Vec::with_capacity(query.len() * data.n_classes);
    let mut classes = 0;
    for chunk in query.chunks(QUERY_CHUNK) {
        let mut s = Session::inference(&model.store);
        let out = model.forward(&mut s, data, ctx, chunk, Capture::default())?;
        let p = probabilities(s.value(out.logits));
        classes = p.shape()[1];
        parts.extend_from_slice(p.data());
    }
    Tensor::new(vec![query.len(), classes], parts)
}

/// Test accuracy with the full train split as context.
pub fn evaluate(model: &Mmpfn, data: &Dataset) -> Result<f64> {
    if data.test.is_empty() {
        return Err(Error::Data("evaluation needs at least one test row".into()));
    }
    let probs = predict(model, data, &data.train, &data.test)?;
    evaluate_accuracy(&probs, &data.labels_of(&data.test))
}

/// Clones `base`, attaches fresh projectors for `modalities`, fine-tunes
/// and evaluates. Projector `i` is initialized from `Rng::derive(seed, i)`.
pub fn run_seed(
    base: &Mmpfn,
    data: &Dataset,
    modalities: &[ModalityConfig],
    cfg: &FineTuneConfig,
    seed: u64,
) -> Result<(Mmpfn, SeedRun)> {
    let mut model = base.clone();
    for (i, m) in modalities.iter().enumerate() {
        let dim = data.modality(&m.name)?.dim;
        model.add_projector(m, dim, Rng::derive(seed, i as u64).next_u64())?;
    }
    let loss_trace = if cfg.steps > 0 { fine_tune(&mut model, data, cfg, seed)? } else { Vec::new() };
    let accuracy = evaluate(&model, data)?;
    Ok((model, SeedRun { seed, accuracy, loss_trace }))
}

/// Maps `f` over `items` on up to `jobs` threads. Results keep input order,
/// so the output never depends on scheduling.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    let done = Mutex::new(slots);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                done.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    done.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every item mapped")).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate_accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rank() != 2 || probs.shape()[0] != labels.len() {
        return Err(Error::shape("evaluate_accuracy", probs.shape(), &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    let hits = labels.iter().enumerate().filter(|&(i, &l)| argmax(probs.row(i)) == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean rank per method over datasets. `table[m][k]` is method `m` on
/// dataset `k`; `None` drops the method from that dataset. Rank 1 is best
/// and ties share the mean of their ranks.
pub fn rank_aggregate(table: &[Vec<Option<f64>>]) -> Result<Vec<f64>> {
    let n_data = table.first().map_or(0, Vec::len);
    if table.iter().any(|r| r.len() != n_data) {
        return Err(Error::Invalid("every method needs one entry per dataset".into()));
    }
    let mut sums = vec![0.0; table.len()];
    let mut counts = vec![0usize; table.len()];
    for k in 0..n_data {
        let present: Vec<(usize, f64)> = table.iter().enumerate().filter_map(|(m, r)| r[k].map(|v| (m, v))).collect();
        for &(m, v) in &present {
            let better = present.iter().filter(|&&(_, w)| w > v).count();
            let tied = present.iter().filter(|&&(_, w)| w == v).count();
            sums[m] += better as f64 + (tied as f64 + 1.0) / 2.0;
            counts[m] += 1;
        }
    }
    Ok(sums.iter().zip(&counts).map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 }).collect())
}

/// Result of [`cosine_similarity_matrix`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub size: usize,
    /// Row-major `size × size`.
    pub values: Vec<f64>,
    /// Number of instance pairs where a zero-norm embedding forced similarity 0.
    pub zero_norm_pairs: usize,
}

/// Instance-averaged pairwise cosine similarity between feature tokens.
/// `embeddings` is `[instances, features, d]`; the diagonal is 1.
pub fn cosine_similarity_matrix(embeddings: &Tensor) -> Result<SimilarityMatrix> {
    let sh = embeddings.shape();
    if sh.len() != 3 || sh[0] == 0 {
        return Err(Error::Invalid(format!("expected [instances>0, features, d], got {sh:?}")));
    }
    let (n, f, d) = (sh[0], sh[1], sh[2]);
    let mut values = vec![0.0; f * f];
    let mut zero = 0;
    for i in 0..n {
        let tok = |j: usize| &embeddings.data()[(i * f + j) * d..(i * f + j + 1) * d];
        for a in 0..f {
            for b in a + 1..f {
                let (ta, tb) = (tok(a), tok(b));
                if ta.iter().all(|&v| v == 0.0) || tb.iter().all(|&v| v == 0.0) {
                    zero += 1;
                }
                let c = cosine(ta, tb);
                values[a * f + b] += c;
                values[b * f + a] += c;
            }
        }
    }
    for (k, v) in values.iter_mut().enumerate() {
        *v = if k / f == k % f { 1.0 } else { *v / n as f64 };
    }
    if zero > 0 {
        log::warn!("{zero} feature pairs had a zero-norm embedding; their similarity counts as 0");
    }
    Ok(SimilarityMatrix { size: f, values, zero_norm_pairs: zero })
}

/// Stratified draw of `fraction` of `train` without replacement. Every class
/// keeps at least one row; the total is `round(fraction · len)`.
pub fn subsample_split(train: &[usize], labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("fraction {fraction} must lie in (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(train.to_vec());
    }
    let n = train.len();
    let target = ((n as f64) * fraction).round() as usize;
    let classes: std::collections::BTreeSet<usize> = train.iter().map(|&i| labels[i]).collect();
    if target < classes.len() {
        return Err(Error::Data(format!(
            "fraction {fraction} keeps {target} rows but {} classes need one each; minimum feasible fraction is {}",
            classes.len(),
            (classes.len() as f64 - 0.5) / n as f64
        )));
    }
    let mut rng = Rng::new(seed);
    let mut order = train.to_vec();
    rng.shuffle(&mut order);
    let mut keep = vec![false; order.len()];
    for &c in &classes {
        let pos = order.iter().position(|&i| labels[i] == c).expect("class present");
        keep[pos] = true;
    }
    let mut kept = classes.len();
    for k in keep.iter_mut() {
        if kept == target {
            break;
        }
        if !*k {
            *k = true;
            kept += 1;
        }
    }
    let mut out: Vec<usize> = order.iter().zip(&keep).filter(|(_, &k)| k).map(|(&i, _)| i).collect();
    out.sort_unstable();
    Ok(out)
}
