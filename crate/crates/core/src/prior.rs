//! Synthetic tabular prior and backbone pretraining.
//!
//! A task is drawn from a random layered causal graph: root nodes are
//! Gaussian noise; every later node applies a random affine map of some
//! parents, an activation from {identity, tanh, step} and additive Gaussian
//! noise. Some nodes are observed as features and one node, thresholded at
//! random quantiles, becomes the label.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Table};
use crate::error::{Error, Result};
use crate::model::Mmpfn;
use crate::params::ParamGroup;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{loss_and_grads, AdamW, AdamWConfig};

/// Arbitrary default; nothing fixes the pretraining budget.
pub const DEFAULT_PRETRAIN_TASKS: usize = 20_000;
const MAX_LAYERS: usize = 3;
const MAX_NODES: usize = 16;
const MAX_RETRIES: usize = 50;
const PARENTS_FIRST: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub features: [usize; 2],
    pub samples: [usize; 2],
    pub classes: [usize; 2],
    pub layers: [usize; 2],
    /// Nodes per layer.
    pub width: [usize; 2],
    pub noise: [f64; 2],
    /// Share of rows used as context, drawn uniformly from this range.
    pub train_fraction: [f64; 2],
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            features: [1, 6],
            samples: [48, 112],
            classes: [2, 4],
            layers: [2, 3],
            width: [2, 5],
            noise: [0.01, 0.3],
            train_fraction: [0.5, 0.8],
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("features", self.features),
            ("samples", self.samples),
            ("classes", self.classes),
            ("layers", self.layers),
            ("width", self.width),
        ];
        for (name, [lo, hi]) in ranges {
            if lo == 0 || lo > hi {
                return Err(Error::Invalid(format!(
                    "prior range {name} = [{lo}, {hi}] must be nonempty with minimum ≥ 1"
                )));
            }
        }
        if self.classes[0] < 2 {
            return Err(Error::Invalid("prior class count must be at least 2".into()));
        }
        if self.layers[1] > MAX_LAYERS || self.layers[1] * self.width[1] > MAX_NODES {
            return Err(Error::Invalid(format!("prior graph limited to {MAX_LAYERS} layers and {MAX_NODES} nodes")));
        }
        if self.features[0] + 1 > self.layers[1] * self.width[1] {
            return Err(Error::Invalid(format!(
                "largest graph ({} nodes) cannot hold {} features plus a label",
                self.layers[1] * self.width[1],
                self.features[0]
            )));
        }
        if !(self.noise[0] >= 0.0 && self.noise[0] <= self.noise[1]) {
            return Err(Error::Invalid("prior noise range must be nonempty and nonnegative".into()));
        }
        let [a, b] = self.train_fraction;
        if !(a > 0.0 && a <= b && b < 1.0) {
            return Err(Error::Invalid("train fraction range must lie in (0, 1)".into()));
        }
        if self.samples[0] < 2 * self.classes[1] {
            return Err(Error::Invalid("too few samples for the class range".into()));
        }
        Ok(())
    }
}

/// One draw from the prior. The first `n_train` rows are context.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorTask {
    /// `[n, f]`, each column standardized over all rows.
    pub x: Tensor,
    pub y: Vec<usize>,
    pub n_classes: usize,
    pub n_train: usize,
}

impl PriorTask {
    pub fn to_dataset(&self) -> Result<Dataset> {
        let n = self.y.len();
        Ok(Dataset {
            table: Table::from_matrix(&self.x)?,
            labels: self.y.clone(),
            n_classes: self.n_classes,
            modalities: Vec::new(),
            train: (0..self.n_train).collect(),
            test: (self.n_train..n).collect(),
        })
    }
}

#[derive(Clone, Copy)]
enum Act {
    Identity,
    Tanh,
    Step,
}

fn draw_range(rng: &mut Rng, [lo, hi]: [usize; 2]) -> usize {
    rng.int_in(lo, hi)
}

fn try_sample(cfg: &PriorConfig, rng: &mut Rng) -> Option<PriorTask> {
    let n = draw_range(rng, cfg.samples);
    let c = draw_range(rng, cfg.classes);
    let layers = draw_range(rng, cfg.layers);
    let widths: Vec<usize> = (0..layers).map(|_| draw_range(rng, cfg.width)).collect();
    let total: usize = widths.iter().sum();
    if total < cfg.features[0] + 1 {
        return None;
    }
    let f = rng.int_in(cfg.features[0], cfg.features[1].min(total - 1));
    let noise = cfg.noise[0] + (cfg.noise[1] - cfg.noise[0]) * rng.uniform();

    // Node values, node-major: values[node * n + row].
    let mut values = vec![0.0; total * n];
    let mut start = 0;
    let mut prev: Vec<usize> = Vec::new();
    let mut node_parents: Vec<Vec<usize>> = vec![Vec::new(); total];
    for (li, &w) in widths.iter().enumerate() {
        for j in 0..w {
            let node = start + j;
            if li == 0 {
                for r in 0..n {
                    values[node * n + r] = rng.normal();
                }
                continue;
            }
            let mut parents: Vec<usize> = prev.iter().copied().filter(|_| rng.bernoulli(0.6)).collect();
            if parents.is_empty() {
                parents.push(prev[rng.below(prev.len())]);
            }
            node_parents[node] = parents.clone();
            let weights: Vec<f64> = parents.iter().map(|_| rng.normal()).collect();
            let bias = 0.5 * rng.normal();
            let act = match rng.below(3) {
                0 => Act::Identity,
                1 => Act::Tanh,
                _ => Act::Step,
            };
            // Heteroscedastic noise: scale depends on the first parent.
            let hetero = 0.5 * rng.uniform();
            // Pre-activations are standardized over rows so steps and tanh
            // act in their informative range instead of saturating.
            let mut z: Vec<f64> =
                (0..n).map(|r| parents.iter().zip(&weights).map(|(&p, &wt)| wt * values[p * n + r]).sum()).collect();
            let mean = z.iter().sum::<f64>() / n as f64;
            let sd = (z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
            let inv = if sd > 1e-12 { 1.0 / sd } else { 0.0 };
            z.iter_mut().for_each(|v| *v = (*v - mean) * inv + bias);
            for (r, &zr) in z.iter().enumerate() {
                let a = match act {
                    Act::Identity => zr,
                    Act::Tanh => (1.5 * zr).tanh(),
                    Act::Step => (zr > 0.0) as u8 as f64,
                };
                let scale = noise * (1.0 + hetero * values[parents[0] * n + r].abs());
                values[node * n + r] = a + scale * rng.normal();
            }
        }
        prev = (start..start + w).collect();
        start += w;
    }

    // Label node from any non-root layer when there is one.
    let label_node = if layers > 1 { widths[0] + rng.below(total - widths[0]) } else { rng.below(total) };
    // Usually observe the label's direct causes first so the features
    // mostly explain it; otherwise any non-label nodes.
    let mut candidates: Vec<usize> = (0..total).filter(|&k| k != label_node).collect();
    rng.shuffle(&mut candidates);
    if rng.bernoulli(PARENTS_FIRST) {
        candidates.sort_by_key(|k| !node_parents[label_node].contains(k));
    }
    let features: Vec<usize> = candidates[..f].to_vec();

    let lab = &values[label_node * n..(label_node + 1) * n];
    let mut sorted = lab.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut qs: Vec<f64> = (0..c - 1).map(|_| 0.3 + 0.4 * rng.uniform()).collect();
    qs.sort_by(|a, b| a.total_cmp(b));
    let thresholds: Vec<f64> = qs.iter().map(|q| sorted[((n - 1) as f64 * q) as usize]).collect();
    let perm = rng.permutation(c);
    let y: Vec<usize> = lab.iter().map(|&v| perm[thresholds.iter().filter(|&&t| v > t).count()]).collect();

    let frac = cfg.train_fraction[0] + (cfg.train_fraction[1] - cfg.train_fraction[0]) * rng.uniform();
    let n_train = ((n as f64 * frac).round() as usize).clamp(c, n - 1);
    let mut in_train = vec![false; c];
    y[..n_train].iter().for_each(|&l| in_train[l] = true);
    if in_train.iter().any(|&p| !p) {
        return None;
    }

    let mut x = vec![0.0; n * f];
    for (j, &node) in features.iter().enumerate() {
        let col = &values[node * n..(node + 1) * n];
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        if var < 1e-10 {
            return None;
        }
        let sd = var.sqrt();
        for r in 0..n {
            x[r * f + j] = (col[r] - mean) / sd;
        }
    }
    Some(PriorTask { x: Tensor::new(vec![n, f], x).ok()?, y, n_classes: c, n_train })
}

/// Deterministic in `(cfg, seed)`. Degenerate draws (a constant label or
/// feature, or a class absent from the context) are retried.
pub fn sample_prior_dataset(cfg: &PriorConfig, seed: u64) -> Result<PriorTask> {
    cfg.validate()?;
    for attempt in 0..MAX_RETRIES {
        let mut rng = Rng::derive(seed, attempt as u64);
        if let Some(task) = try_sample(cfg, &mut rng) {
            return Ok(task);
        }
    }
    Err(Error::Data(format!("prior produced {MAX_RETRIES} degenerate tasks in a row for seed {seed}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub prior: PriorConfig,
    pub tasks: usize,
    pub learning_rate: f64,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            prior: PriorConfig::default(),
            tasks: DEFAULT_PRETRAIN_TASKS,
            learning_rate: 3e-4,
            optimizer: AdamWConfig::default(),
        }
    }
}

/// Trains backbone and decoder on `cfg.tasks` prior draws, one task per
/// step. Task `t` uses seed `Rng::derive(prior.seed, t)`. Returns the
/// per-task loss trace.
pub fn pretrain_backbone(
    model: &mut Mmpfn,
    cfg: &PretrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if cfg.tasks == 0 {
        return Err(Error::Invalid("pretraining needs at least one task".into()));
    }
    cfg.prior.validate()?;
    if cfg.prior.classes[1] > model.cfg.max_classes {
        return Err(Error::Invalid(format!(
            "prior draws up to {} classes but the decoder supports {}",
            cfg.prior.classes[1], model.cfg.max_classes
        )));
    }
    let trainable = [ParamGroup::Backbone, ParamGroup::Decoder];
    let mut opt = AdamW::new(cfg.optimizer.clone(), model.store.len());
    let mut trace = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let task_seed = Rng::derive(cfg.prior.seed, t as u64).next_u64();
        let task = sample_prior_dataset(&cfg.prior, task_seed)?;
        let data = task.to_dataset()?;
        let (loss, grads) = loss_and_grads(model, &data, &data.train, &data.test, &trainable)
            .map_err(|e| Error::NonFinite(format!("task {t} (seed {task_seed}): {e}")))?;
        opt.update(&mut model.store, &grads, cfg.learning_rate)
            .map_err(|e| Error::NonFinite(format!("task {t} (seed {task_seed}): {e}")))?;
        trace.push(loss);
        progress(t, loss);
    }
    Ok(trace)
}

/// Writes `task_index,loss` rows.
pub fn write_loss_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "task_index,loss")?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(f, "{i},{l}")?;
    }
    f.flush()?;
    Ok(())
}
