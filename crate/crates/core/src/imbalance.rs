//! Attention-imbalance model and token-ratio sweeps.
//!
//! A query spreading softmax attention over `N_I` non-tabular and `N_T`
//! tabular tokens gives the non-tabular set mass
//! `a_I = Σ_I w / (Σ_I w + Σ_T w)` with `w = exp(score)`. Replacing each sum
//! by count times per-token expectation yields the first-order prediction
//! `N_I c_I / (N_I c_I + N_T c_T)`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{attention_mass_probe, Capture};
use crate::data::{Dataset, SyntheticTask};
use crate::error::{Error, Result};
use crate::model::{Mmpfn, ModalityConfig};
use crate::params::Session;
use crate::projector::ProjectorConfig;
use crate::rng::Rng;
use crate::train::{parallel_map, run_seed, FineTuneConfig};

/// How unnormalized attention scores are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreModel {
    /// `q, k ~ N(0, variance·I_d)`, score `q·k/√d`, plus `shift` on
    /// non-tabular keys.
    Gaussian { variance: f64, shift: f64 },
    /// Every tabular score equals `tabular`, every non-tabular score
    /// `non_tabular`.
    Constant { tabular: f64, non_tabular: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceSpec {
    pub n_i: usize,
    pub n_t: usize,
    /// Expected unnormalized weight per non-tabular token.
    pub c_i: f64,
    /// Expected unnormalized weight per tabular token.
    pub c_t: f64,
    pub d: usize,
    pub scores: ScoreModel,
    pub samples: usize,
    pub seed: u64,
}

impl ImbalanceSpec {
    /// Gaussian scores with the exact per-token expectations
    /// `c = (1 − v²/d)^(−d/2)`, times `e^shift` for non-tabular tokens.
    /// Requires `v² < d`, otherwise the expectation diverges.
    pub fn gaussian(
        n_i: usize,
        n_t: usize,
        d: usize,
        variance: f64,
        shift: f64,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if d == 0 || variance.is_nan() || variance < 0.0 || variance * variance >= d as f64 {
            return Err(Error::Invalid(format!(
                "score expectation diverges or is undefined for variance {variance} at d = {d}"
            )));
        }
        let c = (1.0 - variance * variance / d as f64).powf(-(d as f64) / 2.0);
        let scores = ScoreModel::Gaussian { variance, shift };
        Ok(ImbalanceSpec { n_i, n_t, c_i: c * shift.exp(), c_t: c, d, scores, samples, seed })
    }

    /// Constant scores; the expectations are the weights themselves.
    pub fn constant(n_i: usize, n_t: usize, tabular: f64, non_tabular: f64) -> Self {
        ImbalanceSpec {
            n_i,
            n_t,
            c_i: non_tabular.exp(),
            c_t: tabular.exp(),
            d: 1,
            scores: ScoreModel::Constant { tabular, non_tabular },
            samples: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_i + self.n_t == 0 {
            return Err(Error::Invalid("attention mass needs at least one token".into()));
        }
        if !(self.c_i > 0.0 && self.c_t > 0.0 && self.c_i.is_finite() && self.c_t.is_finite()) {
            return Err(Error::Invalid(format!(
                "per-token expectations {} and {} must be positive",
                self.c_i, self.c_t
            )));
        }
        if self.d == 0 {
            return Err(Error::Invalid("key dimension must be positive".into()));
        }
        if let ScoreModel::Gaussian { variance, shift } = self.scores {
            if !(variance >= 0.0 && variance.is_finite() && shift.is_finite()) {
                return Err(Error::Invalid("score variance must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }
}

fn mass(n_i: usize, n_t: usize, c_i: f64, c_t: f64) -> f64 {
    let a = n_i as f64 * c_i;
    a / (a + n_t as f64 * c_t)
}

/// First-order prediction of the non-tabular attention mass.
pub fn expected_attention_mass(spec: &ImbalanceSpec) -> Result<f64> {
    spec.validate()?;
    Ok(mass(spec.n_i, spec.n_t, spec.c_i, spec.c_t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMassReport {
    /// Prediction from the spec's `c_I`, `c_T`.
    pub predicted_mass: f64,
    /// Prediction from `c` values estimated on the same draws.
    pub plugin_mass: f64,
    pub empirical_mass: f64,
    pub standard_error: f64,
    pub samples: usize,
    /// `(non_tabular, tabular)` empirical masses; they sum to 1.
    pub partition: [f64; 2],
}

/// Monte Carlo estimate of the non-tabular mass. Draw `s` uses
/// `Rng::derive(seed, s)`.
pub fn monte_carlo_attention_mass(spec: &ImbalanceSpec) -> Result<AttentionMassReport> {
    spec.validate()?;
    if spec.samples == 0 {
        return Err(Error::Invalid("Monte Carlo needs at least one draw".into()));
    }
    let predicted_mass = mass(spec.n_i, spec.n_t, spec.c_i, spec.c_t);
    let (n_i, n_t, d) = (spec.n_i, spec.n_t, spec.d);
    let n = n_i + n_t;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let (mut w_i, mut w_t) = (0.0, 0.0);
    let mut scores = vec![0.0; n];
    let mut q = vec![0.0; d];
    for draw in 0..spec.samples {
        match spec.scores {
            ScoreModel::Constant { tabular, non_tabular } => {
                scores[..n_i].fill(non_tabular);
                scores[n_i..].fill(tabular);
            }
            ScoreModel::Gaussian { variance, shift } => {
                let mut rng = Rng::derive(spec.seed, draw as u64);
                let sd = variance.sqrt();
                q.iter_mut().for_each(|v| *v = sd * rng.normal());
                let scale = 1.0 / (d as f64).sqrt();
                for (j, s) in scores.iter_mut().enumerate() {
                    let dot: f64 = q.iter().map(|&qv| qv * sd * rng.normal()).sum();
                    *s = dot * scale + if j < n_i { shift } else { 0.0 };
                }
            }
        }
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut a, mut b) = (0.0, 0.0);
        for (j, &s) in scores.iter().enumerate() {
            let w = (s - m).exp();
            if j < n_i {
                a += w;
                w_i += s.exp();
            } else {
                b += w;
                w_t += s.exp();
            }
        }
        let a_i = a / (a + b);
        sum += a_i;
        sum_sq += a_i * a_i;
    }
    let k = spec.samples as f64;
    let empirical_mass = sum / k;
    let var =
        if spec.samples > 1 { ((sum_sq - k * empirical_mass * empirical_mass) / (k - 1.0)).max(0.0) } else { 0.0 };
    let plugin_mass = match (n_i, n_t) {
        (0, _) => 0.0,
        (_, 0) => 1.0,
        _ => mass(n_i, n_t, w_i / (k * n_i as f64), w_t / (k * n_t as f64)),
    };
    Ok(AttentionMassReport {
        predicted_mass,
        plugin_mass,
        empirical_mass,
        standard_error: (var / k).sqrt(),
        samples: spec.samples,
        partition: [empirical_mass, 1.0 - empirical_mass],
    })
}

/// A projector family swept over token counts. With CAP every `(N, K)` pair
/// with `K ≤ N` is a cell; without it `k_values` is ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepVariant {
    pub name: String,
    pub projector: ProjectorConfig,
    pub n_values: Vec<usize>,
    #[serde(default)]
    pub k_values: Vec<usize>,
}

impl SweepVariant {
    pub fn cells(&self) -> Vec<ProjectorConfig> {
        let mut out = Vec::new();
        for &n in &self.n_values {
            if self.projector.cap {
                for &k in self.k_values.iter().filter(|&&k| k <= n) {
                    out.push(ProjectorConfig { n, k, ..self.projector.clone() });
                }
            } else {
                out.push(ProjectorConfig { n, ..self.projector.clone() });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub task: SyntheticTask,
    #[serde(default)]
    pub data_seed: u64,
    pub variants: Vec<SweepVariant>,
    #[serde(default)]
    pub finetune: FineTuneConfig,
    /// Backbone block whose feature-stage attention is probed.
    #[serde(default)]
    pub probe_block: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub n: usize,
    /// `None` without CAP.
    pub k: Option<usize>,
    pub seed: u64,
    pub accuracy: f64,
    /// Feature-stage mass on tabular tokens, renormalized over feature cells.
    pub tabular_mass: f64,
    pub nontabular_mass: f64,
}

/// Tabular and non-tabular shares of feature-stage attention at `block`,
/// measured on the test rows with the full train split as context.
pub fn probe_modality_mass(model: &Mmpfn, data: &Dataset, block: usize) -> Result<(f64, f64)> {
    if block >= model.cfg.blocks {
        return Err(Error::Invalid(format!("probe block {block} but the backbone has {}", model.cfg.blocks)));
    }
    let mut s = Session::inference(&model.store);
    let cap = Capture { feature_weights: true, ..Default::default() };
    let out = model.forward(&mut s, data, &data.train, &data.test, cap)?;
    let w = s.value(out.backbone.feature_weights[block]);
    let m = attention_mass_probe(w, &out.partition)?;
    let total: f64 = m.masses.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::NonFinite("feature cells received no attention".into()));
    }
    let tab: f64 = m.names.iter().zip(&m.masses).filter(|(n, _)| n.as_str() == "tabular").map(|(_, v)| v).sum();
    Ok((tab / total, 1.0 - tab / total))
}

/// Runs every `(variant, N, K, seed)` cell. Each cell fine-tunes a copy of
/// `base` on the same dataset; output order is fixed by the grid.
pub fn imbalance_sweep(base: &Mmpfn, cfg: &SweepConfig, jobs: usize) -> Result<Vec<SweepRow>> {
    if cfg.variants.is_empty() {
        return Err(Error::Invalid("sweep grid is empty".into()));
    }
    cfg.finetune.validate()?;
    let modality = match cfg.task.modality_names().as_slice() {
        [one] => one.to_string(),
        names => return Err(Error::Invalid(format!("sweep needs a single-modality task, got {names:?}"))),
    };
    let mut cells = Vec::new();
    for v in &cfg.variants {
        let grid = v.cells();
        if grid.is_empty() {
            return Err(Error::Invalid(format!("variant {} has no cells", v.name)));
        }
        for p in grid {
            p.validate()?;
            for &seed in &cfg.finetune.seeds {
                cells.push((v.name.clone(), p.clone(), seed));
            }
        }
    }
    let data = cfg.task.generate(cfg.data_seed)?;
    let results = parallel_map(&cells, jobs, |(name, p, seed)| -> Result<SweepRow> {
        let m = ModalityConfig { name: modality.clone(), projector: p.clone() };
        let (model, run) = run_seed(base, &data, &[m], &cfg.finetune, *seed)?;
        let (tabular_mass, nontabular_mass) = probe_modality_mass(&model, &data, cfg.probe_block)?;
        Ok(SweepRow {
            variant: name.clone(),
            n: p.n,
            k: p.cap.then_some(p.k),
            seed: *seed,
            accuracy: run.accuracy,
            tabular_mass,
            nontabular_mass,
        })
    });
    results.into_iter().collect()
}

pub const SWEEP_CSV_HEADER: &str = "variant,N,K,seed,accuracy,tabular_mass,nontabular_mass";

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{},{},{},{},{}", r.variant, r.n, k, r.seed, r.accuracy, r.tabular_mass, r.nontabular_mass)?;
    }
    f.flush()?;
    Ok(())
}
