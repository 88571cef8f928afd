//! Datasets: a raw table, labels, aligned embedding sets and a train/test
//! split. Includes CSV loading and the synthetic multimodal tasks.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{synthetic_embedding_provider, validate_specs, Cell, ColumnKind, ColumnSpec, EmbeddingSet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub specs: Vec<ColumnSpec>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    /// All-numeric table from an `[n, f]` matrix.
    pub fn from_matrix(x: &Tensor) -> Result<Self> {
        if x.rank() != 2 {
            return Err(Error::Invalid(format!("expected an [n, f] matrix, got {:?}", x.shape())));
        }
        let (n, f) = (x.shape()[0], x.shape()[1]);
        Ok(Table {
            specs: (0..f).map(|j| ColumnSpec::numeric(&format!("x{j}"))).collect(),
            rows: (0..n).map(|i| x.row(i).iter().map(|&v| Cell::Num(v)).collect()).collect(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.specs.len()
    }

    pub fn select(&self, indices: &[usize]) -> Vec<Vec<Cell>> {
        indices.iter().map(|&i| self.rows[i].clone()).collect()
    }

    /// Keeps only the listed columns, in the listed order.
    pub fn columns(&self, cols: &[usize]) -> Table {
        Table {
            specs: cols.iter().map(|&c| self.specs[c].clone()).collect(),
            rows: self.rows.iter().map(|r| cols.iter().map(|&c| r[c].clone()).collect()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub table: Table,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub modalities: Vec<EmbeddingSet>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        validate_specs(&self.table.specs)?;
        let n = self.table.n_rows();
        if self.labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} rows", self.labels.len())));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::Data(format!("label {bad} out of range for {} classes", self.n_classes)));
        }
        let mut seen = BTreeSet::new();
        for m in &self.modalities {
            if !seen.insert(m.modality.as_str()) {
                return Err(Error::Data(format!("duplicate modality {}", m.modality)));
            }
            if m.count() != n {
                return Err(Error::Data(format!("modality {} has {} rows, table has {n}", m.modality, m.count())));
            }
        }
        if let Some(&i) = self.train.iter().chain(&self.test).find(|&&i| i >= n) {
            return Err(Error::Data(format!("split index {i} out of range for {n} rows")));
        }
        if self.train.is_empty() {
            return Err(Error::Data("empty train split".into()));
        }
        Ok(())
    }

    pub fn modality(&self, name: &str) -> Result<&EmbeddingSet> {
        self.modalities
            .iter()
            .find(|m| m.modality == name)
            .ok_or_else(|| Error::Data(format!("dataset has no modality named {name}")))
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Reads a CSV with a header row. Columns are typed by `specs` (never
/// inferred); empty cells are missing. Label strings map to class indices
/// in sorted order. Returns the table, labels and class names.
pub fn load_csv(path: &Path, specs: &[ColumnSpec], label_column: &str) -> Result<(Table, Vec<usize>, Vec<String>)> {
    validate_specs(specs)?;
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: no column named {name}", path.display())))
    };
    let label_at = find(label_column)?;
    let cols = specs.iter().map(|s| find(&s.name)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut row = Vec::with_capacity(specs.len());
        for (spec, &c) in specs.iter().zip(&cols) {
            let v = rec.get(c).unwrap_or("").trim();
            row.push(if v.is_empty() {
                Cell::Missing
            } else {
                match spec.kind {
                    ColumnKind::Numeric => Cell::Num(
                        v.parse::<f64>()
                            .map_err(|_| Error::Data(format!("row {i} column {}: {v:?} is not a number", spec.name)))?,
                    ),
                    ColumnKind::Categorical { .. } => Cell::Cat(v.to_string()),
                }
            });
        }
        let label = rec.get(label_at).unwrap_or("").trim();
        if label.is_empty() {
            return Err(Error::Data(format!("row {i} has no label")));
        }
        raw_labels.push(label.to_string());
        rows.push(row);
    }
    let classes: Vec<String> = raw_labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let labels = raw_labels.iter().map(|l| classes.binary_search(l).expect("present")).collect();
    Ok((Table { specs: specs.to_vec(), rows }, labels, classes))
}

/// Synthetic multimodal tasks used by the reference experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticTask {
    /// One tabular bit plus a noise column; an image latent bit; label is
    /// their XOR.
    Xor { n_train: usize, n_test: usize, embed_dim: usize, noise: f64 },
    /// `tabular_width` Gaussian columns and a Gaussian image latent;
    /// label `1[s_T + s_I > 0]` with each score a normalized sum.
    Imbalance { n_train: usize, n_test: usize, tabular_width: usize, latent_dim: usize, embed_dim: usize, noise: f64 },
    /// Independent Gaussian signals in the tabular, image and text views;
    /// label `1[z_T + z_I + text_weight·z_t > 0]`.
    ThreeSignal { n_train: usize, n_test: usize, embed_dim: usize, image_noise: f64, text_noise: f64, text_weight: f64 },
}

fn bit(rng: &mut Rng) -> f64 {
    if rng.bernoulli(0.5) {
        1.0
    } else {
        0.0
    }
}

fn column(data: Vec<f64>, n: usize) -> Tensor {
    let l = data.len() / n.max(1);
    Tensor::new(vec![n, l], data).expect("consistent")
}

impl SyntheticTask {
    pub fn sizes(&self) -> (usize, usize) {
        match *self {
            SyntheticTask::Xor { n_train, n_test, .. }
            | SyntheticTask::Imbalance { n_train, n_test, .. }
            | SyntheticTask::ThreeSignal { n_train, n_test, .. } => (n_train, n_test),
        }
    }

    pub fn modality_names(&self) -> Vec<&'static str> {
        match self {
            SyntheticTask::ThreeSignal { .. } => vec!["image", "text"],
            _ => vec!["image"],
        }
    }

    /// Draws a dataset; the first `n_train` rows are the train split.
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        let (n_train, n_test) = self.sizes();
        if n_train < 2 {
            return Err(Error::Invalid("synthetic task needs at least 2 train rows".into()));
        }
        let n = n_train + n_test;
        let mut rng = Rng::derive(seed, 0);
        let (x, labels, modalities) = match *self {
            SyntheticTask::Xor { embed_dim, noise, .. } => {
                let mut x = Vec::with_capacity(2 * n);
                let mut lat = Vec::with_capacity(n);
                let mut labels = Vec::with_capacity(n);
                for _ in 0..n {
                    let bt = bit(&mut rng);
                    let bi = bit(&mut rng);
                    x.extend([bt, rng.normal()]);
                    lat.push(2.0 * bi - 1.0);
                    labels.push((bt != bi) as usize);
                }
                let img = synthetic_embedding_provider("image", &column(lat, n), embed_dim, noise, seed ^ 0x1)?;
                (column(x, n), labels, vec![img])
            }
            SyntheticTask::Imbalance { tabular_width, latent_dim, embed_dim, noise, .. } => {
                let mut x = Vec::with_capacity(tabular_width * n);
                let mut lat = Vec::with_capacity(latent_dim * n);
                let mut labels = Vec::with_capacity(n);
                for _ in 0..n {
                    let row: Vec<f64> = (0..tabular_width).map(|_| rng.normal()).collect();
                    let z: Vec<f64> = (0..latent_dim).map(|_| rng.normal()).collect();
                    let st = row.iter().sum::<f64>() / (tabular_width.max(1) as f64).sqrt();
                    let si = z.iter().sum::<f64>() / (latent_dim.max(1) as f64).sqrt();
                    labels.push((st + si > 0.0) as usize);
                    x.extend(row);
                    lat.extend(z);
                }
                let img = synthetic_embedding_provider("image", &column(lat, n), embed_dim, noise, seed ^ 0x1)?;
                (column(x, n), labels, vec![img])
            }
            SyntheticTask::ThreeSignal { embed_dim, image_noise, text_noise, text_weight, .. } => {
                let mut x = Vec::with_capacity(2 * n);
                let (mut li, mut lt) = (Vec::with_capacity(n), Vec::with_capacity(n));
                let mut labels = Vec::with_capacity(n);
                for _ in 0..n {
                    let (zt, zi, ztx) = (rng.normal(), rng.normal(), rng.normal());
                    labels.push((zt + zi + text_weight * ztx > 0.0) as usize);
                    x.extend([zt, rng.normal()]);
                    li.push(zi);
                    lt.push(ztx);
                }
                let img = synthetic_embedding_provider("image", &column(li, n), embed_dim, image_noise, seed ^ 0x1)?;
                let txt = synthetic_embedding_provider("text", &column(lt, n), embed_dim, text_noise, seed ^ 0x2)?;
                (column(x, n), labels, vec![img, txt])
            }
        };
        let ds = Dataset {
            table: Table::from_matrix(&x)?,
            labels,
            n_classes: 2,
            modalities,
            train: (0..n_train).collect(),
            test: (n_train..n).collect(),
        };
        ds.validate()?;
        Ok(ds)
    }
}
