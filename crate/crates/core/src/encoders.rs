//! Per-modality inputs: the frozen tabular cell encoder, the `MMPE`
//! embedding file format and a synthetic embedding generator.
//!
//! `MMPE` layout (integers little-endian):
//!
//! | field        | type                        |
//! |--------------|-----------------------------|
//! | magic        | `b"MMPE"`                   |
//! | version      | `u32` (1)                   |
//! | dtype        | `u8` (0 = `f32` LE)         |
//! | dim          | `u32`                       |
//! | count        | `u64`                       |
//! | modality     | `u16` length + UTF-8 bytes  |
//! | fingerprint  | `u16` length + UTF-8 bytes  |
//! | payload      | `count × dim` `f32` values  |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Builder;
use crate::params::{init_params, Initializer, ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MMPE";
pub const EMBEDDING_VERSION: u32 = 1;
pub const DTYPE_F32_LE: u8 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ColumnKind {
    Numeric,
    Categorical { vocabulary: Vec<String> },
}

/// Serialized flat, e.g. `{"name": "age", "kind": "numeric"}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawColumnSpec")]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum KindTag {
    Numeric,
    Categorical,
}

/// Strict flat form; serde cannot combine `flatten` with unknown-key
/// rejection.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawColumnSpec {
    name: String,
    kind: KindTag,
    vocabulary: Option<Vec<String>>,
}

impl TryFrom<RawColumnSpec> for ColumnSpec {
    type Error = String;

    fn try_from(r: RawColumnSpec) -> std::result::Result<Self, String> {
        let kind = match (r.kind, r.vocabulary) {
            (KindTag::Numeric, None) => ColumnKind::Numeric,
            (KindTag::Numeric, Some(_)) => return Err(format!("numeric column {} takes no vocabulary", r.name)),
            (KindTag::Categorical, Some(vocabulary)) => ColumnKind::Categorical { vocabulary },
            (KindTag::Categorical, None) => return Err(format!("categorical column {} needs a vocabulary", r.name)),
        };
        Ok(ColumnSpec { name: r.name, kind })
    }
}

impl ColumnSpec {
    pub fn numeric(name: &str) -> Self {
        ColumnSpec { name: name.into(), kind: ColumnKind::Numeric }
    }

    pub fn categorical(name: &str, vocabulary: &[&str]) -> Self {
        ColumnSpec {
            name: name.into(),
            kind: ColumnKind::Categorical { vocabulary: vocabulary.iter().map(|s| s.to_string()).collect() },
        }
    }
}

pub fn validate_specs(specs: &[ColumnSpec]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for s in specs {
        if !seen.insert(s.name.as_str()) {
            return Err(Error::Data(format!("duplicate column name {}", s.name)));
        }
        if let ColumnKind::Categorical { vocabulary } = &s.kind {
            if vocabulary.is_empty() {
                return Err(Error::Data(format!("categorical column {} has an empty vocabulary", s.name)));
            }
        }
    }
    Ok(())
}

/// One raw table cell.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Cat(String),
    Missing,
}

/// Frozen tabular encoder: one token per cell, parameters shared across
/// columns so the token map does not depend on column order.
///
/// * numeric: `z·w + b` with `z` standardized by train-split statistics
/// * categorical: row `i` of a shared table for vocabulary index `i`; indices
///   at or beyond `vocab_cap` fall back to the missing token
/// * missing: a dedicated token
#[derive(Clone, Debug)]
pub struct TabularEncoder {
    pub d: usize,
    pub vocab_cap: usize,
    pub num_w: ParamId,
    pub num_b: ParamId,
    pub cat_table: ParamId,
    pub missing: ParamId,
}

impl TabularEncoder {
    pub fn new(store: &mut ParamStore, init: Initializer, d: usize, vocab_cap: usize) -> Self {
        let mut b = Builder::new(store, init, ParamGroup::Encoder, "encoder.tabular");
        let num_w = b.uniform("num_w", &[d, 1]);
        let num_b = b.uniform("num_b", &[d, 1]);
        let missing = b.uniform("missing", &[d, 1]);
        let name = b.name("cat_table");
        let cap = vocab_cap.max(1);
        // Unit fan-in keeps categorical tokens on the numeric tokens' scale.
        let table = init_params(init.spec(&name), &[cap * d, 1]).reshape(vec![cap, d]).expect("consistent");
        let cat_table = store.add(name, ParamGroup::Encoder, table);
        TabularEncoder { d, vocab_cap: cap, num_w, num_b, cat_table, missing }
    }

    /// Encodes `rows` (each conforming to `specs`) into `[n, f, d]`. Only the
    /// first `n_train` rows contribute statistics.
    pub fn encode(
        &self,
        store: &ParamStore,
        specs: &[ColumnSpec],
        rows: &[Vec<Cell>],
        n_train: usize,
    ) -> Result<Tensor> {
        validate_specs(specs)?;
        let (n, f, d) = (rows.len(), specs.len(), self.d);
        if n_train > n {
            return Err(Error::Data(format!("{n_train} train rows requested from {n}")));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != f {
                return Err(Error::Data(format!("row {i} has {} cells, expected {f}", r.len())));
            }
        }
        let w = store.get(self.num_w).data();
        let b = store.get(self.num_b).data();
        let table = store.get(self.cat_table).data();
        let missing = store.get(self.missing).data();
        let mut out = vec![0.0; n * f * d];
        for (j, spec) in specs.iter().enumerate() {
            match &spec.kind {
                ColumnKind::Numeric => {
                    let vals: Vec<Option<f64>> = rows
                        .iter()
                        .enumerate()
                        .map(|(i, r)| match &r[j] {
                            Cell::Num(v) if v.is_finite() => Ok(Some(*v)),
                            Cell::Num(_) | Cell::Missing => Ok(None),
                            Cell::Cat(s) => {
                                Err(Error::Data(format!("row {i} column {}: expected a number, got {s:?}", spec.name)))
                            }
                        })
                        .collect::<Result<_>>()?;
                    let (mean, std) = train_stats(vals[..n_train].iter().flatten().copied());
                    for (i, v) in vals.iter().enumerate() {
                        let cell = &mut out[(i * f + j) * d..(i * f + j + 1) * d];
                        match v {
                            Some(x) => {
                                let z = standardize(*x, mean, std);
                                for k in 0..d {
                                    cell[k] = z * w[k] + b[k];
                                }
                            }
                            None => cell.copy_from_slice(missing),
                        }
                    }
                }
                ColumnKind::Categorical { vocabulary } => {
                    for (i, r) in rows.iter().enumerate() {
                        let cell = &mut out[(i * f + j) * d..(i * f + j + 1) * d];
                        let idx = match &r[j] {
                            Cell::Missing => None,
                            Cell::Cat(s) => match vocabulary.iter().position(|v| v == s) {
                                Some(k) => Some(k),
                                None if i < n_train => {
                                    return Err(Error::Data(format!(
                                        "row {i} column {}: category {s:?} is not in the vocabulary",
                                        spec.name
                                    )))
                                }
                                None => {
                                    log::warn!("row {i} column {}: unseen category {s:?} mapped to missing", spec.name);
                                    None
                                }
                            },
                            Cell::Num(v) => {
                                return Err(Error::Data(format!(
                                    "row {i} column {}: expected a category, got {v}",
                                    spec.name
                                )))
                            }
                        };
                        match idx {
                            Some(k) if k < self.vocab_cap => cell.copy_from_slice(&table[k * d..(k + 1) * d]),
                            _ => cell.copy_from_slice(missing),
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n, f, d], out)
    }

    /// Encodes an all-numeric `[n, f]` matrix; non-finite entries are missing.
    pub fn encode_matrix(&self, store: &ParamStore, x: &Tensor, n_train: usize) -> Result<Tensor> {
        if x.rank() != 2 {
            return Err(Error::Invalid(format!("expected an [n, f] matrix, got {:?}", x.shape())));
        }
        let (n, f) = (x.shape()[0], x.shape()[1]);
        let specs: Vec<ColumnSpec> = (0..f).map(|j| ColumnSpec::numeric(&format!("x{j}"))).collect();
        let rows: Vec<Vec<Cell>> = (0..n).map(|i| x.row(i).iter().map(|&v| Cell::Num(v)).collect()).collect();
        self.encode(store, &specs, &rows, n_train)
    }
}

/// Mean and population standard deviation.
fn train_stats(vals: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = vals.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = vals.clone().sum::<f64>() / n as f64;
    let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Zero-variance columns are centred only.
fn standardize(x: f64, mean: f64, std: f64) -> f64 {
    if std > 1e-12 {
        (x - mean) / std
    } else {
        x - mean
    }
}

/// Per-sample vectors for one non-tabular modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub modality: String,
    pub dim: usize,
    /// `[count, dim]`.
    pub vectors: Tensor,
    pub fingerprint: String,
}

impl EmbeddingSet {
    pub fn count(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn new(modality: &str, fingerprint: &str, vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 || vectors.shape()[1] == 0 {
            return Err(Error::Data(format!("embedding vectors must be [count, dim>0], got {:?}", vectors.shape())));
        }
        if !vectors.is_finite() {
            return Err(Error::Data(format!("embedding set {modality} contains non-finite values")));
        }
        Ok(EmbeddingSet {
            modality: modality.into(),
            dim: vectors.shape()[1],
            vectors,
            fingerprint: fingerprint.into(),
        })
    }

    /// Rows `indices` in order.
    pub fn select(&self, indices: &[usize]) -> EmbeddingSet {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.vectors.row(i));
        }
        EmbeddingSet { vectors: Tensor::new(vec![indices.len(), self.dim], data).expect("consistent"), ..self.clone() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let name = self.modality.as_bytes();
        let fp = self.fingerprint.as_bytes();
        for (what, s) in [("modality name", name), ("fingerprint", fp)] {
            if s.len() > u16::MAX as usize {
                return Err(Error::Data(format!("{what} longer than {} bytes", u16::MAX)));
            }
        }
        let mut out = Vec::with_capacity(27 + name.len() + fp.len() + 4 * self.vectors.numel());
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.push(DTYPE_F32_LE);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.count() as u64).to_le_bytes());
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(fp.len() as u16).to_le_bytes());
        out.extend_from_slice(fp);
        for &v in self.vectors.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != EMBEDDING_MAGIC {
            return Err(r.err(0, format!("bad magic {:?}, expected MMPE", String::from_utf8_lossy(magic))));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != EMBEDDING_VERSION {
            return Err(r.err(4, format!("unsupported version {version}")));
        }
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F32_LE {
            return Err(r.err(8, format!("unsupported dtype code {dtype}")));
        }
        let dim = u32::from_le_bytes(r.take(4, "dim")?.try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(r.err(9, "dim must be positive".into()));
        }
        let count = u64::from_le_bytes(r.take(8, "count")?.try_into().unwrap());
        let modality = r.string("modality name")?;
        let fingerprint = r.string("fingerprint")?;
        let start = r.pos;
        let want = count
            .checked_mul(dim as u64)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| r.err(13, "count × dim overflows".into()))?;
        let have = (bytes.len() - start) as u64;
        if have != want {
            return Err(
                r.err(bytes.len(), format!("payload is {have} bytes, header implies {want} ({count} × {dim} × 4)"))
            );
        }
        let mut data = Vec::with_capacity((count as usize) * dim);
        for (i, c) in bytes[start..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(r.err(start + 4 * i, format!("non-finite value {v}")));
            }
            data.push(v as f64);
        }
        Ok(EmbeddingSet { modality, dim, vectors: Tensor::new(vec![count as usize, dim], data)?, fingerprint })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn load_embedding_file(path: &Path) -> Result<EmbeddingSet> {
    EmbeddingSet::load(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, message: String) -> Error {
        Error::Format { offset: offset as u64, message }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(self.bytes.len(), format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let len = u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()) as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err(at + 2, format!("{what} is not UTF-8")))
    }
}

/// Test double for a frozen foundation encoder.
///
/// Each latent row `z ∈ R^L` maps to `W z + 0.5·tanh(V z + c) + m + σ·ε`
/// with `W, V ∈ R^{dim×L}`, `c, m ∈ R^dim` fixed by `seed` and `ε`
/// standard normal. `W` has full column rank almost surely when `dim ≥ L`, so
/// the noiseless map is injective.
pub fn synthetic_embedding_provider(
    modality: &str,
    latent: &Tensor,
    dim: usize,
    noise: f64,
    seed: u64,
) -> Result<EmbeddingSet> {
    if dim == 0 {
        return Err(Error::Invalid("embedding dim must be positive".into()));
    }
    if latent.rank() != 2 {
        return Err(Error::Invalid(format!("latent must be [n, L], got {:?}", latent.shape())));
    }
    let (n, l) = (latent.shape()[0], latent.shape()[1]);
    let mut map = Rng::derive(seed, 0);
    let scale = 1.0 / (l.max(1) as f64).sqrt();
    let w: Vec<f64> = (0..dim * l).map(|_| map.normal() * scale).collect();
    let v: Vec<f64> = (0..dim * l).map(|_| map.normal() * scale).collect();
    let c: Vec<f64> = (0..dim).map(|_| map.normal() * 0.5).collect();
    let m: Vec<f64> = (0..dim).map(|_| map.normal()).collect();
    let mut eps = Rng::derive(seed, 1);
    let mut out = Vec::with_capacity(n * dim);
    for i in 0..n {
        let z = latent.row(i);
        for k in 0..dim {
            let (mut lin, mut pre) = (0.0, c[k]);
            for (j, &zj) in z.iter().enumerate() {
                lin += w[k * l + j] * zj;
                pre += v[k * l + j] * zj;
            }
            let e = if noise > 0.0 { noise * eps.normal() } else { 0.0 };
            out.push(lin + 0.5 * pre.tanh() + m[k] + e);
        }
    }
    EmbeddingSet::new(modality, &format!("synthetic:seed={seed}:noise={noise}"), Tensor::new(vec![n, dim], out)?)
}
