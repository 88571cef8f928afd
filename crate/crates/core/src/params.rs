//! Named parameter storage, deterministic initialization, tape binding and
//! the `MMPN` checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `MMPN` |
//! | 4     | format version, `u32` (currently 1) |
//! | 8     | header length `L`, `u64` |
//! | L     | UTF-8 JSON header: `{"tensors":[{"name","group","shape","offset"}...]}` |
//! | ...   | raw `f64` payload; `offset` is relative to the payload start |

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMPN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which part of the model a parameter belongs to. Drives freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Decoder,
    Projector,
    Encoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, `fan_in` = last axis.
    ScaledUniform,
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub seed: u64,
}

/// 64-bit FNV-1a, used to key per-parameter init streams by name.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn init_params(spec: InitSpec, shape: &[usize]) -> Tensor {
    match spec.scheme {
        InitScheme::Zeros => Tensor::zeros(shape),
        InitScheme::ScaledUniform => {
            let fan_in = shape.last().copied().unwrap_or(1).max(1);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = Rng::new(spec.seed);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("consistent shape")
        }
    }
}

/// Hands out deterministic per-parameter init seeds.
#[derive(Clone, Copy, Debug)]
pub struct Initializer {
    pub seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { seed }
    }

    pub fn spec(&self, name: &str) -> InitSpec {
        InitSpec { scheme: InitScheme::ScaledUniform, seed: Rng::derive(self.seed, fnv1a(name.as_bytes())).next_u64() }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, group, tensor });
        ParamId(self.entries.len() - 1)
    }

    /// Registers a scaled-uniform parameter seeded from its name.
    pub fn add_init(
        &mut self,
        init: &Initializer,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
    ) -> ParamId {
        let name = name.into();
        let t = init_params(init.spec(&name), shape);
        self.add(name, group, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Concatenated value bytes of every parameter in `group`, in order.
    pub fn group_bytes(&self, group: ParamGroup) -> Vec<u8> {
        self.entries.iter().filter(|e| e.group == group).flat_map(|e| e.tensor.to_le_bytes()).collect()
    }

    /// Copies values for every parameter of `self` found by name in `other`.
    /// Shape disagreements are rejected before anything is copied; returns
    /// the number of parameters overwritten.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut plan = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if let Some(j) = other.find(&e.name) {
                let src = &other.entries[j.0].tensor;
                if src.shape() != e.tensor.shape() {
                    return Err(Error::Data(format!(
                        "checkpoint parameter {} has shape {:?}, model expects {:?}",
                        e.name,
                        src.shape(),
                        e.tensor.shape()
                    )));
                }
                plan.push((i, j.0));
            }
        }
        for &(i, j) in &plan {
            self.entries[i].tensor = other.entries[j].tensor.clone();
        }
        Ok(plan.len())
    }

    /// Like [`load_matching`](Self::load_matching) but every parameter in the
    /// listed groups must be present in `other`.
    pub fn load_groups(&mut self, other: &ParamStore, groups: &[ParamGroup]) -> Result<usize> {
        for e in self.entries.iter().filter(|e| groups.contains(&e.group)) {
            if other.find(&e.name).is_none() {
                return Err(Error::Data(format!("checkpoint is missing parameter {}", e.name)));
            }
        }
        self.load_matching(other)
    }

    /// Replaces every value from `other`, which must hold exactly the same
    /// names, groups and shapes.
    pub fn load_exact(&mut self, other: &ParamStore) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} parameters, model has {}",
                other.entries.len(),
                self.entries.len()
            )));
        }
        for e in &self.entries {
            match other.find(&e.name) {
                Some(j) if other.entries[j.0].group == e.group => {}
                Some(_) => return Err(Error::Data(format!("checkpoint parameter {} has a different group", e.name))),
                None => return Err(Error::Data(format!("checkpoint is missing parameter {}", e.name))),
            }
        }
        self.load_matching(other).map(|_| ())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors: Vec<HeaderEntry> = self
            .entries
            .iter()
            .map(|e| {
                let h = HeaderEntry { name: e.name.clone(), group: e.group, shape: e.tensor.shape().to_vec(), offset };
                offset += 8 * e.tensor.numel() as u64;
                h
            })
            .collect();
        let header = serde_json::to_vec(&Header { tensors }).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.entries {
            out.extend_from_slice(&e.tensor.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: String| Error::Format { offset: offset as u64, message };
        if bytes.len() < 16 {
            return Err(fmt(bytes.len(), "truncated checkpoint preamble".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fmt(0, format!("bad magic {:?}, expected MMPN", String::from_utf8_lossy(&bytes[..4]))));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fmt(4, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt(8, format!("header length {hlen} exceeds file size {}", bytes.len())))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| fmt(16, format!("bad header JSON: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut store = ParamStore::new();
        let mut expected = 0u64;
        for h in header.tensors {
            if h.offset != expected {
                return Err(fmt(16, format!("tensor {} offset {} is not contiguous", h.name, h.offset)));
            }
            let n: usize = h.shape.iter().product();
            let start = h.offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(fmt(payload_start + payload.len(), format!("payload truncated inside tensor {}", h.name)));
            }
            let data = payload[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if store.find(&h.name).is_some() {
                return Err(fmt(16, format!("duplicate tensor {}", h.name)));
            }
            store.add(h.name, h.group, Tensor::new(h.shape, data)?);
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return Err(fmt(payload_start + expected as usize, "trailing bytes after payload".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    offset: u64,
}

/// A forward pass in progress: a tape plus lazily bound parameters.
///
/// Parameters whose group is not trainable are bound as constants, so they
/// never carry gradients.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: Vec<ParamGroup>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, trainable: &[ParamGroup]) -> Self {
        Session { tape: Tape::new(), store, bound: vec![None; store.len()], trainable: trainable.to_vec() }
    }

    /// A session with every parameter frozen.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, &[])
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let v = self.tape.leaf(e.tensor.clone(), self.trainable.contains(&e.group));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Runs backward and returns one optional gradient per store entry.
    /// Entries that were never bound or are frozen get `None`.
    pub fn param_grads(&mut self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let grads = self.tape.backward(loss)?;
        Ok(self.bound.iter().map(|b| b.and_then(|v| grads.get(v).cloned())).collect())
    }
}

/// Outcome of [`param_grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    /// Largest `|analytic − numeric| / (|numeric| + floor)` over checked coordinates.
    pub worst: f64,
    /// Parameter and flat index where `worst` occurred.
    pub worst_at: (String, usize),
    pub checked: usize,
}

/// Central finite differences against backpropagated gradients for every
/// parameter in `groups`. At most `per_tensor` evenly spaced coordinates are
/// checked per tensor. A parameter in `groups` that receives no gradient is
/// an error, since the check would otherwise pass vacuously.
pub fn param_grad_check<F>(
    store: &ParamStore,
    groups: &[ParamGroup],
    loss: F,
    h: f64,
    floor: f64,
    per_tensor: usize,
) -> Result<ParamCheck>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let analytic = {
        let mut s = Session::new(store, groups);
        let l = loss(&mut s)?;
        s.param_grads(l)?
    };
    let eval = |st: &ParamStore| -> Result<f64> {
        let mut s = Session::inference(st);
        let l = loss(&mut s)?;
        Ok(s.value(l).item())
    };
    let mut work = store.clone();
    let mut out = ParamCheck { worst: 0.0, worst_at: (String::new(), 0), checked: 0 };
    for (i, e) in store.entries.iter().enumerate() {
        if !groups.contains(&e.group) {
            continue;
        }
        let g =
            analytic[i].as_ref().ok_or_else(|| Error::Invalid(format!("parameter {} received no gradient", e.name)))?;
        let n = e.tensor.numel();
        let step = n.div_ceil(per_tensor.max(1)).max(1);
        for k in (0..n).step_by(step) {
            let orig = e.tensor.data()[k];
            work.entries[i].tensor.data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work.entries[i].tensor.data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work.entries[i].tensor.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (g.data()[k] - numeric).abs() / (numeric.abs() + floor);
            if out.checked == 0 || err > out.worst {
                out.worst = err;
                out.worst_at = (e.name.clone(), k);
            }
            out.checked += 1;
        }
    }
    Ok(out)
}
