//! Modality projectors: turn one `[CLS]` vector per sample into tokens the
//! backbone can read as extra table columns.
//!
//! MGM runs `N` independent heads `e → 2e → 2d` (GELU inside) and gates each
//! head output down to `d` with a GLU. CAP pools the `N` tokens into `K`
//! through learnable queries and a refinement MLP.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Activation, Builder, Linear, Mlp, MultiHeadAttention};
use crate::params::{Initializer, ParamGroup, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    Linear,
    Mlp,
    MultiheadMlp,
    Mgm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorConfig {
    pub variant: ProjectorKind,
    /// Head count `N`; forced to 1 for `linear` and `mlp`.
    pub n: usize,
    pub cap: bool,
    /// Pooled token count `K` when `cap` is on.
    pub k: usize,
    pub cap_heads: usize,
    pub cap_residual: bool,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig { variant: ProjectorKind::Mgm, n: 8, cap: false, k: 8, cap_heads: 1, cap_residual: true }
    }
}

impl ProjectorConfig {
    pub fn heads(&self) -> usize {
        match self.variant {
            ProjectorKind::Linear | ProjectorKind::Mlp => 1,
            ProjectorKind::MultiheadMlp | ProjectorKind::Mgm => self.n,
        }
    }

    /// Tokens this projector contributes per sample.
    pub fn token_count(&self) -> usize {
        if self.cap {
            self.k
        } else {
            self.heads()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads() == 0 {
            return Err(Error::Invalid("projector head count must be positive".into()));
        }
        if self.cap {
            if self.k == 0 || self.cap_heads == 0 {
                return Err(Error::Invalid("CAP needs positive query and head counts".into()));
            }
            if self.heads() < self.k {
                return Err(Error::Invalid(format!(
                    "CAP with K = {} needs at least as many projector heads, got N = {}",
                    self.k,
                    self.heads()
                )));
            }
        }
        Ok(())
    }
}

/// One MGM head: `content(x) ⊙ σ(gate(h))` with `h` the content MLP's
/// hidden activation. This is GLU over a `2d`-wide output layer, split so the
/// content path carries the same parameter names, and hence the same
/// initialization, as the matching multi-head MLP head.
#[derive(Clone, Debug)]
pub struct GatedHead {
    pub content: Mlp,
    pub gate: Linear,
}

#[derive(Clone, Debug)]
enum Heads {
    Linear(Linear),
    Mlps(Vec<Mlp>),
    Gated(Vec<GatedHead>),
}

#[derive(Clone, Debug)]
pub struct Cap {
    pub queries: ParamId,
    pub attn: MultiHeadAttention,
    pub mlp: Mlp,
}

impl Cap {
    pub fn new(b: &mut Builder, d: usize, k: usize, heads: usize, residual: bool) -> Result<Self> {
        let mut s = b.scope("cap");
        Ok(Cap {
            queries: s.uniform("queries", &[k, d]),
            attn: MultiHeadAttention::new(&mut s, "attn", d, heads)?,
            mlp: Mlp::new(&mut s, "mlp", d, 2 * d, d, Activation::Gelu, residual)?,
        })
    }

    /// Cross-attention of the queries over `tokens: [n, N, d]`, before the MLP.
    pub fn attend(&self, s: &mut Session, tokens: Var) -> Result<Var> {
        let sh = s.tape.shape(tokens).to_vec();
        if sh.len() != 3 || sh[1] == 0 {
            return Err(Error::Invalid(format!("CAP needs [n, N>0, d] tokens, got {sh:?}")));
        }
        let q = s.p(self.queries);
        let q = s.tape.repeat_leading(q, sh[0]);
        Ok(self.attn.forward(s, q, tokens, None, false)?.out)
    }

    pub fn forward(&self, s: &mut Session, tokens: Var) -> Result<Var> {
        let pooled = self.attend(s, tokens)?;
        self.mlp.forward(s, pooled)
    }
}

#[derive(Clone, Debug)]
pub struct Projector {
    pub cfg: ProjectorConfig,
    pub encoder_dim: usize,
    pub d: usize,
    heads: Heads,
    pub cap: Option<Cap>,
}

/// Tokens from one projector pass.
pub struct Projected {
    /// `[n, tokens, d]`, fed to the backbone.
    pub tokens: Var,
    /// `[n, N, d]` head outputs before pooling.
    pub heads: Var,
}

impl Projector {
    /// Parameters are named `projector.<modality>.*`.
    pub fn new(
        store: &mut ParamStore,
        init: Initializer,
        modality: &str,
        cfg: &ProjectorConfig,
        encoder_dim: usize,
        d: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if encoder_dim == 0 || d == 0 {
            return Err(Error::Invalid("projector dims must be positive".into()));
        }
        let mut b = Builder::new(store, init, ParamGroup::Projector, &format!("projector.{modality}"));
        let hidden = 2 * encoder_dim;
        let mlp = |b: &mut Builder, i: usize| {
            Mlp::new(b, &format!("head{i}"), encoder_dim, hidden, d, Activation::Gelu, false)
        };
        let heads = match cfg.variant {
            ProjectorKind::Linear => Heads::Linear(Linear::new(&mut b, "linear", encoder_dim, d, true)),
            ProjectorKind::Mlp | ProjectorKind::MultiheadMlp => {
                Heads::Mlps((0..cfg.heads()).map(|i| mlp(&mut b, i)).collect::<Result<_>>()?)
            }
            ProjectorKind::Mgm => Heads::Gated(
                (0..cfg.heads())
                    .map(|i| {
                        let content = mlp(&mut b, i)?;
                        let gate = Linear::new(&mut b.scope(&format!("head{i}")), "gate", hidden, d, true);
                        Ok(GatedHead { content, gate })
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        let cap = if cfg.cap { Some(Cap::new(&mut b, d, cfg.k, cfg.cap_heads, cfg.cap_residual)?) } else { None };
        Ok(Projector { cfg: cfg.clone(), encoder_dim, d, heads, cap })
    }

    /// Per-head MLPs, in head order; for MGM the content paths. Empty for
    /// the linear variant.
    pub fn head_mlps(&self) -> Vec<&Mlp> {
        match &self.heads {
            Heads::Linear(_) => Vec::new(),
            Heads::Mlps(m) => m.iter().collect(),
            Heads::Gated(g) => g.iter().map(|h| &h.content).collect(),
        }
    }

    /// MGM gate layers in head order; empty for other variants.
    pub fn gates(&self) -> Vec<&Linear> {
        match &self.heads {
            Heads::Gated(g) => g.iter().map(|h| &h.gate).collect(),
            _ => Vec::new(),
        }
    }

    /// Head outputs `[n, N, d]` for `cls: [n, encoder_dim]`.
    pub fn head_tokens(&self, s: &mut Session, cls: Var) -> Result<Var> {
        let sh = s.tape.shape(cls).to_vec();
        if sh.len() != 2 || sh[1] != self.encoder_dim {
            return Err(Error::shape("projector input", &sh, &[0, self.encoder_dim]));
        }
        let n = sh[0];
        let outs = match &self.heads {
            Heads::Linear(l) => vec![l.forward(s, cls)?],
            Heads::Mlps(ms) => ms.iter().map(|m| m.forward(s, cls)).collect::<Result<Vec<_>>>()?,
            Heads::Gated(gs) => gs
                .iter()
                .map(|g| {
                    let pre = g.content.fc1.forward(s, cls)?;
                    let h = s.tape.gelu(pre);
                    let content = g.content.fc2.forward(s, h)?;
                    let gate = g.gate.forward(s, h)?;
                    let open = s.tape.sigmoid(gate);
                    s.tape.mul(content, open)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let outs = outs.into_iter().map(|o| s.tape.reshape(o, &[n, 1, self.d])).collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            s.tape.concat(&outs, 1)
        }
    }

    pub fn forward(&self, s: &mut Session, cls: Var) -> Result<Projected> {
        let heads = self.head_tokens(s, cls)?;
        let tokens = match &self.cap {
            Some(cap) => cap.forward(s, heads)?,
            None => heads,
        };
        Ok(Projected { tokens, heads })
    }
}

/// Feature-index sets per modality, tabular first.
pub type Partition = Vec<(String, Vec<usize>)>;

/// Concatenates token tables along the feature axis: tabular first, then
/// modalities in the given order.
pub fn fuse_tokens(s: &mut Session, tabular: Var, modalities: &[(String, Var)]) -> Result<(Var, Partition)> {
    let tsh = s.tape.shape(tabular).to_vec();
    if tsh.len() != 3 {
        return Err(Error::Invalid(format!("tabular tokens must be [n, f, d], got {tsh:?}")));
    }
    let mut parts = vec![tabular];
    let mut partition = vec![("tabular".to_string(), (0..tsh[1]).collect::<Vec<_>>())];
    let mut next = tsh[1];
    for (name, v) in modalities {
        let sh = s.tape.shape(*v).to_vec();
        if sh.len() != 3 || sh[0] != tsh[0] || sh[2] != tsh[2] {
            return Err(Error::Data(format!(
                "modality {name} tokens {sh:?} do not match tabular tokens {tsh:?} in sample count or width"
            )));
        }
        partition.push((name.clone(), (next..next + sh[1]).collect()));
        next += sh[1];
        parts.push(*v);
    }
    let fused = if parts.len() == 1 { tabular } else { s.tape.concat(&parts, 1)? };
    Ok((fused, partition))
}

/// Mean over samples of the mean over head pairs of `1 - |cos|`.
/// `heads` is `[n, N, d]`; a pair involving a zero vector has similarity 0.
pub fn orthogonality_metric(heads: &Tensor) -> Result<f64> {
    let sh = heads.shape();
    if sh.len() != 3 {
        return Err(Error::Invalid(format!("expected [n, N, d] head outputs, got {sh:?}")));
    }
    let (n, h, d) = (sh[0], sh[1], sh[2]);
    if h < 2 {
        return Err(Error::Invalid(format!("orthogonality needs at least 2 heads, got {h}")));
    }
    if n == 0 {
        return Err(Error::Invalid("orthogonality over an empty dataset".into()));
    }
    let data = heads.data();
    let mut total = 0.0;
    for i in 0..n {
        let vec = |j: usize| &data[(i * h + j) * d..(i * h + j + 1) * d];
        let mut acc = 0.0;
        for a in 0..h {
            for b in a + 1..h {
                acc += 1.0 - cosine(vec(a), vec(b)).abs();
            }
        }
        total += acc / (h * (h - 1) / 2) as f64;
    }
    Ok(total / n as f64)
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gelu_scalar;

    fn cfg(variant: ProjectorKind, n: usize, cap: bool, k: usize) -> ProjectorConfig {
        ProjectorConfig { variant, n, cap, k, ..Default::default() }
    }

    fn cls(n: usize, e: usize, seed: u64) -> Tensor {
        let mut rng = crate::Rng::new(seed);
        Tensor::new(vec![n, e], (0..n * e).map(|_| rng.normal()).collect()).unwrap()
    }

    fn run(store: &ParamStore, p: &Projector, x: &Tensor) -> (Tensor, Tensor) {
        let mut s = Session::inference(store);
        let x = s.constant(x.clone());
        let out = p.forward(&mut s, x).unwrap();
        (s.value(out.tokens).clone(), s.value(out.heads).clone())
    }

    #[test]
    fn token_counts_and_validation() {
        let mut store = ParamStore::new();
        let init = Initializer::new(0);
        let lin = Projector::new(&mut store, init, "a", &cfg(ProjectorKind::Linear, 5, false, 1), 4, 6).unwrap();
        assert_eq!(run(&store, &lin, &cls(3, 4, 1)).0.shape(), &[3, 1, 6]);
        let mgm = Projector::new(&mut store, init, "b", &cfg(ProjectorKind::Mgm, 64, true, 8), 4, 6).unwrap();
        assert_eq!(run(&store, &mgm, &cls(2, 4, 1)).0.shape(), &[2, 8, 6]);
        assert!(Projector::new(&mut store, init, "c", &cfg(ProjectorKind::Mgm, 4, true, 8), 4, 6).is_err());
        let mlp = cfg(ProjectorKind::Mlp, 9, true, 2);
        assert!(mlp.validate().is_err());
    }

    #[test]
    fn mgm_shape_and_zero_params() {
        let mut store = ParamStore::new();
        let p =
            Projector::new(&mut store, Initializer::new(2), "i", &cfg(ProjectorKind::Mgm, 8, false, 1), 16, 6).unwrap();
        let (t, _) = run(&store, &p, &cls(1, 16, 3));
        assert_eq!(t.shape(), &[1, 8, 6]);
        for e in store.entries_mut() {
            e.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (t, _) = run(&store, &p, &cls(1, 16, 3));
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mgm_scalar_oracle() {
        let mut store = ParamStore::new();
        let p =
            Projector::new(&mut store, Initializer::new(2), "i", &cfg(ProjectorKind::Mgm, 1, false, 1), 1, 1).unwrap();
        let head = p.head_mlps()[0].clone();
        let gate = p.gates()[0].clone();
        let vals = [
            (head.fc1.weight, vec![0.5, -1.0]),
            (head.fc1.bias.unwrap(), vec![0.1, 0.2]),
            (head.fc2.weight, vec![1.2, -0.4]),
            (head.fc2.bias.unwrap(), vec![0.05]),
            (gate.weight, vec![0.3, 0.8]),
            (gate.bias.unwrap(), vec![-0.1]),
        ];
        for (id, v) in vals {
            let sh = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::new(sh, v).unwrap();
        }
        let x = 0.7;
        let h = [gelu_scalar(0.5 * x + 0.1), gelu_scalar(-x + 0.2)];
        let content = 1.2 * h[0] - 0.4 * h[1] + 0.05;
        let gate = 0.3 * h[0] + 0.8 * h[1] - 0.1;
        let want = content / (1.0 + (-gate).exp());
        let (t, _) = run(&store, &p, &Tensor::new(vec![1, 1], vec![x]).unwrap());
        assert!((t.item() - want).abs() < 1e-14);
    }

    fn open_gates(store: &mut ParamStore, p: &Projector, pre: f64) {
        for gate in p.gates() {
            store.get_mut(gate.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
            store.get_mut(gate.bias.unwrap()).data_mut().iter_mut().for_each(|v| *v = pre);
        }
    }

    #[test]
    fn saturated_gates_match_ungated_heads() {
        let (e, d, n) = (5, 4, 3);
        let mut store = ParamStore::new();
        let init = Initializer::new(7);
        // Same modality name and seed, so the content paths start identical.
        let mut other = ParamStore::new();
        let plain =
            Projector::new(&mut other, init, "m", &cfg(ProjectorKind::MultiheadMlp, n, false, 1), e, d).unwrap();
        let gated = Projector::new(&mut store, init, "m", &cfg(ProjectorKind::Mgm, n, false, 1), e, d).unwrap();
        for (a, b) in plain.head_mlps().iter().zip(gated.head_mlps()) {
            assert_eq!(other.get(a.fc2.weight), store.get(b.fc2.weight));
        }
        let x = cls(4, e, 9);
        let (a, _) = run(&other, &plain, &x);
        let (b, _) = run(&store, &gated, &x);
        assert!(a.max_abs_diff(&b) > 1e-3);
        open_gates(&mut store, &gated, 40.0);
        let (b, _) = run(&store, &gated, &x);
        assert!(a.max_abs_diff(&b) < 1e-9);

        open_gates(&mut store, &gated, -40.0);
        let (c, _) = run(&store, &gated, &x);
        assert!(c.data().iter().all(|v| v.abs() <= 1e-15));
    }

    #[test]
    fn cap_singleton_and_identical_tokens() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, Initializer::new(1), ParamGroup::Projector, "cap");
        let cap = Cap::new(&mut b, 4, 3, 1, true).unwrap();
        let mut s = Session::inference(&store);
        let one = s.constant(Tensor::new(vec![2, 1, 4], vec![0.3, -0.2, 0.9, 0.1, 1.0, 2.0, -1.0, 0.0]).unwrap());
        let out = cap.attend(&mut s, one).unwrap();
        let v = s.value(out).clone();
        for i in 0..2 {
            for k in 1..3 {
                assert_eq!(v.row(i * 3), v.row(i * 3 + k));
            }
        }
        let same = s.constant(Tensor::new(vec![1, 5, 4], [0.3, -0.2, 0.9, 0.1].repeat(5)).unwrap());
        let single = s.constant(Tensor::new(vec![1, 1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap());
        let a = cap.attend(&mut s, same).unwrap();
        let b = cap.attend(&mut s, single).unwrap();
        assert!(s.value(a).max_abs_diff(s.value(b)) < 1e-14);
        let empty = s.constant(Tensor::new(vec![1, 0, 4], vec![]).unwrap());
        assert!(cap.attend(&mut s, empty).is_err());
    }

    #[test]
    fn fuse_widths_and_partition() {
        let store = ParamStore::new();
        let mut s = Session::inference(&store);
        let tab = s.constant(Tensor::zeros(&[2, 5, 3]));
        let a = s.constant(Tensor::zeros(&[2, 4, 3]));
        let b = s.constant(Tensor::zeros(&[2, 4, 3]));
        let (f, p) = fuse_tokens(&mut s, tab, &[("image".into(), a), ("text".into(), b)]).unwrap();
        assert_eq!(s.value(f).shape(), &[2, 13, 3]);
        assert_eq!(p.iter().map(|(_, c)| c.len()).collect::<Vec<_>>(), vec![5, 4, 4]);
        assert_eq!(p[2].1, vec![9, 10, 11, 12]);
        let (f0, p0) = fuse_tokens(&mut s, tab, &[]).unwrap();
        assert_eq!(f0, tab);
        assert_eq!(p0, vec![("tabular".to_string(), vec![0, 1, 2, 3, 4])]);
        let bad = s.constant(Tensor::zeros(&[3, 4, 3]));
        assert!(fuse_tokens(&mut s, tab, &[("x".into(), bad)]).is_err());
    }

    #[test]
    fn orthogonality_examples() {
        let same = Tensor::new(vec![1, 3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert!(orthogonality_metric(&same).unwrap().abs() < 1e-15);
        let ortho = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        assert_eq!(orthogonality_metric(&ortho).unwrap(), 1.0);
        let (c, s) = (60f64.to_radians().cos(), 60f64.to_radians().sin());
        let sixty = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, c, s]).unwrap();
        assert!((orthogonality_metric(&sixty).unwrap() - 0.5).abs() < 1e-12);
        assert!(orthogonality_metric(&Tensor::zeros(&[1, 1, 2])).is_err());
    }
}
