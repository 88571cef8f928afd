//! Command-line driver. Each subcommand reads one JSON config, writes its
//! outputs into a directory and finishes with `bundle.json`: the parsed
//! config with defaults filled in, SHA-256 fingerprints of the config and
//! every input file, and the results. Bundles hold no timestamps, so reruns
//! are byte-identical.

pub mod config;
pub mod error;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use mmpfn_core::backbone::Capture;
use mmpfn_core::data::{load_csv, Dataset};
use mmpfn_core::encoders::EmbeddingSet;
use mmpfn_core::imbalance::{
    imbalance_sweep, monte_carlo_attention_mass, AttentionMassReport, ImbalanceSpec, SWEEP_CSV_HEADER,
};
use mmpfn_core::model::{Mmpfn, ModalityConfig, ModelConfig};
use mmpfn_core::prior::pretrain_backbone;
use mmpfn_core::projector::orthogonality_metric;
use mmpfn_core::train::{argmax, cosine_similarity_matrix, evaluate_accuracy, parallel_map, predict, run_seed};
use mmpfn_core::{ParamGroup, ParamStore, Rng, Session, Tensor};

use config::{BackboneSource, DataSource, McCase};
pub use error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Finetune,
    Eval,
    ImbalanceSweep,
    McAttention,
    Similarity,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::ImbalanceSweep => "imbalance-sweep",
            Command::McAttention => "mc-attention",
            Command::Similarity => "similarity",
        }
    }
}

pub const BUNDLE_FILE: &str = "bundle.json";

/// Runs `command` and returns the path of the written bundle.
pub fn run(command: Command, config_path: &Path, out: &Path, jobs: usize) -> CliResult<PathBuf> {
    if jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let bytes = std::fs::read(config_path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", config_path.display())))?;
    let mut ctx = Ctx { config_path, out, inputs: BTreeMap::new() };
    // Parse before creating the output directory so a bad config leaves no trace.
    match command {
        Command::Pretrain => pretrain(&mut ctx, config::parse(&bytes, config_path)?),
        Command::Finetune => finetune(&mut ctx, config::parse(&bytes, config_path)?, jobs),
        Command::Eval => eval(&mut ctx, config::parse(&bytes, config_path)?),
        Command::ImbalanceSweep => sweep(&mut ctx, config::parse(&bytes, config_path)?, jobs),
        Command::McAttention => mc_attention(&mut ctx, config::parse(&bytes, config_path)?, jobs),
        Command::Similarity => similarity(&mut ctx, config::parse(&bytes, config_path)?),
    }
}

struct Ctx<'a> {
    config_path: &'a Path,
    out: &'a Path,
    /// Input role to SHA-256 of its bytes.
    inputs: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct Bundle<'a, C: Serialize, R: Serialize> {
    command: &'static str,
    version: &'static str,
    config: &'a C,
    config_sha256: String,
    inputs: &'a BTreeMap<String, String>,
    results: R,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

impl Ctx<'_> {
    fn read_input(&mut self, role: &str, p: &Path) -> CliResult<Vec<u8>> {
        let path = config::resolve(self.config_path, p);
        let bytes = std::fs::read(&path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        self.inputs.insert(role.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn out_dir(&self) -> CliResult<()> {
        std::fs::create_dir_all(self.out).map_err(|e| CliError::Output(format!("{}: {e}", self.out.display())))
    }

    fn write(&self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("{}: {e}", dir.display())))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    fn bundle<C: Serialize, R: Serialize>(&self, command: Command, config: &C, results: R) -> CliResult<PathBuf> {
        let echo = serde_json::to_vec(config).map_err(|e| CliError::Internal(e.to_string()))?;
        let b = Bundle {
            command: command.name(),
            version: env!("CARGO_PKG_VERSION"),
            config,
            config_sha256: sha256_hex(&echo),
            inputs: &self.inputs,
            results,
        };
        let mut text = serde_json::to_vec_pretty(&b).map_err(|e| CliError::Internal(e.to_string()))?;
        text.push(b'\n');
        self.write(BUNDLE_FILE, &text)
    }

    fn base_model(&mut self, cfg: &ModelConfig, src: &BackboneSource) -> CliResult<Mmpfn> {
        let mut model = Mmpfn::new(cfg)?;
        match src {
            BackboneSource::Checkpoint(p) => {
                let bytes = self.read_input("checkpoint", p)?;
                model.load_pretrained(&ParamStore::from_bytes(&bytes)?)?;
            }
            BackboneSource::Pretrain(pc) => {
                pretrain_backbone(&mut model, pc, log_progress(pc.tasks))?;
            }
            BackboneSource::Random => {}
        }
        Ok(model)
    }

    fn dataset(&mut self, src: &DataSource) -> CliResult<Dataset> {
        let data = match src {
            DataSource::Synthetic { task, seed } => task.generate(*seed)?,
            DataSource::Files { table, label_column, columns, embeddings, test_fraction, split_seed } => {
                let path = config::resolve(self.config_path, table);
                self.read_input("table", table)?;
                let (table, labels, classes) = load_csv(&path, columns, label_column)?;
                let mut modalities = Vec::with_capacity(embeddings.len());
                for (i, p) in embeddings.iter().enumerate() {
                    let bytes = self.read_input(&format!("embeddings[{i}]"), p)?;
                    modalities.push(EmbeddingSet::from_bytes(&bytes)?);
                }
                let n = table.n_rows();
                if n < 2 {
                    return Err(CliError::Data(format!("{} has {n} rows; at least 2 are needed", path.display())));
                }
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(CliError::Config(format!("test_fraction {test_fraction} must lie in (0, 1)")));
                }
                let perm = Rng::new(*split_seed).permutation(n);
                let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
                let mut test = perm[..n_test].to_vec();
                let mut train = perm[n_test..].to_vec();
                test.sort_unstable();
                train.sort_unstable();
                Dataset { table, labels, n_classes: classes.len(), modalities, train, test }
            }
        };
        data.validate()?;
        if data.test.is_empty() {
            return Err(CliError::Data("the test split is empty".into()));
        }
        Ok(data)
    }
}

fn log_progress(total: usize) -> impl FnMut(usize, f64) {
    let mut window = 0.0;
    move |t, loss| {
        window += loss;
        if (t + 1) % 1000 == 0 || t + 1 == total {
            let n = (t % 1000 + 1) as f64;
            log::info!("pretraining task {}/{total}: mean loss {:.4}", t + 1, window / n);
            window = 0.0;
        }
    }
}

fn attach(model: &mut Mmpfn, data: &Dataset, modalities: &[ModalityConfig]) -> CliResult<()> {
    for m in modalities {
        let dim = data.modality(&m.name)?.dim;
        model.add_projector(m, dim, 0)?;
    }
    Ok(())
}

fn pretrain(ctx: &mut Ctx, f: config::PretrainFile) -> CliResult<PathBuf> {
    f.pretrain.prior.validate()?;
    let mut model = Mmpfn::new(&f.model)?;
    let trace = pretrain_backbone(&mut model, &f.pretrain, log_progress(f.pretrain.tasks))?;
    ctx.out_dir()?;
    let ckpt = model.store.to_bytes();
    ctx.write("checkpoint.mmpn", &ckpt)?;
    let mut csv = String::from("task_index,loss\n");
    for (i, l) in trace.iter().enumerate() {
        writeln!(csv, "{i},{l}").expect("string write");
    }
    ctx.write("loss_trace.csv", csv.as_bytes())?;
    let tail = &trace[trace.len().saturating_sub(100)..];
    #[derive(Serialize)]
    struct R {
        tasks: usize,
        final_loss_mean_last_100: f64,
        checkpoint: &'static str,
        checkpoint_sha256: String,
    }
    let r = R {
        tasks: trace.len(),
        final_loss_mean_last_100: tail.iter().sum::<f64>() / tail.len() as f64,
        checkpoint: "checkpoint.mmpn",
        checkpoint_sha256: sha256_hex(&ckpt),
    };
    ctx.bundle(Command::Pretrain, &f, r)
}

#[derive(Serialize)]
struct RunRecord {
    seed: u64,
    accuracy: f64,
    final_loss: Option<f64>,
    /// Per modality with at least two projector heads.
    orthogonality: BTreeMap<String, f64>,
    checkpoint: Option<String>,
    checkpoint_sha256: Option<String>,
}

#[derive(Serialize)]
struct ConditionRecord {
    name: String,
    mean_accuracy: f64,
    runs: Vec<RunRecord>,
}

fn finetune(ctx: &mut Ctx, f: config::FinetuneFile, jobs: usize) -> CliResult<PathBuf> {
    f.finetune.validate()?;
    if f.conditions.is_empty() {
        return Err(CliError::Config("at least one condition is required".into()));
    }
    for (i, c) in f.conditions.iter().enumerate() {
        if f.conditions[..i].iter().any(|o| o.name == c.name) {
            return Err(CliError::Config(format!("duplicate condition {}", c.name)));
        }
        for m in &c.modalities {
            m.projector.validate()?;
        }
    }
    let base = ctx.base_model(&f.model, &f.backbone)?;
    let data = ctx.dataset(&f.data)?;
    for c in &f.conditions {
        for m in &c.modalities {
            data.modality(&m.name)?;
        }
    }
    let frozen = base.store.group_bytes(ParamGroup::Encoder);
    let cells: Vec<(usize, u64)> =
        (0..f.conditions.len()).flat_map(|c| f.finetune.seeds.iter().map(move |&s| (c, s))).collect();
    let outcomes = parallel_map(&cells, jobs, |&(c, seed)| -> CliResult<(RunRecord, Vec<f64>, Option<Vec<u8>>)> {
        let cond = &f.conditions[c];
        let (model, run) = run_seed(&base, &data, &cond.modalities, &f.finetune, seed)?;
        if model.store.group_bytes(ParamGroup::Encoder) != frozen {
            return Err(CliError::Internal(format!("encoder parameters changed in condition {}", cond.name)));
        }
        let mut orthogonality = BTreeMap::new();
        if cond.modalities.iter().any(|m| m.projector.heads() >= 2) {
            let mut s = Session::inference(&model.store);
            let rows: Vec<usize> = data.train.iter().chain(&data.test).copied().collect();
            let heads = model.projector_heads(&mut s, &data, &rows)?;
            for (m, h) in cond.modalities.iter().zip(&heads) {
                if m.projector.heads() >= 2 {
                    orthogonality.insert(m.name.clone(), orthogonality_metric(s.value(*h))?);
                }
            }
        }
        let ckpt = f.save_checkpoints.then(|| model.store.to_bytes());
        let rec = RunRecord {
            seed,
            accuracy: run.accuracy,
            final_loss: run.loss_trace.last().copied(),
            orthogonality,
            checkpoint: None,
            checkpoint_sha256: ckpt.as_deref().map(sha256_hex),
        };
        Ok((rec, run.loss_trace, ckpt))
    });
    ctx.out_dir()?;
    let mut conditions: Vec<ConditionRecord> = f
        .conditions
        .iter()
        .map(|c| ConditionRecord { name: c.name.clone(), mean_accuracy: 0.0, runs: Vec::new() })
        .collect();
    let mut results_csv = String::from("condition,seed,accuracy,final_loss\n");
    let mut losses_csv = String::from("condition,seed,step,loss\n");
    let mut orth_csv = String::from("condition,seed,modality,orthogonality\n");
    for (&(c, seed), outcome) in cells.iter().zip(outcomes) {
        let (mut rec, trace, ckpt) = outcome?;
        let name = &f.conditions[c].name;
        if let Some(bytes) = ckpt {
            let rel = format!("models/{name}_seed{seed}.mmpn");
            ctx.write(&rel, &bytes)?;
            rec.checkpoint = Some(rel);
        }
        let fl = rec.final_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(results_csv, "{name},{seed},{},{fl}", rec.accuracy).expect("string write");
        for (step, l) in trace.iter().enumerate() {
            writeln!(losses_csv, "{name},{seed},{step},{l}").expect("string write");
        }
        for (m, v) in &rec.orthogonality {
            writeln!(orth_csv, "{name},{seed},{m},{v}").expect("string write");
        }
        conditions[c].runs.push(rec);
    }
    for c in &mut conditions {
        c.mean_accuracy = c.runs.iter().map(|r| r.accuracy).sum::<f64>() / c.runs.len() as f64;
    }
    ctx.write("results.csv", results_csv.as_bytes())?;
    ctx.write("loss_traces.csv", losses_csv.as_bytes())?;
    ctx.write("orthogonality.csv", orth_csv.as_bytes())?;
    #[derive(Serialize)]
    struct R {
        encoder_frozen: bool,
        conditions: Vec<ConditionRecord>,
    }
    ctx.bundle(Command::Finetune, &f, R { encoder_frozen: true, conditions })
}

fn eval(ctx: &mut Ctx, f: config::EvalFile) -> CliResult<PathBuf> {
    for m in &f.modalities {
        m.projector.validate()?;
    }
    let bytes = ctx.read_input("checkpoint", &f.checkpoint)?;
    let ckpt = ParamStore::from_bytes(&bytes)?;
    let data = ctx.dataset(&f.data)?;
    let mut model = Mmpfn::new(&f.model)?;
    attach(&mut model, &data, &f.modalities)?;
    model.store.load_exact(&ckpt)?;
    let probs = predict(&model, &data, &data.train, &data.test)?;
    let labels = data.labels_of(&data.test);
    let accuracy = evaluate_accuracy(&probs, &labels)?;
    ctx.out_dir()?;
    let mut csv = String::from("row,label,prediction");
    for k in 0..data.n_classes {
        write!(csv, ",p{k}").expect("string write");
    }
    csv.push('\n');
    for (i, &row) in data.test.iter().enumerate() {
        let p = probs.row(i);
        write!(csv, "{row},{},{}", labels[i], argmax(p)).expect("string write");
        for v in p {
            write!(csv, ",{v}").expect("string write");
        }
        csv.push('\n');
    }
    ctx.write("predictions.csv", csv.as_bytes())?;
    #[derive(Serialize)]
    struct R {
        accuracy: f64,
        test_rows: usize,
    }
    ctx.bundle(Command::Eval, &f, R { accuracy, test_rows: data.test.len() })
}

#[derive(Serialize)]
struct SweepSummary {
    variant: String,
    n: usize,
    k: Option<usize>,
    mean_accuracy: f64,
    mean_tabular_mass: f64,
    mean_nontabular_mass: f64,
}

fn sweep(ctx: &mut Ctx, f: config::SweepFile, jobs: usize) -> CliResult<PathBuf> {
    f.sweep.finetune.validate()?;
    let base = ctx.base_model(&f.model, &f.backbone)?;
    let rows = imbalance_sweep(&base, &f.sweep, jobs)?;
    ctx.out_dir()?;
    let mut csv = format!("{SWEEP_CSV_HEADER}\n");
    for r in &rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        writeln!(csv, "{},{},{k},{},{},{},{}", r.variant, r.n, r.seed, r.accuracy, r.tabular_mass, r.nontabular_mass)
            .expect("string write");
    }
    ctx.write("sweep.csv", csv.as_bytes())?;
    let mut summary: Vec<SweepSummary> = Vec::new();
    for r in &rows {
        let idx = match summary.iter().position(|s| s.variant == r.variant && s.n == r.n && s.k == r.k) {
            Some(i) => i,
            None => {
                summary.push(SweepSummary {
                    variant: r.variant.clone(),
                    n: r.n,
                    k: r.k,
                    mean_accuracy: 0.0,
                    mean_tabular_mass: 0.0,
                    mean_nontabular_mass: 0.0,
                });
                summary.len() - 1
            }
        };
        let s = &mut summary[idx];
        s.mean_accuracy += r.accuracy;
        s.mean_tabular_mass += r.tabular_mass;
        s.mean_nontabular_mass += r.nontabular_mass;
    }
    let per_cell = f.sweep.finetune.seeds.len() as f64;
    for s in &mut summary {
        s.mean_accuracy /= per_cell;
        s.mean_tabular_mass /= per_cell;
        s.mean_nontabular_mass /= per_cell;
    }
    #[derive(Serialize)]
    struct R {
        summary: Vec<SweepSummary>,
        rows: Vec<mmpfn_core::imbalance::SweepRow>,
    }
    ctx.bundle(Command::ImbalanceSweep, &f, R { summary, rows })
}

pub fn mc_spec(case: &McCase) -> CliResult<ImbalanceSpec> {
    Ok(match *case {
        McCase::Gaussian { n_i, n_t, d, variance, shift, samples, seed } => {
            ImbalanceSpec::gaussian(n_i, n_t, d, variance, shift, samples, seed)?
        }
        McCase::Constant { n_i, n_t, tabular, non_tabular } => ImbalanceSpec::constant(n_i, n_t, tabular, non_tabular),
    })
}

fn mc_attention(ctx: &mut Ctx, f: config::McFile, jobs: usize) -> CliResult<PathBuf> {
    if f.cases.is_empty() {
        return Err(CliError::Config("at least one case is required".into()));
    }
    let specs = f.cases.iter().map(mc_spec).collect::<CliResult<Vec<_>>>()?;
    for s in &specs {
        s.validate()?;
    }
    let reports: Vec<AttentionMassReport> =
        parallel_map(&specs, jobs, monte_carlo_attention_mass).into_iter().collect::<Result<_, _>>()?;
    ctx.out_dir()?;
    let mut csv =
        String::from("case,n_i,n_t,d,samples,predicted_mass,plugin_mass,empirical_mass,standard_error,abs_gap\n");
    for (i, (s, r)) in specs.iter().zip(&reports).enumerate() {
        writeln!(
            csv,
            "{i},{},{},{},{},{},{},{},{},{}",
            s.n_i,
            s.n_t,
            s.d,
            r.samples,
            r.predicted_mass,
            r.plugin_mass,
            r.empirical_mass,
            r.standard_error,
            (r.empirical_mass - r.predicted_mass).abs()
        )
        .expect("string write");
    }
    ctx.write("mc_attention.csv", csv.as_bytes())?;
    ctx.bundle(Command::McAttention, &f, reports)
}

/// Rows `rows` of `t`, optionally dropping the last column of axis 1.
fn select_instances(t: &Tensor, rows: std::ops::Range<usize>, drop_last: bool) -> CliResult<Tensor> {
    let sh = t.shape();
    let (f, d) = (sh[1], sh[2]);
    let keep = if drop_last { f - 1 } else { f };
    let mut out = Vec::with_capacity(rows.len() * keep * d);
    for r in rows.clone() {
        out.extend_from_slice(&t.data()[r * f * d..(r * f + keep) * d]);
    }
    Ok(Tensor::new(vec![rows.len(), keep, d], out)?)
}

fn similarity(ctx: &mut Ctx, f: config::SimilarityFile) -> CliResult<PathBuf> {
    for m in &f.modalities {
        m.projector.validate()?;
    }
    let mut ft = f.finetune.clone();
    ft.seeds = vec![f.seed];
    ft.validate()?;
    let base = ctx.base_model(&f.model, &f.backbone)?;
    let data = ctx.dataset(&f.data)?;
    if let Some(b) = f.block {
        if b >= base.cfg.blocks {
            return Err(CliError::Config(format!("block {b} but the backbone has {}", base.cfg.blocks)));
        }
    }
    let (model, run) = run_seed(&base, &data, &f.modalities, &ft, f.seed)?;
    let mut s = Session::inference(&model.store);
    let cap = Capture { grids: f.block.is_some(), ..Default::default() };
    let out = model.forward(&mut s, &data, &data.train, &data.test, cap)?;
    let n_ctx = data.train.len();
    let rows = n_ctx..n_ctx + data.test.len();
    let emb = match f.block {
        None => select_instances(s.value(out.fused), rows, false)?,
        Some(b) => select_instances(s.value(out.backbone.grids[b]), rows, true)?,
    };
    let sim = cosine_similarity_matrix(&emb)?;
    let mut labels = vec![String::new(); sim.size];
    for (name, cols) in &out.partition {
        for (j, &c) in cols.iter().enumerate() {
            labels[c] = if name == "tabular" { data.table.specs[j].name.clone() } else { format!("{name}_{j}") };
        }
    }
    ctx.out_dir()?;
    let mut csv = format!("feature,{}\n", labels.join(","));
    for (i, l) in labels.iter().enumerate() {
        write!(csv, "{l}").expect("string write");
        for v in &sim.values[i * sim.size..(i + 1) * sim.size] {
            write!(csv, ",{v}").expect("string write");
        }
        csv.push('\n');
    }
    ctx.write("similarity.csv", csv.as_bytes())?;
    #[derive(Serialize)]
    struct R {
        accuracy: f64,
        features: Vec<String>,
        zero_norm_pairs: usize,
        values: Vec<f64>,
    }
    let r = R { accuracy: run.accuracy, features: labels, zero_norm_pairs: sim.zero_norm_pairs, values: sim.values };
    ctx.bundle(Command::Similarity, &f, r)
}
