//! Subcommand implementations behind the `miniseq` binary: configuration
//! loading, run manifests and the CSV/JSON artifacts each command writes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::labels;
use crate::data::{synth_corpus, synth_tokens, Batch, TokenFile};
use crate::error::{Error, Result};
use crate::estimator::{predict_peak, ByteSizes, MemBreakdown};
use crate::maxseq::{max_seq, MaxSeqQuery, MaxSeqResult};
use crate::memtrack::{export_timeline, Arena, MemReport};
use crate::model::{forward, save_checkpoint, ModelConfig, ModelWeights};
use crate::optim::OptimConfig;
use crate::seqpar::{Collective, Schedule, SpTrainer};
use crate::tensor::Dtype;
use crate::train::{StepMetrics, Trainer};

pub const METRICS_HEADER: &str = "step,loss,grad_norm,peak_bytes,flops";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";

/// Model and optimizer settings for one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
}

/// Command-line values that replace config-file keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dtype: Option<Dtype>,
    pub m_mlp: Option<usize>,
    pub m_head: Option<usize>,
    pub recompute: Option<bool>,
    pub accum: Option<usize>,
    pub in_backward: Option<bool>,
    pub seq: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, rc: &mut RunConfig) {
        let m = &mut rc.model;
        if let Some(v) = self.seed {
            m.seed = v;
        }
        if let Some(v) = self.dtype {
            m.dtype = v;
        }
        if let Some(v) = self.m_mlp {
            m.miniseq.m_mlp = v;
        }
        if let Some(v) = self.m_head {
            m.miniseq.m_head = v;
        }
        if let Some(v) = self.recompute {
            m.recompute = v;
        }
        if let Some(v) = self.seq {
            m.s = v;
        }
        if let Some(v) = self.accum {
            rc.optim.accum = v;
        }
        if let Some(v) = self.in_backward {
            rc.optim.in_backward = v;
        }
    }

    /// Flag name to value for every flag that was given.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.insert(k.to_string(), v);
            }
        };
        put("seed", self.seed.map(|v| v.to_string()));
        put("dtype", self.dtype.map(|v| v.to_string()));
        put("m-mlp", self.m_mlp.map(|v| v.to_string()));
        put("m-head", self.m_head.map(|v| v.to_string()));
        put("recompute", self.recompute.map(|v| v.to_string()));
        put("accum", self.accum.map(|v| v.to_string()));
        put("in-backward", self.in_backward.map(|v| v.to_string()));
        put("seq", self.seq.map(|v| v.to_string()));
        out
    }
}

fn key_error(path: &Path, key: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::ConfigKey {
        path: path.to_path_buf(),
        key: key.into(),
        msg: msg.into(),
    }
}

/// Deserializes `table`, blaming the first key that fails on its own.
fn keyed<T: DeserializeOwned>(table: toml::Table, prefix: &str, path: &Path) -> Result<T> {
    match toml::Value::Table(table.clone()).try_into::<T>() {
        Ok(v) => Ok(v),
        Err(whole) => {
            for (k, v) in table {
                let single: toml::Table = [(k.clone(), v)].into_iter().collect();
                if let Err(e) = toml::Value::Table(single).try_into::<T>() {
                    return Err(key_error(path, format!("{prefix}{k}"), e.message()));
                }
            }
            Err(key_error(path, prefix.trim_end_matches('.'), whole.message()))
        }
    }
}

/// Model keys at the top level, optimizer keys under `[optim]`.
pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| key_error(path, "<syntax>", e.message()))?;
    let optim = match table.remove("optim") {
        None => OptimConfig::default(),
        Some(toml::Value::Table(t)) => keyed(t, "optim.", path)?,
        Some(_) => return Err(key_error(path, "optim", "must be a table")),
    };
    let model = keyed(table, "", path)?;
    Ok(RunConfig { model, optim })
}

/// Maps validation messages of the form "`key`: …" or "optim.key: …" onto
/// the file they came from.
fn blame(err: Error, path: Option<&Path>) -> Error {
    let (Some(path), Error::Config(msg)) = (path, &err) else {
        return err;
    };
    if let Some(rest) = msg.strip_prefix('`') {
        if let Some((key, tail)) = rest.split_once('`') {
            return key_error(path, key, tail.trim_start_matches(':').trim());
        }
    }
    if let Some((key, tail)) = msg.split_once(':') {
        if key.starts_with("optim.") {
            return key_error(path, key, tail.trim());
        }
    }
    err
}

/// Defaults, then the file, then `ov`; validated.
pub fn load_config(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut rc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config(&text, p)?
        }
        None => RunConfig::default(),
    };
    ov.apply(&mut rc);
    rc.model.validate().map_err(|e| blame(e, path))?;
    rc.optim.validate().map_err(|e| blame(e, path))?;
    Ok(rc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub optim: OptimConfig,
    pub config_path: Option<PathBuf>,
    /// Command-line flags that replaced file or default values.
    pub overrides: BTreeMap<String, String>,
    /// Command-specific arguments.
    pub args: BTreeMap<String, String>,
    pub out_dir: PathBuf,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, rc: &RunConfig, config_path: Option<&Path>, ov: &Overrides, out_dir: &Path) -> Self {
        RunManifest {
            run_id: String::new(),
            command: command.to_string(),
            seed: rc.model.seed,
            config: rc.model.clone(),
            optim: rc.optim,
            config_path: config_path.map(Path::to_path_buf),
            overrides: ov.echo(),
            args: BTreeMap::new(),
            out_dir: out_dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn arg(mut self, key: &str, value: impl ToString) -> Self {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    /// Digest of everything that determines the run's results.
    pub fn compute_id(&self) -> String {
        let key = serde_json::json!({
            "command": self.command,
            "config": self.config,
            "optim": self.optim,
            "args": self.args,
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Fills in the run id and writes `manifest.json` into the output
    /// directory, creating it.
    pub fn write(&mut self, files: &[&str]) -> Result<PathBuf> {
        self.run_id = self.compute_id();
        self.files = files.iter().map(|s| s.to_string()).collect();
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let path = self.out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<RunManifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in rows {
        let _ = writeln!(s, "{},{},{},{},{}", m.step, m.loss, m.grad_norm, m.peak_bytes, m.flops);
    }
    s
}

fn synthetic_batches(cfg: &ModelConfig, count: usize, seed: u64) -> Result<Vec<Batch>> {
    let toks = synth_tokens(seed, cfg.v, count * cfg.b * cfg.s)?;
    toks.chunks(cfg.b * cfg.s)
        .map(|c| Batch::from_tokens(c.to_vec(), cfg.b, cfg.s, cfg.v))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub manifest: RunManifest,
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: PathBuf,
}

/// `steps` optimizer steps over consecutive windows of `data` (or of a
/// synthetic corpus drawn with the run seed).
pub fn cmd_train(rc: &RunConfig, mut manifest: RunManifest, steps: usize, data: Option<&Path>) -> Result<TrainOutput> {
    let cfg = &rc.model;
    let per_step = rc.optim.accum * cfg.b * cfg.s;
    let tokens = match data {
        Some(p) => TokenFile::open(p, cfg.v)?.tokens,
        None => synth_tokens(cfg.seed, cfg.v, steps * per_step)?,
    };
    if tokens.len() < steps * per_step {
        return Err(Error::EndOfData {
            cursor: 0,
            needed: steps * per_step,
            available: tokens.len(),
        });
    }
    manifest = manifest.arg("steps", steps).arg(
        "data",
        data.map_or("synthetic".to_string(), |p| p.display().to_string()),
    );
    manifest.write(&[METRICS_FILE, "checkpoint.bin"])?;
    let mut trainer = Trainer::new(cfg.clone(), rc.optim, Arena::new())?;
    let mut metrics = Vec::with_capacity(steps);
    for (i, window) in tokens.chunks(per_step).take(steps).enumerate() {
        let batches = window
            .chunks(cfg.b * cfg.s)
            .map(|c| Batch::from_tokens(c.to_vec(), cfg.b, cfg.s, cfg.v))
            .collect::<Result<Vec<_>>>()?;
        let m = trainer.step(&batches)?;
        log::info!("step {} loss {:.6} grad_norm {:.4e}", i + 1, m.loss, m.grad_norm);
        metrics.push(m);
    }
    let dir = &manifest.out_dir;
    write_file(dir, METRICS_FILE, &metrics_csv(&metrics))?;
    let checkpoint = dir.join("checkpoint.bin");
    save_checkpoint(&checkpoint, cfg, &trainer.weights)?;
    Ok(TrainOutput {
        manifest,
        metrics,
        checkpoint,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Mlp,
    Head,
}

impl std::str::FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Component::Mlp),
            "head" => Ok(Component::Head),
            other => Err(Error::Config(format!("unknown component `{other}` (mlp | head)"))),
        }
    }
}

impl Component {
    pub fn default_ms(self) -> Vec<usize> {
        match self {
            Component::Mlp => vec![1, 2, 4, 8],
            Component::Head => vec![1, 2, 4, 8, 16, 32],
        }
    }

    /// Labels of the intermediates the component's chunking shrinks.
    pub fn owns(self, label: &str) -> bool {
        match self {
            Component::Mlp => label.starts_with("mlp."),
            Component::Head => labels::is_logits(label),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub m: usize,
    pub peak_bytes: u64,
    /// Peak of the component's own intermediates during the step.
    pub component_peak_bytes: u64,
    /// Forward-pass FLOPs of one micro-batch.
    pub flops: u64,
    /// Whole training step, including backward recomputation.
    pub step_flops: u64,
    pub step_time_ms: f64,
}

pub const SWEEP_HEADER: &str = "m,peak_bytes,component_peak_bytes,flops,step_flops,step_time_ms";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.3}",
            r.m, r.peak_bytes, r.component_peak_bytes, r.flops, r.step_flops, r.step_time_ms
        );
    }
    s
}

/// One training step per `M` on the same weights and batch, varying only the
/// chunk count of `component`.
pub fn cmd_sweep_m(rc: &RunConfig, manifest: RunManifest, component: Component, ms: &[usize]) -> Result<Vec<SweepRow>> {
    let list = ms.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(",");
    let mut manifest = manifest
        .arg("component", format!("{component:?}").to_lowercase())
        .arg("m", list);
    manifest.write(&[METRICS_FILE, "sweep.csv"])?;
    let batches = synthetic_batches(&rc.model, rc.optim.accum, rc.model.seed)?;
    let mut rows = Vec::with_capacity(ms.len());
    let mut metrics = Vec::with_capacity(ms.len());
    for (i, &m) in ms.iter().enumerate() {
        let mut cfg = rc.model.clone();
        match component {
            Component::Mlp => cfg.miniseq.m_mlp = m,
            Component::Head => cfg.miniseq.m_head = m,
        }
        cfg.validate()?;
        let mut trainer = Trainer::new(cfg, rc.optim, Arena::new())?;
        let (fwd, _, counters) = trainer
            .arena
            .measure("forward", || forward(&trainer.cfg, &trainer.weights, &batches[0]));
        drop(fwd?);
        trainer.arena.region_begin("sweep");
        let t0 = Instant::now();
        let sm = trainer.step(&batches)?;
        let elapsed = t0.elapsed().as_secs_f64() * 1e3;
        let (report, _) = trainer.arena.region_end("sweep")?;
        rows.push(SweepRow {
            m,
            peak_bytes: sm.peak_bytes,
            component_peak_bytes: report.peak_matching(|l| component.owns(l)),
            flops: counters.flops,
            step_flops: sm.flops,
            step_time_ms: elapsed,
        });
        metrics.push(StepMetrics {
            step: i as u64 + 1,
            ..sm
        });
    }
    let dir = &manifest.out_dir;
    write_file(dir, METRICS_FILE, &metrics_csv(&metrics))?;
    write_file(dir, "sweep.csv", &sweep_csv(&rows))?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ByteModel {
    /// Every buffer in the configured dtype.
    #[default]
    Config,
    /// bf16 parameters and optimizer state, f32 activations and logits.
    Bf16,
}

impl std::str::FromStr for ByteModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "config" => Ok(ByteModel::Config),
            "bf16" => Ok(ByteModel::Bf16),
            other => Err(Error::Config(format!("unknown byte model `{other}` (config | bf16)"))),
        }
    }
}

impl ByteModel {
    pub fn sizes(self, dtype: Dtype) -> ByteSizes {
        match self {
            ByteModel::Config => ByteSizes::uniform(dtype),
            ByteModel::Bf16 => ByteSizes::bf16_training(),
        }
    }
}

/// Predicted peak breakdown; writes `estimate.txt` and `estimate.csv`.
pub fn cmd_estimate(rc: &RunConfig, manifest: RunManifest, bytes: ByteModel) -> Result<MemBreakdown> {
    let mut manifest = manifest.arg("bytes", format!("{bytes:?}").to_lowercase());
    let report = predict_peak(&rc.model, &rc.optim, &bytes.sizes(rc.model.dtype))?;
    manifest.write(&["estimate.txt", "estimate.csv"])?;
    write_file(&manifest.out_dir, "estimate.txt", &report.to_text())?;
    write_file(&manifest.out_dir, "estimate.csv", &report.to_csv())?;
    Ok(report)
}

/// Largest trainable `S` under the query's budget; writes `max_seq.json`
/// and `probes.csv`.
pub fn cmd_max_seq(rc: &RunConfig, manifest: RunManifest, q: &MaxSeqQuery) -> Result<MaxSeqResult> {
    let mut manifest = manifest
        .arg("budget-bytes", q.budget_bytes)
        .arg("workers", q.workers)
        .arg("granularity", q.granularity)
        .arg("s-cap", q.s_cap.map_or("none".to_string(), |c| c.to_string()));
    manifest.write(&["max_seq.json", "probes.csv"])?;
    let r = max_seq(&rc.model, rc.optim, q)?;
    let json = serde_json::to_string_pretty(&r).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&manifest.out_dir, "max_seq.json", &(json + "\n"))?;
    let mut csv = String::from("s,peak_bytes,fits\n");
    for p in &r.probes {
        let _ = writeln!(csv, "{},{},{}", p.s, p.peak_bytes, p.peak_bytes <= q.budget_bytes);
    }
    write_file(&manifest.out_dir, "probes.csv", &csv)?;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkerRow {
    pub worker: usize,
    pub peak_bytes: u64,
    /// Peak of everything except weights, gradients and optimizer state.
    pub activation_peak_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct SpSimOutput {
    pub workers: Vec<WorkerRow>,
    pub metrics: Vec<StepMetrics>,
    pub collectives: Vec<Collective>,
    pub max_seq: Option<MaxSeqResult>,
}

fn is_activation(label: &str) -> bool {
    label != labels::WEIGHT && !labels::is_grad(label) && !labels::is_optimizer(label)
}

/// Simulated sequence-parallel training for `steps` steps; with a budget,
/// also the largest `S` the same worker count fits.
pub fn cmd_sp_sim(
    rc: &RunConfig,
    manifest: RunManifest,
    workers: usize,
    schedule: Schedule,
    steps: usize,
    budget: Option<u64>,
) -> Result<SpSimOutput> {
    let mut manifest = manifest
        .arg("workers", workers)
        .arg("schedule", format!("{schedule:?}").to_lowercase())
        .arg("steps", steps)
        .arg("budget-bytes", budget.map_or("none".to_string(), |b| b.to_string()));
    let mut files = vec![METRICS_FILE, "workers.csv", "collectives.csv"];
    if budget.is_some() {
        files.push("max_seq.json");
    }
    manifest.write(&files)?;
    let cfg = &rc.model;
    let weights = ModelWeights::init(cfg, &Arena::new())?;
    let mut t = SpTrainer::new(cfg, rc.optim, &weights, workers, schedule)?;
    drop(weights);
    let batches = synthetic_batches(cfg, steps, cfg.seed)?;
    let mut metrics = Vec::with_capacity(steps);
    let mut rows: Vec<WorkerRow> = (0..workers)
        .map(|worker| WorkerRow {
            worker,
            peak_bytes: 0,
            activation_peak_bytes: 0,
        })
        .collect();
    for b in &batches {
        for w in &t.sim.workers {
            w.arena.region_begin("sp-sim");
        }
        let m = t.step(b)?;
        for (row, w) in rows.iter_mut().zip(&t.sim.workers) {
            let (report, _): (MemReport, _) = w.arena.region_end("sp-sim")?;
            row.peak_bytes = row.peak_bytes.max(report.peak_bytes);
            row.activation_peak_bytes = row.activation_peak_bytes.max(report.peak_matching(is_activation));
        }
        metrics.push(StepMetrics {
            step: m.step,
            loss: m.loss,
            grad_norm: m.grad_norm,
            peak_bytes: m.worker_peaks.iter().copied().max().unwrap_or(0),
            flops: m.flops,
        });
    }
    let max = match budget {
        Some(b) => Some(max_seq(cfg, rc.optim, &MaxSeqQuery::new(b, workers))?),
        None => None,
    };
    let dir = &manifest.out_dir;
    write_file(dir, METRICS_FILE, &metrics_csv(&metrics))?;
    let mut csv = String::from("worker,peak_bytes,activation_peak_bytes,within_budget\n");
    for r in &rows {
        let within = budget.map_or("na".to_string(), |b| (r.peak_bytes <= b).to_string());
        let _ = writeln!(
            csv,
            "{},{},{},{within}",
            r.worker, r.peak_bytes, r.activation_peak_bytes
        );
    }
    write_file(dir, "workers.csv", &csv)?;
    let mut csv = String::from("round,kind,elements_in,elements_out\n");
    for c in &t.sim.log {
        let kind = match c.kind {
            crate::seqpar::CollectiveKind::AllToAll => "all-to-all",
            crate::seqpar::CollectiveKind::AllReduce => "all-reduce",
        };
        let _ = writeln!(csv, "{},{kind},{},{}", c.round, c.elements_in, c.elements_out);
    }
    write_file(dir, "collectives.csv", &csv)?;
    if let Some(r) = &max {
        let json = serde_json::to_string_pretty(r).map_err(|e| Error::Config(e.to_string()))?;
        write_file(dir, "max_seq.json", &(json + "\n"))?;
    }
    Ok(SpSimOutput {
        workers: rows,
        metrics,
        collectives: t.sim.log.clone(),
        max_seq: max,
    })
}

/// Writes `tokens.bin` (synthetic Markov corpus) into the manifest's output
/// directory.
pub fn cmd_gen_data(manifest: RunManifest, seed: u64, vocab: usize, tokens: usize) -> Result<TokenFile> {
    let mut manifest = manifest
        .arg("data-seed", seed)
        .arg("vocab", vocab)
        .arg("tokens", tokens);
    manifest.write(&["tokens.bin"])?;
    synth_corpus(seed, vocab, tokens, manifest.out_dir.join("tokens.bin"))
}

/// One training step with every allocation recorded; writes the event
/// timeline, per-label peaks and the step's metrics row.
pub fn cmd_mem_timeline(rc: &RunConfig, manifest: RunManifest) -> Result<MemReport> {
    let mut manifest = manifest;
    manifest.write(&[METRICS_FILE, "timeline.csv", "peaks.csv"])?;
    let batches = synthetic_batches(&rc.model, rc.optim.accum, rc.model.seed)?;
    let mut trainer = Trainer::new(rc.model.clone(), rc.optim, Arena::new())?;
    trainer.arena.region_begin("step");
    let m = trainer.step(&batches)?;
    let (report, _) = trainer.arena.region_end("step")?;
    let dir = &manifest.out_dir;
    write_file(dir, METRICS_FILE, &metrics_csv(&[m]))?;
    export_timeline(&report, dir.join("timeline.csv"))?;
    let mut csv = String::from("label,peak_bytes\n");
    let mut label_set: Vec<&str> = report.events.iter().map(|e| e.label.as_str()).collect();
    label_set.extend(report.baseline_by_label.keys().map(String::as_str));
    label_set.sort_unstable();
    label_set.dedup();
    for l in label_set {
        let _ = writeln!(csv, "{l},{}", report.peak_matching(|x| x == l));
    }
    write_file(dir, "peaks.csv", &csv)?;
    Ok(report)
}
