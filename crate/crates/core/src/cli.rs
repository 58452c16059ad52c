//! Command-line workflows: data generation, training, grid evaluation,
//! parameter counting, gradient checking and recurrence inspection.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoding::{apply_index_hints, apply_random_padding, encode, encode_prompt, Batch, EncodedSample, HintMode, Vocabulary};
use crate::evaluation::{
    accuracy_grid, iteration_accuracies, iteration_trace, EvalOptions, EvalReport, GridSpec, ModelDecoder,
    OracleDecoder,
};
use crate::model::{batch_abacus_ids, Checkpoint, CheckpointKind, param_breakdown, param_count, ArchitectureVariant, ForwardInput, ForwardOptions, Model, ModelConfig, VariantKind};
use crate::positions::{AbacusConfig, PositionScheme, RelativeScheme, RopeConfig};
use crate::substrate::{grad_check_with, GradCheckOptions, SubstrateError, Tensor};
use crate::task_data::{indexed_rng, read_jsonl, write_jsonl, DatasetSpec, ProblemInstance, SamplingMode, Task};
use crate::training::{train, AdamW, StepMetrics, TrainState, TrainingConfig};

/// Environment variable naming the root for relative output directories.
pub const OUT_ROOT_ENV: &str = "ABACUS_OUT_ROOT";

/// Invalid configuration or arguments; reported with exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub task: Task,
    pub max_first: usize,
    pub max_second: usize,
    pub samples: usize,
    pub seed: u64,
    pub mode: SamplingMode,
    pub index_hints: HintMode,
    pub random_padding: f64,
    /// Dataset file; defaults to `data.jsonl` in the run directory.
    pub path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            task: Task::Add,
            max_first: 5,
            max_second: 5,
            samples: 100_000,
            seed: 0,
            mode: SamplingMode::Stratified,
            index_hints: HintMode::None,
            random_padding: 0.0,
            path: None,
        }
    }
}

impl DataSection {
    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            task: self.task,
            max_first: self.max_first,
            max_second: self.max_second,
            samples: self.samples,
            seed: self.seed,
            mode: self.mode,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub attention_heads: usize,
    pub abacus: bool,
    pub relative: RelativeScheme,
    pub abacus_k: usize,
    /// Rows in the Abacus table; sized from the data and eval ranges if unset.
    pub abacus_table: Option<usize>,
    pub rope_base: f64,
    pub rope_rotated_dims: Option<usize>,
    pub kind: VariantKind,
    pub layers: usize,
    pub recurrences: usize,
    pub injection_inside_block: bool,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_size: 256,
            intermediate_size: 512,
            attention_heads: 4,
            abacus: true,
            relative: RelativeScheme::None,
            abacus_k: 15,
            abacus_table: None,
            rope_base: 10_000.0,
            rope_rotated_dims: None,
            kind: VariantKind::StandardInputInjection,
            layers: 2,
            recurrences: 1,
            injection_inside_block: true,
            max_seq_len: 1024,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub max_i: usize,
    pub max_j: usize,
    /// `[first, last, stride]` of extra diagonal cells.
    pub diagonal: Option<[usize; 3]>,
    pub n_per_cell: usize,
    pub seed: u64,
    /// Defaults to the larger training length.
    pub train_max: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub keep_samples: usize,
    pub block_px: usize,
    /// Prompts used for per-recurrence accuracies of looped models.
    pub iteration_probes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            max_i: 20,
            max_j: 20,
            diagonal: None,
            n_per_cell: 100,
            seed: 1_000_003,
            train_max: None,
            checkpoint: None,
            keep_samples: 2,
            block_px: 8,
            iteration_probes: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub checkpoint_every: u64,
    /// Held-out exact match is logged every this many steps; 0 disables it.
    pub heldout_every: u64,
    pub heldout_samples: usize,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainingConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 1000,
            heldout_every: 500,
            heldout_samples: 64,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainingConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Sets `path` (dotted) in a TOML table; the value is parsed as a TOML
/// literal and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        return usage(format!("override {assignment:?} is not of the form key=value"));
    };
    let key = key.trim();
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_owned()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return usage(format!("malformed key {key:?}"));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return usage(format!("{key}: {part} is not a table")),
        };
    }
    cur.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table: toml::Table = match text.parse() {
            Ok(t) => t,
            Err(e) => return usage(format!("config: {e}")),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = match toml::Value::Table(table).try_into() {
            Ok(c) => c,
            Err(e) => return usage(format!("config: {e}")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        cfg.out_dir = resolve_out_dir(&cfg.out_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let d = &self.data;
        if d.max_first == 0 {
            return usage("data.max_first must be at least 1");
        }
        if d.max_second == 0 {
            return usage("data.max_second must be at least 1");
        }
        if d.samples == 0 && d.mode != SamplingMode::Exhaustive {
            return usage("data.samples must be at least 1");
        }
        if let Err(e) = d.spec().validate() {
            return usage(format!("data: {e}"));
        }
        if !(0.0..=1.0).contains(&d.random_padding) {
            return usage("data.random_padding must lie in [0, 1]");
        }
        if let Err(e) = self.train.validate() {
            return usage(format!("train: {e}"));
        }
        if self.eval.n_per_cell == 0 {
            return usage("eval.n_per_cell must be at least 1");
        }
        if self.model.abacus_k == 0 {
            return usage("model.abacus_k must be at least 1");
        }
        if let Err(e) = self.model_config().validate() {
            return usage(format!("model: {e}"));
        }
        if let Err(e) = self.variant().validate() {
            return usage(format!("model: {e}"));
        }
        Ok(())
    }

    pub fn train_max(&self) -> usize {
        self.eval.train_max.unwrap_or(self.data.max_first.max(self.data.max_second))
    }

    /// Longest digit run any training or evaluation sample can contain.
    pub fn longest_run(&self) -> usize {
        let d = &self.data;
        let e = &self.eval;
        let diag = e.diagonal.map_or(0, |[_, last, _]| last);
        let a = d.max_first.max(e.max_i).max(diag);
        let b = d.max_second.max(e.max_j).max(diag);
        match d.task {
            Task::Mul => a + b,
            Task::BitwiseOr => a.max(b),
            Task::Sort => b,
            _ => a.max(b) + 1,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let mut c = ModelConfig::sized(m.hidden_size, m.intermediate_size, m.attention_heads);
        c.position = PositionScheme {
            abacus: m.abacus,
            relative: m.relative,
        };
        c.abacus = match m.abacus_table {
            Some(table_size) => AbacusConfig {
                k: m.abacus_k,
                table_size,
            },
            None => AbacusConfig::new(m.abacus_k, self.longest_run()),
        };
        c.rope = RopeConfig {
            base: m.rope_base,
            rotated_dims: m.rope_rotated_dims,
        };
        c.max_seq_len = m.max_seq_len;
        c
    }

    pub fn variant(&self) -> ArchitectureVariant {
        let m = &self.model;
        ArchitectureVariant {
            kind: m.kind,
            block_layers: m.layers,
            recurrences: m.recurrences,
            injection_inside_block: m.injection_inside_block,
        }
    }

    pub fn data_path(&self) -> PathBuf {
        self.data.path.clone().unwrap_or_else(|| self.out_dir.join("data.jsonl"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the resolved config as `<command>.toml` in the run directory.
    pub fn write_resolved(&self, command: &str) -> anyhow::Result<PathBuf> {
        fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(format!("{command}.toml"));
        fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

pub fn resolve_out_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Records `outputs` for `command` in the run directory's `manifest.json`.
pub fn update_manifest(out_dir: &Path, command: &str, outputs: &[(&str, &Path)]) -> anyhow::Result<()> {
    let path = out_dir.join("manifest.json");
    let mut manifest: BTreeMap<String, BTreeMap<String, String>> = match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).context("reading manifest.json")?,
        Err(_) => BTreeMap::new(),
    };
    let entry = manifest.entry(command.to_owned()).or_default();
    for (name, p) in outputs {
        let rel = p.strip_prefix(out_dir).unwrap_or(p);
        entry.insert((*name).to_owned(), rel.display().to_string());
    }
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let mut hasher = Sha256::new();
    let mut f = BufReader::new(fs::File::open(path)?);
    std::io::copy(&mut f, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub count: usize,
    pub sha256: String,
}

pub fn cmd_gen_data(cfg: &RunConfig) -> anyhow::Result<DataManifest> {
    let spec = cfg.data.spec();
    let instances = spec.generate().map_err(|e| UsageError(format!("data: {e}")))?;
    let path = cfg.data_path();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    {
        let mut w = BufWriter::new(fs::File::create(&path)?);
        write_jsonl(&mut w, &instances)?;
        w.flush()?;
    }
    let manifest = DataManifest {
        seed: spec.seed,
        count: instances.len(),
        sha256: sha256_file(&path)?,
        spec,
    };
    let manifest_path = path.with_extension("manifest.json");
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    let config = cfg.write_resolved("gen-data")?;
    update_manifest(&cfg.out_dir, "gen-data", &[("data", &path), ("data_manifest", &manifest_path), ("config", &config)])?;
    Ok(manifest)
}

/// Applies the configured hint and padding formats, deterministically per
/// sample index.
pub fn encode_dataset(vocab: &Vocabulary, problems: &[ProblemInstance], data: &DataSection) -> anyhow::Result<Vec<EncodedSample>> {
    problems
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = indexed_rng(data.seed ^ 0xf0f0_0000_0000_0000, i as u64);
            let mut s = encode(vocab, p)?;
            if data.index_hints != HintMode::None {
                s = apply_index_hints(vocab, &s, data.index_hints, &mut rng)?;
            }
            if data.random_padding > 0.0 {
                s = apply_random_padding(vocab, &s, data.random_padding, &mut rng)?;
            }
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    #[serde(flatten)]
    pub metrics: StepMetrics,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub heldout_exact_match: Option<f64>,
}

pub fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Vec<ProblemInstance>> {
    let path = cfg.data_path();
    let f = fs::File::open(&path).map_err(|_| anyhow!("dataset not found: {} (run gen-data first)", path.display()))?;
    Ok(read_jsonl(BufReader::new(f))?)
}

fn heldout_set(cfg: &RunConfig) -> anyhow::Result<Vec<ProblemInstance>> {
    let mut spec = cfg.data.spec();
    spec.samples = cfg.heldout_samples.max(1);
    spec.seed ^= 0x0e1d_0000_0000_0000;
    if spec.mode == SamplingMode::Exhaustive {
        spec.mode = SamplingMode::Stratified;
        spec.task = Task::BitwiseOr;
    }
    Ok(spec.generate()?)
}

fn heldout_accuracy(model: &Model, vocab: &Vocabulary, problems: &[ProblemInstance], hints: HintMode) -> anyhow::Result<f64> {
    let dec = ModelDecoder::new(model, vocab);
    let scored = crate::evaluation::score_problems(&dec, problems, hints, 0)?;
    Ok(scored.iter().filter(|s| s.0).count() as f64 / problems.len().max(1) as f64)
}

fn step_checkpoint(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.ckpt"))
}

/// Trains from scratch or resumes from `checkpoints/latest.ckpt`, stopping
/// at `until` (or the configured step count).
pub fn cmd_train(cfg: &RunConfig, until: Option<u64>) -> anyhow::Result<TrainState> {
    let vocab = Vocabulary::standard();
    let problems = load_dataset(cfg)?;
    let data = encode_dataset(&vocab, &problems, &cfg.data)?;
    let heldout = if cfg.heldout_every > 0 { heldout_set(cfg)? } else { Vec::new() };
    let ck_dir = cfg.checkpoint_dir();
    fs::create_dir_all(&ck_dir)?;
    let latest = ck_dir.join("latest.ckpt");
    let model_cfg = cfg.model_config();
    let variant = cfg.variant();

    let mut state = if latest.exists() {
        let ck = Checkpoint::load(&latest)?;
        let model = ck.model.ok_or_else(|| anyhow!("{} holds no model", latest.display()))?;
        if model.config != model_cfg || model.variant != variant {
            bail!("{} was trained with a different model configuration", latest.display());
        }
        let optimizer = match ck.optimizer {
            Some(o) => AdamW::with_state(&model, &cfg.train, o),
            None => AdamW::new(&model, &cfg.train),
        };
        TrainState {
            model,
            optimizer,
            step: ck.step,
        }
    } else {
        TrainState::new(Model::new(model_cfg, variant, cfg.model.seed)?, &cfg.train)
    };

    // Records past the resumed step came from an interrupted run.
    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let mut kept = Vec::new();
    if let Ok(f) = fs::File::open(&metrics_path) {
        for line in BufReader::new(f).lines() {
            let line = line?;
            let rec: MetricsRecord = serde_json::from_str(&line)?;
            if rec.metrics.step <= state.step {
                kept.push(line);
            }
        }
    }
    let mut log = BufWriter::new(fs::File::create(&metrics_path)?);
    for line in &kept {
        writeln!(log, "{line}")?;
    }
    let config = cfg.write_resolved("train")?;

    let save = |st: &TrainState| -> anyhow::Result<()> {
        let mut ck = Checkpoint::of_model(st.model.clone(), st.step);
        ck.optimizer = Some(st.optimizer.state.clone());
        ck.meta.insert("task".into(), cfg.data.task.name().into());
        ck.meta.insert("train_max".into(), cfg.train_max().to_string());
        ck.save(&step_checkpoint(&ck_dir, st.step))?;
        ck.save(&latest)?;
        Ok(())
    };
    let target = until.unwrap_or(cfg.train.steps).min(cfg.train.steps);
    train(&mut state, &data, &vocab, &cfg.train, target, |m, st| {
        let heldout_exact_match = if cfg.heldout_every > 0 && (m.step % cfg.heldout_every == 0 || m.step == cfg.train.steps) {
            Some(heldout_accuracy(&st.model, &vocab, &heldout, cfg.data.index_hints).map_err(|e| crate::training::TrainError::Observer(e.to_string()))?)
        } else {
            None
        };
        let rec = MetricsRecord {
            metrics: m.clone(),
            heldout_exact_match,
        };
        let line = serde_json::to_string(&rec).map_err(|e| crate::training::TrainError::Observer(e.to_string()))?;
        writeln!(log, "{line}")?;
        if cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 {
            log.flush()?;
            save(st).map_err(|e| crate::training::TrainError::Observer(e.to_string()))?;
        }
        Ok(())
    })?;
    log.flush()?;
    if !step_checkpoint(&ck_dir, state.step).exists() {
        save(&state)?;
    }
    update_manifest(
        &cfg.out_dir,
        "train",
        &[("metrics", &metrics_path), ("checkpoint", &latest), ("config", &config)],
    )?;
    Ok(state)
}

pub fn read_metrics(path: &Path) -> anyhow::Result<Vec<MetricsRecord>> {
    let f = fs::File::open(path)?;
    BufReader::new(f)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

pub fn grid_spec(cfg: &RunConfig) -> GridSpec {
    GridSpec {
        max_i: cfg.eval.max_i,
        max_j: cfg.eval.max_j,
        diagonal: cfg.eval.diagonal.map(|[a, b, s]| (a, b, s)),
    }
}

#[derive(Debug)]
pub struct GridOutputs {
    pub report: EvalReport,
    pub csv: PathBuf,
    pub png: PathBuf,
    pub report_path: PathBuf,
}

/// Evaluates a checkpoint over the configured grid and writes CSV, heatmap
/// and report under `eval/`.
pub fn cmd_eval_grid(cfg: &RunConfig, checkpoint: Option<&Path>) -> anyhow::Result<GridOutputs> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .or_else(|| cfg.eval.checkpoint.clone())
        .unwrap_or_else(|| cfg.checkpoint_dir().join("latest.ckpt"));
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let vocab = Vocabulary::standard();
    let opts = EvalOptions {
        n_per_cell: cfg.eval.n_per_cell,
        seed: cfg.eval.seed,
        hints: cfg.data.index_hints,
        keep_samples: cfg.eval.keep_samples,
    };
    let spec = grid_spec(cfg);
    let train_max = cfg.train_max();
    let (grid, samples, iterations) = match ck.kind {
        CheckpointKind::Oracle => {
            let dec = OracleDecoder { vocab: vocab.clone() };
            let (g, s) = accuracy_grid(&dec, cfg.data.task, &spec, train_max, &opts)?;
            (g, s, None)
        }
        CheckpointKind::Model => {
            let mut model = ck.model.ok_or_else(|| anyhow!("checkpoint holds no model"))?;
            let needed = cfg.longest_run() + 2;
            if model.config.position.abacus && model.config.abacus.table_size < needed {
                // Rows past the trained range stay at their random init.
                model.extend_abacus_table(needed, cfg.model.seed)?;
            }
            let dec = ModelDecoder::new(&model, &vocab);
            let (g, s) = accuracy_grid(&dec, cfg.data.task, &spec, train_max, &opts)?;
            let iters = if model.variant.kind == VariantKind::Looped && cfg.eval.iteration_probes > 0 {
                let probes = DatasetSpec {
                    task: cfg.data.task,
                    max_first: cfg.eval.max_i,
                    max_second: cfg.eval.max_j,
                    samples: cfg.eval.iteration_probes,
                    seed: cfg.eval.seed ^ 0x17e2,
                    mode: SamplingMode::Stratified,
                }
                .generate()?;
                Some(iteration_accuracies(&model, &vocab, &probes)?)
            } else {
                None
            };
            (g, s, iters)
        }
    };
    let dir = cfg.out_dir.join("eval");
    fs::create_dir_all(&dir)?;
    let csv = dir.join("grid.csv");
    grid.write_csv(BufWriter::new(fs::File::create(&csv)?))?;
    let png = dir.join("grid.png");
    grid.render_png(&png, cfg.eval.block_px.max(1))?;
    let report = EvalReport::new(&grid, samples, iterations);
    let report_path = dir.join("report.json");
    fs::write(&report_path, serde_json::to_vec_pretty(&report)?)?;
    let config = cfg.write_resolved("eval-grid")?;
    update_manifest(
        &cfg.out_dir,
        "eval-grid",
        &[("grid_csv", &csv), ("heatmap", &png), ("report", &report_path), ("config", &config)],
    )?;
    Ok(GridOutputs {
        report,
        csv,
        png,
        report_path,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub label: String,
    pub params: usize,
    pub millions: usize,
}

/// Every `layers x recurrences` factorisation of `depth`, deepest block first.
pub fn param_table(config: &ModelConfig, depth: usize) -> anyhow::Result<Vec<ParamRow>> {
    let mut rows = Vec::new();
    for layers in (1..=depth).rev().filter(|l| depth % l == 0) {
        let r = depth / layers;
        let variant = if r == 1 {
            ArchitectureVariant::injected(layers)
        } else {
            ArchitectureVariant::looped(layers, r)
        };
        let params = param_count(config, &variant);
        rows.push(ParamRow {
            label: variant.label(),
            params,
            millions: (params as f64 / 1e6).round() as usize,
        });
    }
    Ok(rows)
}

pub fn cmd_param_count(cfg: &RunConfig, depth: usize, paper: bool, breakdown: bool, mut out: impl Write) -> anyhow::Result<Vec<ParamRow>> {
    let mut config = cfg.model_config();
    if paper {
        let p = ModelConfig::paper();
        config.hidden_size = p.hidden_size;
        config.embedding_size = p.embedding_size;
        config.intermediate_size = p.intermediate_size;
        config.attention_heads = p.attention_heads;
        config.abacus = p.abacus;
        config.max_seq_len = p.max_seq_len;
    }
    let rows = param_table(&config, depth)?;
    writeln!(
        out,
        "hidden {} intermediate {} heads {} vocab {} abacus rows {}",
        config.hidden_size, config.intermediate_size, config.attention_heads, config.vocab_size, config.abacus.table_size
    )?;
    writeln!(out, "{:<8} {:>14} {:>8}", "variant", "params", "rounded")?;
    for r in &rows {
        writeln!(out, "{:<8} {:>14} {:>7}M", r.label, r.params, r.millions)?;
    }
    if breakdown {
        for r in &rows {
            let (layers, rec) = r.label.split_once('x').expect("label");
            let (layers, rec): (usize, usize) = (layers.parse()?, rec.parse()?);
            let variant = if rec == 1 {
                ArchitectureVariant::injected(layers)
            } else {
                ArchitectureVariant::looped(layers, rec)
            };
            writeln!(out, "{}:", r.label)?;
            for (group, n) in param_breakdown(&config, &variant) {
                writeln!(out, "  {group:<12} {n:>14}")?;
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub per_param: Vec<(String, f64)>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Full-model gradient check in 64-bit on one batch. `fault` names a
/// parameter whose analytic gradient is deliberately offset, leaving the
/// loss value untouched, as a negative control.
pub fn full_model_grad_check(
    model: &Model,
    batch: &Batch,
    abacus_ids: Option<&[usize]>,
    opts: &GradCheckOptions,
    tolerance: f64,
    fault: Option<&str>,
) -> anyhow::Result<GradCheckSummary> {
    let fault_index = match fault {
        Some(name) => Some(model.index(name).ok_or_else(|| anyhow!("no parameter named {name}"))?),
        None => None,
    };
    let input = ForwardInput {
        tokens: &batch.inputs,
        batch: batch.batch,
        seq: batch.seq,
        abacus_ids,
    };
    let weights: Vec<f64> = batch.weights.iter().map(|&w| if w { 1.0 } else { 0.0 }).collect();
    let report = grad_check_with(
        |tape, vars| {
            let out = model
                .graph(tape, vars, &input, &ForwardOptions::default())
                .map_err(|e| SubstrateError::Invalid(e.to_string()))?;
            let loss = tape.cross_entropy(out[0], &batch.targets, &weights)?;
            match fault_index {
                Some(i) => {
                    let p = vars[i];
                    let frozen = Tensor::new(tape.shape(p).to_vec(), tape.value(p).to_vec())?;
                    let frozen = tape.constant(&frozen);
                    let zero = tape.axpy(-1.0, frozen, p)?;
                    let zero = tape.sum(zero);
                    let zero = tape.scale(zero, 1e-2);
                    tape.add(loss, zero)
                }
                None => Ok(loss),
            }
        },
        &model.params_as::<f64>(),
        opts,
    )?;
    let names = model.names();
    Ok(GradCheckSummary {
        max_rel_error: report.max_rel_error,
        worst_param: names[report.worst_param].clone(),
        per_param: names.iter().cloned().zip(report.per_param.iter().copied()).collect(),
        tolerance,
        passed: report.max_rel_error < tolerance,
    })
}

/// Batch of the first `n` configured training samples with offset 1 ids.
pub fn check_batch(cfg: &RunConfig, model: &Model, n: usize) -> anyhow::Result<(Batch, Option<Vec<usize>>)> {
    let vocab = Vocabulary::standard();
    let mut spec = cfg.data.spec();
    spec.samples = n;
    let problems: Vec<ProblemInstance> = spec.generate()?.into_iter().take(n).collect();
    let batch = Batch::collate(&encode_dataset(&vocab, &problems, &cfg.data)?)?;
    let ids = if model.config.position.abacus {
        Some(batch_abacus_ids(&vocab, &batch.inputs, batch.seq, 1, model.config.abacus.table_size)?)
    } else {
        None
    };
    Ok((batch, ids))
}

pub fn cmd_grad_check(cfg: &RunConfig, samples: usize, max_elements: Option<usize>, tolerance: f64, fault: Option<&str>) -> anyhow::Result<GradCheckSummary> {
    let model = Model::new(cfg.model_config(), cfg.variant(), cfg.model.seed)?;
    let (batch, ids) = check_batch(cfg, &model, samples)?;
    let opts = GradCheckOptions {
        step: 1e-5,
        max_elements,
        seed: cfg.model.seed,
    };
    let summary = full_model_grad_check(&model, &batch, ids.as_deref(), &opts, tolerance, fault)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("grad_check.json");
    fs::write(&path, serde_json::to_vec_pretty(&summary)?)?;
    let config = cfg.write_resolved("grad-check")?;
    update_manifest(&cfg.out_dir, "grad-check", &[("report", &path), ("config", &config)])?;
    Ok(summary)
}

/// Parses a canonical question such as `123+45` or `101|11`.
pub fn parse_canonical_question(text: &str) -> anyhow::Result<ProblemInstance> {
    let text = text.trim().trim_end_matches('=');
    for (c, task) in [('+', Task::Add), ('*', Task::Mul), ('|', Task::BitwiseOr), ('-', Task::Sub)] {
        if let Some((a, b)) = text.split_once(c) {
            return Ok(ProblemInstance::binary(task, a.trim(), b.trim())?);
        }
    }
    usage(format!("cannot parse question {text:?}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationInspection {
    pub question: String,
    pub gold: String,
    pub per_iteration: Vec<String>,
}

pub fn cmd_inspect_iterations(checkpoint: &Path, question: &str) -> anyhow::Result<IterationInspection> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model.ok_or_else(|| anyhow!("checkpoint holds no model"))?;
    let vocab = Vocabulary::standard();
    let p = parse_canonical_question(question)?;
    let prompt = encode_prompt(&vocab, &p)?;
    let gold = crate::encoding::answer_surface(p.task, &p.answer);
    let per_iteration = iteration_trace(&model, &vocab, &prompt.tokens, gold.chars().count() + 2)?;
    Ok(IterationInspection {
        question: crate::encoding::question_surface(&p),
        gold,
        per_iteration,
    })
}

#[derive(Parser, Debug)]
#[command(name = "abacus", about = "Arithmetic length-generalisation experiments", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> anyhow::Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a JSONL dataset and its manifest.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train, resuming from the latest checkpoint if present.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Stop after this step.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Exact-match grid over operand lengths.
    EvalGrid {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Parameter counts for every factorisation of a depth.
    ParamCount {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 16)]
        depth: usize,
        /// Use hidden 1024, intermediate 2048, 16 heads.
        #[arg(long)]
        paper: bool,
        #[arg(long)]
        breakdown: bool,
    },
    /// Finite-difference check of full-model gradients in 64-bit.
    GradCheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        /// Elements checked per parameter; 0 checks all.
        #[arg(long, default_value_t = 16)]
        max_elements: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Offset the analytic gradient of this parameter (negative control).
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Answers decoded after each recurrence of a looped model.
    InspectIterations {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Canonical question, e.g. `12345+678`.
        #[arg(long)]
        question: String,
    },
}

pub fn run(cli: Cli, mut out: impl Write) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { config } => {
            let cfg = config.load()?;
            let m = cmd_gen_data(&cfg)?;
            writeln!(out, "wrote {} instances to {} (sha256 {})", m.count, cfg.data_path().display(), m.sha256)?;
        }
        Command::Train { config, until } => {
            let cfg = config.load()?;
            let state = cmd_train(&cfg, until)?;
            writeln!(out, "trained to step {} in {}", state.step, cfg.out_dir.display())?;
        }
        Command::EvalGrid { config, checkpoint } => {
            let cfg = config.load()?;
            let o = cmd_eval_grid(&cfg, checkpoint.as_deref())?;
            for (cat, acc) in &o.report.category_means {
                writeln!(out, "{cat:<12} {acc:.4}")?;
            }
            if let Some(iters) = &o.report.iteration_accuracies {
                let parts: Vec<String> = iters.iter().map(|a| format!("{a:.3}")).collect();
                writeln!(out, "per-iteration {}", parts.join(" "))?;
            }
            writeln!(out, "wrote {}", o.csv.display())?;
        }
        Command::ParamCount {
            config,
            depth,
            paper,
            breakdown,
        } => {
            let cfg = config.load()?;
            if depth == 0 {
                return usage("depth must be at least 1");
            }
            cmd_param_count(&cfg, depth, paper, breakdown, &mut out)?;
        }
        Command::GradCheck {
            config,
            samples,
            max_elements,
            tolerance,
            fault,
        } => {
            let cfg = config.load()?;
            let max = (max_elements > 0).then_some(max_elements);
            let s = cmd_grad_check(&cfg, samples.max(1), max, tolerance, fault.as_deref())?;
            writeln!(out, "max relative error {:.3e} (worst parameter {})", s.max_rel_error, s.worst_param)?;
            writeln!(out, "{}", if s.passed { "PASS" } else { "FAIL" })?;
            if !s.passed {
                bail!("gradient check failed: {:.3e} >= {:.1e} at {}", s.max_rel_error, s.tolerance, s.worst_param);
            }
        }
        Command::InspectIterations { checkpoint, question } => {
            let r = cmd_inspect_iterations(&checkpoint, &question)?;
            writeln!(out, "{} gold {}", r.question, r.gold)?;
            for (i, s) in r.per_iteration.iter().enumerate() {
                writeln!(out, "r={} {s}", i + 1)?;
            }
        }
    }
    Ok(())
}

/// Exit status for an error: 2 for usage errors, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let cfg = RunConfig::from_toml_str("[train]\nsteps = 10\n", &["train.steps=20".into(), "data.task=mul".into()]).unwrap();
        assert_eq!(cfg.train.steps, 20);
        assert_eq!(cfg.data.task, Task::Mul);
        let err = RunConfig::from_toml_str("[train]\nstepz = 10\n", &[]).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("stepz"));
        assert!(RunConfig::from_toml_str("", &["nokey".into()]).is_err());
        let err = RunConfig::from_toml_str("", &["data.samples=0".into()]).unwrap_err();
        assert!(err.to_string().contains("data.samples"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::from_toml_str("", &["eval.diagonal=[101, 156, 5]".into(), "model.relative=\"fire\"".into()]).unwrap();
        let again = RunConfig::from_toml_str(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn abacus_table_covers_eval_range() {
        let cfg = RunConfig::from_toml_str("", &["eval.max_i=8".into(), "eval.max_j=8".into()]).unwrap();
        let c = cfg.model_config();
        assert_eq!(c.abacus.table_size, 15 + 9 + 1);
    }

    #[test]
    fn canonical_questions() {
        let p = parse_canonical_question("123+45").unwrap();
        assert_eq!((p.task, p.answer.as_str()), (Task::Add, "168"));
        assert_eq!(parse_canonical_question("3-12=").unwrap().answer, "-9");
        assert!(parse_canonical_question("abc").is_err());
    }

    #[test]
    fn param_table_factorisations() {
        let rows = param_table(&ModelConfig::sized(64, 128, 4), 16).unwrap();
        let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["16x1", "8x2", "4x4", "2x8", "1x16"]);
        assert!(rows.windows(2).all(|w| w[0].params > w[1].params));
    }
}
