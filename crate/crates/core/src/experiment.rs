//! Manifest-driven experiments: corpus generation, base pretraining, then
//! per-run intermediate learning, fine-tuning and evaluation, with
//! on-disk caching keyed by configuration hashes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::synth::{HASHTAG_FILE, HISTORY_FILE, SENTIMENT_FILE};
use crate::corpus::{
    balance_per_writer, exclude_eval_texts, load_histories, load_jsonl, split_ratio, split_temporal, synth_generate,
    Example, Histories, LabelSchema, Splits, SynthCorpus, SynthSpec, Warning,
};
use crate::encoder::{ClassifierHead, EncoderModel, ModelConfig, ProjectionHead};
use crate::error::{Error, Result};
use crate::evaluation::{
    consistency_groups, hashtag_metrics, hashtag_scores, predict_sentiment, rank_eval, sentiment_metrics,
    sentiment_scores, ExampleScore, MetricReport, SeedMetrics, Strategy, UnknownRouting,
};
use crate::seeding;
use crate::tensor::{load_checkpoint, save_checkpoint};
use crate::training::{
    finetune_sentiment, intermediate_mlm, pretrain_base, train_hashtag, writerwise_finetune, Conditioned, GridPoint,
    HashtagData, IntermediateReport, Method, PersonalizedSystem, PretrainReport, RunSpec, TaskHead, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sentiment,
    Hashtag,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Sentiment => "sentiment",
            Task::Hashtag => "hashtag",
        }
    }

    /// Metric used for selection, summaries and consistency scores.
    pub fn primary_metric(self) -> &'static str {
        match self {
            Task::Sentiment => "macro_f1",
            Task::Hashtag => "ndcg@5",
        }
    }
}

/// Encoder shape; the vocabulary size comes from the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub prompt_len: usize,
    pub prompt_hidden: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 16,
            heads: 2,
            ffn: 32,
            max_len: 40,
            prompt_len: 4,
            prompt_hidden: 8,
        }
    }
}

impl ModelSpec {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn: self.ffn,
            vocab_size,
            max_len: self.max_len,
            prompt_len: self.prompt_len,
            prompt_hidden: self.prompt_hidden,
        }
    }
}

/// A complete experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub task: Task,
    pub corpus: SynthSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Methods crossed with `regimes`; ignored when `runs` is given.
    pub methods: Vec<Method>,
    /// Intermediate learning off and/or on.
    pub regimes: Vec<bool>,
    /// Explicit method/regime list.
    pub runs: Option<Vec<RunSpec>>,
    pub seeds: Vec<u64>,
    /// Seed for corpus splits and base pretraining.
    pub data_seed: u64,
    pub unknown_strategies: Vec<Strategy>,
    /// Writers fine-tuned individually on top of each fine_tuning run.
    pub writers_subset: Option<usize>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            task: Task::Sentiment,
            corpus: SynthSpec::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            methods: Method::ALL.to_vec(),
            regimes: vec![false, true],
            runs: None,
            seeds: vec![1, 2, 3, 4, 5],
            data_seed: 0,
            unknown_strategies: Vec::new(),
            writers_subset: None,
        }
    }
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.runs.is_none() && (self.methods.is_empty() || self.regimes.is_empty()) {
            return Err(Error::config("methods and regimes must be non-empty"));
        }
        for r in self.run_specs() {
            r.validate()?;
        }
        if self.run_specs().is_empty() {
            return Err(Error::config("the manifest selects no runs"));
        }
        Ok(())
    }

    /// Runs in table order. In the crossed form, fine_tuning has no
    /// intermediate regime and is listed once.
    pub fn run_specs(&self) -> Vec<RunSpec> {
        if let Some(r) = &self.runs {
            return r.clone();
        }
        let mut out = Vec::new();
        for &method in &self.methods {
            for &intermediate in &self.regimes {
                if intermediate && !method.supports_intermediate() {
                    continue;
                }
                let r = RunSpec { method, intermediate };
                if !out.contains(&r) {
                    out.push(r);
                }
            }
        }
        out
    }

    /// Methods in table order, without repeats.
    pub fn method_rows(&self) -> Vec<Method> {
        let mut out: Vec<Method> = Vec::new();
        for r in self.run_specs() {
            if !out.contains(&r.method) {
                out.push(r.method);
            }
        }
        out
    }
}

fn sha_hex<T: Serialize>(v: &T) -> Result<String> {
    let bytes = serde_json::to_vec(v)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// Loaded, split corpus for one task.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub task: Task,
    pub meta: SynthCorpus,
    pub splits: Splits,
    /// Every balanced example of the held-out writers.
    pub unknown_eval: Vec<Example>,
    pub histories: Histories,
    pub hashtags: Option<HashtagData>,
    pub known: Vec<String>,
    pub unknown: Vec<String>,
    pub warnings: Vec<Warning>,
}

impl Prepared {
    pub fn model_config(&self, spec: &ModelSpec) -> ModelConfig {
        spec.config(self.meta.vocab.len())
    }

    /// Known writers' histories and training texts, plus tag texts for the
    /// hashtag task.
    pub fn pretraining_texts(&self) -> Vec<Vec<usize>> {
        let mut texts: Vec<Vec<usize>> = self
            .known
            .iter()
            .filter_map(|w| self.histories.get(w))
            .flat_map(|h| h.texts.iter().cloned())
            .collect();
        texts.extend(self.splits.train.iter().map(|e| e.tokens.clone()));
        if let Some(h) = &self.hashtags {
            texts.extend(h.tag_ids.iter().map(|t| t[1..t.len() - 1].to_vec()));
        }
        texts
    }
}

/// Generates the corpus into `dir` unless an identical one is there.
pub fn ensure_corpus(spec: &SynthSpec, dir: &Path, force: bool) -> Result<SynthCorpus> {
    let hash = sha_hex(spec)?;
    let stamp = dir.join("corpus.hash");
    if !force && fs::read_to_string(&stamp).is_ok_and(|h| h.trim() == hash) {
        return SynthCorpus::read_meta(dir);
    }
    let c = synth_generate(spec)?;
    c.write_to(dir)?;
    fs::write(&stamp, &hash).map_err(|e| Error::io(&stamp, e))?;
    Ok(c)
}

/// Loads the task files in `dir`, balances and splits known writers and
/// keeps held-out writers apart.
pub fn prepare(task: Task, dir: &Path, data_seed: u64, max_len: usize) -> Result<Prepared> {
    let meta = SynthCorpus::read_meta(dir)?;
    let vocab = &meta.vocab;
    let mut histories = load_histories(&dir.join(HISTORY_FILE), vocab)?;
    let mut warnings = Vec::new();
    let is_known = |e: &Example| meta.known_writers.contains(&e.writer);
    let (splits, unknown_eval, hashtags) = match task {
        Task::Sentiment => {
            let all = load_jsonl(&dir.join(SENTIMENT_FILE), vocab, LabelSchema::Sentiment)?;
            let (balanced, w) = balance_per_writer(&all, data_seed)?;
            warnings.extend(w);
            let (known, unknown): (Vec<Example>, Vec<Example>) = balanced.into_iter().partition(is_known);
            let mut splits = split_ratio(&known, data_seed);
            warnings.append(&mut splits.warnings);
            (splits, unknown, None)
        }
        Task::Hashtag => {
            let all = load_jsonl(&dir.join(HASHTAG_FILE), vocab, LabelSchema::Hashtag(&meta.hashtags))?;
            let (known, unknown): (Vec<Example>, Vec<Example>) = all.into_iter().partition(is_known);
            let splits = split_temporal(&known)?;
            let data = HashtagData::new(meta.hashtags.clone(), vocab, max_len)?;
            (splits, unknown, Some(data))
        }
    };
    let eval: Vec<Example> = splits.dev.iter().chain(&splits.test).chain(&unknown_eval).cloned().collect();
    exclude_eval_texts(&mut histories, &eval);
    Ok(Prepared {
        task,
        known: meta.known_writers.clone(),
        unknown: meta.unknown_writers.clone(),
        meta,
        splits,
        unknown_eval,
        histories,
        hashtags,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub config_hash: String,
    pub report: PretrainReport,
}

fn pretrain_hash(m: &Manifest) -> Result<String> {
    let t = &m.train;
    sha_hex(&(
        m.task,
        &m.corpus,
        &m.model,
        m.data_seed,
        (t.pretrain_epochs, t.pretrain_lr, t.mask_prob, t.batch_size, t.clip_norm),
    ))
}

/// Pretrains the base encoder, or loads it when the stored hash matches.
pub fn ensure_base(m: &Manifest, prep: &Prepared, dir: &Path, force: bool) -> Result<(EncoderModel, PretrainRecord)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash = pretrain_hash(m)?;
    let rec_path = dir.join("pretrain.json");
    let stem = dir.join("base");
    let cfg = prep.model_config(&m.model);
    if !force {
        if let Ok(text) = fs::read_to_string(&rec_path) {
            let rec: PretrainRecord = serde_json::from_str(&text)?;
            if rec.config_hash == hash {
                let enc = EncoderModel::from_params(cfg, load_checkpoint(&stem)?)?;
                return Ok((enc, rec));
            }
        }
    }
    let seed = seeding::derive(m.data_seed, "pretrain");
    let (enc, report) = pretrain_base(&prep.pretraining_texts(), cfg, &m.train, seed)?;
    save_checkpoint(&enc.params, &stem)?;
    let rec = PretrainRecord {
        config_hash: hash,
        report,
    };
    write_json(&rec_path, &rec)?;
    Ok((enc, rec))
}

/// One scored example: class prediction or gold rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub writer: String,
    pub gold: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub test: Vec<PredictionRow>,
    pub unknown: BTreeMap<Strategy, Vec<PredictionRow>>,
}

impl Predictions {
    pub fn scores(rows: &[PredictionRow]) -> Vec<ExampleScore> {
        rows.iter()
            .map(|r| ExampleScore {
                writer: r.writer.clone(),
                score: r.score,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterwiseSummary {
    pub writers: Vec<String>,
    pub skipped: Vec<String>,
    pub test_macro_f1: f64,
    pub per_writer: BTreeMap<String, GridPoint>,
    /// One full checkpoint per writer.
    pub writerwise_bytes: usize,
}

/// Everything a run reports, minus wall time (kept apart so reruns
/// reproduce this record byte for byte).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub task: Task,
    pub method: Method,
    pub intermediate: bool,
    pub seed: u64,
    pub best: GridPoint,
    pub grid: Vec<GridPoint>,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub intermediate_report: Option<IntermediateReport>,
    pub test: SeedMetrics,
    pub unknown: BTreeMap<Strategy, SeedMetrics>,
    pub writerwise: Option<WriterwiseSummary>,
    /// Per-writer parameters stored on top of the shared encoder.
    pub writer_param_bytes: usize,
    pub full_param_bytes: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
}

pub fn run_hash(m: &Manifest, run: RunSpec, seed: u64) -> Result<String> {
    sha_hex(&(
        pretrain_hash(m)?,
        run,
        &m.train,
        seed,
        &m.unknown_strategies,
        m.writers_subset,
    ))
}

fn score_sentiment<'e>(sys: &PersonalizedSystem, ex: &'e [Example], route: impl Fn(&'e Example) -> Conditioned<'e>) -> Result<(SeedMetrics, Vec<PredictionRow>)> {
    let pred = predict_sentiment(sys, ex, route)?;
    let metrics = sentiment_metrics(&pred, ex, sys.seed)?;
    let scores = sentiment_scores(&pred, ex)?;
    let rows = ex
        .iter()
        .zip(&pred)
        .zip(scores)
        .map(|((e, &p), s)| PredictionRow {
            writer: e.writer.clone(),
            gold: e.label.class().map_or(0, |c| c.index()),
            pred: Some(p),
            rank: None,
            score: s.score,
        })
        .collect();
    Ok((metrics, rows))
}

fn score_hashtag<'e>(
    sys: &PersonalizedSystem,
    ex: &'e [Example],
    data: &HashtagData,
    k_eval: usize,
    route: impl Fn(&'e Example) -> Conditioned<'e>,
    warnings: &mut Vec<String>,
) -> Result<(SeedMetrics, Vec<PredictionRow>)> {
    let out = rank_eval(sys, ex, data, k_eval, seeding::derive(sys.seed, "rank-test"), route)?;
    if let Some(w) = &out.warning {
        if !warnings.contains(w) {
            warnings.push(w.clone());
        }
    }
    let metrics = hashtag_metrics(&out, sys.seed);
    let rows = out
        .records
        .iter()
        .zip(hashtag_scores(&out))
        .map(|(r, s)| PredictionRow {
            writer: r.writer.clone(),
            gold: r.gold,
            pred: None,
            rank: Some(r.rank),
            score: s.score,
        })
        .collect();
    Ok((metrics, rows))
}

fn via<'e>(r: &'e UnknownRouting) -> impl Fn(&'e Example) -> Conditioned<'e> {
    move |e| r.route(&e.writer)
}

fn own(e: &Example) -> Conditioned<'_> {
    Conditioned::Writer(&e.writer)
}

/// Trains and evaluates one method/regime/seed on prepared data.
pub fn run_one(m: &Manifest, prep: &Prepared, base: &EncoderModel, run: RunSpec, seed: u64) -> Result<(RunRecord, Predictions)> {
    run.validate()?;
    let train = &m.train;
    let hidden = base.config.hidden;
    let mut head_rng = seeding::rng(seed, "head");
    let head = match prep.task {
        Task::Sentiment => TaskHead::Classifier(ClassifierHead::new(hidden, &mut head_rng)),
        Task::Hashtag => TaskHead::Projection(ProjectionHead::new(hidden, &mut head_rng)),
    };
    let (mut sys, build_warnings) =
        PersonalizedSystem::new(run.method, base, head, &prep.known, &prep.histories, train, seed)?;
    let mut warnings: Vec<String> = build_warnings
        .iter()
        .map(|w| format!("{}: {}", w.writer, w.reason))
        .collect();
    let intermediate_report = if run.intermediate {
        let r = intermediate_mlm(&mut sys, &prep.histories, &prep.known, train)?;
        warnings.extend(r.warnings.iter().map(|w| format!("{}: {}", w.writer, w.reason)));
        Some(r)
    } else {
        None
    };
    let trained = match prep.task {
        Task::Sentiment => finetune_sentiment(&sys, &prep.splits, train)?,
        Task::Hashtag => {
            let data = prep.hashtags.as_ref().expect("hashtag data");
            train_hashtag(&sys, &prep.splits, data, train)?
        }
    };
    let mut system = trained.system;
    let (test, test_rows) = match prep.task {
        Task::Sentiment => score_sentiment(&system, &prep.splits.test, own)?,
        Task::Hashtag => score_hashtag(
            &system,
            &prep.splits.test,
            prep.hashtags.as_ref().expect("hashtag data"),
            train.k_eval,
            own,
            &mut warnings,
        )?,
    };

    let mut unknown = BTreeMap::new();
    let mut unknown_rows = BTreeMap::new();
    if !m.unknown_strategies.is_empty() && !prep.unknown_eval.is_empty() {
        if let Some(t) = system.token_contexts_mut() {
            t.add_histories(&prep.histories);
        }
        for &s in &m.unknown_strategies {
            let routing = UnknownRouting::new(s, base, &prep.histories, &prep.known, &prep.unknown)?;
            warnings.extend(routing.warnings.iter().map(|w| format!("{}: {}", w.writer, w.reason)));
            let route = via(&routing);
            let (metrics, rows) = match prep.task {
                Task::Sentiment => score_sentiment(&system, &prep.unknown_eval, route)?,
                Task::Hashtag => score_hashtag(
                    &system,
                    &prep.unknown_eval,
                    prep.hashtags.as_ref().expect("hashtag data"),
                    train.k_eval,
                    route,
                    &mut warnings,
                )?,
            };
            unknown.insert(s, metrics);
            unknown_rows.insert(s, rows);
        }
    }

    let writerwise = match (prep.task, run.method, m.writers_subset) {
        (Task::Sentiment, Method::FineTuning, Some(n)) => {
            let mut writers = prep.known.clone();
            writers.shuffle(&mut seeding::rng(seed, "writerwise"));
            writers.truncate(n);
            writers.sort();
            let r = writerwise_finetune(&system, &writers, &prep.splits, train)?;
            Some(WriterwiseSummary {
                writers,
                skipped: r.skipped,
                test_macro_f1: r.test_macro_f1,
                per_writer: r.per_writer,
                writerwise_bytes: r.writerwise_bytes,
            })
        }
        _ => None,
    };

    let record = RunRecord {
        config_hash: run_hash(m, run, seed)?,
        task: prep.task,
        method: run.method,
        intermediate: run.intermediate,
        seed,
        best: trained.best,
        grid: trained.grid,
        initial_loss: trained.initial_loss,
        epoch_losses: trained.epoch_losses,
        intermediate_report,
        test,
        unknown,
        writerwise,
        writer_param_bytes: system.writer_param_bytes()?,
        full_param_bytes: system.full_param_bytes(),
        warnings,
    };
    let preds = Predictions {
        test: test_rows,
        unknown: unknown_rows,
    };
    Ok((record, preds))
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let body = serde_json::to_string_pretty(v)? + "\n";
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const TIMING_FILE: &str = "timing.json";

pub fn run_dir(out: &Path, task: Task, run: RunSpec, seed: u64) -> PathBuf {
    out.join("runs").join(task.as_str()).join(run.label()).join(format!("seed{seed}"))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub force: bool,
    pub jobs: usize,
}

/// One cell of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub method: Method,
    pub intermediate: bool,
    pub report: MetricReport,
    /// Metrics files the numbers come from.
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub task: Task,
    pub metric: String,
    pub cells: Vec<SummaryCell>,
}

impl Summary {
    pub fn cell(&self, method: Method, intermediate: bool) -> Option<&SummaryCell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.intermediate == intermediate)
    }

    /// Mean of the primary metric.
    pub fn mean(&self, method: Method, intermediate: bool) -> Option<f64> {
        self.cell(method, intermediate)
            .and_then(|c| c.report.primary_summary())
            .map(|s| s.mean)
    }

    /// Method rows by regime columns, `mean ± std` of the primary metric.
    pub fn to_table(&self, methods: &[Method]) -> String {
        let mut out = format!("| method | {} | {} +Inter |\n|---|---|---|\n", self.metric, self.metric);
        for &m in methods {
            let cell = |inter| {
                self.cell(m, inter)
                    .and_then(|c| c.report.primary_summary())
                    .map_or("-".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.std))
            };
            let _ = writeln!(out, "| {} | {} | {} |", m.as_str(), cell(false), cell(true));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,intermediate,metric,mean,std,seeds\n");
        for c in &self.cells {
            for (k, s) in &c.report.summary {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    c.method.as_str(),
                    c.intermediate,
                    k,
                    s.mean,
                    s.std,
                    c.report.seeds.len()
                );
            }
        }
        out
    }
}

/// Runs every stage of `m` under `out`, reusing cached stages whose hash
/// matches, and writes the summary files.
pub fn run_manifest(m: &Manifest, manifest_text: &str, out: &Path, opts: &RunOptions) -> Result<Summary> {
    m.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let copy = out.join("manifest.toml");
    fs::write(&copy, manifest_text).map_err(|e| Error::io(&copy, e))?;

    let data_dir = out.join("data");
    ensure_corpus(&m.corpus, &data_dir, opts.force).map_err(|e| stage("synth", e))?;
    let prep = prepare(m.task, &data_dir, m.data_seed, m.model.max_len).map_err(|e| stage("prepare", e))?;
    for w in &prep.warnings {
        log::warn!("{}: {}", w.writer, w.reason);
    }
    let (base, pre) = ensure_base(m, &prep, &out.join("pretrain"), opts.force).map_err(|e| stage("pretrain", e))?;
    log::info!(
        "base encoder: held-out MLM loss {:.4} -> {:.4}",
        pre.report.heldout_loss_before,
        pre.report.heldout_loss_after
    );

    let jobs: Vec<(RunSpec, u64)> = m
        .run_specs()
        .into_iter()
        .flat_map(|r| m.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= jobs.len() || failure.lock().expect("lock").is_some() {
            break;
        }
        let (run, seed) = jobs[i];
        if let Err(e) = execute(m, &prep, &base, run, seed, out, opts.force) {
            let mut f = failure.lock().expect("lock");
            if f.is_none() {
                *f = Some(stage(&format!("run {} seed {seed}", run.label()), e));
            }
        }
    };
    let n = opts.jobs.clamp(1, jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..n {
            s.spawn(worker);
        }
    });
    if let Some(e) = failure.into_inner().expect("lock") {
        return Err(e);
    }

    let summary = summarize(m, out)?;
    write_json(&out.join("summary.json"), &summary)?;
    let table = summary.to_table(&m.method_rows());
    for (name, body) in [("summary.md", table), ("summary.csv", summary.to_csv())] {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(summary)
}

fn stage(name: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("{name}: {msg}")),
        other => Error::Contract(format!("stage {name} failed: {other}")),
    }
}

fn execute(m: &Manifest, prep: &Prepared, base: &EncoderModel, run: RunSpec, seed: u64, out: &Path, force: bool) -> Result<()> {
    let dir = run_dir(out, m.task, run, seed);
    let metrics = dir.join(METRICS_FILE);
    let hash = run_hash(m, run, seed)?;
    if !force && dir.join(PREDICTIONS_FILE).exists() {
        if let Ok(rec) = read_json::<RunRecord>(&metrics) {
            if rec.config_hash == hash {
                log::info!("{} seed {seed}: up to date", run.label());
                return Ok(());
            }
        }
    }
    let start = Instant::now();
    let (rec, preds) = run_one(m, prep, base, run, seed)?;
    let wall = start.elapsed().as_secs_f64();
    write_json(&dir.join(PREDICTIONS_FILE), &preds)?;
    write_json(&dir.join(TIMING_FILE), &Timing { wall_seconds: wall })?;
    write_json(&metrics, &rec)?;
    log::info!(
        "{} seed {seed}: {} {:.4} ({wall:.1}s)",
        run.label(),
        m.task.primary_metric(),
        rec.test.overall.get(m.task.primary_metric()).copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Collects per-run metrics files into the summary table.
pub fn summarize(m: &Manifest, out: &Path) -> Result<Summary> {
    let mut cells = Vec::new();
    for run in m.run_specs() {
        let mut seeds = Vec::new();
        let mut sources = Vec::new();
        for &s in &m.seeds {
            let p = run_dir(out, m.task, run, s).join(METRICS_FILE);
            let rec: RunRecord = read_json(&p)?;
            seeds.push(rec.test);
            sources.push(p.strip_prefix(out).unwrap_or(&p).display().to_string());
        }
        cells.push(SummaryCell {
            method: run.method,
            intermediate: run.intermediate,
            report: MetricReport::new(m.task.primary_metric(), seeds),
            sources,
        });
    }
    Ok(Summary {
        name: m.name.clone(),
        task: m.task,
        metric: m.task.primary_metric().to_string(),
        cells,
    })
}

/// Ga/Gb/Gc of one run against a baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub run: String,
    pub baseline: String,
    pub pct_a: f64,
    pub pct_b: f64,
    pub pct_c: f64,
    pub ga: Vec<String>,
    pub gb: Vec<String>,
    pub gc: Vec<String>,
    pub flagged: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnknownRow {
    pub task: Task,
    pub method: Method,
    pub intermediate: bool,
    pub strategy: Strategy,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub consistency: Vec<ConsistencyRow>,
    pub unknown: Vec<UnknownRow>,
}

fn load_predictions(dir: &Path) -> Result<Predictions> {
    let p = dir.join(PREDICTIONS_FILE);
    if !p.exists() {
        return Err(Error::config(format!("missing prediction dump {}", p.display())));
    }
    read_json(&p)
}

/// Compares the test predictions of `run` against `baseline`.
pub fn compare_runs(run: &Path, baseline: &Path, seed: u64) -> Result<ConsistencyRow> {
    let a = load_predictions(run)?;
    let b = load_predictions(baseline)?;
    let g = consistency_groups(&Predictions::scores(&a.test), &Predictions::scores(&b.test), seed)?;
    Ok(ConsistencyRow {
        run: run.display().to_string(),
        baseline: baseline.display().to_string(),
        pct_a: g.pct_a,
        pct_b: g.pct_b,
        pct_c: g.pct_c,
        ga: g.ga,
        gb: g.gb,
        gc: g.gc,
        flagged: g.flagged,
    })
}

/// Every run under `out` against the fine_tuning run of the same task and
/// seed, plus the unknown-writer table.
pub fn analyze_out(out: &Path, seed: u64) -> Result<Analysis> {
    let runs_root = out.join("runs");
    let mut records: Vec<(PathBuf, RunRecord)> = Vec::new();
    let mut dirs = vec![runs_root.clone()];
    while let Some(d) = dirs.pop() {
        let Ok(rd) = fs::read_dir(&d) else { continue };
        let mut entries: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                dirs.push(p);
            } else if p.file_name().is_some_and(|n| n == METRICS_FILE) {
                let dir = p.parent().expect("file has a parent").to_path_buf();
                records.push((dir, read_json(&p)?));
            }
        }
    }
    if records.is_empty() {
        return Err(Error::config(format!("no completed runs under {}", runs_root.display())));
    }
    records.sort_by(|a, b| a.0.cmp(&b.0));
    let mut consistency = Vec::new();
    for (dir, rec) in &records {
        if rec.method == Method::FineTuning {
            continue;
        }
        let base = run_dir(out, rec.task, RunSpec { method: Method::FineTuning, intermediate: false }, rec.seed);
        if !base.join(METRICS_FILE).exists() {
            continue;
        }
        let mut row = compare_runs(dir, &base, seed)?;
        row.run = dir.strip_prefix(out).unwrap_or(dir).display().to_string();
        row.baseline = base.strip_prefix(out).unwrap_or(&base).display().to_string();
        consistency.push(row);
    }
    let mut groups: BTreeMap<(Task, Method, bool, Strategy), Vec<SeedMetrics>> = BTreeMap::new();
    for (_, rec) in &records {
        for (s, m) in &rec.unknown {
            groups
                .entry((rec.task, rec.method, rec.intermediate, *s))
                .or_default()
                .push(m.clone());
        }
    }
    let unknown = groups
        .into_iter()
        .map(|((task, method, intermediate, strategy), seeds)| {
            let r = MetricReport::new(task.primary_metric(), seeds);
            let s = r.primary_summary().cloned().unwrap_or(crate::evaluation::Summary { mean: 0.0, std: 0.0 });
            UnknownRow {
                task,
                method,
                intermediate,
                strategy,
                metric: r.primary.clone(),
                mean: s.mean,
                std: s.std,
                seeds: r.seeds.len(),
            }
        })
        .collect();
    Ok(Analysis { consistency, unknown })
}

/// Writes `consistency.{json,csv}` and `unknown.{json,csv}` into `dir`.
pub fn write_analysis(a: &Analysis, dir: &Path) -> Result<()> {
    write_json(&dir.join("consistency.json"), &a.consistency)?;
    write_json(&dir.join("unknown.json"), &a.unknown)?;
    let mut c = String::from("run,baseline,pct_a,pct_b,pct_c,n_a,n_b,n_c,flagged\n");
    for r in &a.consistency {
        let _ = writeln!(
            c,
            "{},{},{},{},{},{},{},{},{}",
            r.run,
            r.baseline,
            r.pct_a,
            r.pct_b,
            r.pct_c,
            r.ga.len(),
            r.gb.len(),
            r.gc.len(),
            r.flagged.len()
        );
    }
    let mut u = String::from("task,method,intermediate,strategy,metric,mean,std,seeds\n");
    for r in &a.unknown {
        let _ = writeln!(
            u,
            "{},{},{},{},{},{},{},{}",
            r.task.as_str(),
            r.method.as_str(),
            r.intermediate,
            r.strategy.as_str(),
            r.metric,
            r.mean,
            r.std,
            r.seeds
        );
    }
    for (name, body) in [("consistency.csv", c), ("unknown.csv", u)] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crossed_runs_skip_fine_tuning_intermediate() {
        let m = Manifest::default();
        let runs = m.run_specs();
        assert_eq!(runs.len(), 13);
        assert_eq!(m.method_rows().len(), 7);
        assert!(!runs.contains(&RunSpec {
            method: Method::FineTuning,
            intermediate: true
        }));
    }

    #[test]
    fn explicit_fine_tuning_intermediate_is_rejected() {
        let text = "runs = [{ method = \"fine_tuning\", intermediate = true }]\n";
        assert!(matches!(Manifest::from_toml(text), Err(Error::Config(_))));
        assert!(matches!(Manifest::from_toml("bogus = 1\n"), Err(Error::Config(_))));
        let ok = Manifest::from_toml("task = \"hashtag\"\nseeds = [3]\n[model]\nhidden = 32\n").unwrap();
        assert_eq!(ok.task, Task::Hashtag);
        assert_eq!(ok.model.hidden, 32);
        assert_eq!(ok.model.layers, ModelSpec::default().layers);
    }

    #[test]
    fn hashes_separate_runs() {
        let m = Manifest::default();
        let a = RunSpec {
            method: Method::SoftFix,
            intermediate: false,
        };
        let b = RunSpec {
            intermediate: true,
            ..a
        };
        assert_eq!(run_hash(&m, a, 1).unwrap(), run_hash(&m, a, 1).unwrap());
        assert_ne!(run_hash(&m, a, 1).unwrap(), run_hash(&m, b, 1).unwrap());
        assert_ne!(run_hash(&m, a, 1).unwrap(), run_hash(&m, a, 2).unwrap());
        assert_eq!(run_hash(&m, a, 1).unwrap().len(), 64);
    }
}
