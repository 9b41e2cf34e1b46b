//! Run configuration, on-disk artifacts and the ingest → index → run →
//! report workflow behind the command-line tool.

pub mod config;
pub mod rundir;
mod sweep;
mod table;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adaptation::AdaptedDemonstration;
use crate::corpus::{build_corpus, Corpus, TaskRecord};
use crate::embedding::{
    build_index, EmbedStats, Embedder, EmbeddingChannel, EmbeddingIndex, EmbeddingProvider, HashingEmbedder,
    OpenAiEmbeddings, VectorCache,
};
use crate::evaluation::{pair_distribution_report, ExperimentReport, SelectionTrace};
use crate::llm::{
    load_script, ChatProvider, Gateway, LlmError, MockProvider, OpenAiChat, RecordingProvider, SyntheticResponder,
    TranscriptEntry,
};
use crate::pipeline::{
    call_budget, evaluation_slices, run_experiment, CallBudget, Engine, ItemRecord, Method, PipelineError,
};
use crate::prompts::PromptSet;
use crate::selection::{summarize_template, CriterionRegistry, PerplexityCache, TaskBasis};

pub use config::{
    canonical_json, fingerprint_value, ChatBackend, ChatConfig, CorpusConfig, EmbeddingBackend, EmbeddingConfig,
    RunConfig,
};
pub use rundir::{RunDir, RunPhase, RunState};
pub use sweep::{sweep_points, AblationPoint, Sweep};
pub use table::{render_table, LoadedRun};

#[derive(Debug, Error)]
pub enum RunError {
    /// Bad input: config, flags, paths or missing prerequisites.
    #[error("{0}")]
    User(String),
    /// Provider, I/O or other failure while running.
    #[error("{0}")]
    Runtime(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::User(_) => 1,
            RunError::Runtime(_) => 2,
        }
    }
}

impl From<LlmError> for RunError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::Config(m) => RunError::User(m),
            other => RunError::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> RunError {
    RunError::Runtime(e.to_string())
}

pub const CORPUS_FILE: &str = "corpus.json";

#[derive(Serialize, Deserialize)]
struct StoredCorpus {
    digest: String,
    corpus: Corpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestStatus {
    Written,
    UpToDate,
}

#[derive(Debug, Clone)]
pub struct IngestSummary {
    pub status: IngestStatus,
    pub digest: String,
    pub path: PathBuf,
    pub source_by_category: BTreeMap<String, usize>,
    pub target_by_category: BTreeMap<String, usize>,
}

fn by_category(tasks: &BTreeMap<String, TaskRecord>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for t in tasks.values() {
        *out.entry(t.category.clone()).or_insert(0) += 1;
    }
    out
}

/// Reads both splits and stores them under the cache directory. An
/// unchanged corpus is left untouched.
pub fn ingest(cfg: &RunConfig) -> Result<IngestSummary, RunError> {
    let c = &cfg.corpus;
    let corpus = build_corpus(&c.source_dir, &c.target_dir, &c.schema).map_err(|e| RunError::User(e.to_string()))?;
    let digest = corpus.digest();
    let path = cfg.cache_dir.join(CORPUS_FILE);
    let status = match read_stored(&path) {
        Ok(Some(stored)) if stored.digest == digest => IngestStatus::UpToDate,
        _ => {
            fs::create_dir_all(&cfg.cache_dir).map_err(|e| runtime(format!("{}: {e}", cfg.cache_dir.display())))?;
            let stored = StoredCorpus {
                digest: digest.clone(),
                corpus: corpus.clone(),
            };
            rundir::write_atomic(&path, &serde_json::to_vec(&stored).map_err(runtime)?)?;
            IngestStatus::Written
        }
    };
    Ok(IngestSummary {
        status,
        digest,
        path,
        source_by_category: by_category(&corpus.source_tasks),
        target_by_category: by_category(&corpus.target_tasks),
    })
}

fn read_stored(path: &Path) -> Result<Option<StoredCorpus>, RunError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| RunError::User(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(runtime(format!("{}: {e}", path.display()))),
    }
}

/// The ingested corpus, or a fresh ingest when `auto` is set.
pub fn load_corpus(cfg: &RunConfig, auto: bool) -> Result<Corpus, RunError> {
    let path = cfg.cache_dir.join(CORPUS_FILE);
    if auto {
        ingest(cfg)?;
    }
    match read_stored(&path)? {
        Some(s) => Ok(s.corpus),
        None => Err(RunError::User(format!(
            "no corpus at {}; run `crossicl ingest` first or pass --auto",
            path.display()
        ))),
    }
}

pub fn chat_provider(cfg: &ChatConfig) -> Result<Arc<dyn ChatProvider>, RunError> {
    match cfg.backend {
        ChatBackend::Mock => {
            let entries = match &cfg.mock_script {
                Some(p) => load_script(p)?,
                None => Vec::new(),
            };
            if entries.is_empty() && !cfg.mock_fallback {
                return Err(RunError::User("mock backend needs a script or mock_fallback".into()));
            }
            let mut mock = MockProvider::from_entries(entries);
            if cfg.mock_fallback {
                mock = mock.with_fallback(Arc::new(SyntheticResponder::default()));
            }
            Ok(Arc::new(mock))
        }
        ChatBackend::OpenaiCompatible => {
            let live: Arc<dyn ChatProvider> = Arc::new(OpenAiChat::new());
            match &cfg.record_script {
                Some(p) => Ok(Arc::new(RecordingProvider::new(live, p)?)),
                None => Ok(live),
            }
        }
    }
}

pub fn chat_gateway(cfg: &ChatConfig) -> Result<Gateway, RunError> {
    Ok(Gateway::new(chat_provider(cfg)?, cfg.profile.clone())?)
}

pub fn embedder(cfg: &RunConfig) -> Result<Embedder, RunError> {
    let e = &cfg.embeddings;
    let provider: Arc<dyn EmbeddingProvider> = match e.backend {
        EmbeddingBackend::Hashing => Arc::new(HashingEmbedder::new(e.dim)),
        EmbeddingBackend::OpenaiCompatible => {
            Arc::new(OpenAiEmbeddings::new(e.endpoint.clone(), e.model_id.clone(), e.auth_env.clone()))
        }
    };
    let cache = VectorCache::open(&cfg.cache_dir, provider.model_id()).map_err(runtime)?;
    Ok(Embedder::new(provider).with_cache(cache).with_batch_size(e.batch_size))
}

fn registry_and_channels(cfg: &RunConfig) -> Result<(CriterionRegistry, BTreeSet<EmbeddingChannel>), RunError> {
    let registry = CriterionRegistry::builtin();
    let strategy = registry.get(&cfg.experiment.criterion).map_err(|e| RunError::User(e.to_string()))?;
    let channels = if cfg.experiment.method.uses_selection() {
        strategy.channels()
    } else {
        [EmbeddingChannel::Description].into_iter().collect()
    };
    Ok((registry, channels))
}

#[derive(Debug, Clone, Serialize)]
pub struct IndexSummary {
    pub model_id: String,
    pub dim: usize,
    pub channels: Vec<EmbeddingChannel>,
    pub task_vectors: usize,
    pub instance_vectors: usize,
    pub provider_calls: usize,
    pub texts_embedded: usize,
    pub cache_hits: usize,
}

impl IndexSummary {
    fn new(index: &EmbeddingIndex, stats: EmbedStats) -> Self {
        Self {
            model_id: index.model_id.clone(),
            dim: index.dim,
            channels: index.channels.iter().copied().collect(),
            task_vectors: index.task_vector_count(),
            instance_vectors: index.instance_vector_count(),
            provider_calls: stats.provider_calls,
            texts_embedded: stats.texts_embedded,
            cache_hits: stats.cache_hits,
        }
    }

    /// Share of lookups served from cache, in [0, 1].
    pub fn hit_rate(&self) -> f64 {
        let total = self.cache_hits + self.texts_embedded;
        if total == 0 {
            1.0
        } else {
            self.cache_hits as f64 / total as f64
        }
    }
}

/// Embeds the ingested source split on `channels` (default: those the
/// configured criterion reads) into the vector cache.
pub fn index(cfg: &RunConfig, channels: Option<BTreeSet<EmbeddingChannel>>) -> Result<IndexSummary, RunError> {
    let corpus = load_corpus(cfg, false)?;
    let channels = match channels {
        Some(c) => c,
        None => registry_and_channels(cfg)?.1,
    };
    if channels.contains(&EmbeddingChannel::Template)
        && corpus.source_tasks.values().all(|t| t.template_summary.is_none())
    {
        return Err(RunError::User(
            "the template channel needs template summaries; `run` with a template criterion builds them".into(),
        ));
    }
    let embedder = embedder(cfg)?;
    let index = build_index(&corpus, &channels, &embedder, &cfg.layout).map_err(runtime)?;
    let summary = IndexSummary::new(&index, embedder.stats());
    let bytes = serde_json::to_vec_pretty(&summary).map_err(runtime)?;
    rundir::write_atomic(&cfg.cache_dir.join("index.json"), &bytes)?;
    Ok(summary)
}

fn template_cache_path(cfg: &RunConfig, prompts: &PromptSet, task: &TaskRecord) -> PathBuf {
    let mut h = Sha256::new();
    h.update(cfg.chat.profile.model_id.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(task).expect("task serializes"));
    h.update([0]);
    h.update(prompts.source("summarize_template").unwrap_or_default().as_bytes());
    let key = hex::encode(h.finalize());
    cfg.cache_dir.join("templates").join(&key[..2]).join(format!("{key}.txt"))
}

/// Fills `template_summary` on every task that lacks one, reusing cached
/// summaries. Returns the transcript of new provider calls.
pub fn attach_template_summaries(
    cfg: &RunConfig,
    corpus: &mut Corpus,
    gateway: &Gateway,
    prompts: &PromptSet,
) -> Result<Vec<TranscriptEntry>, RunError> {
    let mut transcript = Vec::new();
    for task in corpus.source_tasks.values_mut().chain(corpus.target_tasks.values_mut()) {
        if task.template_summary.as_ref().is_some_and(|s| !s.is_empty()) {
            continue;
        }
        let path = template_cache_path(cfg, prompts, task);
        let summary = match fs::read_to_string(&path) {
            Ok(s) => s,
            Err(_) => {
                let fork = gateway.fork();
                let result = summarize_template(task, &fork, prompts);
                transcript.extend(fork.take_transcript());
                let s = result.map_err(|e| runtime(format!("template summary for {}: {e}", task.task_id)))?;
                fs::create_dir_all(path.parent().expect("has parent")).map_err(runtime)?;
                rundir::write_atomic(&path, s.as_bytes())?;
                s
            }
        };
        task.template_summary = Some(summary);
    }
    Ok(transcript)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Ingest first instead of requiring an earlier `ingest`.
    pub auto: bool,
    /// Write every final prompt under `<run>/prompts/`.
    pub dump_prompts: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub fingerprint: String,
    pub report: ExperimentReport,
    /// Items taken from an earlier, interrupted attempt.
    pub items_reused: usize,
    pub first_prompt: Option<String>,
}

/// Fingerprint and provider-call budget without calling any provider.
pub fn plan(cfg: &RunConfig, auto: bool) -> Result<(String, CallBudget), RunError> {
    let corpus = load_corpus(cfg, auto)?;
    let (registry, _) = registry_and_channels(cfg)?;
    cfg.experiment.validate(&registry).map_err(RunError::User)?;
    cfg.chat.profile.validate()?;
    let fp = cfg.fingerprint(&corpus.digest())?;
    let slices = evaluation_slices(&corpus, &cfg.experiment);
    Ok((fp, call_budget(&cfg.experiment, &slices)))
}

pub fn run_dir_for(cfg: &RunConfig, fingerprint: &str) -> PathBuf {
    cfg.runs_dir.join(&fingerprint[..16])
}

#[derive(Serialize)]
struct TranscriptRow<'a> {
    phase: &'a str,
    task_id: Option<&'a str>,
    round: Option<u32>,
    position: Option<usize>,
    instance_id: Option<&'a str>,
    #[serde(flatten)]
    entry: &'a TranscriptEntry,
}

#[derive(Serialize)]
struct AdaptedRow<'a> {
    task_id: &'a str,
    instance_id: &'a str,
    round: u32,
    position: usize,
    demonstrations: &'a [AdaptedDemonstration],
    errors: &'a [String],
}

/// Runs the configured experiment end to end. Finished items are
/// checkpointed, so an interrupted run resumes where it stopped.
pub fn execute(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    let mut corpus = load_corpus(cfg, opts.auto)?;
    let (registry, mut channels) = registry_and_channels(cfg)?;
    let s = &cfg.experiment;
    s.validate(&registry).map_err(RunError::User)?;
    let prompts = cfg.prompt_set()?;
    let fingerprint = cfg.fingerprint(&corpus.digest())?;
    let dir = RunDir::open(&run_dir_for(cfg, &fingerprint))?;

    let mut config_doc = serde_json::to_value(cfg).map_err(runtime)?;
    config_doc["fingerprint"] = serde_json::Value::String(fingerprint.clone());
    config_doc["fingerprint_material"] = cfg.fingerprint_material(&corpus.digest())?;
    rundir::write_atomic(
        &dir.path("config.json"),
        serde_json::to_string_pretty(&config_doc).map_err(runtime)?.as_bytes(),
    )?;
    dir.advance(&fingerprint, RunPhase::Ingested, 0)?;

    let gateway = chat_gateway(&cfg.chat)?;
    let strategy = registry.get(&s.criterion).map_err(|e| RunError::User(e.to_string()))?;
    let mut setup = Vec::new();
    if s.method.uses_selection() && strategy.task_basis() == TaskBasis::Template {
        setup = attach_template_summaries(cfg, &mut corpus, &gateway, &prompts)?;
    }
    if s.method == Method::QuerySupervised {
        channels.insert(EmbeddingChannel::FullQuery);
    }
    let embedder = embedder(cfg)?;
    let index = build_index(&corpus, &channels, &embedder, &cfg.layout).map_err(runtime)?;
    let complexity = if s.method.uses_selection() && strategy.needs_complexity() {
        Some(PerplexityCache::new(gateway.fork()).with_file(&cfg.cache_dir.join("perplexity.jsonl"))?)
    } else {
        None
    };
    dir.advance(&fingerprint, RunPhase::Indexed, 0)?;

    let done = dir.load_checkpoint()?;
    let items_reused = done.len();
    let engine = Engine {
        corpus: &corpus,
        index: &index,
        embedder: &embedder,
        layout: &cfg.layout,
        prompts: &prompts,
        registry: &registry,
        gateway: &gateway,
        complexity: complexity.as_ref().map(|c| c as _),
        settings: s,
    };
    let sink = |r: &ItemRecord| dir.append_item(r).map_err(|e| e.to_string());
    let outcome = run_experiment(&engine, cfg.workers, &done, &sink).map_err(|e| match e {
        PipelineError::Config(m) => RunError::User(m),
        PipelineError::Item(m) => RunError::Runtime(m),
    })?;
    let total = outcome.records.len() + outcome.pseudo.len();
    for phase in [RunPhase::Selected, RunPhase::Adapted, RunPhase::Composed] {
        dir.advance(&fingerprint, phase, total)?;
    }

    let mut transcript_rows = Vec::new();
    for e in &setup {
        transcript_rows.push(TranscriptRow {
            phase: "setup",
            task_id: None,
            round: None,
            position: None,
            instance_id: None,
            entry: e,
        });
    }
    for r in outcome.pseudo.iter().chain(&outcome.records) {
        for e in &r.transcript {
            transcript_rows.push(TranscriptRow {
                phase: match r.key.phase {
                    crate::pipeline::Phase::Pseudo => "pseudo",
                    crate::pipeline::Phase::Final => "final",
                },
                task_id: Some(&r.key.task_id),
                round: Some(r.key.round),
                position: Some(r.key.position),
                instance_id: Some(&r.instance_id),
                entry: e,
            });
        }
    }
    let mut scoring = complexity.as_ref().map(|c| c.take_transcript()).unwrap_or_default();
    scoring.sort_by(|a, b| a.prompt_hash.cmp(&b.prompt_hash));
    for e in &scoring {
        transcript_rows.push(TranscriptRow {
            phase: "scoring",
            task_id: None,
            round: None,
            position: None,
            instance_id: None,
            entry: e,
        });
    }
    rundir::write_jsonl(&dir.path("transcripts.jsonl"), &transcript_rows)?;

    let traces: Vec<&SelectionTrace> = outcome.records.iter().filter_map(|r| r.trace.as_ref()).collect();
    rundir::write_jsonl(&dir.path("selections.jsonl"), &traces)?;
    let adapted: Vec<AdaptedRow> = outcome
        .pseudo
        .iter()
        .chain(&outcome.records)
        .filter(|r| !r.adapted.is_empty() || !r.adapt_errors.is_empty())
        .map(|r| AdaptedRow {
            task_id: &r.key.task_id,
            instance_id: &r.instance_id,
            round: r.key.round,
            position: r.key.position,
            demonstrations: &r.adapted,
            errors: &r.adapt_errors,
        })
        .collect();
    rundir::write_jsonl(&dir.path("adapted.jsonl"), &adapted)?;
    rundir::write_jsonl(&dir.path("predictions.jsonl"), &outcome.predictions)?;

    if opts.dump_prompts {
        let pdir = dir.path("prompts");
        fs::create_dir_all(&pdir).map_err(runtime)?;
        for r in &outcome.records {
            if let Some(p) = &r.final_prompt {
                let name = format!("{}__r{}__{:04}.txt", r.key.task_id, r.key.round, r.key.position);
                rundir::write_atomic(&pdir.join(name), p.as_bytes())?;
            }
        }
    }

    let report = ExperimentReport::build(&fingerprint, s.method.as_str(), s.rounds, s.primary_metric, &outcome.predictions);
    let categories: BTreeMap<String, String> =
        corpus.target_tasks.values().map(|t| (t.task_id.clone(), t.category.clone())).collect();
    rundir::write_atomic(
        &dir.path("report.json"),
        serde_json::to_string_pretty(&report).map_err(runtime)?.as_bytes(),
    )?;
    rundir::write_atomic(&dir.path("report.csv"), report.to_csv(&categories).as_bytes())?;
    let pairs = traces.iter().map(|t| (*t).clone()).collect::<Vec<_>>();
    rundir::write_atomic(&dir.path("pairs.csv"), pair_distribution_report(&pairs).to_csv().as_bytes())?;
    dir.advance(&fingerprint, RunPhase::Evaluated, total)?;

    Ok(RunOutcome {
        run_dir: dir.root().to_path_buf(),
        fingerprint,
        report,
        items_reused,
        first_prompt: outcome.records.iter().find_map(|r| r.final_prompt.clone()),
    })
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub points: Vec<(String, RunOutcome)>,
    pub comparison_csv: PathBuf,
}

/// One run per sweep point plus a comparison CSV under the runs directory.
pub fn ablate(base: &RunConfig, sweeps: &[Sweep], opts: &RunOptions) -> Result<AblationOutcome, RunError> {
    let points = sweep_points(base, sweeps, &CriterionRegistry::builtin())?;
    let mut runs = Vec::new();
    let mut settings = Vec::new();
    for p in points {
        let out = execute(&p.config, opts)?;
        settings.push(p.config.experiment);
        runs.push((p.label, out));
    }
    let mut categories = BTreeSet::new();
    for (_, r) in &runs {
        categories.extend(r.report.per_category.keys().cloned());
    }
    let mut csv = String::from("point,fingerprint,method,criterion,mode,n_demos,k_th_task");
    for c in &categories {
        csv.push(',');
        csv.push_str(&crate::evaluation::csv_field(c));
    }
    csv.push_str(",avg\n");
    let mut h = Sha256::new();
    for ((label, r), exp) in runs.iter().zip(&settings) {
        h.update(label.as_bytes());
        h.update(r.fingerprint.as_bytes());
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}",
            crate::evaluation::csv_field(label),
            &r.fingerprint[..16],
            exp.method,
            exp.criterion,
            exp.mode,
            exp.n_demos,
            exp.k_th_task
        ));
        for c in &categories {
            csv.push(',');
            if let Some(v) = r.report.per_category.get(c) {
                csv.push_str(&format!("{v}"));
            }
        }
        csv.push_str(&format!(",{}\n", r.report.avg));
    }
    fs::create_dir_all(&base.runs_dir).map_err(runtime)?;
    let key = hex::encode(h.finalize());
    let path = base.runs_dir.join(format!("ablation-{}.csv", &key[..16]));
    rundir::write_atomic(&path, csv.as_bytes())?;
    Ok(AblationOutcome {
        points: runs,
        comparison_csv: path,
    })
}

/// Row-normalized category pair matrix for a finished run.
pub fn pairs_csv(run_dir: &Path) -> Result<String, RunError> {
    let p = run_dir.join("selections.jsonl");
    let raw = fs::read_to_string(&p).map_err(|e| RunError::User(format!("{}: {e}", p.display())))?;
    let traces = raw
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<SelectionTrace>(l).map_err(|e| runtime(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(pair_distribution_report(&traces).to_csv())
}
