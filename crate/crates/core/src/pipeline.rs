//! One query through select → adapt → compose → answer, and the
//! multi-round experiment loop over a corpus.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{AdaptationMode, AdaptedDemonstration, Adapter, FailurePolicy, SourceRef};
use crate::composer::{build_query_supervised_demos, extract_final_answer, Composer, DemoOrder, LabelledQuery, PromptStyle};
use crate::corpus::{take_head, Corpus, Instance, QueryLayout, TargetQuery, TaskRecord};
use crate::embedding::{EmbeddingChannel, EmbeddingIndex, EmbeddingVector, Embedder};
use crate::evaluation::{score, Metric, RougeTokenizer, ScoredPrediction, SelectionTrace};
use crate::llm::{Gateway, TranscriptEntry};
use crate::prompts::PromptSet;
use crate::selection::{
    select, Candidate, ComplexityOracle, CriterionRegistry, QueryProfile, SelectionContext, SelectionPlan, Tokenizer,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Crossicl,
    ZeroShot,
    ZeroShotCot,
    QuerySupervised,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Crossicl, Method::ZeroShot, Method::ZeroShotCot, Method::QuerySupervised];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Crossicl => "crossicl",
            Method::ZeroShot => "zero_shot",
            Method::ZeroShotCot => "zero_shot_cot",
            Method::QuerySupervised => "query_supervised",
        }
    }

    pub fn uses_selection(self) -> bool {
        matches!(self, Method::Crossicl | Method::QuerySupervised)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

/// Everything that changes what the engine computes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub method: Method,
    pub criterion: String,
    pub mode: AdaptationMode,
    pub n_demos: usize,
    pub n_guides: usize,
    pub k_th_task: usize,
    pub n_tasks: usize,
    pub rounds: u32,
    pub instances_per_task: usize,
    pub seed: u64,
    pub demo_order: DemoOrder,
    pub error_policy: FailurePolicy,
    pub tokenizer: Tokenizer,
    pub rouge_tokenizer: RougeTokenizer,
    pub primary_metric: Metric,
    /// Evaluate at most this many instances per category, sampled with `sample_seed`.
    pub sample_per_category: Option<usize>,
    pub sample_seed: u64,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            method: Method::Crossicl,
            criterion: crate::selection::DEFAULT_CRITERION.into(),
            mode: AdaptationMode::Full,
            n_demos: 5,
            n_guides: 1,
            k_th_task: 1,
            n_tasks: 1,
            rounds: 3,
            instances_per_task: 100,
            seed: 0,
            demo_order: DemoOrder::Reversed,
            error_policy: FailurePolicy::Skip,
            tokenizer: Tokenizer::Whitespace,
            rouge_tokenizer: RougeTokenizer::Alphanumeric,
            primary_metric: Metric::RougeL,
            sample_per_category: None,
            sample_seed: 0,
        }
    }
}

impl ExperimentSettings {
    pub fn plan(&self) -> SelectionPlan {
        SelectionPlan {
            n: self.n_demos,
            k_th: self.k_th_task,
            n_tasks: self.n_tasks,
        }
    }

    pub fn style(&self) -> PromptStyle {
        match self.method {
            Method::Crossicl => PromptStyle::CrossiclFewshot,
            Method::ZeroShot => PromptStyle::ZeroShot,
            Method::ZeroShotCot => PromptStyle::ZeroShotCot,
            Method::QuerySupervised => PromptStyle::QuerySupervised,
        }
    }

    /// Random and clustering seed for a round; round 1 uses `seed` itself.
    pub fn round_seed(&self, round: u32) -> u64 {
        self.seed.wrapping_add(u64::from(round.saturating_sub(1)))
    }

    pub fn validate(&self, registry: &CriterionRegistry) -> Result<(), String> {
        if self.rounds == 0 {
            return Err("rounds must be at least 1".into());
        }
        if self.instances_per_task == 0 {
            return Err("instances_per_task must be at least 1".into());
        }
        if self.method.uses_selection() {
            if self.n_demos == 0 {
                return Err("n_demos must be at least 1 for few-shot methods".into());
            }
            if self.k_th_task == 0 || self.n_tasks == 0 {
                return Err("k_th_task and n_tasks start at 1".into());
            }
            if self.n_guides == 0 {
                return Err("n_guides must be at least 1".into());
            }
            registry.get(&self.criterion).map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Item(String),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// CrossICL labels that seed query-supervised demonstrations.
    Pseudo,
    Final,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemKey {
    pub phase: Phase,
    pub task_id: String,
    pub round: u32,
    /// Position within the evaluated slice of the task.
    pub position: usize,
}

/// Result of one query in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub key: ItemKey,
    pub instance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<SelectionTrace>,
    #[serde(default)]
    pub adapted: Vec<AdaptedDemonstration>,
    #[serde(default)]
    pub adapt_errors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    pub answer: String,
    #[serde(default)]
    pub transcript: Vec<TranscriptEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Shared, read-only resources for answering queries.
pub struct Engine<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a EmbeddingIndex,
    pub embedder: &'a Embedder,
    pub layout: &'a QueryLayout,
    pub prompts: &'a PromptSet,
    pub registry: &'a CriterionRegistry,
    pub gateway: &'a Gateway,
    pub complexity: Option<&'a dyn ComplexityOracle>,
    pub settings: &'a ExperimentSettings,
}

/// Parts of a completed CrossICL answer.
struct Answered {
    trace: Option<SelectionTrace>,
    adapted: Vec<AdaptedDemonstration>,
    adapt_errors: Vec<String>,
    prompt: String,
    response: String,
}

impl<'a> Engine<'a> {
    fn composer(&self) -> Composer<'_> {
        Composer::new(self.prompts, self.layout).with_order(self.settings.demo_order)
    }

    fn context(&self, round: u32) -> SelectionContext<'_> {
        let mut ctx = SelectionContext::new(self.corpus, self.index, self.embedder, self.layout)
            .with_seed(self.settings.round_seed(round));
        ctx.complexity = self.complexity;
        ctx.tokenizer = self.settings.tokenizer;
        ctx
    }

    /// Selected and adapted demonstrations for `q`.
    pub fn demonstrations(
        &self,
        task: &TaskRecord,
        instance: &Instance,
        q: &TargetQuery,
        round: u32,
        gateway: &Gateway,
    ) -> Result<(SelectionTrace, Vec<AdaptedDemonstration>, Vec<String>), String> {
        let s = self.settings;
        let strategy = self.registry.get(&s.criterion).map_err(|e| e.to_string())?;
        let profile = QueryProfile::new(q).with_template(task.template_summary.as_deref());
        let ctx = self.context(round);
        let outcome = select(&profile, strategy.as_ref(), &s.plan(), &ctx).map_err(|e| format!("selection: {e}"))?;
        let wanted = (outcome.n + s.n_guides - 1).min(outcome.ranked.len());
        let candidates: Vec<Candidate> = outcome.ranked[..wanted]
            .iter()
            .map(|r| {
                let t = &self.corpus.source_tasks[&r.task_id];
                Candidate {
                    task: t,
                    instance: t.instance(&r.instance_id).expect("ranked instance exists"),
                }
            })
            .collect();
        let trace = SelectionTrace {
            target_task: task.task_id.clone(),
            target_category: task.category.clone(),
            instance_id: instance.instance_id.clone(),
            round,
            criterion: s.criterion.clone(),
            tasks: outcome.tasks.clone(),
            source_categories: candidates[..outcome.n.min(candidates.len())]
                .iter()
                .map(|c| (c.task.task_id.clone(), c.task.category.clone()))
                .collect(),
            chosen: outcome.chosen().to_vec(),
        };
        let adapter = Adapter::new(self.prompts, self.layout, gateway).with_guides(s.n_guides);
        let mut demos = Vec::new();
        let mut errors = Vec::new();
        for (i, r) in adapter.adapt(&candidates, outcome.n, q, s.mode).into_iter().enumerate() {
            match r {
                Ok(d) => demos.push(d),
                Err(e) => {
                    let msg = format!("{}/{}: {e}", candidates[i].task.task_id, candidates[i].instance.instance_id);
                    if s.error_policy == FailurePolicy::FailFast {
                        return Err(format!("adaptation: {msg}"));
                    }
                    errors.push(msg);
                }
            }
        }
        if demos.is_empty() {
            return Err(format!("adaptation: no demonstration survived ({})", errors.join("; ")));
        }
        Ok((trace, demos, errors))
    }

    fn crossicl(
        &self,
        task: &TaskRecord,
        instance: &Instance,
        q: &TargetQuery,
        round: u32,
        gateway: &Gateway,
    ) -> Result<Answered, String> {
        let (trace, adapted, adapt_errors) = self.demonstrations(task, instance, q, round, gateway)?;
        let prompt = self
            .composer()
            .compose(&adapted, q, PromptStyle::CrossiclFewshot)
            .map_err(|e| e.to_string())?
            .text;
        let response = gateway.complete("final", &prompt).map_err(|e| format!("final: {e}"))?.text;
        Ok(Answered {
            trace: Some(trace),
            adapted,
            adapt_errors,
            prompt,
            response,
        })
    }

    fn zero_shot(&self, q: &TargetQuery, style: PromptStyle, gateway: &Gateway) -> Result<Answered, String> {
        let prompt = self.composer().compose(&[], q, style).map_err(|e| e.to_string())?.text;
        let response = gateway.complete("final", &prompt).map_err(|e| format!("final: {e}"))?.text;
        Ok(Answered {
            trace: None,
            adapted: Vec::new(),
            adapt_errors: Vec::new(),
            prompt,
            response,
        })
    }

    fn record(&self, key: ItemKey, instance: &Instance, result: Result<Answered, String>, gateway: &Gateway) -> ItemRecord {
        let transcript = gateway.take_transcript();
        match result {
            Ok(a) => ItemRecord {
                key,
                instance_id: instance.instance_id.clone(),
                trace: a.trace,
                adapted: a.adapted,
                adapt_errors: a.adapt_errors,
                answer: extract_final_answer(&a.response),
                final_prompt: Some(a.prompt),
                response: Some(a.response),
                transcript,
                error: None,
            },
            Err(e) => ItemRecord {
                key,
                instance_id: instance.instance_id.clone(),
                trace: None,
                adapted: Vec::new(),
                adapt_errors: Vec::new(),
                final_prompt: None,
                response: None,
                answer: String::new(),
                transcript,
                error: Some(e),
            },
        }
    }

    /// Answers one query with a method that needs no other queries.
    pub fn answer(&self, key: ItemKey, task: &TaskRecord, instance: &Instance) -> ItemRecord {
        let gateway = self.gateway.fork();
        let q = task.query_for(instance);
        let result = match (key.phase, self.settings.method) {
            (Phase::Pseudo, _) | (_, Method::Crossicl) => self.crossicl(task, instance, &q, key.round, &gateway),
            (_, Method::ZeroShot) => self.zero_shot(&q, PromptStyle::ZeroShot, &gateway),
            (_, Method::ZeroShotCot) => self.zero_shot(&q, PromptStyle::ZeroShotCot, &gateway),
            (_, Method::QuerySupervised) => unreachable!("query-supervised answers go through answer_supervised"),
        };
        self.record(key, instance, result, &gateway)
    }

    /// Query-supervised answer for `position`, given the pseudo-labelled
    /// records of the same task and round in position order.
    pub fn answer_supervised(
        &self,
        key: ItemKey,
        task: &TaskRecord,
        slice: &[Instance],
        pseudo: &[&ItemRecord],
        vectors: &[EmbeddingVector],
    ) -> ItemRecord {
        let instance = &slice[key.position];
        let own = pseudo[key.position];
        let queries: Vec<TargetQuery> = slice.iter().map(|i| TargetQuery::new(&task.description, &i.input)).collect();
        // Earlier queries whose CrossICL run produced a label, plus this one.
        let mut pool: Vec<LabelledQuery> = Vec::new();
        for j in 0..key.position {
            if pseudo[j].error.is_none() && !pseudo[j].answer.is_empty() {
                pool.push(LabelledQuery {
                    source: SourceRef {
                        task_id: task.task_id.clone(),
                        instance_id: slice[j].instance_id.clone(),
                    },
                    query: &queries[j],
                    label: pseudo[j].answer.clone(),
                    vector: &vectors[j],
                });
            }
        }
        let me = pool.len();
        pool.push(LabelledQuery {
            source: SourceRef {
                task_id: task.task_id.clone(),
                instance_id: instance.instance_id.clone(),
            },
            query: &queries[key.position],
            label: String::new(),
            vector: &vectors[key.position],
        });
        let demos = build_query_supervised_demos(&pool, me, self.settings.n_demos, self.layout);
        if demos.is_empty() {
            // Nothing earlier to learn from: keep the CrossICL answer.
            let mut r = own.clone();
            r.key = key;
            r.transcript = Vec::new();
            return r;
        }
        let gateway = self.gateway.fork();
        let q = task.query_for(instance);
        let result = self
            .composer()
            .compose(&demos, &q, PromptStyle::QuerySupervised)
            .map_err(|e| e.to_string())
            .and_then(|p| {
                let response = gateway.complete("final", &p.text).map_err(|e| format!("final: {e}"))?.text;
                Ok(Answered {
                    trace: None,
                    adapted: demos,
                    adapt_errors: Vec::new(),
                    prompt: p.text,
                    response,
                })
            });
        self.record(key, instance, result, &gateway)
    }
}

/// The instances evaluated for each target task: the first
/// `instances_per_task`, then optionally a per-category sample.
pub fn evaluation_slices(corpus: &Corpus, s: &ExperimentSettings) -> BTreeMap<String, Vec<Instance>> {
    let mut slices: BTreeMap<String, Vec<Instance>> = corpus
        .target_tasks
        .values()
        .map(|t| (t.task_id.clone(), take_head(t, s.instances_per_task).to_vec()))
        .collect();
    if let Some(cap) = s.sample_per_category {
        let mut by_cat: BTreeMap<&str, Vec<(String, usize)>> = BTreeMap::new();
        for t in corpus.target_tasks.values() {
            for pos in 0..slices[&t.task_id].len() {
                by_cat.entry(&t.category).or_default().push((t.task_id.clone(), pos));
            }
        }
        let mut keep: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (_, mut members) in by_cat {
            members.shuffle(&mut ChaCha8Rng::seed_from_u64(s.sample_seed));
            for (task, pos) in members.into_iter().take(cap) {
                keep.entry(task).or_default().push(pos);
            }
        }
        for (task, slice) in slices.iter_mut() {
            let mut positions = keep.remove(task).unwrap_or_default();
            positions.sort_unstable();
            *slice = positions.into_iter().map(|p| slice[p].clone()).collect();
        }
    }
    slices.retain(|_, v| !v.is_empty());
    slices
}

/// Provider calls a run will make when nothing fails or retries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CallBudget {
    pub items: usize,
    pub final_calls: usize,
    pub adaptation_calls: usize,
    pub pseudo_label_calls: usize,
    pub total: usize,
}

pub fn call_budget(s: &ExperimentSettings, slices: &BTreeMap<String, Vec<Instance>>) -> CallBudget {
    let items: usize = slices.values().map(Vec::len).sum::<usize>() * s.rounds as usize;
    let per_adapt = s.n_demos * s.mode.stage_count();
    let (final_calls, adaptation_calls, pseudo) = match s.method {
        Method::ZeroShot | Method::ZeroShotCot => (items, 0, 0),
        Method::Crossicl => (items, items * per_adapt, 0),
        // Pseudo-labelling runs CrossICL on every query; the first query of
        // each task reuses that answer.
        Method::QuerySupervised => {
            let firsts = slices.len() * s.rounds as usize;
            (items - firsts, items * per_adapt, items)
        }
    };
    CallBudget {
        items,
        final_calls,
        adaptation_calls,
        pseudo_label_calls: pseudo,
        total: final_calls + adaptation_calls + pseudo,
    }
}

pub fn score_record(record: &ItemRecord, task: &TaskRecord, instance: &Instance, s: &ExperimentSettings) -> ScoredPrediction {
    let per_metric = Metric::ALL
        .into_iter()
        .map(|m| {
            let v = if record.error.is_some() {
                0.0
            } else {
                score(m, &record.answer, &instance.references, s.rouge_tokenizer)
            };
            (m, v)
        })
        .collect();
    ScoredPrediction {
        task_id: task.task_id.clone(),
        instance_id: instance.instance_id.clone(),
        category: task.category.clone(),
        round: record.key.round,
        prediction: record.response.clone().unwrap_or_default(),
        extracted_answer: record.answer.clone(),
        per_metric,
        error: record.error.clone(),
    }
}

pub struct ExperimentOutcome {
    /// Final-phase records, ordered by key.
    pub records: Vec<ItemRecord>,
    /// Pseudo-label records (query-supervised only), ordered by key.
    pub pseudo: Vec<ItemRecord>,
    pub predictions: Vec<ScoredPrediction>,
}

/// Runs every (task, instance, round) item. Records already in `done` are
/// reused; every newly finished record is passed to `sink` (from worker
/// threads) before the run continues.
pub fn run_experiment(
    engine: &Engine,
    workers: usize,
    done: &HashMap<ItemKey, ItemRecord>,
    sink: &(dyn Fn(&ItemRecord) -> Result<(), String> + Sync),
) -> Result<ExperimentOutcome, PipelineError> {
    let s = engine.settings;
    s.validate(engine.registry).map_err(PipelineError::Config)?;
    let slices = evaluation_slices(engine.corpus, s);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;

    let keys = |phase: Phase| -> Vec<ItemKey> {
        let mut keys = Vec::new();
        for (task_id, slice) in &slices {
            for round in 1..=s.rounds {
                for position in 0..slice.len() {
                    keys.push(ItemKey {
                        phase,
                        task_id: task_id.clone(),
                        round,
                        position,
                    });
                }
            }
        }
        keys
    };
    let task_of = |k: &ItemKey| &engine.corpus.target_tasks[&k.task_id];
    let finish = |r: ItemRecord| -> Result<ItemRecord, PipelineError> {
        if s.error_policy == FailurePolicy::FailFast {
            if let Some(e) = &r.error {
                return Err(PipelineError::Item(format!("{}/{} round {}: {e}", r.key.task_id, r.instance_id, r.key.round)));
            }
        }
        sink(&r).map_err(PipelineError::Item)?;
        Ok(r)
    };
    let run_simple = |keys: Vec<ItemKey>| -> Result<Vec<ItemRecord>, PipelineError> {
        pool.install(|| {
            keys.into_par_iter()
                .map(|k| match done.get(&k) {
                    Some(r) => Ok(r.clone()),
                    None => {
                        let instance = &slices[&k.task_id][k.position];
                        finish(engine.answer(k.clone(), task_of(&k), instance))
                    }
                })
                .collect()
        })
    };

    let (records, pseudo) = if s.method == Method::QuerySupervised {
        let pseudo = run_simple(keys(Phase::Pseudo))?;
        let by_key: HashMap<&ItemKey, &ItemRecord> = pseudo.iter().map(|r| (&r.key, r)).collect();
        let mut vectors: BTreeMap<&str, Vec<EmbeddingVector>> = BTreeMap::new();
        for (task_id, slice) in &slices {
            let task = &engine.corpus.target_tasks[task_id];
            let texts: Vec<String> = slice.iter().map(|i| engine.layout.full_text(&task.description, &i.input)).collect();
            let items: Vec<(EmbeddingChannel, &str)> =
                texts.iter().map(|t| (EmbeddingChannel::FullQuery, t.as_str())).collect();
            let v = engine
                .embedder
                .embed_many(&items)
                .map_err(|e| PipelineError::Item(format!("embedding {task_id} queries: {e}")))?;
            vectors.insert(task_id, v);
        }
        let finals: Vec<ItemRecord> = pool.install(|| {
            keys(Phase::Final)
                .into_par_iter()
                .map(|k| {
                    if let Some(r) = done.get(&k) {
                        return Ok(r.clone());
                    }
                    let slice = &slices[&k.task_id];
                    let labelled: Vec<&ItemRecord> = (0..slice.len())
                        .map(|position| {
                            by_key[&ItemKey {
                                phase: Phase::Pseudo,
                                position,
                                ..k.clone()
                            }]
                        })
                        .collect();
                    finish(engine.answer_supervised(k.clone(), task_of(&k), slice, &labelled, &vectors[k.task_id.as_str()]))
                })
                .collect::<Result<_, PipelineError>>()
        })?;
        (finals, pseudo)
    } else {
        (run_simple(keys(Phase::Final))?, Vec::new())
    };

    let predictions = records
        .iter()
        .map(|r| score_record(r, task_of(&r.key), &slices[&r.key.task_id][r.key.position], s))
        .collect();
    Ok(ExperimentOutcome {
        records,
        pseudo,
        predictions,
    })
}
