//! Source-task and demonstration selection.
//!
//! Selection happens in two steps: rank the source tasks against the
//! target (by description or template similarity), then order the
//! instances of the chosen task(s) under a criterion. Criteria are
//! [`SelectionStrategy`] trait objects looked up by name in a
//! [`CriterionRegistry`].

mod complexity;
pub mod kmeans;
pub mod rank;
mod strategy;
mod template;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adaptation::AdaptError;
use crate::corpus::{Corpus, Instance, QueryLayout, TargetQuery, TaskRecord};
use crate::embedding::{cosine, EmbeddingChannel, EmbeddingError, EmbeddingIndex, EmbeddingVector, Embedder, MetricError};
use crate::llm::LlmError;

pub use complexity::{ComplexityOracle, PerplexityCache};
pub use kmeans::{kmeans, Cluster};
pub use rank::harmonic_rank_merge;
pub use strategy::{
    ClosestMeasure, ClusterDiversity, CriterionRegistry, HarmonicBlend, Measure, RandomOrder, SelectionStrategy,
    Similarity, TaskBasis, DEFAULT_CRITERION,
};
pub use template::summarize_template;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectionError {
    #[error("no eligible source tasks")]
    NoTasks,
    #[error("index incomplete: {0}")]
    IndexIncomplete(String),
    #[error("need {needed} candidate instances, only {available} available")]
    Insufficient { needed: usize, available: usize },
    #[error("only {distinct} distinct points for {k} clusters")]
    DegenerateClustering { distinct: usize, k: usize },
    #[error("criterion `{0}` needs gold references on the target query")]
    MissingReferences(String),
    #[error("unknown selection criterion `{0}`")]
    UnknownCriterion(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("perplexity: {0}")]
    Complexity(LlmError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
}

/// Criterion name plus the seed used by its random and clustering steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionCriterion {
    pub name: String,
    pub seed: u64,
}

impl Default for SelectionCriterion {
    fn default() -> Self {
        Self {
            name: DEFAULT_CRITERION.into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTaskChoice {
    pub task_id: String,
    pub score: f64,
    pub rank: usize,
}

/// One scored instance. `primary_score` is always "higher is preferred";
/// distance-based criteria store the negated distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub task_id: String,
    pub instance_id: String,
    pub primary_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auxiliary_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged_rank: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    #[default]
    Whitespace,
    NonAlphanumeric,
}

pub fn token_length(text: &str) -> usize {
    token_length_with(text, Tokenizer::Whitespace)
}

pub fn token_length_with(text: &str, tokenizer: Tokenizer) -> usize {
    match tokenizer {
        Tokenizer::Whitespace => text.split_whitespace().count(),
        Tokenizer::NonAlphanumeric => text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).count(),
    }
}

/// Target query plus its template summary when template criteria run.
#[derive(Debug, Clone, Copy)]
pub struct QueryProfile<'a> {
    pub query: &'a TargetQuery,
    pub template: Option<&'a str>,
}

impl<'a> QueryProfile<'a> {
    pub fn new(query: &'a TargetQuery) -> Self {
        Self { query, template: None }
    }

    pub fn with_template(mut self, template: Option<&'a str>) -> Self {
        self.template = template;
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub task: &'a TaskRecord,
    pub instance: &'a Instance,
}

impl Candidate<'_> {
    pub fn key(&self) -> (&str, &str) {
        (&self.task.task_id, &self.instance.instance_id)
    }
}

/// Everything a strategy may read while scoring.
pub struct SelectionContext<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a EmbeddingIndex,
    pub embedder: &'a Embedder,
    pub layout: &'a QueryLayout,
    pub complexity: Option<&'a dyn ComplexityOracle>,
    pub tokenizer: Tokenizer,
    pub seed: u64,
}

impl<'a> SelectionContext<'a> {
    pub fn new(corpus: &'a Corpus, index: &'a EmbeddingIndex, embedder: &'a Embedder, layout: &'a QueryLayout) -> Self {
        Self {
            corpus,
            index,
            embedder,
            layout,
            complexity: None,
            tokenizer: Tokenizer::Whitespace,
            seed: 0,
        }
    }

    pub fn with_complexity(mut self, oracle: &'a dyn ComplexityOracle) -> Self {
        self.complexity = Some(oracle);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Seed for per-query randomness: the criterion seed mixed with a hash
    /// of the query text, so different queries draw differently but
    /// reproducibly.
    pub fn query_seed(&self, q: &TargetQuery) -> u64 {
        let digest = Sha256::digest(q.full_text(self.layout).as_bytes());
        let head = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        head ^ self.seed
    }

    pub fn query_vector(&self, q: &QueryProfile, channel: EmbeddingChannel) -> Result<EmbeddingVector, SelectionError> {
        let text = match channel {
            EmbeddingChannel::Description => q.query.description.clone(),
            EmbeddingChannel::FullQuery => q.query.full_text(self.layout),
            EmbeddingChannel::InputOnly => q.query.input.clone(),
            EmbeddingChannel::Output => q
                .query
                .first_reference()
                .ok_or_else(|| SelectionError::MissingReferences(channel.to_string()))?
                .to_string(),
            EmbeddingChannel::Template => q
                .template
                .ok_or_else(|| SelectionError::IndexIncomplete("target task has no template summary".into()))?
                .to_string(),
        };
        Ok(self.embedder.embed(&text, channel)?)
    }

    pub fn candidate_vector(&self, c: &Candidate, channel: EmbeddingChannel) -> Result<&EmbeddingVector, SelectionError> {
        self.index
            .instance_vector(&c.task.task_id, &c.instance.instance_id, channel)
            .ok_or_else(|| {
                SelectionError::IndexIncomplete(format!(
                    "no {channel} vector for {}/{}",
                    c.task.task_id, c.instance.instance_id
                ))
            })
    }

    pub fn similarities(
        &self,
        q: &QueryProfile,
        pool: &[Candidate],
        channel: EmbeddingChannel,
    ) -> Result<Vec<f64>, SelectionError> {
        let target = self.query_vector(q, channel)?;
        pool.iter()
            .map(|c| Ok(cosine(self.candidate_vector(c, channel)?, &target)?))
            .collect()
    }

    pub fn token_length(&self, text: &str) -> usize {
        token_length_with(text, self.tokenizer)
    }

    pub fn perplexity(&self, text: &str) -> Result<f64, SelectionError> {
        let oracle = self
            .complexity
            .ok_or(SelectionError::Complexity(LlmError::NoLogprobs))?;
        oracle.perplexity(text).map_err(SelectionError::Complexity)
    }
}

/// All source tasks ordered by similarity to the target under `basis`
/// (score descending, task id ascending).
pub fn rank_tasks(
    q: &QueryProfile,
    basis: TaskBasis,
    ctx: &SelectionContext,
) -> Result<Vec<SourceTaskChoice>, SelectionError> {
    let tasks: Vec<&TaskRecord> = ctx.corpus.source_tasks.values().collect();
    if tasks.is_empty() {
        return Err(SelectionError::NoTasks);
    }
    let ids: Vec<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
    let (order, scores) = match basis {
        TaskBasis::AllTasks => {
            let mut order: Vec<usize> = (0..tasks.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(ctx.query_seed(q.query)));
            (order, vec![0.0; tasks.len()])
        }
        TaskBasis::Description | TaskBasis::Template => {
            let channel = basis.channel().expect("similarity basis");
            let target = ctx.query_vector(q, channel)?;
            let scores = tasks
                .iter()
                .map(|t| {
                    let v = ctx.index.task_vector(&t.task_id, channel).ok_or_else(|| {
                        SelectionError::IndexIncomplete(format!("no {channel} vector for task {}", t.task_id))
                    })?;
                    Ok(cosine(&target, v)?)
                })
                .collect::<Result<Vec<f64>, SelectionError>>()?;
            (rank::order_desc(&scores, &ids), scores)
        }
    };
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(pos, i)| SourceTaskChoice {
            task_id: ids[i].to_string(),
            score: scores[i],
            rank: pos + 1,
        })
        .collect())
}

/// The `k_th`-ranked source task (1 = most similar).
pub fn select_source_task(
    q: &QueryProfile,
    strategy: &dyn SelectionStrategy,
    k_th: usize,
    ctx: &SelectionContext,
) -> Result<SourceTaskChoice, SelectionError> {
    let ranked = rank_tasks(q, strategy.task_basis(), ctx)?;
    if k_th == 0 {
        return Err(SelectionError::NoTasks);
    }
    ranked.into_iter().nth(k_th - 1).ok_or(SelectionError::NoTasks)
}

/// The top `n_tasks` source tasks; their instances form one pool.
pub fn select_multi_task_pool(
    q: &QueryProfile,
    strategy: &dyn SelectionStrategy,
    n_tasks: usize,
    ctx: &SelectionContext,
) -> Result<Vec<SourceTaskChoice>, SelectionError> {
    let ranked = rank_tasks(q, strategy.task_basis(), ctx)?;
    if n_tasks == 0 || n_tasks > ranked.len() {
        return Err(SelectionError::NoTasks);
    }
    Ok(ranked.into_iter().take(n_tasks).collect())
}

pub fn candidate_pool<'a>(tasks: &[&'a TaskRecord]) -> Vec<Candidate<'a>> {
    tasks
        .iter()
        .flat_map(|t| t.instances.iter().map(move |i| Candidate { task: t, instance: i }))
        .collect()
}

/// The `n` preferred instances from the given task(s), best first.
pub fn select_demonstrations(
    q: &QueryProfile,
    tasks: &[&TaskRecord],
    n: usize,
    strategy: &dyn SelectionStrategy,
    ctx: &SelectionContext,
) -> Result<Vec<RankedCandidate>, SelectionError> {
    let mut ranked = order_pool(q, &candidate_pool(tasks), n, strategy, ctx)?;
    ranked.truncate(n);
    Ok(ranked)
}

fn order_pool(
    q: &QueryProfile,
    pool: &[Candidate],
    n: usize,
    strategy: &dyn SelectionStrategy,
    ctx: &SelectionContext,
) -> Result<Vec<RankedCandidate>, SelectionError> {
    if n == 0 || pool.len() < n {
        return Err(SelectionError::Insufficient {
            needed: n.max(1),
            available: pool.len(),
        });
    }
    if strategy.needs_references() && q.query.references.as_ref().is_none_or(|r| r.is_empty()) {
        return Err(SelectionError::MissingReferences(strategy.name().to_string()));
    }
    strategy.order(q, pool, n, ctx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub n: usize,
    /// Use the k-th ranked task (ignored when `n_tasks > 1`).
    pub k_th: usize,
    /// Pool the instances of the top `n_tasks` tasks.
    pub n_tasks: usize,
}

impl Default for SelectionPlan {
    fn default() -> Self {
        Self { n: 5, k_th: 1, n_tasks: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    /// Tasks whose instances formed the pool, in rank order.
    pub tasks: Vec<SourceTaskChoice>,
    /// Whole pool in preference order; the first `n` are the selection.
    pub ranked: Vec<RankedCandidate>,
    pub n: usize,
}

impl SelectionOutcome {
    pub fn chosen(&self) -> &[RankedCandidate] {
        &self.ranked[..self.n.min(self.ranked.len())]
    }
}

/// Task step then instance step, per `plan`.
pub fn select(
    q: &QueryProfile,
    strategy: &dyn SelectionStrategy,
    plan: &SelectionPlan,
    ctx: &SelectionContext,
) -> Result<SelectionOutcome, SelectionError> {
    let ranked_tasks = rank_tasks(q, strategy.task_basis(), ctx)?;
    let chosen: Vec<SourceTaskChoice> = match strategy.task_basis() {
        // Random selection draws from every source task's instances.
        TaskBasis::AllTasks => {
            let mut all = ranked_tasks;
            all.sort_by(|a, b| a.task_id.cmp(&b.task_id));
            all
        }
        _ if plan.n_tasks > 1 => {
            if plan.n_tasks > ranked_tasks.len() {
                return Err(SelectionError::NoTasks);
            }
            ranked_tasks.into_iter().take(plan.n_tasks).collect()
        }
        _ => {
            let k = plan.k_th.max(1);
            vec![ranked_tasks.into_iter().nth(k - 1).ok_or(SelectionError::NoTasks)?]
        }
    };
    let records: Vec<&TaskRecord> = chosen
        .iter()
        .map(|c| &ctx.corpus.source_tasks[&c.task_id])
        .collect();
    let ranked = order_pool(q, &candidate_pool(&records), plan.n, strategy, ctx)?;
    Ok(SelectionOutcome {
        tasks: chosen,
        ranked,
        n: plan.n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_lengths() {
        assert_eq!(token_length("a b c"), 3);
        assert_eq!(token_length(""), 0);
        assert_eq!(token_length("  a   b "), 2);
        assert_eq!(token_length_with("a-b, c", Tokenizer::NonAlphanumeric), 3);
    }
}
