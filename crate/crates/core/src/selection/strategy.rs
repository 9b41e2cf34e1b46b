use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::EmbeddingChannel;

use super::kmeans::{kmeans, representative};
use super::rank::{harmonic_rank_merge, order_asc, order_desc, ordinal_ranks};
use super::{Candidate, QueryProfile, RankedCandidate, SelectionContext, SelectionError};

pub const DEFAULT_CRITERION: &str = "taskdes_taskinput";

/// How the source task is chosen before instances are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskBasis {
    /// Every source task's instances form the pool.
    AllTasks,
    Description,
    Template,
}

impl TaskBasis {
    pub fn channel(self) -> Option<EmbeddingChannel> {
        match self {
            TaskBasis::AllTasks => None,
            TaskBasis::Description => Some(EmbeddingChannel::Description),
            TaskBasis::Template => Some(EmbeddingChannel::Template),
        }
    }
}

pub trait SelectionStrategy: Send + Sync {
    fn name(&self) -> &str;

    fn task_basis(&self) -> TaskBasis;

    /// Instance-level channels read from the index.
    fn instance_channels(&self) -> Vec<EmbeddingChannel> {
        Vec::new()
    }

    fn needs_references(&self) -> bool {
        false
    }

    fn needs_complexity(&self) -> bool {
        false
    }

    /// Orders the whole pool, most preferred first. `pool` is in corpus
    /// order and holds at least `n` candidates.
    fn order(
        &self,
        q: &QueryProfile,
        pool: &[Candidate],
        n: usize,
        ctx: &SelectionContext,
    ) -> Result<Vec<RankedCandidate>, SelectionError>;

    /// Every channel the index must hold for this criterion.
    fn channels(&self) -> BTreeSet<EmbeddingChannel> {
        let mut set: BTreeSet<EmbeddingChannel> = self.instance_channels().into_iter().collect();
        set.insert(EmbeddingChannel::Description);
        if let Some(c) = self.task_basis().channel() {
            set.insert(c);
        }
        set
    }
}

fn keys<'a>(pool: &'a [Candidate]) -> Vec<(&'a str, &'a str)> {
    pool.iter().map(Candidate::key).collect()
}

fn ranked(c: &Candidate, primary: f64) -> RankedCandidate {
    RankedCandidate {
        task_id: c.task.task_id.clone(),
        instance_id: c.instance.instance_id.clone(),
        primary_score: primary,
        auxiliary_score: None,
        merged_rank: None,
    }
}

/// Seeded shuffle of the pool.
pub struct RandomOrder {
    pub name: String,
    pub basis: TaskBasis,
}

impl SelectionStrategy for RandomOrder {
    fn name(&self) -> &str {
        &self.name
    }

    fn task_basis(&self) -> TaskBasis {
        self.basis
    }

    fn order(
        &self,
        q: &QueryProfile,
        pool: &[Candidate],
        _n: usize,
        ctx: &SelectionContext,
    ) -> Result<Vec<RankedCandidate>, SelectionError> {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(ctx.query_seed(q.query)));
        Ok(idx.into_iter().map(|i| ranked(&pool[i], 0.0)).collect())
    }
}

/// Cosine to the query on one channel, descending.
pub struct Similarity {
    pub name: String,
    pub basis: TaskBasis,
    pub channel: EmbeddingChannel,
}

impl SelectionStrategy for Similarity {
    fn name(&self) -> &str {
        &self.name
    }

    fn task_basis(&self) -> TaskBasis {
        self.basis
    }

    fn instance_channels(&self) -> Vec<EmbeddingChannel> {
        vec![self.channel]
    }

    fn needs_references(&self) -> bool {
        self.channel == EmbeddingChannel::Output
    }

    fn order(
        &self,
        q: &QueryProfile,
        pool: &[Candidate],
        _n: usize,
        ctx: &SelectionContext,
    ) -> Result<Vec<RankedCandidate>, SelectionError> {
        let scores = ctx.similarities(q, pool, self.channel)?;
        Ok(order_desc(&scores, &keys(pool))
            .into_iter()
            .map(|i| ranked(&pool[i], scores[i]))
            .collect())
    }
}

/// A scalar property of a query, compared by absolute difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    /// Token count of the full query.
    Length,
    /// Model perplexity of the full query.
    Complexity,
}

impl Measure {
    fn distances(self, q: &QueryProfile, pool: &[Candidate], ctx: &SelectionContext) -> Result<Vec<f64>, SelectionError> {
        let value = |text: String| -> Result<f64, SelectionError> {
            match self {
                Measure::Length => Ok(ctx.token_length(&text) as f64),
                Measure::Complexity => ctx.perplexity(&text),
            }
        };
        let target = value(q.query.full_text(ctx.layout))?;
        pool.iter()
            .map(|c| Ok((value(ctx.layout.full_text(&c.task.description, &c.instance.input))? - target).abs()))
            .collect()
    }
}

/// Closest measure first. The stored primary score is the negated distance.
pub struct ClosestMeasure {
    pub name: String,
    pub measure: Measure,
}

impl SelectionStrategy for ClosestMeasure {
    fn name(&self) -> &str {
        &self.name
    }

    fn task_basis(&self) -> TaskBasis {
        TaskBasis::Description
    }

    fn needs_complexity(&self) -> bool {
        self.measure == Measure::Complexity
    }

    fn order(
        &self,
        q: &QueryProfile,
        pool: &[Candidate],
        _n: usize,
        ctx: &SelectionContext,
    ) -> Result<Vec<RankedCandidate>, SelectionError> {
        let dist = self.measure.distances(q, pool, ctx)?;
        Ok(order_asc(&dist, &keys(pool))
            .into_iter()
            .map(|i| ranked(&pool[i], -dist[i]))
            .collect())
    }
}

/// Second ranking merged with the input-similarity ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Auxiliary {
    OutputSimilarity,
    Closest(Measure),
}

/// Input-only cosine rank and an auxiliary rank, merged by harmonic mean.
pub struct HarmonicBlend {
    pub name: String,
    pub aux: Auxiliary,
}

impl SelectionStrategy for HarmonicBlend {
    fn name(&self) -> &str {
        &self.name
    }

    fn task_basis(&self) -> TaskBasis {
        TaskBasis::Description
    }

    fn instance_channels(&self) -> Vec<EmbeddingChannel> {
        match self.aux {
            Auxiliary::OutputSimilarity => vec![EmbeddingChannel::InputOnly, EmbeddingChannel::Output],
            Auxiliary::Closest(_) => vec![EmbeddingChannel::InputOnly],
        }
    }

    fn needs_references(&self) -> bool {
        self.aux == Auxiliary::OutputSimilarity
    }

    fn needs_complexity(&self) -> bool {
        self.aux == Auxiliary::Closest(Measure::Complexity)
    }

    fn order(
        &self,
        q: &QueryProfile,
        pool: &[Candidate],
        _n: usize,
        ctx: &SelectionContext,
    ) -> Result<Vec<RankedCandidate>, SelectionError> {
        let keys = keys(pool);
        let primary = ctx.similarities(q, pool, EmbeddingChannel::InputOnly)?;
        let rank_a = ordinal_ranks(&order_desc(&primary, &keys));
        let (aux, rank_b) = match self.aux {
            Auxiliary::OutputSimilarity => {
                let s = ctx.similarities(q, pool, EmbeddingChannel::Output)?;
                let r = ordinal_ranks(&order_desc(&s, &keys));
                (s, r)
            }
            Auxiliary::Closest(m) => {
                let d = m.distances(q, pool, ctx)?;
                let r = ordinal_ranks(&order_asc(&d, &keys));
                (d, r)
            }
        };
        let merged: Vec<f64> = rank_a
            .iter()
            .zip(&rank_b)
            .map(|(&a, &b)| harmonic_rank_merge(a, b))
            .collect();
        Ok(order_asc(&merged, &keys)
            .into_iter()
            .map(|i| RankedCandidate {
                auxiliary_score: Some(aux[i]),
                merged_rank: Some(merged[i]),
                ..ranked(&pool[i], primary[i])
            })
            .collect())
    }
}

/// K-means with `k = n` over the (optionally prefiltered) pool; the member
/// nearest each centroid is picked. Picks come first, by similarity, then
/// the remaining candidates by similarity.
pub struct ClusterDiversity {
    pub name: String,
    pub channel: EmbeddingChannel,
    pub prefilter: Option<usize>,
}

impl SelectionStrategy for ClusterDiversity {
    fn name(&self) -> &str {
        &self.name
    }

    fn task_basis(&self) -> TaskBasis {
        TaskBasis::Description
    }

    fn instance_channels(&self) -> Vec<EmbeddingChannel> {
        vec![self.channel]
    }

    fn order(
        &self,
        q: &QueryProfile,
        pool: &[Candidate],
        n: usize,
        ctx: &SelectionContext,
    ) -> Result<Vec<RankedCandidate>, SelectionError> {
        let scores = ctx.similarities(q, pool, self.channel)?;
        let order = order_desc(&scores, &keys(pool));
        let working = &order[..self.prefilter.unwrap_or(order.len()).min(order.len())];
        let points = working
            .iter()
            .map(|&i| Ok(ctx.candidate_vector(&pool[i], self.channel)?.values().to_vec()))
            .collect::<Result<Vec<_>, SelectionError>>()?;
        let clusters = kmeans(&points, n, ctx.query_seed(q.query))?;
        // Positions in `working` are similarity ranks, so sorting the picks
        // by position orders them by similarity.
        let mut picks: Vec<usize> = clusters.iter().map(|c| representative(c, &points)).collect();
        picks.sort_unstable();
        let chosen: BTreeSet<usize> = picks.iter().map(|&p| working[p]).collect();
        Ok(picks
            .iter()
            .map(|&p| working[p])
            .chain(order.iter().copied().filter(|i| !chosen.contains(i)))
            .map(|i| ranked(&pool[i], scores[i]))
            .collect())
    }
}

/// Named criteria, looked up at runtime.
#[derive(Clone, Default)]
pub struct CriterionRegistry {
    entries: BTreeMap<String, Arc<dyn SelectionStrategy>>,
}

impl CriterionRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The thirteen built-in criteria.
    pub fn builtin() -> Self {
        use EmbeddingChannel::{FullQuery, InputOnly, Output};
        let mut r = Self::empty();
        let s = String::from;
        r.register(Arc::new(RandomOrder { name: s("random"), basis: TaskBasis::AllTasks }));
        r.register(Arc::new(RandomOrder { name: s("taskdes"), basis: TaskBasis::Description }));
        r.register(Arc::new(Similarity { name: s("taskdes_taskinput"), basis: TaskBasis::Description, channel: FullQuery }));
        r.register(Arc::new(Similarity { name: s("taskdes_output"), basis: TaskBasis::Description, channel: Output }));
        r.register(Arc::new(ClusterDiversity { name: s("taskdes_diversity"), channel: FullQuery, prefilter: None }));
        r.register(Arc::new(ClosestMeasure { name: s("taskdes_length"), measure: Measure::Length }));
        r.register(Arc::new(ClosestMeasure { name: s("taskdes_complexity"), measure: Measure::Complexity }));
        r.register(Arc::new(RandomOrder { name: s("template"), basis: TaskBasis::Template }));
        r.register(Arc::new(HarmonicBlend { name: s("taskdes_taskinput_output"), aux: Auxiliary::OutputSimilarity }));
        r.register(Arc::new(ClusterDiversity { name: s("taskdes_taskinput_diversity"), channel: InputOnly, prefilter: Some(100) }));
        r.register(Arc::new(HarmonicBlend { name: s("taskdes_taskinput_length"), aux: Auxiliary::Closest(Measure::Length) }));
        r.register(Arc::new(HarmonicBlend {
            name: s("taskdes_taskinput_complexity"),
            aux: Auxiliary::Closest(Measure::Complexity),
        }));
        r.register(Arc::new(Similarity { name: s("template_taskinput"), basis: TaskBasis::Template, channel: InputOnly }));
        r
    }

    /// Adds or replaces a criterion under its own name.
    pub fn register(&mut self, strategy: Arc<dyn SelectionStrategy>) {
        self.entries.insert(strategy.name().to_string(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn SelectionStrategy>, SelectionError> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| SelectionError::UnknownCriterion(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
