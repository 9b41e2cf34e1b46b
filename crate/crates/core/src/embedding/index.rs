use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;

use crate::corpus::{Corpus, Instance, QueryLayout, TaskRecord};
use crate::llm::{LlmError, RetryPolicy};

use super::cache::content_key;
use super::{EmbeddingChannel, EmbeddingError, EmbeddingProvider, EmbeddingVector, VectorCache};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EmbedStats {
    /// Batched requests sent to the provider.
    pub provider_calls: usize,
    /// Texts the provider actually embedded.
    pub texts_embedded: usize,
    /// Lookups served from memory or disk.
    pub cache_hits: usize,
}

/// Memoising front end over an [`EmbeddingProvider`], optionally backed by
/// a [`VectorCache`] on disk.
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: Option<VectorCache>,
    memo: RwLock<HashMap<String, EmbeddingVector>>,
    dim: Mutex<Option<usize>>,
    batch_size: usize,
    retry: RetryPolicy,
    provider_calls: AtomicUsize,
    texts_embedded: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            provider,
            cache: None,
            memo: RwLock::new(HashMap::new()),
            dim: Mutex::new(None),
            batch_size: 32,
            retry: RetryPolicy::default(),
            provider_calls: AtomicUsize::new(0),
            texts_embedded: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: VectorCache) -> Self {
        if let Some(d) = cache.manifest().dim {
            *self.dim.get_mut().expect("dim lock") = Some(d);
        }
        self.cache = Some(cache);
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Pins the expected dimension; a provider returning anything else fails.
    pub fn with_dim(self, dim: usize) -> Self {
        *self.dim.lock().expect("dim lock") = Some(dim);
        self
    }

    pub fn model_id(&self) -> &str {
        self.provider.model_id()
    }

    pub fn dim(&self) -> Option<usize> {
        *self.dim.lock().expect("dim lock")
    }

    pub fn stats(&self) -> EmbedStats {
        EmbedStats {
            provider_calls: self.provider_calls.load(Ordering::SeqCst),
            texts_embedded: self.texts_embedded.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
        }
    }

    pub fn embed(&self, text: &str, channel: EmbeddingChannel) -> Result<EmbeddingVector, EmbeddingError> {
        Ok(self.embed_many(&[(channel, text)])?.remove(0))
    }

    fn check_dim(&self, got: usize) -> Result<(), EmbeddingError> {
        let mut dim = self.dim.lock().expect("dim lock");
        match *dim {
            Some(expected) if expected != got => Err(EmbeddingError::DimConflict { expected, got }),
            Some(_) => Ok(()),
            None => {
                *dim = Some(got);
                Ok(())
            }
        }
    }

    fn lookup(&self, key: &str, channel: EmbeddingChannel, text: &str) -> Result<Option<EmbeddingVector>, EmbeddingError> {
        if let Some(v) = self.memo.read().expect("memo poisoned").get(key) {
            return Ok(Some(v.clone()));
        }
        if let Some(cache) = &self.cache {
            if let Some(values) = cache.get(channel, text)? {
                self.check_dim(values.len())?;
                let v = EmbeddingVector::new(values)?;
                self.memo
                    .write()
                    .expect("memo poisoned")
                    .insert(key.to_string(), v.clone());
                return Ok(Some(v));
            }
        }
        Ok(None)
    }

    fn call_provider(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.provider_calls.fetch_add(1, Ordering::SeqCst);
            match self.provider.embed_batch(texts) {
                Ok(vs) => return Ok(vs),
                Err(LlmError::Transient(msg)) if attempt < max => {
                    tracing::debug!(attempt, %msg, "transient embedding failure");
                    let ms = self
                        .retry
                        .backoff_ms
                        .get(attempt as usize - 1)
                        .or(self.retry.backoff_ms.last())
                        .copied()
                        .unwrap_or(0);
                    thread::sleep(std::time::Duration::from_millis(ms));
                }
                Err(LlmError::Transient(message)) => {
                    return Err(LlmError::Transport {
                        attempts: attempt,
                        message,
                    }
                    .into())
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Embeds many texts, sending cache misses to the provider in batches.
    /// Every completed batch is persisted before the next is sent, so an
    /// interrupted run resumes where it stopped.
    pub fn embed_many(&self, items: &[(EmbeddingChannel, &str)]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let mut out: Vec<Option<EmbeddingVector>> = vec![None; items.len()];
        let mut misses: Vec<(usize, String)> = Vec::new();
        let mut pending: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, (channel, text)) in items.iter().enumerate() {
            if text.is_empty() {
                return Err(EmbeddingError::EmptyText);
            }
            let key = content_key(*channel, text);
            if let Some(v) = self.lookup(&key, *channel, text)? {
                self.cache_hits.fetch_add(1, Ordering::SeqCst);
                out[i] = Some(v);
            } else if let Some(waiting) = pending.get_mut(&key) {
                waiting.push(i);
            } else {
                pending.insert(key.clone(), vec![i]);
                misses.push((i, key));
            }
        }

        for chunk in misses.chunks(self.batch_size) {
            let texts: Vec<&str> = chunk.iter().map(|(i, _)| items[*i].1).collect();
            let vectors = self.call_provider(&texts)?;
            if vectors.len() != texts.len() {
                return Err(LlmError::InvalidResponse(format!(
                    "asked for {} embeddings, got {}",
                    texts.len(),
                    vectors.len()
                ))
                .into());
            }
            self.texts_embedded.fetch_add(texts.len(), Ordering::SeqCst);
            for ((i, key), values) in chunk.iter().zip(vectors) {
                self.check_dim(values.len())?;
                let (channel, text) = items[*i];
                let v = EmbeddingVector::new(values)?;
                if let Some(cache) = &self.cache {
                    cache.put(channel, text, v.values())?;
                }
                self.memo
                    .write()
                    .expect("memo poisoned")
                    .insert(key.clone(), v.clone());
                for &slot in &pending[key] {
                    out[slot] = Some(v.clone());
                }
            }
        }
        Ok(out.into_iter().map(|v| v.expect("all slots filled")).collect())
    }
}

/// Text embedded for an instance-level channel.
pub(crate) fn instance_text(
    channel: EmbeddingChannel,
    task: &TaskRecord,
    instance: &Instance,
    layout: &QueryLayout,
) -> Option<String> {
    match channel {
        EmbeddingChannel::FullQuery => Some(layout.full_text(&task.description, &instance.input)),
        EmbeddingChannel::InputOnly => Some(instance.input.clone()),
        EmbeddingChannel::Output => Some(instance.first_reference().to_string()),
        EmbeddingChannel::Description | EmbeddingChannel::Template => None,
    }
}

/// Vectors for every source task and instance over a set of channels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub model_id: String,
    pub dim: usize,
    pub channels: BTreeSet<EmbeddingChannel>,
    task_vectors: HashMap<(String, EmbeddingChannel), EmbeddingVector>,
    instance_vectors: HashMap<(String, String, EmbeddingChannel), EmbeddingVector>,
}

impl EmbeddingIndex {
    pub fn task_vector(&self, task_id: &str, channel: EmbeddingChannel) -> Option<&EmbeddingVector> {
        self.task_vectors.get(&(task_id.to_string(), channel))
    }

    pub fn instance_vector(
        &self,
        task_id: &str,
        instance_id: &str,
        channel: EmbeddingChannel,
    ) -> Option<&EmbeddingVector> {
        self.instance_vectors
            .get(&(task_id.to_string(), instance_id.to_string(), channel))
    }

    pub fn task_vector_count(&self) -> usize {
        self.task_vectors.len()
    }

    pub fn instance_vector_count(&self) -> usize {
        self.instance_vectors.len()
    }
}

/// Embeds every source task's description (plus template summary when the
/// template channel is requested and a summary exists) and every source
/// instance on each requested instance-level channel.
pub fn build_index(
    corpus: &Corpus,
    channels: &BTreeSet<EmbeddingChannel>,
    embedder: &Embedder,
    layout: &QueryLayout,
) -> Result<EmbeddingIndex, EmbeddingError> {
    let mut channels = channels.clone();
    channels.insert(EmbeddingChannel::Description);

    enum Slot {
        Task(String, EmbeddingChannel),
        Instance(String, String, EmbeddingChannel),
    }
    let mut slots = Vec::new();
    let mut texts: Vec<(EmbeddingChannel, String)> = Vec::new();
    for task in corpus.source_tasks.values() {
        slots.push(Slot::Task(task.task_id.clone(), EmbeddingChannel::Description));
        texts.push((EmbeddingChannel::Description, task.description.clone()));
        if channels.contains(&EmbeddingChannel::Template) {
            if let Some(summary) = task.template_summary.as_ref().filter(|s| !s.is_empty()) {
                slots.push(Slot::Task(task.task_id.clone(), EmbeddingChannel::Template));
                texts.push((EmbeddingChannel::Template, summary.clone()));
            }
        }
        for inst in &task.instances {
            for &ch in channels.iter().filter(|c| !c.is_task_level()) {
                if let Some(text) = instance_text(ch, task, inst, layout) {
                    slots.push(Slot::Instance(task.task_id.clone(), inst.instance_id.clone(), ch));
                    texts.push((ch, text));
                }
            }
        }
    }

    let items: Vec<(EmbeddingChannel, &str)> = texts.iter().map(|(c, t)| (*c, t.as_str())).collect();
    let vectors = embedder.embed_many(&items)?;

    let mut task_vectors = HashMap::new();
    let mut instance_vectors = HashMap::new();
    for (slot, v) in slots.into_iter().zip(vectors) {
        match slot {
            Slot::Task(t, c) => {
                task_vectors.insert((t, c), v);
            }
            Slot::Instance(t, i, c) => {
                instance_vectors.insert((t, i, c), v);
            }
        }
    }
    Ok(EmbeddingIndex {
        model_id: embedder.model_id().to_string(),
        dim: embedder.dim().unwrap_or(0),
        channels,
        task_vectors,
        instance_vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Instance;
    use crate::embedding::HashingEmbedder;

    fn corpus(tasks: usize, per_task: usize) -> Corpus {
        let mk = |id: String| TaskRecord {
            description: format!("describe {id}"),
            category: "c".into(),
            instances: (0..per_task)
                .map(|i| Instance {
                    instance_id: format!("{i}"),
                    input: format!("input {i} of {id}"),
                    references: vec![format!("out {i}")],
                })
                .collect(),
            template_summary: None,
            task_id: id,
        };
        Corpus::from_tasks(
            (0..tasks).map(|t| mk(format!("src{t}"))).collect(),
            vec![mk("tgt".into())],
        )
        .unwrap()
    }

    struct Counting {
        inner: HashingEmbedder,
        fail_after: Option<usize>,
        calls: AtomicUsize,
    }

    impl EmbeddingProvider for Counting {
        fn model_id(&self) -> &str {
            "counting"
        }
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, LlmError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fail_after.is_some_and(|f| n >= f) {
                return Err(LlmError::Transport {
                    attempts: 1,
                    message: "down".into(),
                });
            }
            self.inner.embed_batch(texts)
        }
    }

    fn counting(fail_after: Option<usize>) -> Arc<Counting> {
        Arc::new(Counting {
            inner: HashingEmbedder::new(32),
            fail_after,
            calls: AtomicUsize::new(0),
        })
    }

    fn channels(cs: &[EmbeddingChannel]) -> BTreeSet<EmbeddingChannel> {
        cs.iter().copied().collect()
    }

    #[test]
    fn index_counts_and_memoisation() {
        let c = corpus(3, 10);
        let emb = Embedder::new(counting(None));
        let chans = channels(&[EmbeddingChannel::Description, EmbeddingChannel::FullQuery]);
        let idx = build_index(&c, &chans, &emb, &QueryLayout::default()).unwrap();
        assert_eq!(idx.task_vector_count(), 3);
        assert_eq!(idx.instance_vector_count(), 30);
        let before = emb.stats().texts_embedded;
        let again = build_index(&c, &chans, &emb, &QueryLayout::default()).unwrap();
        assert_eq!(emb.stats().texts_embedded, before);
        assert_eq!(again, idx);

        let a = emb.embed("same text", EmbeddingChannel::FullQuery).unwrap();
        let calls = emb.stats().provider_calls;
        let b = emb.embed("same text", EmbeddingChannel::FullQuery).unwrap();
        assert_eq!(a, b);
        assert_eq!(emb.stats().provider_calls, calls);
    }

    #[test]
    fn warm_disk_cache_makes_no_provider_calls() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(2, 4);
        let chans = channels(&[EmbeddingChannel::FullQuery, EmbeddingChannel::InputOnly]);
        let cold = Embedder::new(counting(None)).with_cache(VectorCache::open(dir.path(), "counting").unwrap());
        let first = build_index(&c, &chans, &cold, &QueryLayout::default()).unwrap();
        let warm = Embedder::new(counting(None)).with_cache(VectorCache::open(dir.path(), "counting").unwrap());
        let second = build_index(&c, &chans, &warm, &QueryLayout::default()).unwrap();
        assert_eq!(warm.stats().provider_calls, 0);
        assert_eq!(first, second);
    }

    #[test]
    fn interrupted_build_resumes_to_the_same_index() {
        let c = corpus(3, 10);
        let chans = channels(&[EmbeddingChannel::FullQuery]);
        let layout = QueryLayout::default();

        let oracle_dir = tempfile::tempdir().unwrap();
        let oracle = Embedder::new(counting(None))
            .with_batch_size(4)
            .with_cache(VectorCache::open(oracle_dir.path(), "counting").unwrap());
        let uninterrupted = build_index(&c, &chans, &oracle, &layout).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let flaky = Embedder::new(counting(Some(3)))
            .with_batch_size(4)
            .with_cache(VectorCache::open(dir.path(), "counting").unwrap());
        assert!(build_index(&c, &chans, &flaky, &layout).is_err());
        let resumed_embedder = Embedder::new(counting(None))
            .with_batch_size(4)
            .with_cache(VectorCache::open(dir.path(), "counting").unwrap());
        let resumed = build_index(&c, &chans, &resumed_embedder, &layout).unwrap();
        assert_eq!(resumed, uninterrupted);
        // 3 task + 30 instance texts; 3 batches of 4 were kept from the first attempt.
        assert_eq!(resumed_embedder.stats().texts_embedded, 33 - 12);
    }

    #[test]
    fn wrong_length_vector_is_a_dim_conflict() {
        let emb = Embedder::new(Arc::new(HashingEmbedder::new(8))).with_dim(16);
        assert!(matches!(
            emb.embed("x", EmbeddingChannel::Description),
            Err(EmbeddingError::DimConflict { expected: 16, got: 8 })
        ));
        assert_eq!(
            emb.embed("", EmbeddingChannel::Description),
            Err(EmbeddingError::EmptyText)
        );
    }
}
