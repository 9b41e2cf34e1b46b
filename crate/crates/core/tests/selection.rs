mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use crossicl::corpus::{Corpus, QueryLayout, TargetQuery, TaskRecord};
use crossicl::embedding::{build_index, cosine_slices, Embedder, EmbeddingChannel, EmbeddingIndex, HashingEmbedder, ScriptedEmbedder};
use crossicl::llm::LlmError;
use crossicl::selection::{
    rank_tasks, select, select_demonstrations, select_multi_task_pool, select_source_task, ComplexityOracle,
    CriterionRegistry, QueryProfile, RankedCandidate, SelectionContext, SelectionError, SelectionPlan,
};
use proptest::prelude::*;

use common::task;

struct Fixed;

impl ComplexityOracle for Fixed {
    fn perplexity(&self, text: &str) -> Result<f64, LlmError> {
        Ok(1.0 + text.len() as f64 % 7.0)
    }
}

fn items(prefix: &str, n: usize) -> Vec<(String, String)> {
    (0..n).map(|i| (format!("{prefix} input {i}"), format!("{prefix} output {}", i % 4))).collect()
}

fn all_channels() -> BTreeSet<EmbeddingChannel> {
    EmbeddingChannel::ALL.into_iter().collect()
}

fn hashed(dim: usize) -> ScriptedEmbedder {
    ScriptedEmbedder::new("test").with_fallback(Box::new(HashingEmbedder::new(dim)))
}

fn build(corpus: &Corpus, emb: ScriptedEmbedder) -> (EmbeddingIndex, Embedder) {
    let embedder = Embedder::new(Arc::new(emb));
    let index = build_index(corpus, &all_channels(), &embedder, &QueryLayout::default()).unwrap();
    (index, embedder)
}

fn query() -> TargetQuery {
    TargetQuery::new("Pick the answer.", "target question").with_references(vec!["target answer".into()])
}

fn keys(r: &[RankedCandidate]) -> Vec<(String, String)> {
    r.iter().map(|c| (c.task_id.clone(), c.instance_id.clone())).collect()
}

#[test]
fn kth_walks_down_the_description_ranking() {
    let corpus = Corpus::from_tasks(
        vec![task("near", "A", "near task", &items("near", 6)), task("far", "A", "far task", &items("far", 6))],
        vec![],
    )
    .unwrap();
    let mut emb = hashed(2);
    emb.insert("Pick the answer.", vec![1.0, 0.0]);
    emb.insert("near task", vec![0.9, (1.0f64 - 0.81).sqrt()]);
    emb.insert("far task", vec![0.4, (1.0f64 - 0.16).sqrt()]);
    let (index, embedder) = build(&corpus, emb);
    let layout = QueryLayout::default();
    let ctx = SelectionContext::new(&corpus, &index, &embedder, &layout);
    let q = query();
    let profile = QueryProfile::new(&q);
    let registry = CriterionRegistry::builtin();
    let s = registry.get("taskdes_taskinput").unwrap();

    let first = select_source_task(&profile, s.as_ref(), 1, &ctx).unwrap();
    assert_eq!((first.task_id.as_str(), first.rank), ("near", 1));
    assert!((first.score - 0.9).abs() < 1e-12);
    let second = select_source_task(&profile, s.as_ref(), 2, &ctx).unwrap();
    assert_eq!(second.task_id, "far");
    assert!((second.score - 0.4).abs() < 1e-12);
    assert_eq!(select_source_task(&profile, s.as_ref(), 3, &ctx), Err(SelectionError::NoTasks));
}

#[test]
fn default_criterion_takes_top_five_by_full_query_cosine() {
    let corpus = Corpus::from_tasks(vec![task("src", "A", "source", &items("s", 10))], vec![]).unwrap();
    let layout = QueryLayout::default();
    let q = query();
    let mut emb = hashed(2);
    emb.insert(q.full_text(&layout), vec![1.0, 0.0]);
    // Angles shuffled so index order and preference order differ.
    let angles = [0.7, 0.1, 0.9, 0.3, 0.5, 0.2, 1.0, 0.4, 0.8, 0.6];
    let t = &corpus.source_tasks["src"];
    for (inst, a) in t.instances.iter().zip(angles) {
        emb.insert(layout.full_text(&t.description, &inst.input), vec![f64::cos(a), f64::sin(a)]);
    }
    let (index, embedder) = build(&corpus, emb);
    let ctx = SelectionContext::new(&corpus, &index, &embedder, &layout);
    let registry = CriterionRegistry::builtin();
    let picked = select_demonstrations(&QueryProfile::new(&q), &[t], 5, registry.get("taskdes_taskinput").unwrap().as_ref(), &ctx).unwrap();
    let ids: Vec<&str> = picked.iter().map(|c| c.instance_id.as_str()).collect();
    assert_eq!(ids, ["src-1", "src-5", "src-3", "src-7", "src-4"]);
    assert!(picked.windows(2).all(|w| w[0].primary_score > w[1].primary_score));
}

#[test]
fn diversity_with_n_equal_to_pool_returns_every_instance() {
    let corpus = Corpus::from_tasks(vec![task("src", "A", "source", &items("s", 5))], vec![]).unwrap();
    let (index, embedder) = build(&corpus, hashed(16));
    let layout = QueryLayout::default();
    let ctx = SelectionContext::new(&corpus, &index, &embedder, &layout);
    let q = query();
    let registry = CriterionRegistry::builtin();
    for name in ["taskdes_diversity", "taskdes_taskinput_diversity"] {
        let t = &corpus.source_tasks["src"];
        let picked = select_demonstrations(&QueryProfile::new(&q), &[t], 5, registry.get(name).unwrap().as_ref(), &ctx).unwrap();
        let ids: BTreeSet<&str> = picked.iter().map(|c| c.instance_id.as_str()).collect();
        assert_eq!(ids.len(), 5, "{name}");
    }
}

fn five_tasks() -> Corpus {
    let tasks = ["t0", "t1", "t2", "t3", "t4"]
        .iter()
        .map(|id| task(id, "A", &format!("description of {id}"), &items(id, 8)))
        .collect();
    Corpus::from_tasks(tasks, vec![]).unwrap()
}

#[test]
fn multi_task_pool_reduces_to_kth_and_takes_the_top() {
    let corpus = five_tasks();
    let (index, embedder) = build(&corpus, hashed(32));
    let layout = QueryLayout::default();
    let ctx = SelectionContext::new(&corpus, &index, &embedder, &layout);
    let q = query();
    let profile = QueryProfile::new(&q);
    let registry = CriterionRegistry::builtin();
    let s = registry.get("taskdes_taskinput").unwrap();

    let one = select_multi_task_pool(&profile, s.as_ref(), 1, &ctx).unwrap();
    assert_eq!(one, vec![select_source_task(&profile, s.as_ref(), 1, &ctx).unwrap()]);
    let three = select_multi_task_pool(&profile, s.as_ref(), 3, &ctx).unwrap();
    let ranked = rank_tasks(&profile, s.task_basis(), &ctx).unwrap();
    assert_eq!(three, ranked[..3].to_vec());
    assert_eq!(select_multi_task_pool(&profile, s.as_ref(), 6, &ctx), Err(SelectionError::NoTasks));

    // The union scan equals a scan over the concatenated instance lists.
    let plan = SelectionPlan { n: 4, k_th: 1, n_tasks: 2 };
    let out = select(&profile, s.as_ref(), &plan, &ctx).unwrap();
    let records: Vec<&TaskRecord> = ranked[..2].iter().map(|c| &corpus.source_tasks[&c.task_id]).collect();
    let qv = embedder.embed(&q.full_text(&layout), EmbeddingChannel::FullQuery).unwrap();
    let mut scan: Vec<(f64, String, String)> = records
        .iter()
        .flat_map(|t| {
            t.instances.iter().map(|i| {
                let v = index.instance_vector(&t.task_id, &i.instance_id, EmbeddingChannel::FullQuery).unwrap();
                (cosine_slices(qv.values(), v.values()).unwrap(), t.task_id.clone(), i.instance_id.clone())
            })
        })
        .collect();
    scan.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| (&a.1, &a.2).cmp(&(&b.1, &b.2))));
    let want: Vec<(String, String)> = scan.into_iter().map(|(_, t, i)| (t, i)).collect();
    assert_eq!(keys(&out.ranked), want);
}

#[test]
fn error_paths() {
    let corpus = five_tasks();
    let (index, embedder) = build(&corpus, hashed(16));
    let layout = QueryLayout::default();
    let ctx = SelectionContext::new(&corpus, &index, &embedder, &layout);
    let registry = CriterionRegistry::builtin();
    let q = query();
    let t = &corpus.source_tasks["t0"];

    let err = select_demonstrations(&QueryProfile::new(&q), &[t], 9, registry.get("taskdes_taskinput").unwrap().as_ref(), &ctx);
    assert_eq!(err, Err(SelectionError::Insufficient { needed: 9, available: 8 }));

    let bare = TargetQuery::new("Pick the answer.", "target question");
    for name in ["taskdes_output", "taskdes_taskinput_output"] {
        let err = select_demonstrations(&QueryProfile::new(&bare), &[t], 3, registry.get(name).unwrap().as_ref(), &ctx);
        assert!(matches!(err, Err(SelectionError::MissingReferences(_))), "{name}");
    }

    // No template summaries were indexed.
    let err = select_source_task(&QueryProfile::new(&q).with_template(Some("summary")), registry.get("template").unwrap().as_ref(), 1, &ctx);
    assert!(matches!(err, Err(SelectionError::IndexIncomplete(_))), "{err:?}");

    let empty = Corpus::from_tasks(vec![], vec![]).unwrap();
    let (index, embedder) = build(&empty, hashed(16));
    let ctx = SelectionContext::new(&empty, &index, &embedder, &layout);
    let err = select_source_task(&QueryProfile::new(&q), registry.get("taskdes").unwrap().as_ref(), 1, &ctx);
    assert_eq!(err, Err(SelectionError::NoTasks));
}

#[test]
fn input_diversity_picks_come_from_the_top_hundred() {
    let corpus = Corpus::from_tasks(vec![task("big", "A", "big task", &items("b", 150))], vec![]).unwrap();
    let (index, embedder) = build(&corpus, hashed(16));
    let layout = QueryLayout::default();
    let ctx = SelectionContext::new(&corpus, &index, &embedder, &layout);
    let q = query();
    let t = &corpus.source_tasks["big"];
    let registry = CriterionRegistry::builtin();
    let picked =
        select_demonstrations(&QueryProfile::new(&q), &[t], 5, registry.get("taskdes_taskinput_diversity").unwrap().as_ref(), &ctx)
            .unwrap();

    let qv = embedder.embed(&q.input, EmbeddingChannel::InputOnly).unwrap();
    let mut by_input: Vec<(f64, &str)> = t
        .instances
        .iter()
        .map(|i| {
            let v = index.instance_vector("big", &i.instance_id, EmbeddingChannel::InputOnly).unwrap();
            (cosine_slices(qv.values(), v.values()).unwrap(), i.instance_id.as_str())
        })
        .collect();
    by_input.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)));
    let top: BTreeSet<&str> = by_input[..100].iter().map(|(_, id)| *id).collect();
    assert!(picked.iter().all(|c| top.contains(c.instance_id.as_str())));
}

fn random_corpus(seed: u64, tasks: usize, size: usize) -> Corpus {
    let tasks = (0..tasks)
        .map(|t| {
            let items: Vec<(String, String)> = (0..size)
                .map(|i| {
                    let words = (0..(1 + (seed as usize + i * 7 + t) % 9)).map(|w| format!("w{}", (seed as usize + w * i) % 13));
                    (words.collect::<Vec<_>>().join(" "), format!("out {}", (i + t) % 5))
                })
                .collect();
            let mut rec = task(&format!("task{t}"), "A", &format!("task {t} seed {seed}"), &items);
            rec.template_summary = Some(format!("template {t} {}", seed % 11));
            rec
        })
        .collect();
    Corpus::from_tasks(tasks, vec![]).unwrap()
}

fn run_all(corpus: &Corpus, embedder: &Embedder, index: &EmbeddingIndex, n: usize, seed: u64) -> Vec<Vec<(String, String)>> {
    let layout = QueryLayout::default();
    let ctx = SelectionContext::new(corpus, index, embedder, &layout).with_complexity(&Fixed).with_seed(seed);
    let q = query();
    let profile = QueryProfile::new(&q).with_template(Some("template 1 3"));
    let registry = CriterionRegistry::builtin();
    let plan = SelectionPlan { n, k_th: 1, n_tasks: 1 };
    registry
        .names()
        .map(|name| {
            let out = select(&profile, registry.get(name).unwrap().as_ref(), &plan, &ctx).unwrap();
            let mut k = keys(out.chosen());
            k.extend(out.tasks.iter().map(|t| (t.task_id.clone(), String::new())));
            k
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn default_selection_is_prefix_monotone(seed in 0u64..10_000, n in 1usize..9) {
        let corpus = random_corpus(seed, 3, 10);
        let (index, embedder) = build(&corpus, hashed(24));
        let layout = QueryLayout::default();
        let ctx = SelectionContext::new(&corpus, &index, &embedder, &layout);
        let q = query();
        let registry = CriterionRegistry::builtin();
        let s = registry.get("taskdes_taskinput").unwrap();
        let plan = |n| SelectionPlan { n, k_th: 1, n_tasks: 1 };
        let small = select(&QueryProfile::new(&q), s.as_ref(), &plan(n), &ctx).unwrap();
        let large = select(&QueryProfile::new(&q), s.as_ref(), &plan(n + 1), &ctx).unwrap();
        prop_assert_eq!(keys(small.chosen()), keys(&large.chosen()[..n]));
    }

    #[test]
    fn uniform_vector_scaling_changes_nothing(seed in 0u64..10_000, exp in -20i32..20) {
        let corpus = random_corpus(seed, 3, 8);
        let base = HashingEmbedder::new(16);
        let c = 2f64.powi(exp);
        let layout = QueryLayout::default();
        let q = query();
        let mut texts: Vec<String> = vec![q.description.clone(), q.input.clone(), q.full_text(&layout), "target answer".into(), "template 1 3".into()];
        for t in corpus.source_tasks.values() {
            texts.push(t.description.clone());
            texts.push(t.template_summary.clone().unwrap());
            for i in &t.instances {
                texts.push(i.input.clone());
                texts.push(i.references[0].clone());
                texts.push(layout.full_text(&t.description, &i.input));
            }
        }
        let mut plain = ScriptedEmbedder::new("plain");
        let mut scaled = ScriptedEmbedder::new("scaled");
        for text in &texts {
            let v = base.embed_one(text);
            scaled.insert(text.clone(), v.iter().map(|x| x * c).collect());
            plain.insert(text.clone(), v);
        }
        let (i1, e1) = build(&corpus, plain);
        let (i2, e2) = build(&corpus, scaled);
        prop_assert_eq!(run_all(&corpus, &e1, &i1, 3, seed), run_all(&corpus, &e2, &i2, 3, seed));
    }

    #[test]
    fn selection_ignores_thread_count(seed in 0u64..10_000) {
        let corpus = random_corpus(seed, 4, 12);
        let (index, embedder) = build(&corpus, hashed(16));
        let in_pool = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
                .install(|| run_all(&corpus, &embedder, &index, 4, seed))
        };
        prop_assert_eq!(in_pool(1), in_pool(8));
    }
}
