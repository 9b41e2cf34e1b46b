#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crossicl::adaptation::{AdaptationMode, AdaptedDemonstration, Intermediates, SourceRef};
use crossicl::corpus::{Corpus, Instance, QueryLayout, TargetQuery, TaskRecord};
use crossicl::embedding::{build_index, Embedder, EmbeddingChannel, EmbeddingIndex, HashingEmbedder};
use crossicl::llm::{ChatProvider, Gateway, ProviderProfile, RetryPolicy};
use crossicl::pipeline::{Engine, ExperimentSettings};
use crossicl::prompts::PromptSet;
use crossicl::runner::{ChatBackend, RunConfig};
use crossicl::selection::CriterionRegistry;
use serde_json::json;

pub const PROMPT_1: &str = include_str!("../golden/prompt1.txt");
pub const PROMPT_2: &str = include_str!("../golden/prompt2.txt");
pub const PROMPT_3: &str = include_str!("../golden/prompt3.txt");
pub const PROMPT_4: &str = include_str!("../golden/prompt4.txt");
pub const RESPONSE_1: &str = include_str!("../golden/response1.txt");
pub const RESPONSE_2: &str = include_str!("../golden/response2.txt");
pub const RESPONSE_3: &str = include_str!("../golden/response3.txt");
pub const RESPONSE_4: &str = include_str!("../golden/response4.txt");

pub const COPA_DESCRIPTION: &str = "Given a premise and two alternatives, choose the alternative that is a more plausible cause or effect of the situation described by the premise. The input format is \"premise\n(1)alternative_1(2)alternative_2\", the output should either be \"1\" or \"2\" based on your judgment.";

pub const SOURCE_DESCRIPTION: &str = "You are given a question or fill-in-the-blank question, two answer options (Option1 and Option2) and an Explanation. Your task is to find the correct answer (return the string of the correct option, not option1/2) for the given question from the given options and using explanation.";

pub fn worked_example_source() -> TaskRecord {
    TaskRecord {
        task_id: "task1210_atomic_classification_madeupof".into(),
        description: SOURCE_DESCRIPTION.into(),
        category: "Question Answering".into(),
        instances: vec![Instance {
            instance_id: "dane".into(),
            input: "Question: Dane was on a mountaintop and struggled to breathe, so he rectified it by getting to an elevation that was\n Option1: higher\n Option2: lower\n Explanation: At higher elevations, there is less air to press on a given area.".into(),
            references: vec!["lower".into()],
        }],
        template_summary: None,
    }
}

pub fn worked_example_query() -> TargetQuery {
    TargetQuery::new(
        COPA_DESCRIPTION,
        "I ran out of breath.\n(1)I climbed several flights of stairs.(2)I read several chapters of the book.",
    )
    .with_references(vec!["1".into()])
}

/// The four demonstrations after the first one in the worked example's
/// final prompt, in prompt order.
pub fn worked_example_other_demos() -> Vec<AdaptedDemonstration> {
    let items = [
        ("The air pressure inside a patient's lungs decreases when the patient's chest gets larger.\n(1)The patient is exhaling.(2)The patient is inhaling.", "2"),
        ("The air pressure inside the lungs is lower than the air pressure outside.\n(1)exhaling (2)inhaling", "2"),
        ("Jeff is exercising his muscles at the gym. Over time his muscles will grow.\n(1)bigger (2)smaller", "1"),
        ("I inhale deeply.\n(1)My air pressure increases.(2)My air pressure decreases.", "1"),
    ];
    let layout = QueryLayout::default();
    items
        .iter()
        .enumerate()
        .map(|(i, (input, label))| AdaptedDemonstration {
            description: COPA_DESCRIPTION.into(),
            target_query_text: layout.render_input(input),
            label: label.to_string(),
            source: SourceRef {
                task_id: "task1210_atomic_classification_madeupof".into(),
                instance_id: format!("other{i}"),
            },
            intermediates: Intermediates::default(),
            mode: AdaptationMode::Full,
        })
        .collect()
}

pub fn gateway(provider: Arc<dyn ChatProvider>) -> Gateway {
    let profile = ProviderProfile {
        retry: RetryPolicy::immediate(2),
        ..ProviderProfile::default()
    };
    Gateway::new(provider, profile).unwrap()
}

pub fn task(id: &str, category: &str, description: &str, items: &[(String, String)]) -> TaskRecord {
    TaskRecord {
        task_id: id.into(),
        description: description.into(),
        category: category.into(),
        instances: items
            .iter()
            .enumerate()
            .map(|(i, (input, output))| Instance {
                instance_id: format!("{id}-{i}"),
                input: input.clone(),
                references: vec![output.clone()],
            })
            .collect(),
        template_summary: None,
    }
}

/// Two source and two target tasks with short, varied inputs.
pub fn micro_corpus(source_size: usize, target_size: usize) -> Corpus {
    let src = |id: &str, cat: &str, desc: &str, word: &str| {
        let items: Vec<(String, String)> = (0..source_size)
            .map(|i| (format!("{word} item {i} {}", "x ".repeat(i % 4)), format!("{word} answer {}", i % 3)))
            .collect();
        task(id, cat, desc, &items)
    };
    let tgt = |id: &str, cat: &str, desc: &str, word: &str| {
        let items: Vec<(String, String)> = (0..target_size)
            .map(|i| (format!("{word} query {i}"), format!("{word} answer {}", i % 2)))
            .collect();
        task(id, cat, desc, &items)
    };
    Corpus::from_tasks(
        vec![
            src("src_qa", "Question Answering", "Answer the question about event duration.", "duration"),
            src("src_cls", "Classification", "Classify the sentiment of the review.", "review"),
        ],
        vec![
            tgt("tgt_copa", "Commonsense", "Choose the more plausible alternative.", "premise"),
            tgt("tgt_sent", "Sentiment", "Decide whether the tweet is positive.", "tweet"),
        ],
    )
    .unwrap()
}

pub struct Fixture {
    pub corpus: Corpus,
    pub index: EmbeddingIndex,
    pub embedder: Embedder,
    pub layout: QueryLayout,
    pub prompts: PromptSet,
    pub registry: CriterionRegistry,
}

impl Fixture {
    pub fn new(corpus: Corpus) -> Self {
        let layout = QueryLayout::default();
        let embedder = Embedder::new(Arc::new(HashingEmbedder::new(64)));
        let channels = EmbeddingChannel::ALL
            .into_iter()
            .filter(|c| *c != EmbeddingChannel::Template)
            .collect();
        let index = build_index(&corpus, &channels, &embedder, &layout).unwrap();
        Self {
            corpus,
            index,
            embedder,
            layout,
            prompts: PromptSet::builtin(),
            registry: CriterionRegistry::builtin(),
        }
    }

    pub fn engine<'a>(&'a self, gateway: &'a Gateway, settings: &'a ExperimentSettings) -> Engine<'a> {
        Engine {
            corpus: &self.corpus,
            index: &self.index,
            embedder: &self.embedder,
            layout: &self.layout,
            prompts: &self.prompts,
            registry: &self.registry,
            gateway,
            complexity: None,
            settings,
        }
    }
}

pub fn write_task_file(dir: &Path, t: &TaskRecord) {
    let body = json!({
        "definition": t.description,
        "category": t.category,
        "instances": t.instances.iter().map(|i| json!({
            "id": i.instance_id,
            "input": i.input,
            "output": i.references,
        })).collect::<Vec<_>>(),
    });
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join(format!("{}.json", t.task_id)), serde_json::to_vec_pretty(&body).unwrap()).unwrap();
}

/// Writes `corpus` as task files under `root` and returns a config that
/// reads them, with caches and runs under `root` as well.
pub fn on_disk_config(root: &Path, corpus: &Corpus) -> RunConfig {
    let source: PathBuf = root.join("data/source");
    let target: PathBuf = root.join("data/target");
    for t in corpus.source_tasks.values() {
        write_task_file(&source, t);
    }
    for t in corpus.target_tasks.values() {
        write_task_file(&target, t);
    }
    let mut cfg = RunConfig::default();
    cfg.corpus.source_dir = source;
    cfg.corpus.target_dir = target;
    cfg.cache_dir = root.join("cache");
    cfg.runs_dir = root.join("runs");
    cfg.chat.backend = ChatBackend::Mock;
    cfg.embeddings.dim = 64;
    cfg
}
