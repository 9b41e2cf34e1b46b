//! Task, instance and query data model, plus ingestion of task files laid
//! out like Super-NaturalInstructions (one JSON object per task).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: malformed task file: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: task has no instances")]
    EmptyTask { path: PathBuf },
    #[error("{path}: task has no definition")]
    NoDescription { path: PathBuf },
    #[error("task `{task_id}` appears in both the source and the target split")]
    SplitConflict { task_id: String },
    #[error("{dir}: no task files found")]
    EmptySplit { dir: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One demonstration candidate: an input with one or more gold outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub instance_id: String,
    pub input: String,
    pub references: Vec<String>,
}

impl Instance {
    pub fn first_reference(&self) -> &str {
        self.references.first().map(String::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub description: String,
    pub category: String,
    pub instances: Vec<Instance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_summary: Option<String>,
}

impl TaskRecord {
    pub fn instance(&self, instance_id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.instance_id == instance_id)
    }

    /// The query this instance would be as a target query of this task.
    pub fn query_for(&self, instance: &Instance) -> TargetQuery {
        TargetQuery {
            description: self.description.clone(),
            input: instance.input.clone(),
            references: Some(instance.references.clone()),
        }
    }
}

/// First `k` instances in file order.
pub fn take_head(task: &TaskRecord, k: usize) -> &[Instance] {
    &task.instances[..k.min(task.instances.len())]
}

/// How a query is laid out as text.
///
/// `full_text` (description + separator + input) is what gets embedded;
/// `render_input` is the input block shown to the model inside prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryLayout {
    pub instruction_header: String,
    pub separator: String,
    pub input_prefix: String,
    /// Appended after the input block; `None` turns it off.
    pub answer_format: Option<String>,
}

pub const DEFAULT_ANSWER_FORMAT: &str =
    "Give your final answer in the following format: \"The final answer is: [your answer]\"";

impl Default for QueryLayout {
    fn default() -> Self {
        Self {
            instruction_header: "Task Instruction:\n".into(),
            separator: "\n\n".into(),
            input_prefix: "Input:\n".into(),
            answer_format: Some(DEFAULT_ANSWER_FORMAT.into()),
        }
    }
}

impl QueryLayout {
    pub fn full_text(&self, description: &str, input: &str) -> String {
        format!(
            "{}{}{}{}",
            self.instruction_header, description, self.separator, input
        )
    }

    pub fn render_input(&self, input: &str) -> String {
        match &self.answer_format {
            Some(line) => format!("{}{}\n\n{}", self.input_prefix, input, line),
            None => format!("{}{}", self.input_prefix, input),
        }
    }
}

/// A user query on the target task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetQuery {
    pub description: String,
    pub input: String,
    /// Gold outputs; only present when evaluating.
    #[serde(default)]
    pub references: Option<Vec<String>>,
}

impl TargetQuery {
    pub fn new(description: impl Into<String>, input: impl Into<String>) -> Self {
        Self {
            description: description.into(),
            input: input.into(),
            references: None,
        }
    }

    pub fn with_references(mut self, references: Vec<String>) -> Self {
        self.references = Some(references);
        self
    }

    pub fn full_text(&self, layout: &QueryLayout) -> String {
        layout.full_text(&self.description, &self.input)
    }

    pub fn first_reference(&self) -> Option<&str> {
        self.references
            .as_ref()
            .and_then(|r| r.first())
            .map(String::as_str)
    }
}

/// Field names used when reading task files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskFileSchema {
    pub definition: String,
    pub category: String,
    pub instances: String,
    pub id: String,
    pub input: String,
    pub output: String,
}

impl Default for TaskFileSchema {
    fn default() -> Self {
        Self {
            definition: "definition".into(),
            category: "category".into(),
            instances: "instances".into(),
            id: "id".into(),
            input: "input".into(),
            output: "output".into(),
        }
    }
}

impl TaskFileSchema {
    /// The capitalised names used by the upstream Super-NI release.
    pub fn super_ni() -> Self {
        Self {
            definition: "Definition".into(),
            category: "Categories".into(),
            instances: "Instances".into(),
            id: "id".into(),
            input: "input".into(),
            output: "output".into(),
        }
    }
}

const TEMPLATE_SUMMARY_FIELD: &str = "template_summary";

pub fn ingest_task_file(path: &Path, schema: &TaskFileSchema) -> Result<TaskRecord, IngestError> {
    let raw = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let task_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    parse_task(&task_id, &raw, schema).map_err(|e| e.at(path))
}

/// Error without a path; attached by the caller.
#[derive(Debug)]
enum ParseFailure {
    Malformed(String),
    Empty,
    NoDescription,
}

impl ParseFailure {
    fn at(self, path: &Path) -> IngestError {
        let path = path.to_path_buf();
        match self {
            ParseFailure::Malformed(reason) => IngestError::Malformed { path, reason },
            ParseFailure::Empty => IngestError::EmptyTask { path },
            ParseFailure::NoDescription => IngestError::NoDescription { path },
        }
    }
}

/// Accepts either a string or an array of strings (Super-NI stores
/// definitions and categories as one-element arrays).
fn text_field(value: Option<&Value>) -> Option<String> {
    match value? {
        Value::String(s) => Some(s.clone()),
        Value::Array(items) => {
            let parts: Vec<&str> = items.iter().filter_map(Value::as_str).collect();
            if parts.is_empty() {
                None
            } else {
                Some(parts.join("\n"))
            }
        }
        _ => None,
    }
}

fn parse_task(task_id: &str, raw: &str, schema: &TaskFileSchema) -> Result<TaskRecord, ParseFailure> {
    if task_id.is_empty() {
        return Err(ParseFailure::Malformed("empty task id".into()));
    }
    let root: Value =
        serde_json::from_str(raw).map_err(|e| ParseFailure::Malformed(e.to_string()))?;
    let obj = root
        .as_object()
        .ok_or_else(|| ParseFailure::Malformed("top level is not an object".into()))?;

    let description = text_field(obj.get(&schema.definition))
        .filter(|d| !d.trim().is_empty())
        .ok_or(ParseFailure::NoDescription)?;
    let category = text_field(obj.get(&schema.category)).unwrap_or_default();
    let items = obj
        .get(&schema.instances)
        .and_then(Value::as_array)
        .ok_or_else(|| ParseFailure::Malformed(format!("missing `{}` array", schema.instances)))?;
    if items.is_empty() {
        return Err(ParseFailure::Empty);
    }

    let mut seen = BTreeSet::new();
    let mut instances = Vec::with_capacity(items.len());
    for (pos, item) in items.iter().enumerate() {
        let item = item
            .as_object()
            .ok_or_else(|| ParseFailure::Malformed(format!("instance {pos} is not an object")))?;
        let instance_id = match item.get(&schema.id) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            None => format!("{task_id}-{pos}"),
            Some(_) => return Err(ParseFailure::Malformed(format!("instance {pos}: bad id"))),
        };
        if !seen.insert(instance_id.clone()) {
            return Err(ParseFailure::Malformed(format!(
                "duplicate instance id `{instance_id}`"
            )));
        }
        let input = item
            .get(&schema.input)
            .and_then(Value::as_str)
            .ok_or_else(|| {
                ParseFailure::Malformed(format!("instance `{instance_id}` has no `{}`", schema.input))
            })?
            .to_string();
        let references = match item.get(&schema.output) {
            Some(Value::Array(outs)) => outs
                .iter()
                .map(|o| o.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>(),
            Some(Value::String(s)) => Some(vec![s.clone()]),
            _ => None,
        }
        .ok_or_else(|| {
            ParseFailure::Malformed(format!("instance `{instance_id}` has no `{}`", schema.output))
        })?;
        if references.is_empty() || references.iter().any(|r| r.trim().is_empty()) {
            return Err(ParseFailure::Malformed(format!(
                "instance `{instance_id}` has an empty reference"
            )));
        }
        instances.push(Instance {
            instance_id,
            input,
            references,
        });
    }

    Ok(TaskRecord {
        task_id: task_id.to_string(),
        description,
        category,
        instances,
        template_summary: text_field(obj.get(TEMPLATE_SUMMARY_FIELD)),
    })
}

/// Inverse of [`ingest_task_file`]: the JSON object a task file would hold.
pub fn task_to_json(task: &TaskRecord, schema: &TaskFileSchema) -> Value {
    let mut obj = Map::new();
    obj.insert(schema.definition.clone(), Value::String(task.description.clone()));
    obj.insert(schema.category.clone(), Value::String(task.category.clone()));
    let instances = task
        .instances
        .iter()
        .map(|inst| {
            let mut o = Map::new();
            o.insert(schema.id.clone(), Value::String(inst.instance_id.clone()));
            o.insert(schema.input.clone(), Value::String(inst.input.clone()));
            o.insert(
                schema.output.clone(),
                Value::Array(inst.references.iter().cloned().map(Value::String).collect()),
            );
            Value::Object(o)
        })
        .collect();
    obj.insert(schema.instances.clone(), Value::Array(instances));
    if let Some(t) = &task.template_summary {
        obj.insert(TEMPLATE_SUMMARY_FIELD.into(), Value::String(t.clone()));
    }
    Value::Object(obj)
}

pub fn write_task_file(task: &TaskRecord, dir: &Path, schema: &TaskFileSchema) -> Result<PathBuf, IngestError> {
    let path = dir.join(format!("{}.json", task.task_id));
    let body = serde_json::to_string_pretty(&task_to_json(task, schema)).expect("json value");
    fs::write(&path, body).map_err(|source| IngestError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub source_dir: PathBuf,
    pub target_dir: PathBuf,
    pub source_ids: Vec<String>,
    pub target_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub source_tasks: BTreeMap<String, TaskRecord>,
    pub target_tasks: BTreeMap<String, TaskRecord>,
    pub split_manifest: SplitManifest,
}

impl Corpus {
    /// Builds a corpus from in-memory tasks, enforcing the split invariants.
    pub fn from_tasks(
        source: Vec<TaskRecord>,
        target: Vec<TaskRecord>,
    ) -> Result<Self, IngestError> {
        let mut source_tasks = BTreeMap::new();
        for t in source {
            if source_tasks.contains_key(&t.task_id) {
                return Err(IngestError::Malformed {
                    path: PathBuf::from(&t.task_id),
                    reason: "duplicate task id in source split".into(),
                });
            }
            source_tasks.insert(t.task_id.clone(), t);
        }
        let mut target_tasks = BTreeMap::new();
        for t in target {
            if source_tasks.contains_key(&t.task_id) {
                return Err(IngestError::SplitConflict { task_id: t.task_id });
            }
            if target_tasks.contains_key(&t.task_id) {
                return Err(IngestError::Malformed {
                    path: PathBuf::from(&t.task_id),
                    reason: "duplicate task id in target split".into(),
                });
            }
            target_tasks.insert(t.task_id.clone(), t);
        }
        let split_manifest = SplitManifest {
            source_dir: PathBuf::new(),
            target_dir: PathBuf::new(),
            source_ids: source_tasks.keys().cloned().collect(),
            target_ids: target_tasks.keys().cloned().collect(),
        };
        Ok(Self {
            source_tasks,
            target_tasks,
            split_manifest,
        })
    }

    pub fn is_source(&self, task_id: &str) -> bool {
        self.source_tasks.contains_key(task_id)
    }

    /// Content digest over every task (ids, text, categories, summaries).
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (label, tasks) in [("source", &self.source_tasks), ("target", &self.target_tasks)] {
            hasher.update(label.as_bytes());
            for task in tasks.values() {
                hasher.update(serde_json::to_vec(task).expect("serializable task"));
                hasher.update([0u8]);
            }
        }
        hex::encode(hasher.finalize())
    }
}

fn task_files(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let entries = fs::read_dir(dir).map_err(|source| IngestError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| IngestError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(IngestError::EmptySplit {
            dir: dir.to_path_buf(),
        });
    }
    Ok(files)
}

pub fn build_corpus(
    source_dir: &Path,
    target_dir: &Path,
    schema: &TaskFileSchema,
) -> Result<Corpus, IngestError> {
    let load = |dir: &Path| -> Result<Vec<TaskRecord>, IngestError> {
        task_files(dir)?
            .iter()
            .map(|p| ingest_task_file(p, schema))
            .collect()
    };
    let source = load(source_dir)?;
    let target = load(target_dir)?;
    let mut corpus = Corpus::from_tasks(source, target)?;
    corpus.split_manifest.source_dir = source_dir.to_path_buf();
    corpus.split_manifest.target_dir = target_dir.to_path_buf();
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn ingest_maps_fields_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "task1.json",
            r#"{"definition": "Classify sentiment.", "category": "Classification",
                "positive_examples": [{"input": "x"}],
                "instances": [{"id": "a", "input": "good", "output": ["Yes", "yes"]},
                              {"id": "b", "input": "bad", "output": ["No"]}]}"#,
        );
        let task = ingest_task_file(&p, &TaskFileSchema::default()).unwrap();
        assert_eq!(task.task_id, "task1");
        assert_eq!(task.description, "Classify sentiment.");
        assert_eq!(task.instances.len(), 2);
        assert_eq!(task.instances[0].references, vec!["Yes", "yes"]);
        assert_eq!(task.instances[1].instance_id, "b");
    }

    #[test]
    fn ingest_accepts_super_ni_arrays() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "task2.json",
            r#"{"Definition": ["Answer it."], "Categories": ["Question Answering"],
                "Instances": [{"id": "t-1", "input": "q", "output": ["a"]}]}"#,
        );
        let task = ingest_task_file(&p, &TaskFileSchema::super_ni()).unwrap();
        assert_eq!(task.description, "Answer it.");
        assert_eq!(task.category, "Question Answering");
    }

    #[test]
    fn ingest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let schema = TaskFileSchema::default();
        let missing_output = write(
            dir.path(),
            "m.json",
            r#"{"definition": "d", "instances": [{"id": "a", "input": "x"}]}"#,
        );
        assert!(matches!(
            ingest_task_file(&missing_output, &schema),
            Err(IngestError::Malformed { .. })
        ));
        let empty = write(dir.path(), "e.json", r#"{"definition": "d", "instances": []}"#);
        assert!(matches!(
            ingest_task_file(&empty, &schema),
            Err(IngestError::EmptyTask { .. })
        ));
        let nodef = write(
            dir.path(),
            "n.json",
            r#"{"instances": [{"id": "a", "input": "x", "output": ["y"]}]}"#,
        );
        assert!(matches!(
            ingest_task_file(&nodef, &schema),
            Err(IngestError::NoDescription { .. })
        ));
        let garbage = write(dir.path(), "g.json", "{not json");
        assert!(matches!(
            ingest_task_file(&garbage, &schema),
            Err(IngestError::Malformed { .. })
        ));
        let blank_ref = write(
            dir.path(),
            "b.json",
            r#"{"definition": "d", "instances": [{"id": "a", "input": "x", "output": ["  "]}]}"#,
        );
        assert!(matches!(
            ingest_task_file(&blank_ref, &schema),
            Err(IngestError::Malformed { .. })
        ));
    }

    fn simple_task(id: &str, n: usize) -> TaskRecord {
        TaskRecord {
            task_id: id.into(),
            description: format!("describe {id}"),
            category: "cat".into(),
            instances: (0..n)
                .map(|i| Instance {
                    instance_id: format!("{id}-{i}"),
                    input: format!("input {i}"),
                    references: vec![format!("out {i}")],
                })
                .collect(),
            template_summary: None,
        }
    }

    #[test]
    fn build_corpus_counts_and_conflicts() {
        let src = tempfile::tempdir().unwrap();
        let tgt = tempfile::tempdir().unwrap();
        let schema = TaskFileSchema::default();
        for id in ["s3", "s1", "s2"] {
            write_task_file(&simple_task(id, 2), src.path(), &schema).unwrap();
        }
        write_task_file(&simple_task("t1", 2), tgt.path(), &schema).unwrap();
        let corpus = build_corpus(src.path(), tgt.path(), &schema).unwrap();
        assert_eq!(corpus.source_tasks.len(), 3);
        assert_eq!(corpus.target_tasks.len(), 1);
        assert_eq!(corpus.split_manifest.source_ids, vec!["s1", "s2", "s3"]);

        write_task_file(&simple_task("s1", 2), tgt.path(), &schema).unwrap();
        assert!(matches!(
            build_corpus(src.path(), tgt.path(), &schema),
            Err(IngestError::SplitConflict { task_id }) if task_id == "s1"
        ));

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            build_corpus(src.path(), empty.path(), &schema),
            Err(IngestError::EmptySplit { .. })
        ));
    }

    #[test]
    fn take_head_truncates() {
        let t = simple_task("t", 250);
        let head = take_head(&t, 100);
        assert_eq!(head.len(), 100);
        assert_eq!(head[99].instance_id, "t-99");
        assert_eq!(take_head(&simple_task("u", 3), 100).len(), 3);
        assert_eq!(take_head(&t, 1), &t.instances[..1]);
    }

    #[test]
    fn layout_renders_query_text() {
        let layout = QueryLayout::default();
        let q = TargetQuery::new("Do it.", "abc");
        assert_eq!(q.full_text(&layout), "Task Instruction:\nDo it.\n\nabc");
        assert_eq!(
            layout.render_input("abc"),
            format!("Input:\nabc\n\n{DEFAULT_ANSWER_FORMAT}")
        );
    }

    fn arb_text() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9 .,\n\"]{1,24}".prop_filter("non-blank", |s| !s.trim().is_empty())
    }

    fn arb_task() -> impl Strategy<Value = TaskRecord> {
        (
            arb_text(),
            "[a-z ]{0,10}",
            prop::collection::vec((arb_text(), prop::collection::vec(arb_text(), 1..3)), 1..6),
            prop::option::of(arb_text()),
        )
            .prop_map(|(description, category, items, template_summary)| TaskRecord {
                task_id: "task_rt".into(),
                description,
                category,
                instances: items
                    .into_iter()
                    .enumerate()
                    .map(|(i, (input, references))| Instance {
                        instance_id: format!("i{i}"),
                        input,
                        references,
                    })
                    .collect(),
                template_summary,
            })
    }

    proptest! {
        #[test]
        fn ingest_inverts_serialize(task in arb_task()) {
            let schema = TaskFileSchema::default();
            let raw = serde_json::to_string(&task_to_json(&task, &schema)).unwrap();
            let back = parse_task(&task.task_id, &raw, &schema).unwrap();
            prop_assert_eq!(back, task);
        }

        #[test]
        fn take_head_is_prefix(a in 1usize..20, b in 1usize..20) {
            let t = simple_task("p", 12);
            let (lo, hi) = (a.min(b), a.max(b));
            let short = take_head(&t, lo);
            let long = take_head(&t, hi);
            prop_assert_eq!(short, &long[..short.len()]);
        }
    }
}
