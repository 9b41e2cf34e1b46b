//! Final prompt assembly and answer extraction.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{AdaptationMode, AdaptedDemonstration, Intermediates, SourceRef};
use crate::corpus::{QueryLayout, TargetQuery};
use crate::embedding::{cosine, EmbeddingVector};
use crate::prompts::{PromptSet, TemplateError, ANSWER_MARKER};
use crate::selection::rank::order_desc;

pub const COT_TRIGGER: &str = "Let's think step by step";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ComposeError {
    #[error("style {style} cannot take {demos} demonstrations")]
    Arity { style: PromptStyle, demos: usize },
    #[error("template: {0}")]
    Template(String),
}

impl From<TemplateError> for ComposeError {
    fn from(e: TemplateError) -> Self {
        ComposeError::Template(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    #[default]
    CrossiclFewshot,
    ZeroShot,
    ZeroShotCot,
    QuerySupervised,
}

impl PromptStyle {
    pub const ALL: [PromptStyle; 4] = [
        PromptStyle::CrossiclFewshot,
        PromptStyle::ZeroShot,
        PromptStyle::ZeroShotCot,
        PromptStyle::QuerySupervised,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptStyle::CrossiclFewshot => "crossicl_fewshot",
            PromptStyle::ZeroShot => "zero_shot",
            PromptStyle::ZeroShotCot => "zero_shot_cot",
            PromptStyle::QuerySupervised => "query_supervised",
        }
    }

    pub fn is_zero_shot(self) -> bool {
        matches!(self, PromptStyle::ZeroShot | PromptStyle::ZeroShotCot)
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown prompt style `{s}`"))
    }
}

/// Placement of demonstrations relative to their selection order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoOrder {
    AsSelected,
    /// Best match last, next to the query.
    #[default]
    Reversed,
    Shuffled { seed: u64 },
}

impl DemoOrder {
    pub fn apply<T>(self, items: &mut [T]) {
        match self {
            DemoOrder::AsSelected => {}
            DemoOrder::Reversed => items.reverse(),
            DemoOrder::Shuffled { seed } => items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl fmt::Display for DemoOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DemoOrder::AsSelected => f.write_str("as_selected"),
            DemoOrder::Reversed => f.write_str("reversed"),
            DemoOrder::Shuffled { seed } => write!(f, "shuffled:{seed}"),
        }
    }
}

impl FromStr for DemoOrder {
    type Err = String;

    /// `as_selected`, `reversed` or `shuffled:<seed>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "as_selected" => Ok(DemoOrder::AsSelected),
            "reversed" => Ok(DemoOrder::Reversed),
            _ => s
                .strip_prefix("shuffled:")
                .and_then(|n| n.parse().ok())
                .map(|seed| DemoOrder::Shuffled { seed })
                .ok_or_else(|| format!("unknown demo order `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedPrompt {
    pub text: String,
    pub demo_count: usize,
    pub style: PromptStyle,
}

pub struct Composer<'a> {
    pub prompts: &'a PromptSet,
    pub layout: &'a QueryLayout,
    pub order: DemoOrder,
}

impl<'a> Composer<'a> {
    pub fn new(prompts: &'a PromptSet, layout: &'a QueryLayout) -> Self {
        Self {
            prompts,
            layout,
            order: DemoOrder::default(),
        }
    }

    pub fn with_order(mut self, order: DemoOrder) -> Self {
        self.order = order;
        self
    }

    pub fn render_demo_block(&self, d: &AdaptedDemonstration) -> Result<String, ComposeError> {
        Ok(self.prompts.render(
            "demo_block",
            &[
                ("description", &d.description),
                ("query", &d.target_query_text),
                ("label", &d.label),
            ],
        )?)
    }

    pub fn render_query_block(&self, q: &TargetQuery) -> Result<String, ComposeError> {
        Ok(self.prompts.render(
            "query_block",
            &[("description", &q.description), ("query", &self.layout.render_input(&q.input))],
        )?)
    }

    /// `demos` arrive in selection order and are placed per `self.order`.
    pub fn compose(
        &self,
        demos: &[AdaptedDemonstration],
        q: &TargetQuery,
        style: PromptStyle,
    ) -> Result<ComposedPrompt, ComposeError> {
        let arity_ok = match style {
            PromptStyle::CrossiclFewshot => !demos.is_empty(),
            PromptStyle::ZeroShot | PromptStyle::ZeroShotCot => demos.is_empty(),
            PromptStyle::QuerySupervised => true,
        };
        if !arity_ok {
            return Err(ComposeError::Arity {
                style,
                demos: demos.len(),
            });
        }
        let mut placed: Vec<&AdaptedDemonstration> = demos.iter().collect();
        self.order.apply(&mut placed);
        let mut blocks = placed
            .into_iter()
            .map(|d| self.render_demo_block(d))
            .collect::<Result<Vec<_>, _>>()?;
        blocks.push(self.render_query_block(q)?);
        let mut text = blocks.join("\n\n");
        if style == PromptStyle::ZeroShotCot {
            text.push_str("\n\n");
            text.push_str(COT_TRIGGER);
        }
        Ok(ComposedPrompt {
            text,
            demo_count: demos.len(),
            style,
        })
    }
}

const QUOTE_PAIRS: [(char, char); 8] = [
    ('"', '"'),
    ('\'', '\''),
    ('`', '`'),
    ('\u{201c}', '\u{201d}'),
    ('\u{2018}', '\u{2019}'),
    ('[', ']'),
    ('(', ')'),
    ('{', '}'),
];

/// True when the outer `open`/`close` pair wraps all of `inner`, as in
/// `[a]` but not `[1] and [2]`.
fn encloses(inner: &str, open: char, close: char) -> bool {
    if open == close {
        return !inner.contains(open);
    }
    let mut depth = 0usize;
    for c in inner.chars() {
        if c == open {
            depth += 1;
        } else if c == close {
            if depth == 0 {
                return false;
            }
            depth -= 1;
        }
    }
    depth == 0
}

fn strip_wrapping(mut s: &str) -> &str {
    loop {
        let before = s;
        s = s.trim();
        s = s.strip_suffix('.').unwrap_or(s).trim_end();
        for (open, close) in QUOTE_PAIRS {
            if s.len() >= open.len_utf8() + close.len_utf8() && s.starts_with(open) && s.ends_with(close) {
                let inner = &s[open.len_utf8()..s.len() - close.len_utf8()];
                if encloses(inner, open, close) {
                    s = inner;
                    break;
                }
            }
        }
        if s == before {
            return s;
        }
    }
}

/// Text after the last "The final answer is:" (any case), with whitespace,
/// wrapping quotes or brackets and a trailing period removed. Without the
/// marker the whole response is cleaned the same way.
pub fn extract_final_answer(response: &str) -> String {
    let lower = response.to_ascii_lowercase();
    let marker = ANSWER_MARKER.to_ascii_lowercase();
    let tail = match lower.rfind(&marker) {
        Some(pos) => &response[pos + marker.len()..],
        None => response,
    };
    strip_wrapping(tail).to_string()
}

/// One earlier query plus the label CrossICL produced for it.
#[derive(Debug, Clone)]
pub struct LabelledQuery<'a> {
    pub source: SourceRef,
    pub query: &'a TargetQuery,
    pub label: String,
    pub vector: &'a EmbeddingVector,
}

/// Demonstrations for query `i` built from queries `0..i` of the same task:
/// the `n` most similar by full-query cosine, best first.
pub fn build_query_supervised_demos(
    pool: &[LabelledQuery],
    i: usize,
    n: usize,
    layout: &QueryLayout,
) -> Vec<AdaptedDemonstration> {
    let prior = &pool[..i.min(pool.len())];
    if prior.is_empty() || i >= pool.len() {
        return Vec::new();
    }
    let target = pool[i].vector;
    let scores: Vec<f64> = prior.iter().map(|p| cosine(p.vector, target).unwrap_or(0.0)).collect();
    let keys: Vec<&str> = prior.iter().map(|p| p.source.instance_id.as_str()).collect();
    order_desc(&scores, &keys)
        .into_iter()
        .take(n)
        .map(|j| AdaptedDemonstration {
            description: prior[j].query.description.clone(),
            target_query_text: layout.render_input(&prior[j].query.input),
            label: prior[j].label.clone(),
            source: prior[j].source.clone(),
            intermediates: Intermediates::default(),
            mode: AdaptationMode::None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn demo(label: &str, query: &str) -> AdaptedDemonstration {
        AdaptedDemonstration {
            description: "Target task.".into(),
            target_query_text: format!("Input:\n{query}"),
            label: label.into(),
            source: SourceRef {
                task_id: "s".into(),
                instance_id: query.into(),
            },
            intermediates: Intermediates::default(),
            mode: AdaptationMode::Full,
        }
    }

    #[test]
    fn extraction_table() {
        let cases = [
            ("The final answer is: 2", "2"),
            ("reasoning...\nThe final answer is: [lower].", "lower"),
            ("Paris", "Paris"),
            ("  Paris.  ", "Paris"),
            ("the final answer is: yes", "yes"),
            ("THE FINAL ANSWER IS: No", "No"),
            ("The final answer is: 1\nThe final answer is: 2", "2"),
            ("The final answer is: \"Option A\"", "Option A"),
            ("The final answer is: 'b'.", "b"),
            ("The final answer is: (3)", "3"),
            ("The final answer is: \u{201c}cat\u{201d}", "cat"),
            ("The final answer is:", ""),
            ("", ""),
            ("The final answer is: [\"x\"].", "x"),
            ("The final answer is: 3.5", "3.5"),
            ("The final answer is: e.g.", "e.g"),
            ("The final answer is: [your answer]", "your answer"),
            ("Answer: 4", "Answer: 4"),
            ("The final answer is: a\nb", "a\nb"),
            ("The final answer is:   spaced out   ", "spaced out"),
            ("The final answer is: {B}", "B"),
            ("The final answer is: `code`", "code"),
            ("xx The Final Answer Is: mixed", "mixed"),
            ("The final answer is: [1] and [2]", "[1] and [2]"),
            ("The final answer is: ...", ""),
        ];
        for (input, want) in cases {
            assert_eq!(extract_final_answer(input), want, "{input:?}");
        }
    }

    #[test]
    fn compose_structure_and_order() {
        let prompts = PromptSet::builtin();
        let layout = QueryLayout::default();
        let c = Composer::new(&prompts, &layout);
        let demos: Vec<_> = (0..5).map(|i| demo(&i.to_string(), &format!("q{i}"))).collect();
        let q = TargetQuery::new("Target task.", "final");
        let p = c.compose(&demos, &q, PromptStyle::CrossiclFewshot).unwrap();
        assert_eq!(p.text.matches("Task Instruction:").count(), 6);
        assert_eq!(p.text.matches("The final answer is: ").count(), 5 + 1);
        assert!(p.text.ends_with(&c.render_query_block(&q).unwrap()));
        // Reversed: the first-selected demo sits next to the query.
        let mut last = 0;
        for d in demos.iter().rev() {
            let pos = p.text.find(&c.render_demo_block(d).unwrap()).unwrap();
            assert!(pos >= last);
            last = pos;
        }

        let cot = c.compose(&[], &q, PromptStyle::ZeroShotCot).unwrap();
        assert!(cot.text.ends_with(&format!("{}\n\n{COT_TRIGGER}", c.render_query_block(&q).unwrap())));
        assert_eq!(
            c.compose(&[], &q, PromptStyle::CrossiclFewshot),
            Err(ComposeError::Arity {
                style: PromptStyle::CrossiclFewshot,
                demos: 0
            })
        );
        assert!(c.compose(&demos, &q, PromptStyle::ZeroShot).is_err());
    }

    #[test]
    fn unadapted_demo_keeps_its_description() {
        let prompts = PromptSet::builtin();
        let layout = QueryLayout::default();
        let mut d = demo("1", "x");
        d.description = "Source task T.".into();
        d.mode = AdaptationMode::None;
        let block = Composer::new(&prompts, &layout).render_demo_block(&d).unwrap();
        assert!(block.starts_with("Task Instruction:\nSource task T."));
        assert!(block.ends_with("The final answer is: 1"));
    }

    #[test]
    fn demo_order_parsing() {
        for s in ["as_selected", "reversed", "shuffled:42"] {
            assert_eq!(s.parse::<DemoOrder>().unwrap().to_string(), s);
        }
        assert!("sideways".parse::<DemoOrder>().is_err());
    }

    #[test]
    fn query_supervised_leaves_self_out() {
        let layout = QueryLayout::default();
        let qs: Vec<TargetQuery> = (0..3).map(|i| TargetQuery::new("T", format!("x{i}"))).collect();
        let vs: Vec<EmbeddingVector> = (0..3)
            .map(|i| EmbeddingVector::new(vec![1.0, i as f64]).unwrap())
            .collect();
        let pool: Vec<LabelledQuery> = (0..3)
            .map(|i| LabelledQuery {
                source: SourceRef {
                    task_id: "t".into(),
                    instance_id: i.to_string(),
                },
                query: &qs[i],
                label: format!("y{i}"),
                vector: &vs[i],
            })
            .collect();
        assert!(build_query_supervised_demos(&pool, 0, 5, &layout).is_empty());
        let third = build_query_supervised_demos(&pool, 2, 5, &layout);
        let ids: Vec<&str> = third.iter().map(|d| d.source.instance_id.as_str()).collect();
        assert_eq!(ids, vec!["1", "0"]);
        assert_eq!(third[0].label, "y1");
    }

    proptest! {
        #[test]
        fn extraction_is_idempotent(s in "[ -~\\n]{0,40}") {
            let once = extract_final_answer(&s);
            if !once.to_ascii_lowercase().contains("the final answer is:") {
                prop_assert_eq!(extract_final_answer(&once), once.clone());
                let wrapped = format!("The final answer is: {once}");
                prop_assert_eq!(extract_final_answer(&wrapped), once);
            }
        }

        #[test]
        fn compose_is_append_only(labels in proptest::collection::vec("[a-z0-9]{1,6}", 1..6)) {
            let prompts = PromptSet::builtin();
            let layout = QueryLayout::default();
            let c = Composer::new(&prompts, &layout).with_order(DemoOrder::AsSelected);
            let demos: Vec<_> = labels.iter().enumerate().map(|(i, l)| demo(l, &format!("q{i}"))).collect();
            let p = c.compose(&demos, &TargetQuery::new("Target task.", "z"), PromptStyle::CrossiclFewshot).unwrap();
            let mut from = 0;
            for d in &demos {
                let block = c.render_demo_block(d).unwrap();
                let at = p.text[from..].find(&block).expect("block present in order");
                from += at + block.len();
            }
        }
    }
}
