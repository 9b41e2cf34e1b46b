//! Progressive task adaptation: rewrite each selected source instance into a
//! target-task demonstration (transform, refine, source-guided label).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{QueryLayout, TargetQuery};
use crate::llm::{Gateway, LlmError};
use crate::prompts::{extract_tag, strip_answer_prefix, PromptSet, TemplateError};
use crate::selection::Candidate;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdaptError {
    #[error("{stage}: response has no <{tag}> block")]
    TagMissing { stage: String, tag: String, raw: String },
    #[error("{stage}: empty output")]
    EmptyStage { stage: String },
    #[error("{stage}: {source}")]
    Llm { stage: String, source: LlmError },
    #[error("template: {0}")]
    Template(String),
}

impl From<TemplateError> for AdaptError {
    fn from(e: TemplateError) -> Self {
        AdaptError::Template(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMode {
    #[default]
    Full,
    NoSrcInLg,
    NoSrcInAll,
    NoRefine,
    OneStep,
    None,
}

impl AdaptationMode {
    pub const ALL: [AdaptationMode; 6] = [
        AdaptationMode::Full,
        AdaptationMode::NoSrcInLg,
        AdaptationMode::NoSrcInAll,
        AdaptationMode::NoRefine,
        AdaptationMode::OneStep,
        AdaptationMode::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptationMode::Full => "full",
            AdaptationMode::NoSrcInLg => "no_src_in_lg",
            AdaptationMode::NoSrcInAll => "no_src_in_all",
            AdaptationMode::NoRefine => "no_refine",
            AdaptationMode::OneStep => "one_step",
            AdaptationMode::None => "none",
        }
    }

    /// Provider calls per demonstration when no stage needs a retry.
    pub fn stage_count(self) -> usize {
        match self {
            AdaptationMode::Full | AdaptationMode::NoSrcInLg | AdaptationMode::NoSrcInAll => 3,
            AdaptationMode::NoRefine => 2,
            AdaptationMode::OneStep => 1,
            AdaptationMode::None => 0,
        }
    }
}

impl fmt::Display for AdaptationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown adaptation mode `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub task_id: String,
    pub instance_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intermediates {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transformed_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_label_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_one_step_response: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptedDemonstration {
    /// Instruction shown above the demo: the target description, or the
    /// source description when adaptation is off.
    pub description: String,
    pub target_query_text: String,
    pub label: String,
    pub source: SourceRef,
    pub intermediates: Intermediates,
    pub mode: AdaptationMode,
}

/// What to do with a demonstration whose adaptation failed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    #[default]
    FailFast,
    Skip,
}

pub struct Adapter<'a> {
    pub prompts: &'a PromptSet,
    pub layout: &'a QueryLayout,
    pub gateway: &'a Gateway,
    pub n_guides: usize,
}

fn llm_err(stage: &str) -> impl Fn(LlmError) -> AdaptError + '_ {
    move |source| AdaptError::Llm {
        stage: stage.to_string(),
        source,
    }
}

fn non_empty(stage: &str, text: &str) -> Result<String, AdaptError> {
    if text.trim().is_empty() {
        Err(AdaptError::EmptyStage { stage: stage.into() })
    } else {
        Ok(text.to_string())
    }
}

impl<'a> Adapter<'a> {
    pub fn new(prompts: &'a PromptSet, layout: &'a QueryLayout, gateway: &'a Gateway) -> Self {
        Self {
            prompts,
            layout,
            gateway,
            n_guides: 1,
        }
    }

    pub fn with_guides(mut self, n_guides: usize) -> Self {
        self.n_guides = n_guides.max(1);
        self
    }

    /// Sends `prompt`, extracting each of `tags`; one identical retry when
    /// any tag is missing.
    fn call_tagged(&self, stage: &str, prompt: &str, tags: &[&str]) -> Result<(Vec<String>, String), AdaptError> {
        let mut last = None;
        for attempt in 0..2 {
            let raw = self.gateway.complete(stage, prompt).map_err(llm_err(stage))?.text;
            let found: Vec<Option<&str>> = tags.iter().map(|t| extract_tag(&raw, t)).collect();
            if let Some(pos) = found.iter().position(Option::is_none) {
                if attempt == 0 {
                    tracing::debug!(stage, tag = tags[pos], "tag missing, retrying");
                }
                last = Some(AdaptError::TagMissing {
                    stage: stage.into(),
                    tag: tags[pos].into(),
                    raw: raw.clone(),
                });
                continue;
            }
            let values = found
                .into_iter()
                .map(|v| non_empty(stage, v.expect("checked")))
                .collect::<Result<Vec<_>, _>>()?;
            return Ok((values, raw));
        }
        Err(last.expect("two failed attempts"))
    }

    pub fn render_transform(&self, src: &Candidate, q: &TargetQuery) -> Result<String, AdaptError> {
        Ok(self.prompts.render(
            "transform_query",
            &[
                ("source_description", &src.task.description),
                ("source_query", &self.layout.render_input(&src.instance.input)),
                ("target_description", &q.description),
                ("target_query", &self.layout.render_input(&q.input)),
            ],
        )?)
    }

    pub fn transform_query(&self, src: &Candidate, q: &TargetQuery) -> Result<String, AdaptError> {
        let prompt = self.render_transform(src, q)?;
        Ok(self.call_tagged("transform", &prompt, &["Target Task Query"])?.0.remove(0))
    }

    /// Prompt 1 with the source block removed.
    pub fn generate_query(&self, q: &TargetQuery) -> Result<String, AdaptError> {
        let prompt = self.prompts.render(
            "generate_query",
            &[
                ("target_description", &q.description),
                ("target_query", &self.layout.render_input(&q.input)),
            ],
        )?;
        Ok(self.call_tagged("generate", &prompt, &["Target Task Query"])?.0.remove(0))
    }

    pub fn render_refine(&self, synth: &str, q: &TargetQuery) -> Result<String, AdaptError> {
        Ok(self.prompts.render(
            "refine_query",
            &[
                ("synthesized_query", synth),
                ("target_description", &q.description),
                ("target_query", &self.layout.render_input(&q.input)),
            ],
        )?)
    }

    pub fn refine_query(&self, synth: &str, q: &TargetQuery) -> Result<String, AdaptError> {
        non_empty("refine", synth)?;
        let prompt = self.render_refine(synth, q)?;
        Ok(self.call_tagged("refine", &prompt, &["Refined Query"])?.0.remove(0))
    }

    /// Prompt 3; `guides` empty renders the unguided variant.
    pub fn render_label(&self, refined: &str, guides: &[Candidate], q: &TargetQuery) -> Result<String, AdaptError> {
        let question = self.prompts.render(
            "label_question",
            &[("target_description", &q.description), ("target_query", refined)],
        )?;
        if guides.is_empty() {
            return Ok(question);
        }
        let blocks = guides
            .iter()
            .map(|g| {
                self.prompts.render(
                    "label_guide",
                    &[
                        ("source_description", &g.task.description),
                        ("source_query", &self.layout.render_input(&g.instance.input)),
                        ("source_label", g.instance.first_reference()),
                    ],
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self
            .prompts
            .render("label_guided", &[("guides", &blocks.join("\n\n")), ("question", &question)])?)
    }

    /// Returns `(label, raw response)`.
    pub fn generate_label(
        &self,
        refined: &str,
        guides: &[Candidate],
        q: &TargetQuery,
    ) -> Result<(String, String), AdaptError> {
        non_empty("label", refined)?;
        let prompt = self.render_label(refined, guides, q)?;
        let raw = self.gateway.complete("label", &prompt).map_err(llm_err("label"))?.text;
        let label = non_empty("label", strip_answer_prefix(&raw))?;
        Ok((label, raw))
    }

    pub fn render_one_step(&self, src: &Candidate, q: &TargetQuery) -> Result<String, AdaptError> {
        Ok(self.prompts.render(
            "one_step",
            &[
                ("source_description", &src.task.description),
                ("source_query", &self.layout.render_input(&src.instance.input)),
                ("source_answer", src.instance.first_reference()),
                ("target_description", &q.description),
                ("target_query", &self.layout.render_input(&q.input)),
            ],
        )?)
    }

    pub fn one_step_adapt(&self, src: &Candidate, q: &TargetQuery) -> Result<AdaptedDemonstration, AdaptError> {
        let prompt = self.render_one_step(src, q)?;
        let (mut values, raw) = self.call_tagged("one_step", &prompt, &["Target Task Query", "Target Task Answer"])?;
        let answer = values.pop().expect("two tags");
        let query = values.pop().expect("two tags");
        Ok(AdaptedDemonstration {
            description: q.description.clone(),
            target_query_text: query,
            label: non_empty("one_step", strip_answer_prefix(&answer))?,
            source: source_ref(src),
            intermediates: Intermediates {
                raw_one_step_response: Some(raw),
                ..Intermediates::default()
            },
            mode: AdaptationMode::OneStep,
        })
    }

    /// Adapts `ranked[i]` for every `i < n`. Guides for demo `i` are
    /// `ranked[i..i + n_guides]`.
    pub fn adapt(
        &self,
        ranked: &[Candidate],
        n: usize,
        q: &TargetQuery,
        mode: AdaptationMode,
    ) -> Vec<Result<AdaptedDemonstration, AdaptError>> {
        (0..n.min(ranked.len()))
            .map(|i| {
                let guides = &ranked[i..(i + self.n_guides).min(ranked.len())];
                self.adapt_one(&ranked[i], guides, q, mode)
            })
            .collect()
    }

    pub fn adapt_one(
        &self,
        src: &Candidate,
        guides: &[Candidate],
        q: &TargetQuery,
        mode: AdaptationMode,
    ) -> Result<AdaptedDemonstration, AdaptError> {
        let mut mids = Intermediates::default();
        let query = match mode {
            AdaptationMode::None => {
                return Ok(AdaptedDemonstration {
                    description: src.task.description.clone(),
                    target_query_text: self.layout.render_input(&src.instance.input),
                    label: src.instance.first_reference().to_string(),
                    source: source_ref(src),
                    intermediates: mids,
                    mode,
                })
            }
            AdaptationMode::OneStep => return self.one_step_adapt(src, q),
            AdaptationMode::NoRefine => {
                let t = self.transform_query(src, q)?;
                mids.transformed_query = Some(t.clone());
                t
            }
            AdaptationMode::Full | AdaptationMode::NoSrcInLg | AdaptationMode::NoSrcInAll => {
                let t = if mode == AdaptationMode::NoSrcInAll {
                    self.generate_query(q)?
                } else {
                    self.transform_query(src, q)?
                };
                let r = self.refine_query(&t, q)?;
                mids.transformed_query = Some(t);
                mids.refined_query = Some(r.clone());
                r
            }
        };
        let guided = matches!(mode, AdaptationMode::Full | AdaptationMode::NoRefine);
        let (label, raw) = self.generate_label(&query, if guided { guides } else { &[] }, q)?;
        mids.raw_label_response = Some(raw);
        Ok(AdaptedDemonstration {
            description: q.description.clone(),
            target_query_text: query,
            label,
            source: source_ref(src),
            intermediates: mids,
            mode,
        })
    }
}

fn source_ref(c: &Candidate) -> SourceRef {
    SourceRef {
        task_id: c.task.task_id.clone(),
        instance_id: c.instance.instance_id.clone(),
    }
}
