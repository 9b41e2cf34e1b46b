//! Prompt templates and the small text utilities around them.
//!
//! Templates are checked-in text files under `prompts/` with `{{name}}`
//! placeholders. Rendering is single-pass: substituted values are never
//! re-scanned, so user text containing braces is safe.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const ANSWER_MARKER: &str = "The final answer is:";

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template `{template}` references unknown placeholder `{name}`")]
    MissingValue { template: String, name: String },
    #[error("template `{template}` has an unterminated placeholder")]
    Unterminated { template: String },
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("{0}")]
    Io(String),
}

pub const TEMPLATE_NAMES: [&str; 10] = [
    "transform_query",
    "generate_query",
    "refine_query",
    "label_guided",
    "label_guide",
    "label_question",
    "demo_block",
    "query_block",
    "summarize_template",
    "one_step",
];

fn builtin_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "transform_query" => include_str!("../prompts/transform_query.txt"),
        "generate_query" => include_str!("../prompts/generate_query.txt"),
        "refine_query" => include_str!("../prompts/refine_query.txt"),
        "label_guided" => include_str!("../prompts/label_guided.txt"),
        "label_guide" => include_str!("../prompts/label_guide.txt"),
        "label_question" => include_str!("../prompts/label_question.txt"),
        "demo_block" => include_str!("../prompts/demo_block.txt"),
        "query_block" => include_str!("../prompts/query_block.txt"),
        "summarize_template" => include_str!("../prompts/summarize_template.txt"),
        "one_step" => include_str!("../prompts/one_step.txt"),
        _ => return None,
    })
}

/// Asset files end with one newline that is not part of the template.
fn strip_file_newline(s: &str) -> String {
    s.strip_suffix('\n').unwrap_or(s).to_string()
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<&'static str, String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptSet {
    pub fn builtin() -> Self {
        let templates = TEMPLATE_NAMES
            .iter()
            .map(|n| (*n, strip_file_newline(builtin_source(n).expect("builtin template"))))
            .collect();
        Self { templates }
    }

    /// Builtins overridden by any `<name>.txt` present in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for name in TEMPLATE_NAMES {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let raw = fs::read_to_string(&path)
                    .map_err(|e| TemplateError::Io(format!("{}: {e}", path.display())))?;
                set.templates.insert(name, strip_file_newline(&raw));
            }
        }
        Ok(set)
    }

    pub fn source(&self, name: &str) -> Option<&str> {
        self.templates.get(name).map(String::as_str)
    }

    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        let src = self
            .source(name)
            .ok_or_else(|| TemplateError::UnknownTemplate(name.to_string()))?;
        render_template(name, src, vars)
    }
}

pub fn render_template(name: &str, src: &str, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(src.len() + vars.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = src;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let close = after.find("}}").ok_or_else(|| TemplateError::Unterminated {
            template: name.to_string(),
        })?;
        let key = &after[..close];
        let value = vars
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| TemplateError::MissingValue {
                template: name.to_string(),
                name: key.to_string(),
            })?;
        out.push_str(value);
        rest = &after[close + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Text between `<tag>` and `</tag>`, trimmed.
///
/// Takes the first closing tag and pairs it with the nearest opening tag
/// before it, so echoed wrappers and repeated blocks resolve to the first
/// innermost pair.
pub fn extract_tag<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let end = text.find(&close)?;
    let start = text[..end].rfind(&open)? + open.len();
    Some(text[start..end].trim())
}

/// Drops a leading "The final answer is:" (any case) and trims.
pub fn strip_answer_prefix(response: &str) -> &str {
    let trimmed = response.trim();
    let n = ANSWER_MARKER.len();
    if trimmed.len() >= n
        && trimmed.is_char_boundary(n)
        && trimmed[..n].eq_ignore_ascii_case(ANSWER_MARKER)
    {
        trimmed[n..].trim()
    } else {
        trimmed
    }
}
