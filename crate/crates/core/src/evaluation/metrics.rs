use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RougeL,
    ExactMatch,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::RougeL, Metric::ExactMatch];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::RougeL => "rouge_l",
            Metric::ExactMatch => "exact_match",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeTokenizer {
    /// Lowercase, split on runs of non-alphanumeric characters.
    #[default]
    Alphanumeric,
    /// Lowercase, split on whitespace only.
    Whitespace,
}

pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_tokens(text: &str, tokenizer: RougeTokenizer) -> Vec<String> {
    let lower = text.to_lowercase();
    match tokenizer {
        RougeTokenizer::Alphanumeric => lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect(),
        RougeTokenizer::Whitespace => lower.split_whitespace().map(str::to_string).collect(),
    }
}

/// LCS F-measure against one tokenized reference.
pub fn rouge_l_tokens(pred: &[String], reference: &[String]) -> f64 {
    let l = lcs_length(pred, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / pred.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Best ROUGE-L F over the references.
pub fn rouge_l(prediction: &str, references: &[String]) -> f64 {
    rouge_l_with(prediction, references, RougeTokenizer::Alphanumeric)
}

pub fn rouge_l_with(prediction: &str, references: &[String], tokenizer: RougeTokenizer) -> f64 {
    let pred = rouge_tokens(prediction, tokenizer);
    references
        .iter()
        .map(|r| rouge_l_tokens(&pred, &rouge_tokens(r, tokenizer)))
        .fold(0.0, f64::max)
}

/// Lowercase, collapse whitespace, strip leading and trailing
/// non-alphanumeric characters.
pub fn normalize_answer(text: &str) -> String {
    let collapsed = text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.trim_matches(|c: char| !c.is_alphanumeric()).to_string()
}

/// 1 when the normalized prediction is non-empty and equals a normalized
/// reference.
pub fn exact_match(prediction: &str, references: &[String]) -> f64 {
    let p = normalize_answer(prediction);
    if p.is_empty() {
        return 0.0;
    }
    if references.iter().any(|r| normalize_answer(r) == p) {
        1.0
    } else {
        0.0
    }
}

pub fn score(metric: Metric, prediction: &str, references: &[String], tokenizer: RougeTokenizer) -> f64 {
    match metric {
        Metric::RougeL => rouge_l_with(prediction, references, tokenizer),
        Metric::ExactMatch => exact_match(prediction, references),
    }
}
