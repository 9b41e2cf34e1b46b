//! Embedding acquisition, cosine similarity and the vector index over
//! source tasks and their instances.

mod cache;
mod index;
mod provider;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::LlmError;

pub use cache::{VectorCache, CacheManifest};
pub use index::{build_index, EmbedStats, Embedder, EmbeddingIndex};
pub use provider::{EmbeddingProvider, HashingEmbedder, OpenAiEmbeddings, ScriptedEmbedder};

pub const DEFAULT_EMBEDDING_MODEL: &str = "BGE-EN-ICL";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("cosine of a zero-norm vector")]
    ZeroNorm,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbeddingError {
    #[error("embedding provider: {0}")]
    Provider(#[from] LlmError),
    #[error("vector dimension {got} conflicts with index dimension {expected}")]
    DimConflict { expected: usize, got: usize },
    #[error("provider returned a non-finite component")]
    NonFinite,
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("vector cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingChannel {
    Description,
    FullQuery,
    InputOnly,
    Output,
    Template,
}

impl EmbeddingChannel {
    pub const ALL: [EmbeddingChannel; 5] = [
        EmbeddingChannel::Description,
        EmbeddingChannel::FullQuery,
        EmbeddingChannel::InputOnly,
        EmbeddingChannel::Output,
        EmbeddingChannel::Template,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingChannel::Description => "description",
            EmbeddingChannel::FullQuery => "full_query",
            EmbeddingChannel::InputOnly => "input_only",
            EmbeddingChannel::Output => "output",
            EmbeddingChannel::Template => "template",
        }
    }

    /// Channels stored once per task rather than per instance.
    pub fn is_task_level(self) -> bool {
        matches!(self, EmbeddingChannel::Description | EmbeddingChannel::Template)
    }
}

impl fmt::Display for EmbeddingChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmbeddingChannel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| format!("unknown embedding channel `{s}`"))
    }
}

/// Raw (unnormalised) embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::DimConflict { expected: 1, got: 0 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| v * c).collect())
    }
}

/// `dot(a, b) / (|a| |b|)`, computed in f64 and clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, MetricError> {
    cosine_slices(a.values(), b.values())
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::DimMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&v(&[3.0, -1.0, 2.0]), &v(&[3.0, -1.0, 2.0])).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        // dot = 32, |a| = sqrt(14), |b| = sqrt(77): 32 / sqrt(1078)
        let expected = 32.0 / 1078f64.sqrt();
        assert!((expected - 0.974631846).abs() < 1e-6);
        assert!((cosine(&v(&[1.0, 2.0, 3.0]), &v(&[4.0, 5.0, 6.0])).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(cosine(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(MetricError::ZeroNorm));
        assert_eq!(cosine(&v(&[1.0]), &v(&[1.0, 0.0])), Err(MetricError::DimMismatch(1, 2)));
        assert!(EmbeddingVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn channel_names_parse() {
        for c in EmbeddingChannel::ALL {
            assert_eq!(c.as_str().parse::<EmbeddingChannel>().unwrap(), c);
        }
        assert!("bogus".parse::<EmbeddingChannel>().is_err());
    }

    fn nonzero_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..16).prop_flat_map(|d| {
            (
                prop::collection::vec(-5.0f64..5.0, d),
                prop::collection::vec(-5.0f64..5.0, d),
            )
        })
        .prop_filter("nonzero", |(a, b)| {
            a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3)
        })
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric((a, b) in nonzero_pair()) {
            let (a, b) = (v(&a), v(&b));
            prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
        }

        #[test]
        fn cosine_is_scale_invariant((a, b) in nonzero_pair(), c in 0.01f64..100.0) {
            let (a, b) = (v(&a), v(&b));
            let d = (cosine(&a.scaled(c), &b).unwrap() - cosine(&a, &b).unwrap()).abs();
            prop_assert!(d <= 1e-9);
        }

        #[test]
        fn cosine_in_range((a, b) in nonzero_pair()) {
            let c = cosine(&v(&a), &v(&b)).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
