use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::selection::{RankedCandidate, SourceTaskChoice};

use super::csv_field;

/// What selection did for one query, as written to `selections.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub target_task: String,
    pub target_category: String,
    pub instance_id: String,
    pub round: u32,
    pub criterion: String,
    pub tasks: Vec<SourceTaskChoice>,
    /// Source task id → category, for every task in `chosen`.
    pub source_categories: BTreeMap<String, String>,
    pub chosen: Vec<RankedCandidate>,
}

/// Row-normalized P(source category | target category), counted over the
/// chosen demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistribution {
    pub target_categories: Vec<String>,
    pub source_categories: Vec<String>,
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub probabilities: BTreeMap<String, BTreeMap<String, f64>>,
}

pub fn pair_distribution_report(traces: &[SelectionTrace]) -> PairDistribution {
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut sources = BTreeSet::new();
    for t in traces {
        let row = counts.entry(t.target_category.clone()).or_default();
        for c in &t.chosen {
            let cat = t.source_categories.get(&c.task_id).cloned().unwrap_or_default();
            sources.insert(cat.clone());
            *row.entry(cat).or_default() += 1;
        }
    }
    let probabilities = counts
        .iter()
        .filter(|(_, row)| row.values().sum::<usize>() > 0)
        .map(|(target, row)| {
            let total: usize = row.values().sum();
            (
                target.clone(),
                row.iter().map(|(s, n)| (s.clone(), *n as f64 / total as f64)).collect(),
            )
        })
        .collect();
    PairDistribution {
        target_categories: counts.keys().cloned().collect(),
        source_categories: sources.into_iter().collect(),
        counts,
        probabilities,
    }
}

impl PairDistribution {
    pub fn probability(&self, target: &str, source: &str) -> Option<f64> {
        self.probabilities
            .get(target)
            .map(|row| row.get(source).copied().unwrap_or(0.0))
    }

    /// Matrix with target categories as rows; rows without traces are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target\\source");
        for s in &self.source_categories {
            out.push(',');
            out.push_str(&csv_field(s));
        }
        out.push('\n');
        for t in &self.target_categories {
            out.push_str(&csv_field(t));
            for s in &self.source_categories {
                out.push(',');
                if let Some(p) = self.probability(t, s) {
                    out.push_str(&format!("{p}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(target_cat: &str, source_cat: &str) -> SelectionTrace {
        SelectionTrace {
            target_task: "t".into(),
            target_category: target_cat.into(),
            instance_id: "0".into(),
            round: 1,
            criterion: "taskdes_taskinput".into(),
            tasks: Vec::new(),
            source_categories: [("s".to_string(), source_cat.to_string())].into_iter().collect(),
            chosen: vec![RankedCandidate {
                task_id: "s".into(),
                instance_id: "0".into(),
                primary_score: 1.0,
                auxiliary_score: None,
                merged_rank: None,
            }],
        }
    }

    #[test]
    fn single_trace_is_one_hot() {
        let r = pair_distribution_report(&[trace("A", "B")]);
        assert_eq!(r.probability("A", "B"), Some(1.0));
        assert_eq!(r.probability("A", "A"), Some(0.0));
        assert_eq!(r.probability("B", "B"), None);
    }

    #[test]
    fn same_category_is_diagonal() {
        let r = pair_distribution_report(&[trace("A", "A"), trace("B", "B"), trace("B", "B")]);
        assert_eq!(r.probability("A", "A"), Some(1.0));
        assert_eq!(r.probability("B", "B"), Some(1.0));
        assert_eq!(r.probability("B", "A"), Some(0.0));
    }
}
