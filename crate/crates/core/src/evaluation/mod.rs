//! Metrics, multi-round aggregation and the category pair report.

mod metrics;
mod pairs;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use metrics::{
    exact_match, lcs_length, normalize_answer, rouge_l, rouge_l_tokens, rouge_l_with, rouge_tokens, score, Metric,
    RougeTokenizer,
};
pub use pairs::{pair_distribution_report, PairDistribution, SelectionTrace};

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn mean<I: IntoIterator<Item = f64>>(values: I) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        None
    } else {
        Some(compensated_sum(v.iter().copied()) / v.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub task_id: String,
    pub instance_id: String,
    pub category: String,
    /// 1-based.
    pub round: u32,
    pub prediction: String,
    pub extracted_answer: String,
    pub per_metric: BTreeMap<Metric, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Means of one metric at each reporting level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// round → task → mean over the task's instances.
    pub per_round: BTreeMap<u32, BTreeMap<String, f64>>,
    /// task → mean of its per-round means.
    pub per_task: BTreeMap<String, f64>,
    /// category → mean of member-task means.
    pub per_category: BTreeMap<String, f64>,
    /// Mean of the category means.
    pub avg: f64,
}

/// Aggregates predictions bottom-up: instances → task per round → task →
/// category → average. Ordering of `predictions` does not matter.
pub fn summarize(predictions: &[ScoredPrediction], metric: Metric) -> MetricSummary {
    let mut cells: BTreeMap<(u32, &str), Vec<f64>> = BTreeMap::new();
    let mut categories: BTreeMap<&str, &str> = BTreeMap::new();
    for p in predictions {
        cells
            .entry((p.round, p.task_id.as_str()))
            .or_default()
            .push(p.per_metric.get(&metric).copied().unwrap_or(0.0));
        categories.insert(&p.task_id, &p.category);
    }
    let mut per_round: BTreeMap<u32, BTreeMap<String, f64>> = BTreeMap::new();
    for ((round, task), mut values) in cells {
        // Sorting makes the sum independent of arrival order.
        values.sort_by(f64::total_cmp);
        per_round
            .entry(round)
            .or_default()
            .insert(task.to_string(), mean(values).expect("non-empty cell"));
    }
    let mut by_task: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for tasks in per_round.values() {
        for (task, v) in tasks {
            by_task.entry(task.as_str()).or_default().push(*v);
        }
    }
    let per_task: BTreeMap<String, f64> = by_task
        .into_iter()
        .map(|(t, v)| (t.to_string(), mean(v).expect("non-empty")))
        .collect();
    let mut by_category: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (task, v) in &per_task {
        by_category.entry(categories[task.as_str()]).or_default().push(*v);
    }
    let per_category: BTreeMap<String, f64> = by_category
        .into_iter()
        .map(|(c, v)| (c.to_string(), mean(v).expect("non-empty")))
        .collect();
    let avg = mean(per_category.values().copied()).unwrap_or(0.0);
    MetricSummary {
        per_round,
        per_task,
        per_category,
        avg,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemError {
    pub task_id: String,
    pub instance_id: String,
    pub round: u32,
    pub message: String,
}

/// Top-level `per_*` and `avg` fields hold the primary metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_fingerprint: String,
    pub method: String,
    pub rounds: u32,
    pub primary_metric: Metric,
    pub per_round: BTreeMap<u32, BTreeMap<String, f64>>,
    pub per_task: BTreeMap<String, f64>,
    pub per_category: BTreeMap<String, f64>,
    pub avg: f64,
    /// Every computed metric, including the primary one.
    pub metrics: BTreeMap<Metric, MetricSummary>,
    pub prediction_count: usize,
    pub error_count: usize,
    pub errors: Vec<ItemError>,
}

impl ExperimentReport {
    pub fn build(
        config_fingerprint: &str,
        method: &str,
        rounds: u32,
        primary_metric: Metric,
        predictions: &[ScoredPrediction],
    ) -> Self {
        let metrics: BTreeMap<Metric, MetricSummary> =
            Metric::ALL.into_iter().map(|m| (m, summarize(predictions, m))).collect();
        let mut errors: Vec<ItemError> = predictions
            .iter()
            .filter_map(|p| {
                p.error.as_ref().map(|e| ItemError {
                    task_id: p.task_id.clone(),
                    instance_id: p.instance_id.clone(),
                    round: p.round,
                    message: e.clone(),
                })
            })
            .collect();
        errors.sort_by(|a, b| (&a.task_id, &a.instance_id, a.round).cmp(&(&b.task_id, &b.instance_id, b.round)));
        let primary = metrics[&primary_metric].clone();
        Self {
            config_fingerprint: config_fingerprint.to_string(),
            method: method.to_string(),
            rounds,
            primary_metric,
            per_round: primary.per_round,
            per_task: primary.per_task,
            per_category: primary.per_category,
            avg: primary.avg,
            metrics,
            prediction_count: predictions.len(),
            error_count: errors.len(),
            errors,
        }
    }

    /// `task_id,category,method,round,score` rows for the primary metric.
    pub fn to_csv(&self, categories: &BTreeMap<String, String>) -> String {
        let mut out = String::from("task_id,category,method,round,score\n");
        for (round, tasks) in &self.per_round {
            for (task, score) in tasks {
                let cat = categories.get(task).map(String::as_str).unwrap_or("");
                out.push_str(&format!("{},{},{},{round},{score}\n", csv_field(task), csv_field(cat), csv_field(&self.method)));
            }
        }
        out
    }
}

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(task: &str, cat: &str, inst: &str, round: u32, v: f64) -> ScoredPrediction {
        ScoredPrediction {
            task_id: task.into(),
            instance_id: inst.into(),
            category: cat.into(),
            round,
            prediction: String::new(),
            extracted_answer: String::new(),
            per_metric: [(Metric::RougeL, v), (Metric::ExactMatch, 0.0)].into_iter().collect(),
            error: None,
        }
    }

    #[test]
    fn hand_computed_means() {
        // Category A: tasks a1 (0.5, 1.0 → 0.75) and a2 (0.0, 0.0, 1.0 → 1/3).
        // Category B: task b1 (0.2 → 0.2).
        let ps = vec![
            pred("a1", "A", "0", 1, 0.5),
            pred("a1", "A", "1", 1, 1.0),
            pred("a2", "A", "0", 1, 0.0),
            pred("a2", "A", "1", 1, 0.0),
            pred("a2", "A", "2", 1, 1.0),
            pred("b1", "B", "0", 1, 0.2),
        ];
        let s = summarize(&ps, Metric::RougeL);
        assert!((s.per_task["a1"] - 0.75).abs() < 1e-15);
        assert!((s.per_task["a2"] - 1.0 / 3.0).abs() < 1e-15);
        let cat_a = (0.75 + 1.0 / 3.0) / 2.0;
        assert!((s.per_category["A"] - cat_a).abs() < 1e-15);
        assert!((s.avg - (cat_a + 0.2) / 2.0).abs() < 1e-15);

        let mut shuffled = ps.clone();
        shuffled.reverse();
        assert_eq!(summarize(&shuffled, Metric::RougeL), s);
    }

    #[test]
    fn equal_rounds_collapse_to_one_value() {
        let ps: Vec<_> = (1..=3).map(|r| pred("t", "C", "0", r, 0.4)).collect();
        let s = summarize(&ps, Metric::RougeL);
        assert_eq!(s.per_round.len(), 3);
        assert!((s.per_task["t"] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn compensated_sum_is_exact_on_cancellation() {
        assert_eq!(compensated_sum([1e16, 1.0, -1e16]), 1.0);
    }
}
