use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::evaluation::ExperimentReport;

use super::RunError;

#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub label: String,
    pub report: ExperimentReport,
}

impl LoadedRun {
    /// `reference` is a run directory or a fingerprint prefix under
    /// `runs_dir`.
    pub fn load(reference: &str, runs_dir: &Path) -> Result<Self, RunError> {
        let direct = Path::new(reference);
        let dir = if direct.join("report.json").is_file() {
            direct.to_path_buf()
        } else {
            let mut matches: Vec<PathBuf> = fs::read_dir(runs_dir)
                .map_err(|e| RunError::User(format!("{}: {e}", runs_dir.display())))?
                .filter_map(Result::ok)
                .filter(|e| e.file_name().to_string_lossy().starts_with(reference) && e.path().is_dir())
                .map(|e| e.path())
                .collect();
            matches.sort();
            match matches.len() {
                0 => return Err(RunError::User(format!("no run matches `{reference}`"))),
                1 => matches.remove(0),
                n => return Err(RunError::User(format!("`{reference}` matches {n} runs"))),
            }
        };
        let p = dir.join("report.json");
        let raw = fs::read_to_string(&p).map_err(|e| RunError::User(format!("{}: {e}", p.display())))?;
        let report: ExperimentReport =
            serde_json::from_str(&raw).map_err(|e| RunError::Runtime(format!("{}: {e}", p.display())))?;
        let label = fs::read_to_string(dir.join("config.json"))
            .ok()
            .and_then(|s| serde_json::from_str::<Value>(&s).ok())
            .map(|cfg| {
                let exp = &cfg["experiment"];
                let method = exp["method"].as_str().unwrap_or(&report.method).to_string();
                if method == "crossicl" {
                    format!("{method} {} {}", exp["criterion"].as_str().unwrap_or("?"), exp["mode"].as_str().unwrap_or("?"))
                } else {
                    method
                }
            })
            .unwrap_or_else(|| report.method.clone());
        Ok(Self { dir, label, report })
    }
}

/// Categories as columns with `Avg.` last, one row per run. Two runs get
/// an extra `delta` row (second minus first).
pub fn render_table(runs: &[LoadedRun]) -> String {
    let categories: BTreeSet<&str> = runs
        .iter()
        .flat_map(|r| r.report.per_category.keys().map(String::as_str))
        .collect();
    let mut header = vec!["Method".to_string()];
    header.extend(categories.iter().map(|c| c.to_string()));
    header.push("Avg.".into());

    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
    let mut rows: Vec<Vec<String>> = Vec::new();
    for r in runs {
        let mut row = vec![format!("{} [{}]", r.label, &r.report.config_fingerprint[..8.min(r.report.config_fingerprint.len())])];
        row.extend(categories.iter().map(|c| cell(r.report.per_category.get(*c).copied())));
        row.push(cell(Some(r.report.avg)));
        rows.push(row);
    }
    if let [a, b] = runs {
        let delta = |x: Option<&f64>, y: Option<&f64>| match (x, y) {
            (Some(x), Some(y)) => format!("{:+.3}", y - x),
            _ => "-".into(),
        };
        let mut row = vec!["delta".to_string()];
        row.extend(categories.iter().map(|c| delta(a.report.per_category.get(*c), b.report.per_category.get(*c))));
        row.push(delta(Some(&a.report.avg), Some(&b.report.avg)));
        rows.push(row);
    }

    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].chars().count()).chain([header[i].chars().count()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}
