use std::str::FromStr;

use crate::adaptation::AdaptationMode;
use crate::pipeline::Method;
use crate::selection::CriterionRegistry;

use super::{RunConfig, RunError};

/// One axis of an ablation grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sweep {
    /// Every adaptation mode.
    Mode,
    /// Every registered selection criterion.
    Criterion,
    Method,
    N(Vec<usize>),
    Kth(Vec<usize>),
}

fn parse_values(s: &str) -> Result<Vec<usize>, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad sweep value `{t}`"));
    let mut out = Vec::new();
    for part in s.split(',') {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("empty range `{part}`"));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    if out.is_empty() || out.contains(&0) {
        return Err(format!("sweep values must be positive: `{s}`"));
    }
    Ok(out)
}

impl FromStr for Sweep {
    type Err = String;

    /// `mode`, `criterion`, `method`, `n=1,3,5`, `kth=1..5`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('=') {
            None => match s {
                "mode" => Ok(Sweep::Mode),
                "criterion" => Ok(Sweep::Criterion),
                "method" => Ok(Sweep::Method),
                "n" | "kth" => Err(format!("`{s}` needs values, e.g. `{s}=1..5`")),
                _ => Err(format!("unknown sweep `{s}`")),
            },
            Some(("n", v)) => parse_values(v).map(Sweep::N),
            Some(("kth", v)) => parse_values(v).map(Sweep::Kth),
            Some((k, _)) => Err(format!("unknown sweep `{k}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationPoint {
    pub label: String,
    pub config: RunConfig,
}

/// Cartesian product of the sweeps applied to `base`, first sweep
/// varying slowest.
pub fn sweep_points(base: &RunConfig, sweeps: &[Sweep], registry: &CriterionRegistry) -> Result<Vec<AblationPoint>, RunError> {
    if sweeps.is_empty() {
        return Err(RunError::User("ablate needs at least one --sweep".into()));
    }
    let mut points = vec![AblationPoint {
        label: String::new(),
        config: base.clone(),
    }];
    for sweep in sweeps {
        let mut next = Vec::new();
        for p in &points {
            let variants: Vec<(String, RunConfig)> = match sweep {
                Sweep::Mode => AdaptationMode::ALL
                    .into_iter()
                    .map(|m| {
                        let mut c = p.config.clone();
                        c.experiment.mode = m;
                        (format!("mode={m}"), c)
                    })
                    .collect(),
                Sweep::Criterion => registry
                    .names()
                    .map(|name| {
                        let mut c = p.config.clone();
                        c.experiment.criterion = name.to_string();
                        (format!("criterion={name}"), c)
                    })
                    .collect(),
                Sweep::Method => Method::ALL
                    .into_iter()
                    .map(|m| {
                        let mut c = p.config.clone();
                        c.experiment.method = m;
                        (format!("method={m}"), c)
                    })
                    .collect(),
                Sweep::N(values) => values
                    .iter()
                    .map(|&n| {
                        let mut c = p.config.clone();
                        c.experiment.n_demos = n;
                        (format!("n={n}"), c)
                    })
                    .collect(),
                Sweep::Kth(values) => values
                    .iter()
                    .map(|&k| {
                        let mut c = p.config.clone();
                        c.experiment.k_th_task = k;
                        (format!("kth={k}"), c)
                    })
                    .collect(),
            };
            for (label, config) in variants {
                let label = if p.label.is_empty() { label } else { format!("{} {label}", p.label) };
                next.push(AblationPoint { label, config });
            }
        }
        points = next;
    }
    Ok(points)
}
