//! Time-to-accuracy comparison across strategies.

use std::path::Path;
use std::sync::Arc;

use super::config::{ExperimentConfig, Strategy};
use super::metrics::MetricsLog;
use super::sim::{run_with_environment, Environment};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub strategy: Strategy,
    pub rounds_run: usize,
    pub final_accuracy: f64,
    pub time_to_target_s: Option<f64>,
    pub rounds_to_target: Option<usize>,
    /// Reference time over this run's time; `None` if either missed.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub reference: Strategy,
    pub target_accuracy: f64,
    pub rows: Vec<ComparisonRow>,
}

/// Speedup ratio formatted like `2.00x`.
pub fn format_speedup(s: Option<f64>) -> String {
    s.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}x"))
}

impl ComparisonReport {
    pub fn from_logs(
        reference: Strategy,
        target: f64,
        runs: &[(String, Strategy, MetricsLog)],
    ) -> Result<Self> {
        let ref_time = runs
            .iter()
            .find(|(_, s, _)| *s == reference)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "reference strategy {reference} is not among the runs"
                ))
            })?
            .2
            .time_to_accuracy(target);
        let rows = runs
            .iter()
            .map(|(name, strategy, log)| {
                let t = log.time_to_accuracy(target);
                ComparisonRow {
                    name: name.clone(),
                    strategy: *strategy,
                    rounds_run: log.rounds.len(),
                    final_accuracy: log.final_accuracy().unwrap_or(0.0),
                    time_to_target_s: t,
                    rounds_to_target: log.rounds_to_accuracy(target),
                    speedup: match (ref_time, t) {
                        (Some(r), Some(t)) if t > 0.0 => Some(r / t),
                        _ => None,
                    },
                }
            })
            .collect();
        Ok(Self {
            reference,
            target_accuracy: target,
            rows,
        })
    }

    pub fn row(&self, strategy: Strategy) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "name".to_string(),
            "strategy".to_string(),
            "target_accuracy".to_string(),
            "final_accuracy".to_string(),
            "rounds_run".to_string(),
            "rounds_to_target".to_string(),
            "time_to_target_s".to_string(),
            format!("speedup_vs_{}", self.reference),
        ])?;
        for r in &self.rows {
            w.write_record([
                r.name.clone(),
                r.strategy.to_string(),
                format!("{:?}", self.target_accuracy),
                format!("{:?}", r.final_accuracy),
                r.rounds_run.to_string(),
                r.rounds_to_target
                    .map_or_else(|| "not reached".into(), |n| n.to_string()),
                r.time_to_target_s
                    .map_or_else(|| "not reached".into(), |t| format!("{t:?}")),
                format_speedup(r.speedup),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Everything that must match for runs to be comparable.
fn shared_setup_mismatch(a: &ExperimentConfig, b: &ExperimentConfig) -> Option<&'static str> {
    if a.data != b.data || a.seeds.data != b.seeds.data || a.seeds.partition != b.seeds.partition {
        return Some("data or partition");
    }
    if a.fleet != b.fleet {
        return Some("fleet");
    }
    if a.trace != b.trace || a.seeds.trace != b.seeds.trace {
        return Some("trace");
    }
    if a.target_accuracy != b.target_accuracy {
        return Some("target accuracy");
    }
    None
}

/// Runs every config on one shared environment and tabulates time-to-target.
///
/// Returns the report plus each run's log in input order.
pub fn compare(
    configs: &[ExperimentConfig],
    reference: Strategy,
) -> Result<(ComparisonReport, Vec<MetricsLog>)> {
    let first = configs
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to compare".into()))?;
    let mut problems = Vec::new();
    for (i, c) in configs.iter().enumerate() {
        if let Err(Error::InvalidConfig(errs)) = c.validate() {
            problems.extend(
                errs.into_iter()
                    .map(|e| format!("config {i} ({}): {e}", c.name)),
            );
        }
        if let Some(what) = shared_setup_mismatch(first, c) {
            problems.push(format!(
                "config {i} ({}) differs from config 0 in {what}",
                c.name
            ));
        }
    }
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    let target = first
        .target_accuracy
        .ok_or_else(|| Error::InvalidConfig(vec!["comparison needs target_accuracy".into()]))?;
    let max_rounds = configs.iter().map(|c| c.rounds).max().expect("non-empty");
    let env_cfg = ExperimentConfig {
        rounds: max_rounds,
        ..first.clone()
    };
    let env = Arc::new(Environment::build(&env_cfg)?);
    let mut runs = Vec::with_capacity(configs.len());
    for c in configs {
        let log = run_with_environment(c, Arc::clone(&env))?;
        runs.push((c.name.clone(), c.strategy, log));
    }
    let report = ComparisonReport::from_logs(reference, target, &runs)?;
    Ok((report, runs.into_iter().map(|r| r.2).collect()))
}
