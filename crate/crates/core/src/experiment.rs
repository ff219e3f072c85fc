//! Experiment orchestration: seeded multi-run sweeps over one parameter,
//! policy comparisons, time-to-target extraction, and CSV/JSON emission.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{PolicyKind, RunConfig};
use crate::engine;
use crate::error::{Result, SimError};
use crate::metrics::MetricsLog;

/// Virtual time of the first checkpoint reaching the target accuracy.
pub fn time_to_accuracy(log: &MetricsLog, target: f64) -> Option<f64> {
    log.time_to_accuracy(target)
}

/// One run's time-to-target; runs that never reach the target are censored
/// at the configured time limit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub time_to_target_s: f64,
    pub censored: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub median_time_to_target_s: f64,
    pub censored_runs: usize,
    pub per_seed: Vec<SeedOutcome>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: String,
    pub rows: Vec<SweepRow>,
}

/// Median with the usual mean-of-middle-two convention.
fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn outcome_of(log: &MetricsLog, cfg: &RunConfig) -> SeedOutcome {
    match log.time_to_accuracy(cfg.target_accuracy) {
        Some(t) => SeedOutcome {
            seed: cfg.seed,
            time_to_target_s: t,
            censored: false,
        },
        None => SeedOutcome {
            seed: cfg.seed,
            time_to_target_s: cfg.max_virtual_time,
            censored: true,
        },
    }
}

/// Run every `(value, seed)` combination of a one-parameter grid. Runs are
/// independent and execute in parallel; the table is assembled in grid order
/// regardless of completion order, so it is a pure function of its inputs.
pub fn run_sweep(
    base: &RunConfig,
    param: &str,
    values: &[String],
    seeds: &[u64],
) -> Result<SweepTable> {
    if values.is_empty() || seeds.is_empty() {
        return Err(SimError::Config("sweep needs at least one value and one seed".into()));
    }
    let mut jobs = Vec::new();
    for value in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.apply_param(param, value)?;
            cfg.seed = seed;
            cfg.validate()
                .map_err(|e| SimError::Config(format!("{param}={value}: {e}")))?;
            jobs.push((value.clone(), cfg));
        }
    }
    let outcomes: Vec<SeedOutcome> = jobs
        .par_iter()
        .map(|(_, cfg)| engine::run(cfg).map(|log| outcome_of(&log, cfg)))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(values.len());
    for (vi, value) in values.iter().enumerate() {
        let per_seed: Vec<SeedOutcome> = outcomes[vi * seeds.len()..(vi + 1) * seeds.len()].to_vec();
        let times: Vec<f64> = per_seed.iter().map(|o| o.time_to_target_s).collect();
        rows.push(SweepRow {
            value: value.clone(),
            median_time_to_target_s: median(&times),
            censored_runs: per_seed.iter().filter(|o| o.censored).count(),
            per_seed,
        });
    }
    Ok(SweepTable {
        param: param.to_string(),
        rows,
    })
}

/// Run the same scenario under each policy with the base seed.
pub fn run_compare(base: &RunConfig, policies: &[PolicyKind]) -> Result<Vec<MetricsLog>> {
    if policies.is_empty() {
        return Err(SimError::Config("compare needs at least one policy".into()));
    }
    let configs: Vec<RunConfig> = policies
        .iter()
        .map(|&policy| {
            let mut cfg = base.clone();
            cfg.policy = policy;
            cfg.validate()
                .map_err(|e| SimError::Config(format!("policy {policy}: {e}")))?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    configs.par_iter().map(engine::run).collect()
}

/// Per-run entry in the JSON summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummaryEntry {
    pub policy: String,
    pub seed: u64,
    pub time_to_target_s: Option<f64>,
    pub censored: bool,
    pub rounds: u64,
    pub final_accuracy: Option<f64>,
    pub notifications: u64,
    pub gate_deferrals: u64,
}

/// `summary.json` payload: the config echo plus per-run results.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub runs: Vec<RunSummaryEntry>,
}

fn summary_entry(log: &MetricsLog, target: f64) -> RunSummaryEntry {
    let ttt = log.time_to_accuracy(target);
    RunSummaryEntry {
        policy: log.policy.clone(),
        seed: log.seed,
        time_to_target_s: ttt,
        censored: ttt.is_none(),
        rounds: log.counters.aggregations,
        final_accuracy: log.final_accuracy(),
        notifications: log.counters.notifications,
        gate_deferrals: log.counters.gate_deferrals,
    }
}

fn write_text(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| SimError::io(path, e))
}

/// Write `metrics.csv`, `weights.csv`, `curves.csv`, and `summary.json` for
/// one or more runs (multiple runs come from policy comparisons).
pub fn emit_run_outputs(dir: &Path, logs: &[MetricsLog], config: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;

    let mut metrics = String::from(
        "round,virtual_time_s,policy,test_loss,test_accuracy,buffer_staleness_max,buffer_staleness_mean,notifications_sent\n",
    );
    for log in logs {
        for line in log.metrics_csv().lines().skip(1) {
            metrics.push_str(line);
            metrics.push('\n');
        }
    }
    write_text(dir, "metrics.csv", &metrics)?;

    let mut weights = String::from("policy,round,client_id,gamma_k,s_k,p_raw_k,p_norm_k\n");
    for log in logs {
        for rw in &log.round_weights {
            for e in &rw.breakdown.entries {
                weights.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    log.policy, rw.round, e.client_id, e.gamma, e.importance, e.raw, e.normalized
                ));
            }
        }
    }
    write_text(dir, "weights.csv", &weights)?;

    let mut curves = String::from("policy,virtual_time_s,test_accuracy\n");
    for log in logs {
        for c in &log.checkpoints {
            curves.push_str(&format!(
                "{},{},{}\n",
                log.policy, c.virtual_time_s, c.test_accuracy
            ));
        }
    }
    write_text(dir, "curves.csv", &curves)?;

    let summary = RunSummary {
        config: config.clone(),
        runs: logs
            .iter()
            .map(|log| summary_entry(log, config.target_accuracy))
            .collect(),
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| SimError::Config(format!("summary encode: {e}")))?;
    write_text(dir, "summary.json", &json)
}

/// Sweep results: `sweep.csv` (one row per grid point), `runs.csv` (one row
/// per run), and `summary.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSummary {
    pub config: RunConfig,
    pub table: SweepTable,
}

pub fn emit_sweep_outputs(dir: &Path, table: &SweepTable, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;

    let mut sweep = String::from("param,value,median_time_to_target_s,censored_runs,num_seeds\n");
    for row in &table.rows {
        sweep.push_str(&format!(
            "{},{},{},{},{}\n",
            table.param,
            row.value,
            row.median_time_to_target_s,
            row.censored_runs,
            row.per_seed.len()
        ));
    }
    write_text(dir, "sweep.csv", &sweep)?;

    let mut runs = String::from("param,value,seed,time_to_target_s,censored\n");
    for row in &table.rows {
        for o in &row.per_seed {
            runs.push_str(&format!(
                "{},{},{},{},{}\n",
                table.param, row.value, o.seed, o.time_to_target_s, o.censored
            ));
        }
    }
    write_text(dir, "runs.csv", &runs)?;

    let summary = SweepSummary {
        config: config.clone(),
        table: table.clone(),
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| SimError::Config(format!("summary encode: {e}")))?;
    write_text(dir, "summary.json", &json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::tests_support::base_config;
    use crate::metrics::EvalCheckpoint;

    fn fixture_log(points: &[(u64, f64, f64)]) -> MetricsLog {
        let mut log = MetricsLog::new("seafl", 0);
        log.checkpoints = points
            .iter()
            .map(|&(round, time, acc)| EvalCheckpoint {
                round,
                virtual_time_s: time,
                test_loss: 1.0,
                test_accuracy: acc,
                buffer_staleness_max: 0,
                buffer_staleness_mean: 0.0,
                notifications_sent: 0,
            })
            .collect();
        log
    }

    #[test]
    fn time_to_accuracy_on_a_monotone_log() {
        let log = fixture_log(&[(1, 100.0, 0.5), (2, 357.0, 0.92), (3, 500.0, 0.97)]);
        assert_eq!(time_to_accuracy(&log, 0.9), Some(357.0));
        assert_eq!(time_to_accuracy(&log, 0.99), None);
        assert_eq!(time_to_accuracy(&log, 0.2), Some(100.0));
    }

    #[test]
    fn time_to_accuracy_is_monotone_in_target() {
        let log = fixture_log(&[
            (1, 10.0, 0.3),
            (2, 20.0, 0.55),
            (3, 30.0, 0.5),
            (4, 40.0, 0.7),
            (5, 50.0, 0.9),
        ]);
        let mut prev = 0.0;
        for target in [0.1, 0.3, 0.5, 0.55, 0.7, 0.9] {
            let t = time_to_accuracy(&log, target).unwrap();
            assert!(t >= prev, "target {target} jumped back to {t}");
            prev = t;
        }
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn singleton_sweep_matches_single_run() {
        let mut cfg = base_config();
        cfg.max_rounds = 8;
        cfg.target_accuracy = 0.5;
        let table = run_sweep(&cfg, "buffer_size", &["3".into()], &[cfg.seed]).unwrap();
        assert_eq!(table.rows.len(), 1);

        let mut single = cfg.clone();
        single.apply_param("buffer_size", "3").unwrap();
        let log = engine::run(&single).unwrap();
        let expected = outcome_of(&log, &single);
        assert_eq!(table.rows[0].per_seed, vec![expected]);
        assert_eq!(table.rows[0].median_time_to_target_s, expected.time_to_target_s);
    }

    #[test]
    fn seed_order_does_not_change_the_table() {
        let mut cfg = base_config();
        cfg.max_rounds = 6;
        cfg.target_accuracy = 0.5;
        let values = vec!["2".to_string(), "3".to_string()];
        let a = run_sweep(&cfg, "buffer_size", &values, &[1, 2, 3]).unwrap();
        let b = run_sweep(&cfg, "buffer_size", &values, &[3, 1, 2]).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.median_time_to_target_s, rb.median_time_to_target_s);
            assert_eq!(ra.censored_runs, rb.censored_runs);
            let mut sa = ra.per_seed.clone();
            let mut sb = rb.per_seed.clone();
            sa.sort_by_key(|o| o.seed);
            sb.sort_by_key(|o| o.seed);
            assert_eq!(sa, sb);
        }
    }

    #[test]
    fn sweep_rejects_bad_grid() {
        let cfg = base_config();
        assert!(run_sweep(&cfg, "buffer_size", &[], &[1]).is_err());
        assert!(run_sweep(&cfg, "buffer_size", &["3".into()], &[]).is_err());
        assert!(run_sweep(&cfg, "no_such_param", &["3".into()], &[1]).is_err());
        // A child run config error carries its grid context.
        let err = run_sweep(&cfg, "buffer_size", &["99".into()], &[1]).unwrap_err();
        assert!(err.to_string().contains("buffer_size=99"));
    }

    #[test]
    fn emitted_outputs_round_trip_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config();
        cfg.max_rounds = 4;
        let logs = run_compare(&cfg, &[PolicyKind::Seafl, PolicyKind::Fedbuff]).unwrap();
        emit_run_outputs(dir.path(), &logs, &cfg).unwrap();

        let curves = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert!(curves.lines().any(|l| l.starts_with("seafl,")));
        assert!(curves.lines().any(|l| l.starts_with("fedbuff,")));

        let text = fs::read_to_string(dir.path().join("summary.json")).unwrap();
        let summary: RunSummary = serde_json::from_str(&text).unwrap();
        assert_eq!(summary.config, cfg);
        assert_eq!(summary.runs.len(), 2);
    }

    #[test]
    fn empty_logs_emit_header_only_csvs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = base_config();
        let log = MetricsLog::new("seafl", 0);
        emit_run_outputs(dir.path(), &[log], &cfg).unwrap();
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1);
    }
}
