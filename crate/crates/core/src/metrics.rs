//! Run metrics: evaluation checkpoints, per-round weight breakdowns, and
//! protocol counters, with deterministic CSV rendering.

use serde::{Deserialize, Serialize};

use crate::aggregator::WeightBreakdown;

/// Test-set evaluation recorded after an aggregation. Consumes no virtual
/// time, so its timestamp equals the aggregation's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCheckpoint {
    pub round: u64,
    pub virtual_time_s: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// Max staleness among the updates just aggregated.
    pub buffer_staleness_max: u64,
    /// Mean staleness among the updates just aggregated.
    pub buffer_staleness_mean: f64,
    /// Cumulative partial-training notifications sent so far.
    pub notifications_sent: u64,
}

/// Weight breakdown of one aggregation, kept for auditability.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundWeights {
    pub round: u64,
    pub breakdown: WeightBreakdown,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub dispatches: u64,
    pub uploads: u64,
    pub aggregations: u64,
    pub notifications: u64,
    /// Aggregations postponed by the blocking staleness gate.
    pub gate_deferrals: u64,
    /// Uploads whose training was cut short by a notification.
    pub partial_uploads: u64,
}

/// Everything a single simulation run reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsLog {
    pub policy: String,
    pub seed: u64,
    pub checkpoints: Vec<EvalCheckpoint>,
    pub round_weights: Vec<RoundWeights>,
    pub counters: RunCounters,
    /// Virtual clock when the run stopped.
    pub final_virtual_time: f64,
}

impl MetricsLog {
    pub fn new(policy: impl Into<String>, seed: u64) -> Self {
        MetricsLog {
            policy: policy.into(),
            seed,
            checkpoints: Vec::new(),
            round_weights: Vec::new(),
            counters: RunCounters::default(),
            final_virtual_time: 0.0,
        }
    }

    /// First checkpoint reaching the target accuracy, if any.
    pub fn time_to_accuracy(&self, target: f64) -> Option<f64> {
        self.checkpoints
            .iter()
            .find(|c| c.test_accuracy >= target)
            .map(|c| c.virtual_time_s)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.checkpoints.last().map(|c| c.test_accuracy)
    }

    /// The per-round metrics CSV. Formatting is Rust's shortest-round-trip
    /// float display, so identical runs render byte-identically.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(
            "round,virtual_time_s,policy,test_loss,test_accuracy,buffer_staleness_max,buffer_staleness_mean,notifications_sent\n",
        );
        for c in &self.checkpoints {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.round,
                c.virtual_time_s,
                self.policy,
                c.test_loss,
                c.test_accuracy,
                c.buffer_staleness_max,
                c.buffer_staleness_mean,
                c.notifications_sent
            ));
        }
        out
    }

    /// Per-round aggregation weights CSV.
    pub fn weights_csv(&self) -> String {
        let mut out = String::from("round,client_id,gamma_k,s_k,p_raw_k,p_norm_k\n");
        for rw in &self.round_weights {
            for e in &rw.breakdown.entries {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    rw.round, e.client_id, e.gamma, e.importance, e.raw, e.normalized
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cp(round: u64, time: f64, acc: f64) -> EvalCheckpoint {
        EvalCheckpoint {
            round,
            virtual_time_s: time,
            test_loss: 1.0,
            test_accuracy: acc,
            buffer_staleness_max: 0,
            buffer_staleness_mean: 0.0,
            notifications_sent: 0,
        }
    }

    #[test]
    fn time_to_accuracy_finds_first_crossing() {
        let mut log = MetricsLog::new("seafl", 1);
        log.checkpoints = vec![cp(1, 100.0, 0.5), cp(2, 357.0, 0.92), cp(3, 400.0, 0.95)];
        assert_eq!(log.time_to_accuracy(0.9), Some(357.0));
        assert_eq!(log.time_to_accuracy(0.99), None);
        // Target below the first checkpoint's accuracy returns that checkpoint.
        assert_eq!(log.time_to_accuracy(0.1), Some(100.0));
    }

    #[test]
    fn empty_log_renders_header_only() {
        let log = MetricsLog::new("fedbuff", 0);
        let csv = log.metrics_csv();
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("round,virtual_time_s,policy,"));
    }

    #[test]
    fn csv_rows_match_checkpoints() {
        let mut log = MetricsLog::new("seafl", 1);
        log.checkpoints = vec![cp(1, 12.5, 0.25)];
        let csv = log.metrics_csv();
        assert_eq!(csv.lines().nth(1), Some("1,12.5,seafl,1,0.25,0,0,0"));
    }
}
