//! Server-side aggregation policies.
//!
//! SEAFL weighting combines a staleness factor `gamma = alpha * beta /
//! (staleness + beta)` with an update-importance term `s = mu * (cos + 1) / 2`
//! measured against the current global model; raw weights are the client's
//! data share times `gamma + s`, normalized to sum to one, and the blended
//! buffer model is mixed into the global model with coefficient `theta`.
//! FedBuff is the same pipeline with uniform `1/K` weights, FedAsync mixes a
//! single arriving update, and FedAvg is the synchronous data-share mean.

use serde::{Deserialize, Serialize};

use crate::device::UpdateRecord;
use crate::error::{Result, SimError};
use crate::params::{self, ParamVector};

/// Staleness-limit sentinel meaning "no limit".
pub const BETA_INF: u64 = u64::MAX;

/// Hyperparameters of the adaptive weighting pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeaflHyper {
    /// Staleness weight.
    pub alpha: f64,
    /// Similarity weight.
    pub mu: f64,
    /// Staleness limit; `BETA_INF` disables it.
    pub beta: u64,
    /// Global mixing coefficient.
    pub theta: f64,
    /// Updates buffered per aggregation.
    pub buffer_size: usize,
}

impl Default for SeaflHyper {
    fn default() -> Self {
        SeaflHyper {
            alpha: 3.0,
            mu: 1.0,
            beta: 10,
            theta: 0.8,
            buffer_size: 10,
        }
    }
}

/// Which vector the importance cosine compares against the global model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceInput {
    /// The training displacement: returned model minus the dispatched base.
    #[default]
    Delta,
    /// The returned model itself.
    RawModel,
}

/// Per-client view of one aggregation's weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightEntry {
    pub client_id: usize,
    pub gamma: f64,
    pub importance: f64,
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct WeightBreakdown {
    pub entries: Vec<WeightEntry>,
}

/// `gamma = alpha * beta / ((t - t_k) + beta)`, the staleness discount.
/// With `beta = BETA_INF` the discount disappears and `alpha` is returned.
pub fn staleness_factor(t: u64, t_k: u64, alpha: f64, beta: u64) -> Result<f64> {
    if t < t_k {
        return Err(SimError::Protocol(format!(
            "staleness clock ran backwards: round {t} < base round {t_k}"
        )));
    }
    if beta == BETA_INF {
        return Ok(alpha);
    }
    let staleness = (t - t_k) as f64;
    Ok(alpha * beta as f64 / (staleness + beta as f64))
}

/// `s = mu * (cos(delta, global) + 1) / 2`, in `[0, mu]`.
pub fn importance(update_delta: &ParamVector, global: &ParamVector, mu: f64) -> Result<f64> {
    let cos = params::cosine_similarity(update_delta, global)?;
    Ok(mu * (cos + 1.0) / 2.0)
}

/// Adaptive weights for a buffered aggregation at round `t`.
///
/// `bases[i]` is the global model dispatched to `buffer[i]`'s client, kept
/// server-side; `total_samples` is the sample count across the buffered
/// clients (the round's `|D|`). Raw weights are `d_k * (gamma + s)` and are
/// normalized to sum to one.
pub fn compute_weights(
    buffer: &[UpdateRecord],
    bases: &[ParamVector],
    global: &ParamVector,
    t: u64,
    h: &SeaflHyper,
    total_samples: usize,
    input: ImportanceInput,
) -> Result<WeightBreakdown> {
    if buffer.is_empty() {
        return Err(SimError::EmptyBuffer);
    }
    if bases.len() != buffer.len() {
        return Err(SimError::Protocol(format!(
            "{} buffered updates but {} base models",
            buffer.len(),
            bases.len()
        )));
    }
    if total_samples == 0 {
        return Err(SimError::Protocol("round has zero total samples".into()));
    }

    let mut entries = Vec::with_capacity(buffer.len());
    let mut raw_sum = 0.0;
    for (record, base) in buffer.iter().zip(bases) {
        let gamma = staleness_factor(t, record.base_round, h.alpha, h.beta)?;
        let s = match input {
            ImportanceInput::Delta => {
                let delta = params::sub(&record.params, base)?;
                importance(&delta, global, h.mu)?
            }
            ImportanceInput::RawModel => importance(&record.params, global, h.mu)?,
        };
        let share = record.sample_count as f64 / total_samples as f64;
        let raw = share * (gamma + s);
        raw_sum += raw;
        entries.push(WeightEntry {
            client_id: record.client_id,
            gamma,
            importance: s,
            raw,
            normalized: 0.0,
        });
    }

    if raw_sum <= 0.0 {
        return Err(SimError::DegenerateWeights);
    }
    for entry in &mut entries {
        entry.normalized = entry.raw / raw_sum;
    }
    Ok(WeightBreakdown { entries })
}

/// Full adaptive aggregation: normalized-weight blend of the buffered models,
/// then a `theta` mix into the current global model.
pub fn seafl_aggregate(
    buffer: &[UpdateRecord],
    bases: &[ParamVector],
    global: &ParamVector,
    t: u64,
    h: &SeaflHyper,
    total_samples: usize,
    input: ImportanceInput,
) -> Result<(ParamVector, WeightBreakdown)> {
    let breakdown = compute_weights(buffer, bases, global, t, h, total_samples, input)?;
    let terms: Vec<(f64, &ParamVector)> = breakdown
        .entries
        .iter()
        .zip(buffer)
        .map(|(entry, record)| (entry.normalized, &record.params))
        .collect();
    let blended = params::weighted_sum(&terms)?;
    let new_global = params::mix(global, &blended, h.theta)?;
    Ok((new_global, breakdown))
}

/// Uniform-weight buffered aggregation with the same `theta` mixing step.
pub fn fedbuff_aggregate(
    buffer: &[UpdateRecord],
    global: &ParamVector,
    theta: f64,
) -> Result<ParamVector> {
    if buffer.is_empty() {
        return Err(SimError::EmptyBuffer);
    }
    let weight = 1.0 / buffer.len() as f64;
    let terms: Vec<(f64, &ParamVector)> =
        buffer.iter().map(|record| (weight, &record.params)).collect();
    let blended = params::weighted_sum(&terms)?;
    params::mix(global, &blended, theta)
}

/// Fully asynchronous single-update mixing.
pub fn fedasync_mix(
    global: &ParamVector,
    update: &UpdateRecord,
    mixing: f64,
) -> Result<ParamVector> {
    params::mix(global, &update.params, mixing)
}

/// Synchronous data-share-weighted mean; all `expected` clients must have
/// reported.
pub fn fedavg_aggregate(updates: &[UpdateRecord], expected: usize) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(SimError::EmptyBuffer);
    }
    if updates.len() != expected {
        return Err(SimError::Protocol(format!(
            "synchronous barrier: {} of {expected} clients reported",
            updates.len()
        )));
    }
    let total: usize = updates.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(SimError::Protocol("round has zero total samples".into()));
    }
    let terms: Vec<(f64, &ParamVector)> = updates
        .iter()
        .map(|u| (u.sample_count as f64 / total as f64, &u.params))
        .collect();
    params::weighted_sum(&terms)
}
