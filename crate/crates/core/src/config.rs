//! Run configuration: a flat, typed key-value file (TOML) with one section
//! per subsystem. Key names follow the usual symbols: `num_clients`,
//! `buffer_size`, `staleness_limit`, `alpha`, `mu`, `theta`, `epochs`,
//! `learning_rate`, `batch_size`, `zipf_s`, and so on.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregator::{ImportanceInput, SeaflHyper, BETA_INF};
use crate::device::IdleModel;
use crate::error::{Result, SimError};
use crate::model::{ModelKind, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Seafl,
    Seafl2,
    Fedbuff,
    Fedasync,
    Fedavg,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Seafl,
        PolicyKind::Seafl2,
        PolicyKind::Fedbuff,
        PolicyKind::Fedasync,
        PolicyKind::Fedavg,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            PolicyKind::Seafl => "seafl",
            PolicyKind::Seafl2 => "seafl2",
            PolicyKind::Fedbuff => "fedbuff",
            PolicyKind::Fedasync => "fedasync",
            PolicyKind::Fedavg => "fedavg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "seafl" => Ok(PolicyKind::Seafl),
            "seafl2" => Ok(PolicyKind::Seafl2),
            "fedbuff" => Ok(PolicyKind::Fedbuff),
            "fedasync" => Ok(PolicyKind::Fedasync),
            "fedavg" => Ok(PolicyKind::Fedavg),
            other => Err(SimError::Config(format!(
                "unknown policy '{other}' (expected seafl, seafl2, fedbuff, fedasync, or fedavg)"
            ))),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Staleness limit: a positive round count or "inf" for no limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StalenessLimit(pub u64);

impl StalenessLimit {
    pub const INF: StalenessLimit = StalenessLimit(BETA_INF);

    pub fn is_infinite(&self) -> bool {
        self.0 == BETA_INF
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(StalenessLimit::INF);
        }
        s.parse::<u64>()
            .map(StalenessLimit)
            .map_err(|_| SimError::Config(format!("staleness limit '{s}' is not an integer or 'inf'")))
    }
}

impl Serialize for StalenessLimit {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_infinite() {
            serializer.serialize_str("inf")
        } else {
            serializer.serialize_u64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for StalenessLimit {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct Visitor;
        impl serde::de::Visitor<'_> for Visitor {
            type Value = StalenessLimit;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive integer or the string \"inf\"")
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<StalenessLimit, E> {
                Ok(StalenessLimit(v))
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<StalenessLimit, E> {
                if v < 0 {
                    return Err(E::custom("staleness limit must be nonnegative"));
                }
                Ok(StalenessLimit(v as u64))
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<StalenessLimit, E> {
                StalenessLimit::parse(v).map_err(E::custom)
            }
        }
        deserializer.deserialize_any(Visitor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedispatchMode {
    /// Send the fresh global model back to the clients that just reported.
    Reporters,
    /// Sample an equally sized set from the idle pool instead.
    Resample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKindConfig {
    Logistic,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdleKind {
    Zipf,
    Pareto,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
}

fn default_concurrency() -> Option<usize> {
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientsConfig {
    pub num_clients: usize,
    /// Concurrent-training target M; defaults to ceil(0.2 * N).
    #[serde(default = "default_concurrency")]
    pub concurrency: Option<usize>,
}

fn default_alpha() -> f64 {
    3.0
}
fn default_mu() -> f64 {
    1.0
}
fn default_theta() -> f64 {
    0.8
}
fn default_staleness_limit() -> StalenessLimit {
    StalenessLimit(10)
}
fn default_fedasync_mixing() -> f64 {
    0.6
}
fn default_redispatch() -> Option<RedispatchMode> {
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationConfig {
    pub buffer_size: usize,
    #[serde(default = "default_staleness_limit")]
    pub staleness_limit: StalenessLimit,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_fedasync_mixing")]
    pub fedasync_mixing: f64,
    #[serde(default)]
    pub importance_input: ImportanceInput,
    /// Defaults to `reporters` for buffered policies and `resample` for the
    /// synchronous policy (which re-samples its cohort every round).
    #[serde(default = "default_redispatch")]
    pub redispatch: Option<RedispatchMode>,
}

fn default_hidden_dim() -> usize {
    0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKindConfig,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
}

fn default_test_fraction() -> f64 {
    0.1
}
fn default_class_sep() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub dim: usize,
    #[serde(default)]
    pub num_samples: usize,
    #[serde(default = "default_class_sep")]
    pub class_sep: f64,
    pub dirichlet_concentration: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub images_path: Option<PathBuf>,
    #[serde(default)]
    pub labels_path: Option<PathBuf>,
    #[serde(default)]
    pub limit: Option<usize>,
}

fn default_zipf_s() -> f64 {
    1.7
}
fn default_zipf_max_delay() -> f64 {
    60.0
}
fn default_pareto_shape() -> f64 {
    1.5
}
fn default_pareto_scale() -> f64 {
    2.0
}
fn default_constant_delay() -> f64 {
    1.0
}
fn default_base_epoch_time() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedConfig {
    pub idle: IdleKind,
    #[serde(default = "default_zipf_s")]
    pub zipf_s: f64,
    #[serde(default = "default_zipf_max_delay")]
    pub zipf_max_delay: f64,
    #[serde(default = "default_pareto_shape")]
    pub pareto_shape: f64,
    #[serde(default = "default_pareto_scale")]
    pub pareto_scale: f64,
    #[serde(default = "default_constant_delay")]
    pub constant_delay: f64,
    #[serde(default = "default_base_epoch_time")]
    pub base_epoch_time: f64,
    /// Upload link latency added to every arrival; 0 folds it into idle time.
    #[serde(default)]
    pub link_latency: f64,
    /// Delivery latency for partial-training notifications.
    #[serde(default)]
    pub notify_latency: f64,
}

fn default_workers() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Worker threads for client training computations. Results are merged
    /// in deterministic order, so any count produces identical metrics.
    pub workers: usize,
    /// After the round cap, keep processing in-flight events (no new
    /// aggregations or dispatches) so every dispatch drains into an upload.
    pub drain: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            workers: default_workers(),
            drain: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub policy: PolicyKind,
    pub seed: u64,
    /// Required: the accuracy the run is racing toward.
    pub target_accuracy: f64,
    pub max_virtual_time: f64,
    pub max_rounds: u64,
    pub clients: ClientsConfig,
    pub aggregation: AggregationConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub speed: SpeedConfig,
    #[serde(default)]
    pub engine: EngineConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| SimError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SimError::Config(format!("config encode: {e}")))
    }

    /// Effective concurrency M.
    pub fn concurrency(&self) -> usize {
        self.clients
            .concurrency
            .unwrap_or_else(|| (self.clients.num_clients as f64 * 0.2).ceil() as usize)
            .max(1)
    }

    /// Effective buffer size K (1 for the fully asynchronous policy).
    pub fn buffer_size(&self) -> usize {
        match self.policy {
            PolicyKind::Fedasync => 1,
            PolicyKind::Fedavg => self.concurrency(),
            _ => self.aggregation.buffer_size,
        }
    }

    pub fn redispatch(&self) -> RedispatchMode {
        self.aggregation.redispatch.unwrap_or(match self.policy {
            PolicyKind::Fedavg => RedispatchMode::Resample,
            _ => RedispatchMode::Reporters,
        })
    }

    pub fn hyper(&self) -> SeaflHyper {
        SeaflHyper {
            alpha: self.aggregation.alpha,
            mu: self.aggregation.mu,
            beta: self.aggregation.staleness_limit.0,
            theta: self.aggregation.theta,
            buffer_size: self.buffer_size(),
        }
    }

    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> ModelSpec {
        match self.model.kind {
            ModelKindConfig::Logistic => ModelSpec {
                kind: ModelKind::Logistic,
                input_dim,
                hidden_dim: 0,
                num_classes,
            },
            ModelKindConfig::Mlp => ModelSpec {
                kind: ModelKind::Mlp,
                input_dim,
                hidden_dim: self.model.hidden_dim,
                num_classes,
            },
        }
    }

    pub fn idle_model(&self) -> IdleModel {
        match self.speed.idle {
            IdleKind::Zipf => IdleModel::Zipf {
                s: self.speed.zipf_s,
                max_delay: self.speed.zipf_max_delay,
            },
            IdleKind::Pareto => IdleModel::Pareto {
                shape: self.speed.pareto_shape,
                scale: self.speed.pareto_scale,
            },
            IdleKind::Constant => IdleModel::Constant {
                delay: self.speed.constant_delay,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.clients.num_clients;
        let m = self.concurrency();
        let k = self.buffer_size();
        if n == 0 {
            return Err(SimError::Config("num_clients must be positive".into()));
        }
        if !(1 <= k && k <= m && m <= n) {
            return Err(SimError::Config(format!(
                "need 1 <= K <= M <= N, got K={k}, M={m}, N={n}"
            )));
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy < 1.0) {
            return Err(SimError::Config(format!(
                "target_accuracy must lie in (0, 1), got {}",
                self.target_accuracy
            )));
        }
        if !(self.max_virtual_time > 0.0) {
            return Err(SimError::Config("max_virtual_time must be positive".into()));
        }
        if self.max_rounds == 0 {
            return Err(SimError::Config("max_rounds must be positive".into()));
        }
        if self.aggregation.staleness_limit.0 == 0 {
            return Err(SimError::Config("staleness_limit must be at least 1".into()));
        }
        if self.aggregation.alpha < 0.0 || self.aggregation.mu < 0.0 {
            return Err(SimError::Config("alpha and mu must be nonnegative".into()));
        }
        if self.aggregation.alpha + self.aggregation.mu <= 0.0 {
            return Err(SimError::Config(
                "alpha + mu must be positive or every weight vanishes".into(),
            ));
        }
        if !(self.aggregation.theta > 0.0 && self.aggregation.theta <= 1.0) {
            return Err(SimError::Config(format!(
                "theta must lie in (0, 1], got {}",
                self.aggregation.theta
            )));
        }
        if !(self.aggregation.fedasync_mixing > 0.0 && self.aggregation.fedasync_mixing <= 1.0) {
            return Err(SimError::Config(format!(
                "fedasync_mixing must lie in (0, 1], got {}",
                self.aggregation.fedasync_mixing
            )));
        }
        if self.training.epochs == 0 {
            return Err(SimError::Config("epochs must be at least 1".into()));
        }
        if !(self.training.learning_rate > 0.0) {
            return Err(SimError::Config("learning_rate must be positive".into()));
        }
        if self.training.batch_size == 0 {
            return Err(SimError::Config("batch_size must be at least 1".into()));
        }
        match self.data.source {
            DataSource::Synthetic => {
                if self.data.num_classes < 2 || self.data.dim == 0 || self.data.num_samples == 0 {
                    return Err(SimError::Config(
                        "synthetic data needs num_classes >= 2, dim >= 1, num_samples >= 1".into(),
                    ));
                }
            }
            DataSource::Idx => {
                if self.data.images_path.is_none() || self.data.labels_path.is_none() {
                    return Err(SimError::Config(
                        "idx data needs images_path and labels_path".into(),
                    ));
                }
            }
        }
        if !(self.data.dirichlet_concentration > 0.0) {
            return Err(SimError::Config("dirichlet_concentration must be positive".into()));
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 0.9) {
            return Err(SimError::Config(format!(
                "test_fraction must lie in (0, 0.9), got {}",
                self.data.test_fraction
            )));
        }
        match self.speed.idle {
            IdleKind::Zipf => {
                if !(self.speed.zipf_s > 1.0) {
                    return Err(SimError::Config("zipf_s must exceed 1".into()));
                }
                if !(self.speed.zipf_max_delay >= 1.0) {
                    return Err(SimError::Config("zipf_max_delay must be at least 1 second".into()));
                }
            }
            IdleKind::Pareto => {
                if !(self.speed.pareto_shape > 0.0) || !(self.speed.pareto_scale >= 0.0) {
                    return Err(SimError::Config(
                        "pareto_shape must be positive and pareto_scale nonnegative".into(),
                    ));
                }
            }
            IdleKind::Constant => {
                if self.speed.constant_delay < 0.0 {
                    return Err(SimError::Config("constant_delay must be nonnegative".into()));
                }
            }
        }
        if !(self.speed.base_epoch_time > 0.0) {
            return Err(SimError::Config("base_epoch_time must be positive".into()));
        }
        if self.speed.link_latency < 0.0 || self.speed.notify_latency < 0.0 {
            return Err(SimError::Config("latencies must be nonnegative".into()));
        }
        if self.engine.workers == 0 {
            return Err(SimError::Config("workers must be at least 1".into()));
        }
        if self.model.kind == ModelKindConfig::Mlp && self.model.hidden_dim == 0 {
            return Err(SimError::Config("mlp model needs hidden_dim >= 1".into()));
        }
        if self.model.kind == ModelKindConfig::Logistic && self.model.hidden_dim != 0 {
            return Err(SimError::Config("logistic model must leave hidden_dim at 0".into()));
        }
        Ok(())
    }

    /// Set one sweepable parameter by key. Keys mirror the config file.
    pub fn apply_param(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| SimError::Config(format!("cannot parse '{value}' for {key}")))
        }
        match key {
            "policy" => self.policy = PolicyKind::parse(value)?,
            "seed" => self.seed = num(key, value)?,
            "target_accuracy" => self.target_accuracy = num(key, value)?,
            "max_virtual_time" => self.max_virtual_time = num(key, value)?,
            "max_rounds" => self.max_rounds = num(key, value)?,
            "num_clients" => self.clients.num_clients = num(key, value)?,
            "concurrency" => self.clients.concurrency = Some(num(key, value)?),
            "buffer_size" => self.aggregation.buffer_size = num(key, value)?,
            "staleness_limit" => self.aggregation.staleness_limit = StalenessLimit::parse(value)?,
            "alpha" => self.aggregation.alpha = num(key, value)?,
            "mu" => self.aggregation.mu = num(key, value)?,
            "theta" => self.aggregation.theta = num(key, value)?,
            "fedasync_mixing" => self.aggregation.fedasync_mixing = num(key, value)?,
            "epochs" => self.training.epochs = num(key, value)?,
            "learning_rate" => self.training.learning_rate = num(key, value)?,
            "batch_size" => self.training.batch_size = num(key, value)?,
            "num_classes" => self.data.num_classes = num(key, value)?,
            "dim" => self.data.dim = num(key, value)?,
            "num_samples" => self.data.num_samples = num(key, value)?,
            "class_sep" => self.data.class_sep = num(key, value)?,
            "dirichlet_concentration" => self.data.dirichlet_concentration = num(key, value)?,
            "zipf_s" => self.speed.zipf_s = num(key, value)?,
            "zipf_max_delay" => self.speed.zipf_max_delay = num(key, value)?,
            "pareto_shape" => self.speed.pareto_shape = num(key, value)?,
            "pareto_scale" => self.speed.pareto_scale = num(key, value)?,
            "constant_delay" => self.speed.constant_delay = num(key, value)?,
            "base_epoch_time" => self.speed.base_epoch_time = num(key, value)?,
            other => {
                return Err(SimError::Config(format!("unknown sweep parameter '{other}'")));
            }
        }
        Ok(())
    }
}

/// Shared scenario builder for unit tests across the crate.
#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// Small, fast scenario: 12 clients, constant speeds, buffered policy.
    pub(crate) fn base_config() -> RunConfig {
        RunConfig {
            policy: PolicyKind::Seafl,
            seed: 42,
            target_accuracy: 0.8,
            max_virtual_time: 1e9,
            max_rounds: 12,
            clients: ClientsConfig {
                num_clients: 12,
                concurrency: Some(6),
            },
            aggregation: AggregationConfig {
                buffer_size: 3,
                staleness_limit: StalenessLimit(10),
                alpha: 3.0,
                mu: 1.0,
                theta: 0.8,
                fedasync_mixing: 0.6,
                importance_input: ImportanceInput::Delta,
                redispatch: None,
            },
            model: ModelConfig {
                kind: ModelKindConfig::Logistic,
                hidden_dim: 0,
            },
            training: TrainingConfig {
                epochs: 3,
                learning_rate: 0.1,
                batch_size: 8,
            },
            data: DataConfig {
                source: DataSource::Synthetic,
                num_classes: 3,
                dim: 6,
                num_samples: 400,
                class_sep: 2.0,
                dirichlet_concentration: 0.5,
                test_fraction: 0.1,
                images_path: None,
                labels_path: None,
                limit: None,
            },
            speed: SpeedConfig {
                idle: IdleKind::Constant,
                zipf_s: 1.7,
                zipf_max_delay: 60.0,
                pareto_shape: 1.5,
                pareto_scale: 2.0,
                constant_delay: 1.0,
                base_epoch_time: 1.0,
                link_latency: 0.0,
                notify_latency: 0.0,
            },
            engine: EngineConfig {
                workers: 1,
                drain: false,
            },
        }
    }
}
