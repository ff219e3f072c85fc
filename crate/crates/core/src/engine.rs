//! Deterministic discrete-event simulation loop.
//!
//! The server dispatches the global model, buffers upload arrivals, enforces
//! the staleness limit (blocking wait for the strict policy, early-upload
//! notifications for the partial-training variant), aggregates when the
//! buffer fills, and advances the round counter once per aggregation.
//!
//! Events are processed in `(time, seq)` order where `seq` is the insertion
//! sequence, so simultaneous events resolve identically on every run. Client
//! training is precomputed per dispatch as a whole epoch trajectory; workers
//! only parallelize those independent computations, which keeps the metrics
//! byte-identical for any worker count.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::aggregator::{self, SeaflHyper, BETA_INF};
use crate::config::{DataSource, PolicyKind, RedispatchMode, RunConfig};
use crate::data::{self, Dataset};
use crate::device::{ClientState, EpochOutcome, SpeedModel, UpdateRecord};
use crate::error::{Result, SimError};
use crate::metrics::{EvalCheckpoint, MetricsLog, RoundWeights};
use crate::model::{self, ModelSpec, TrainConfig};
use crate::params::ParamVector;
use crate::rng::{self, tag};

/// A timestamped simulation event. `seq` is assigned by the queue at
/// insertion and breaks ties between simultaneous events.
#[derive(Clone, Copy, Debug)]
pub struct SimEvent {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl SimEvent {
    pub fn at(time: f64, kind: EventKind) -> Self {
        SimEvent { time, seq: 0, kind }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Dispatch { client: usize },
    EpochComplete { client: usize },
    UploadArrival { client: usize },
    Notify { client: usize },
    EvalCheckpoint,
}

struct QueuedEvent(SimEvent);

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.0.time.total_cmp(&other.0.time).is_eq() && self.0.seq == other.0.seq
    }
}

impl Eq for QueuedEvent {}

impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0
            .time
            .total_cmp(&other.0.time)
            .then(self.0.seq.cmp(&other.0.seq))
    }
}

#[derive(Default)]
struct EventQueue {
    heap: BinaryHeap<Reverse<QueuedEvent>>,
    next_seq: u64,
}

impl EventQueue {
    fn push(&mut self, mut event: SimEvent) {
        assert!(event.time.is_finite(), "event scheduled at non-finite time");
        event.seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(QueuedEvent(event)));
    }

    fn pop(&mut self) -> Option<SimEvent> {
        self.heap.pop().map(|Reverse(QueuedEvent(e))| e)
    }
}

/// Server-side record of an in-flight dispatch: the base model is retained
/// here (never trusted from the client) for the update-displacement cosine.
struct DispatchInfo {
    base_round: u64,
    base_model: ParamVector,
    notify_sent: bool,
}

/// Payload bound when a dispatch is scheduled: the model the client will
/// receive and its precomputed epoch trajectory.
struct PlannedDispatch {
    base_round: u64,
    base_model: ParamVector,
    trajectory: Vec<ParamVector>,
}

struct Engine<'a> {
    cfg: &'a RunConfig,
    policy: PolicyKind,
    hyper: SeaflHyper,
    model_spec: ModelSpec,
    train_template: TrainConfig,
    test_set: Dataset,
    clients: Vec<ClientState>,
    dispatch_info: Vec<Option<DispatchInfo>>,
    planned: Vec<Option<PlannedDispatch>>,
    queue: EventQueue,
    pool: rayon::ThreadPool,
    server_rng: ChaCha20Rng,
    global: ParamVector,
    round: u64,
    clock: f64,
    outstanding: usize,
    buffer_records: Vec<UpdateRecord>,
    buffer_bases: Vec<ParamVector>,
    metrics: MetricsLog,
    stopped: bool,
}

/// Run one simulation to completion.
pub fn run(cfg: &RunConfig) -> Result<MetricsLog> {
    cfg.validate()?;
    let mut engine = Engine::new(cfg)?;
    engine.bootstrap()?;
    engine.run_loop()?;
    Ok(engine.finish())
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self> {
        let full = match cfg.data.source {
            DataSource::Synthetic => data::gen_synthetic(
                cfg.data.num_classes,
                cfg.data.dim,
                cfg.data.num_samples,
                cfg.data.class_sep,
                cfg.seed,
            )?,
            DataSource::Idx => data::load_idx(
                cfg.data.images_path.as_ref().expect("validated"),
                cfg.data.labels_path.as_ref().expect("validated"),
                cfg.data.limit,
            )?,
        };

        // Held-out test split, then the non-IID partition over the remainder.
        let mut order: Vec<usize> = (0..full.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[tag::TEST_SPLIT]));
        let test_count = ((full.len() as f64 * cfg.data.test_fraction).round() as usize)
            .clamp(1, full.len() - 1);
        let train_count = full.len() - test_count;
        if train_count < cfg.clients.num_clients {
            return Err(SimError::Config(format!(
                "{train_count} training samples cannot cover {} clients",
                cfg.clients.num_clients
            )));
        }
        let test_set = full.subset(&order[..test_count])?;
        let train_set = full.subset(&order[test_count..])?;

        let plan = data::dirichlet_partition(
            &train_set,
            cfg.clients.num_clients,
            cfg.data.dirichlet_concentration,
            cfg.seed,
        )?;

        let model_spec = cfg.model_spec(full.dim(), full.num_classes());
        model_spec.validate()?;

        let idle = cfg.idle_model();
        let mean_size = train_set.len() as f64 / cfg.clients.num_clients as f64;
        let mut clients = Vec::with_capacity(cfg.clients.num_clients);
        for (id, assignment) in plan.assignments.iter().enumerate() {
            let partition = train_set.subset(assignment)?;
            // Data volume scales compute: epoch time is proportional to the
            // client's share of the data.
            let epoch_compute =
                cfg.speed.base_epoch_time * partition.len() as f64 / mean_size;
            clients.push(ClientState::new(
                id,
                partition,
                SpeedModel {
                    idle,
                    base_epoch_time: cfg.speed.base_epoch_time,
                },
                epoch_compute,
                cfg.seed,
            ));
        }

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.engine.workers)
            .build()
            .map_err(|e| SimError::Config(format!("worker pool: {e}")))?;

        let global = model::init_model(&model_spec, cfg.seed);
        let num_clients = cfg.clients.num_clients;

        Ok(Engine {
            cfg,
            policy: cfg.policy,
            hyper: cfg.hyper(),
            model_spec,
            train_template: TrainConfig {
                epochs: cfg.training.epochs,
                learning_rate: cfg.training.learning_rate,
                batch_size: cfg.training.batch_size,
                seed: 0,
            },
            test_set,
            clients,
            dispatch_info: (0..num_clients).map(|_| None).collect(),
            planned: (0..num_clients).map(|_| None).collect(),
            queue: EventQueue::default(),
            pool,
            server_rng: rng::stream(cfg.seed, &[tag::SERVER]),
            global,
            round: 0,
            clock: 0.0,
            outstanding: 0,
            buffer_records: Vec::new(),
            buffer_bases: Vec::new(),
            metrics: MetricsLog::new(cfg.policy.label(), cfg.seed),
            stopped: false,
        })
    }

    /// Initial concurrency set: M clients sampled without replacement.
    fn bootstrap(&mut self) -> Result<()> {
        let n = self.clients.len();
        let m = self.cfg.concurrency();
        let mut chosen: Vec<usize> =
            rand::seq::index::sample(&mut self.server_rng, n, m).into_iter().collect();
        chosen.sort_unstable();
        self.plan_and_push_dispatches(&chosen)
    }

    /// Bind dispatch payloads (base round, base model, epoch trajectory) at
    /// scheduling time and queue the dispatch events. Trajectories for the
    /// group are independent, so they run on the worker pool.
    fn plan_and_push_dispatches(&mut self, group: &[usize]) -> Result<()> {
        if group.is_empty() {
            return Ok(());
        }
        let global = self.global.clone();
        let round = self.round;
        let spec = self.model_spec;
        let template = self.train_template;
        let clients = &self.clients;
        let trajectories: Vec<(usize, Vec<ParamVector>)> = self.pool.install(|| {
            group
                .par_iter()
                .map(|&c| {
                    let train_cfg = TrainConfig {
                        seed: clients[c].next_train_seed(),
                        ..template
                    };
                    let trajectory =
                        model::train_trajectory(&spec, &global, &clients[c].data, &train_cfg)?;
                    Ok((c, trajectory))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for (c, trajectory) in trajectories {
            if self.planned[c].is_some() || self.dispatch_info[c].is_some() {
                return Err(SimError::Protocol(format!(
                    "client {c} already has a dispatch in flight"
                )));
            }
            self.planned[c] = Some(PlannedDispatch {
                base_round: round,
                base_model: global.clone(),
                trajectory,
            });
            self.queue
                .push(SimEvent::at(self.clock, EventKind::Dispatch { client: c }));
        }
        Ok(())
    }

    fn run_loop(&mut self) -> Result<()> {
        while let Some(event) = self.queue.pop() {
            if event.time > self.cfg.max_virtual_time {
                break;
            }
            assert!(
                event.time >= self.clock,
                "virtual clock ran backwards: {} after {}",
                event.time,
                self.clock
            );
            self.clock = event.time;
            if self.stopped && !self.cfg.engine.drain {
                break;
            }
            match event.kind {
                EventKind::Dispatch { client } => self.handle_dispatch(client)?,
                EventKind::EpochComplete { client } => self.handle_epoch_complete(client)?,
                EventKind::UploadArrival { client } => self.handle_upload_arrival(client)?,
                EventKind::Notify { client } => {
                    self.clients[client].handle_notification();
                }
                EventKind::EvalCheckpoint => {
                    // Checkpoint rows are recorded at aggregation time (the
                    // evaluation consumes no virtual time); the queued event
                    // just marks the trace.
                    log::trace!("eval checkpoint marker at {}", self.clock);
                }
            }
        }
        Ok(())
    }

    fn handle_dispatch(&mut self, client: usize) -> Result<()> {
        let plan = self.planned[client].take().ok_or_else(|| {
            SimError::Protocol(format!("dispatch event for client {client} without a plan"))
        })?;
        self.dispatch_info[client] = Some(DispatchInfo {
            base_round: plan.base_round,
            base_model: plan.base_model,
            notify_sent: false,
        });
        self.outstanding += 1;
        self.metrics.counters.dispatches += 1;
        let first_epoch =
            self.clients[client].begin_round(plan.trajectory, plan.base_round, self.clock)?;
        self.queue.push(first_epoch);
        Ok(())
    }

    fn handle_epoch_complete(&mut self, client: usize) -> Result<()> {
        match self.clients[client].complete_epoch(self.clock, self.cfg.speed.link_latency)? {
            EpochOutcome::Continue(next) => self.queue.push(next),
            EpochOutcome::Upload(upload) => self.queue.push(upload),
        }
        Ok(())
    }

    fn handle_upload_arrival(&mut self, client: usize) -> Result<()> {
        let record = self.clients[client].take_upload().ok_or_else(|| {
            SimError::Protocol(format!("upload arrival for client {client} with no upload"))
        })?;
        let info = self.dispatch_info[client].take().ok_or_else(|| {
            SimError::Protocol(format!("upload arrival for client {client} never dispatched"))
        })?;
        self.outstanding -= 1;
        self.metrics.counters.uploads += 1;
        if record.epochs_completed < self.cfg.training.epochs {
            self.metrics.counters.partial_uploads += 1;
        }
        self.buffer_records.push(record);
        self.buffer_bases.push(info.base_model);

        if !self.stopped {
            self.maybe_aggregate()?;
            if self.policy == PolicyKind::Seafl2 && !self.stopped {
                self.scan_notifications();
            }
        }
        Ok(())
    }

    fn maybe_aggregate(&mut self) -> Result<()> {
        let ready = match self.policy {
            PolicyKind::Fedasync => !self.buffer_records.is_empty(),
            PolicyKind::Fedavg => self.outstanding == 0 && !self.buffer_records.is_empty(),
            PolicyKind::Seafl | PolicyKind::Seafl2 | PolicyKind::Fedbuff => {
                self.buffer_records.len() >= self.hyper.buffer_size
            }
        };
        if !ready {
            return Ok(());
        }
        if self.policy == PolicyKind::Seafl && self.staleness_gate_blocks() {
            self.metrics.counters.gate_deferrals += 1;
            return Ok(());
        }
        self.aggregate()
    }

    /// Blocking staleness gate: defer when aggregating now would push any
    /// outstanding client's staleness past the limit. Waiting lets the late
    /// upload join the buffer (transiently exceeding K) before the round
    /// advances, so no update ever enters aggregation beyond the limit.
    fn staleness_gate_blocks(&self) -> bool {
        let beta = self.hyper.beta;
        if beta == BETA_INF {
            return false;
        }
        self.dispatch_info
            .iter()
            .flatten()
            .any(|info| (self.round + 1) - info.base_round > beta)
    }

    /// Partial-training notifications for every in-flight client whose
    /// staleness exceeds the limit, at most once per dispatch.
    fn scan_notifications(&mut self) {
        let beta = self.hyper.beta;
        if beta == BETA_INF {
            return;
        }
        for client in 0..self.clients.len() {
            if let Some(info) = self.dispatch_info[client].as_mut() {
                if !info.notify_sent && self.round - info.base_round > beta {
                    info.notify_sent = true;
                    self.metrics.counters.notifications += 1;
                    self.queue.push(SimEvent::at(
                        self.clock + self.cfg.speed.notify_latency,
                        EventKind::Notify { client },
                    ));
                }
            }
        }
    }

    fn aggregate(&mut self) -> Result<()> {
        let t = self.round;
        let stalenesses: Vec<u64> = self
            .buffer_records
            .iter()
            .map(|r| t - r.base_round)
            .collect();
        let staleness_max = *stalenesses.iter().max().expect("nonempty buffer");
        let staleness_mean =
            stalenesses.iter().sum::<u64>() as f64 / stalenesses.len() as f64;
        if self.policy == PolicyKind::Seafl && self.hyper.beta != BETA_INF {
            assert!(
                staleness_max <= self.hyper.beta,
                "strict policy aggregated staleness {staleness_max} beyond limit {}",
                self.hyper.beta
            );
        }

        let total_samples: usize = self.buffer_records.iter().map(|r| r.sample_count).sum();
        let (new_global, breakdown) = match self.policy {
            PolicyKind::Seafl | PolicyKind::Seafl2 => {
                let (g, b) = aggregator::seafl_aggregate(
                    &self.buffer_records,
                    &self.buffer_bases,
                    &self.global,
                    t,
                    &self.hyper,
                    total_samples,
                    self.cfg.aggregation.importance_input,
                )?;
                (g, Some(b))
            }
            PolicyKind::Fedbuff => (
                aggregator::fedbuff_aggregate(
                    &self.buffer_records,
                    &self.global,
                    self.hyper.theta,
                )?,
                None,
            ),
            PolicyKind::Fedasync => (
                aggregator::fedasync_mix(
                    &self.global,
                    &self.buffer_records[0],
                    self.cfg.aggregation.fedasync_mixing,
                )?,
                None,
            ),
            PolicyKind::Fedavg => (
                aggregator::fedavg_aggregate(&self.buffer_records, self.buffer_records.len())?,
                None,
            ),
        };
        assert!(new_global.is_finite(), "aggregation produced non-finite parameters");

        self.global = new_global;
        self.round += 1;
        self.metrics.counters.aggregations += 1;
        if let Some(breakdown) = breakdown {
            self.metrics.round_weights.push(RoundWeights {
                round: self.round,
                breakdown,
            });
        }

        let reporters: Vec<usize> = self.buffer_records.iter().map(|r| r.client_id).collect();
        self.buffer_records.clear();
        self.buffer_bases.clear();

        // Evaluation consumes no virtual time; record the checkpoint now and
        // queue the trace marker.
        let (test_loss, test_accuracy) =
            model::loss_and_accuracy(&self.model_spec, &self.global, &self.test_set)?;
        self.metrics.checkpoints.push(EvalCheckpoint {
            round: self.round,
            virtual_time_s: self.clock,
            test_loss,
            test_accuracy,
            buffer_staleness_max: staleness_max,
            buffer_staleness_mean: staleness_mean,
            notifications_sent: self.metrics.counters.notifications,
        });
        self.queue.push(SimEvent::at(self.clock, EventKind::EvalCheckpoint));

        if self.round >= self.cfg.max_rounds {
            self.stopped = true;
            return Ok(());
        }

        match self.cfg.redispatch() {
            RedispatchMode::Reporters => self.plan_and_push_dispatches(&reporters)?,
            RedispatchMode::Resample => {
                let idle: Vec<usize> = (0..self.clients.len())
                    .filter(|&c| {
                        self.clients[c].is_idle()
                            && self.planned[c].is_none()
                            && self.dispatch_info[c].is_none()
                    })
                    .collect();
                let take = reporters.len().min(idle.len());
                let mut chosen: Vec<usize> =
                    rand::seq::index::sample(&mut self.server_rng, idle.len(), take)
                        .into_iter()
                        .map(|i| idle[i])
                        .collect();
                chosen.sort_unstable();
                self.plan_and_push_dispatches(&chosen)?;
            }
        }
        if self.policy == PolicyKind::Seafl2 {
            self.scan_notifications();
        }
        Ok(())
    }

    fn finish(mut self) -> MetricsLog {
        self.metrics.final_virtual_time = self.clock;
        self.metrics
    }
}
