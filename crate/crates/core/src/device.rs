//! Client-side state machine.
//!
//! A client receives the global model together with the round it was
//! dispatched in, then works through its epochs on the virtual timeline:
//! each epoch costs its compute time plus a sampled idle delay, and the next
//! epoch-complete event is only scheduled one step ahead so a partial-training
//! notification can cut the chain at the next epoch boundary.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Zeta};

use crate::data::Dataset;
use crate::engine::{EventKind, SimEvent};
use crate::error::{Result, SimError};
use crate::params::ParamVector;
use crate::rng::{self, tag};

/// Idle-delay distribution drawn after every completed epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum IdleModel {
    /// Zipf-law ranks in seconds, clamped to `max_delay`.
    Zipf { s: f64, max_delay: f64 },
    /// Heavy-tail draw `scale * (U^(-1/shape) - 1)`.
    Pareto { shape: f64, scale: f64 },
    Constant { delay: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedModel {
    pub idle: IdleModel,
    pub base_epoch_time: f64,
}

/// One idle-period draw, always nonnegative.
pub fn sample_idle_delay(model: &IdleModel, rng: &mut ChaCha20Rng) -> f64 {
    match *model {
        IdleModel::Zipf { s, max_delay } => {
            let zeta = Zeta::new(s).expect("validated zipf exponent");
            let draw: f64 = zeta.sample(rng);
            draw.min(max_delay)
        }
        IdleModel::Pareto { shape, scale } => {
            // u in (0, 1]; u = 1 gives a zero delay, u -> 0 the heavy tail.
            let u = 1.0 - rng.random::<f64>();
            scale * (u.powf(-1.0 / shape) - 1.0)
        }
        IdleModel::Constant { delay } => delay,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClientStatus {
    Idle,
    Training,
    Notified,
}

/// One client's reported update.
#[derive(Clone, Debug)]
pub struct UpdateRecord {
    pub client_id: usize,
    pub params: ParamVector,
    pub base_round: u64,
    pub sample_count: usize,
    pub epochs_completed: u32,
    pub arrival_time: f64,
}

/// Outcome of an epoch boundary.
#[derive(Debug)]
pub enum EpochOutcome {
    /// Next epoch scheduled; event is its completion.
    Continue(SimEvent),
    /// Training ended (all epochs done or notified); event is the upload arrival.
    Upload(SimEvent),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NotifyOutcome {
    /// Client will upload after the epoch currently in flight.
    WillUploadEarly,
    /// Client was idle or already uploading; nothing to cut.
    Ignored,
}

#[derive(Debug)]
pub struct ClientState {
    pub id: usize,
    pub data: Dataset,
    pub speed: SpeedModel,
    /// Seconds per local epoch, already scaled by partition size.
    pub epoch_compute_time: f64,
    pub base_round: u64,
    pub status: ClientStatus,
    pub current_epoch: u32,
    run_seed: u64,
    dispatch_count: u64,
    trajectory: Vec<ParamVector>,
    pending_upload: Option<UpdateRecord>,
    delay_rng: ChaCha20Rng,
}

impl ClientState {
    pub fn new(
        id: usize,
        data: Dataset,
        speed: SpeedModel,
        epoch_compute_time: f64,
        run_seed: u64,
    ) -> Self {
        ClientState {
            id,
            data,
            speed,
            epoch_compute_time,
            base_round: 0,
            status: ClientStatus::Idle,
            current_epoch: 0,
            run_seed,
            dispatch_count: 0,
            trajectory: Vec::new(),
            pending_upload: None,
            delay_rng: rng::stream(run_seed, &[tag::CLIENT_DELAY, id as u64, 0]),
        }
    }

    /// Seed for the next dispatch's training stream. Each dispatch gets its
    /// own substream so cutting a round short never shifts later draws.
    pub fn next_train_seed(&self) -> u64 {
        rng::derived_seed(
            self.run_seed,
            &[tag::CLIENT_TRAIN, self.id as u64, self.dispatch_count],
        )
    }

    /// Accept a dispatched round. `trajectory[e-1]` holds the parameters
    /// after epoch `e`; the engine may have computed it on a worker. Emits
    /// the first epoch-complete event (one epoch ahead).
    pub fn begin_round(
        &mut self,
        trajectory: Vec<ParamVector>,
        round: u64,
        now: f64,
    ) -> Result<SimEvent> {
        if self.status != ClientStatus::Idle || self.pending_upload.is_some() {
            return Err(SimError::Protocol(format!(
                "client {} dispatched while {:?}",
                self.id, self.status
            )));
        }
        if trajectory.is_empty() {
            return Err(SimError::Protocol(format!(
                "client {} dispatched an empty round plan",
                self.id
            )));
        }
        self.delay_rng = rng::stream(
            self.run_seed,
            &[tag::CLIENT_DELAY, self.id as u64, self.dispatch_count],
        );
        self.dispatch_count += 1;
        self.base_round = round;
        self.status = ClientStatus::Training;
        self.current_epoch = 0;
        self.trajectory = trajectory;
        let idle = sample_idle_delay(&self.speed.idle, &mut self.delay_rng);
        Ok(SimEvent::at(
            now + self.epoch_compute_time + idle,
            EventKind::EpochComplete { client: self.id },
        ))
    }

    /// The epoch in flight finished at `now` (its trailing idle included).
    /// Either schedules the next epoch or turns into an upload when all
    /// epochs are done or a notification arrived mid-epoch.
    pub fn complete_epoch(&mut self, now: f64, link_latency: f64) -> Result<EpochOutcome> {
        if self.status == ClientStatus::Idle || self.pending_upload.is_some() {
            return Err(SimError::Protocol(format!(
                "epoch completion for client {} which is not training",
                self.id
            )));
        }
        self.current_epoch += 1;
        let epochs_total = self.trajectory.len() as u32;
        let done = self.current_epoch >= epochs_total || self.status == ClientStatus::Notified;
        if done {
            let arrival_time = now + link_latency;
            let record = UpdateRecord {
                client_id: self.id,
                params: self.trajectory[self.current_epoch as usize - 1].clone(),
                base_round: self.base_round,
                sample_count: self.data.len(),
                epochs_completed: self.current_epoch,
                arrival_time,
            };
            self.pending_upload = Some(record);
            Ok(EpochOutcome::Upload(SimEvent::at(
                arrival_time,
                EventKind::UploadArrival { client: self.id },
            )))
        } else {
            let idle = sample_idle_delay(&self.speed.idle, &mut self.delay_rng);
            Ok(EpochOutcome::Continue(SimEvent::at(
                now + self.epoch_compute_time + idle,
                EventKind::EpochComplete { client: self.id },
            )))
        }
    }

    /// Partial-training notification: finish the epoch in flight, then upload
    /// immediately. Idempotent; ignored when idle or already uploading.
    pub fn handle_notification(&mut self) -> NotifyOutcome {
        match self.status {
            ClientStatus::Training if self.pending_upload.is_none() => {
                self.status = ClientStatus::Notified;
                NotifyOutcome::WillUploadEarly
            }
            _ => {
                log::debug!("client {}: notification ignored (status {:?})", self.id, self.status);
                NotifyOutcome::Ignored
            }
        }
    }

    /// Hand the finished update to the server; the client returns to idle.
    pub fn take_upload(&mut self) -> Option<UpdateRecord> {
        let record = self.pending_upload.take()?;
        self.status = ClientStatus::Idle;
        self.trajectory = Vec::new();
        Some(record)
    }

    pub fn is_idle(&self) -> bool {
        self.status == ClientStatus::Idle && self.pending_upload.is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::model::{init_model, train_trajectory, ModelSpec, TrainConfig};

    fn constant_client(epoch_time: f64, idle: f64) -> ClientState {
        let data = gen_synthetic(2, 2, 12, 1.0, 1).unwrap();
        ClientState::new(
            0,
            data,
            SpeedModel {
                idle: IdleModel::Constant { delay: idle },
                base_epoch_time: epoch_time,
            },
            epoch_time,
            42,
        )
    }

    fn dummy_trajectory(epochs: usize) -> Vec<ParamVector> {
        (0..epochs)
            .map(|e| ParamVector::from_vec(vec![e as f64]))
            .collect()
    }

    #[test]
    fn constant_delay_is_constant() {
        let mut rng = rng::stream(1, &[tag::CLIENT_DELAY]);
        for _ in 0..100 {
            assert_eq!(sample_idle_delay(&IdleModel::Constant { delay: 5.0 }, &mut rng), 5.0);
        }
    }

    #[test]
    fn zipf_draws_stay_within_max_delay() {
        let mut rng = rng::stream(2, &[tag::CLIENT_DELAY]);
        let model = IdleModel::Zipf { s: 1.7, max_delay: 60.0 };
        for _ in 0..10_000 {
            let d = sample_idle_delay(&model, &mut rng);
            assert!((0.0..=60.0).contains(&d), "draw {d} out of range");
        }
    }

    #[test]
    fn pareto_tail_is_heavy() {
        let mut rng = rng::stream(3, &[tag::CLIENT_DELAY]);
        let model = IdleModel::Pareto { shape: 1.2, scale: 2.0 };
        let mut draws: Vec<f64> = (0..10_000)
            .map(|_| sample_idle_delay(&model, &mut rng))
            .collect();
        assert!(draws.iter().all(|d| *d >= 0.0));
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = draws[draws.len() / 2];
        let p99 = draws[draws.len() * 99 / 100];
        assert!(p99 >= 5.0 * median, "p99 {p99} vs median {median}");
    }

    #[test]
    fn full_round_uploads_after_all_epochs() {
        // Epoch 10s, idle 0, E=5: upload arrives at dispatch + 50s.
        let mut client = constant_client(10.0, 0.0);
        let mut event = client.begin_round(dummy_trajectory(5), 0, 0.0).unwrap();
        let mut uploads = 0;
        for _ in 0..5 {
            match client.complete_epoch(event.time, 0.0).unwrap() {
                EpochOutcome::Continue(next) => event = next,
                EpochOutcome::Upload(up) => {
                    assert_eq!(up.time, 50.0);
                    uploads += 1;
                }
            }
        }
        assert_eq!(uploads, 1);
        let record = client.take_upload().unwrap();
        assert_eq!(record.epochs_completed, 5);
        assert_eq!(record.base_round, 0);
        assert!(client.is_idle());
    }

    #[test]
    fn single_epoch_round_uploads_at_first_boundary() {
        let mut client = constant_client(3.0, 1.0);
        let event = client.begin_round(dummy_trajectory(1), 2, 10.0).unwrap();
        assert_eq!(event.time, 14.0);
        match client.complete_epoch(event.time, 0.0).unwrap() {
            EpochOutcome::Upload(up) => assert_eq!(up.time, 14.0),
            other => panic!("expected upload, got {other:?}"),
        }
    }

    #[test]
    fn dispatch_while_training_is_a_protocol_error() {
        let mut client = constant_client(1.0, 0.0);
        client.begin_round(dummy_trajectory(2), 0, 0.0).unwrap();
        assert!(matches!(
            client.begin_round(dummy_trajectory(2), 1, 5.0),
            Err(SimError::Protocol(_))
        ));
    }

    #[test]
    fn notification_cuts_after_current_epoch() {
        let mut client = constant_client(2.0, 0.0);
        let e1 = client.begin_round(dummy_trajectory(5), 0, 0.0).unwrap();
        let e2 = match client.complete_epoch(e1.time, 0.0).unwrap() {
            EpochOutcome::Continue(e) => e,
            other => panic!("unexpected {other:?}"),
        };
        // Notified during epoch 2 of 5.
        assert_eq!(client.handle_notification(), NotifyOutcome::WillUploadEarly);
        // Second notification in the same round is idempotent.
        assert_eq!(client.handle_notification(), NotifyOutcome::Ignored);
        match client.complete_epoch(e2.time, 0.0).unwrap() {
            EpochOutcome::Upload(up) => {
                assert_eq!(up.time, 4.0);
                let record = client.take_upload().unwrap();
                assert_eq!(record.epochs_completed, 2);
            }
            other => panic!("expected upload, got {other:?}"),
        }
    }

    #[test]
    fn notification_during_final_epoch_changes_nothing() {
        let mut client = constant_client(1.0, 0.0);
        let mut event = client.begin_round(dummy_trajectory(2), 0, 0.0).unwrap();
        event = match client.complete_epoch(event.time, 0.0).unwrap() {
            EpochOutcome::Continue(e) => e,
            other => panic!("unexpected {other:?}"),
        };
        client.handle_notification();
        match client.complete_epoch(event.time, 0.0).unwrap() {
            EpochOutcome::Upload(up) => assert_eq!(up.time, 2.0),
            other => panic!("expected upload, got {other:?}"),
        }
        assert_eq!(client.take_upload().unwrap().epochs_completed, 2);
    }

    #[test]
    fn notification_when_idle_is_ignored() {
        let mut client = constant_client(1.0, 0.0);
        assert_eq!(client.handle_notification(), NotifyOutcome::Ignored);
    }

    #[test]
    fn client_round_trace_is_reproducible() {
        let data = gen_synthetic(3, 4, 24, 1.5, 5).unwrap();
        let spec = ModelSpec::logistic(4, 3);
        let global = init_model(&spec, 9);
        let speed = SpeedModel {
            idle: IdleModel::Pareto { shape: 1.5, scale: 1.0 },
            base_epoch_time: 2.0,
        };

        let run = |_: u64| -> (Vec<f64>, ParamVector) {
            let mut client = ClientState::new(4, data.clone(), speed, 2.0, 77);
            let cfg = TrainConfig {
                epochs: 3,
                learning_rate: 0.1,
                batch_size: 8,
                seed: client.next_train_seed(),
            };
            let trajectory = train_trajectory(&spec, &global, &data, &cfg).unwrap();
            let mut times = Vec::new();
            let mut event = client.begin_round(trajectory, 0, 0.0).unwrap();
            loop {
                times.push(event.time);
                match client.complete_epoch(event.time, 0.0).unwrap() {
                    EpochOutcome::Continue(e) => event = e,
                    EpochOutcome::Upload(up) => {
                        times.push(up.time);
                        break;
                    }
                }
            }
            (times, client.take_upload().unwrap().params)
        };

        let (t1, p1) = run(0);
        let (t2, p2) = run(1);
        assert_eq!(t1, t2);
        assert_eq!(p1, p2);
        // Arrival must cover at least epochs * compute time.
        assert!(*t1.last().unwrap() >= 3.0 * 2.0);
    }
}
