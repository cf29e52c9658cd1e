use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use super::network::Network;
use super::server::Server;
use super::worker::Worker;
use super::{ClusterConfig, Mode, TrainOptions, TrainState, TrafficMeter};
use crate::data::{ImageFeatureStore, Sample};
use crate::error::{Error, Result};
use crate::numerics::LrSchedule;

/// Test hook: make one worker skip its first barrier of an iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    DropBarrier { iteration: u64, worker: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationStats {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    pub samples: usize,
    /// Distinct image ids in the union batch.
    pub unique_images: usize,
    /// Image references before any deduplication.
    pub image_refs: usize,
    /// Embedding forwards per server.
    pub embed_forwards: Vec<usize>,
    /// Parameter fingerprint of each server's image model after the update.
    pub replica_fingerprints: Vec<u32>,
    /// Parameter fingerprint of each worker's head after the update.
    pub head_fingerprints: Vec<u32>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub iterations: Vec<IterationStats>,
    pub meter: TrafficMeter,
}

/// M workers and N servers connected by a [`Network`].
#[derive(Debug)]
pub struct Cluster {
    pub config: ClusterConfig,
    pub workers: Vec<Worker>,
    pub servers: Vec<Server>,
    pub net: Network,
    template: TrainState,
    iteration: u64,
    fault: Option<Fault>,
}

impl Cluster {
    /// Distributes `state` over the nodes. Only [`Mode::Ams`] trains; the
    /// other modes exist for accounting.
    pub fn new(config: ClusterConfig, state: TrainState, store: &ImageFeatureStore) -> Result<Self> {
        config.validate()?;
        if config.mode != Mode::Ams {
            return Err(Error::Config(format!(
                "mode `{}` is accounting-only; training runs in `ams` mode",
                config.mode.name()
            )));
        }
        let workers = (0..config.workers)
            .map(|r| {
                Worker::new(
                    r,
                    state.model.config.clone(),
                    state.model.head.clone(),
                    state.head_opt.clone(),
                    config.servers,
                )
            })
            .collect();
        let servers = (0..config.servers)
            .map(|s| {
                Server::new(
                    s,
                    config.servers,
                    config.workers,
                    &state.model,
                    state.image_opt.clone(),
                    store,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            net: Network::new(config.workers, config.servers),
            iteration: state.iteration,
            config,
            workers,
            servers,
            template: state,
            fault: None,
        })
    }

    pub fn inject(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    fn order(&self, n: usize) -> Vec<usize> {
        let mut o: Vec<usize> = (0..n).collect();
        if !self.config.deterministic {
            o.shuffle(&mut rand::thread_rng());
        }
        o
    }

    /// One synchronous iteration on a union batch. Worker `r` takes the
    /// `r`-th slice of `batch_per_worker` samples; trailing workers may get
    /// fewer or none.
    pub fn step(&mut self, batch: &[&Sample], lr: f64) -> Result<IterationStats> {
        if batch.len() > self.config.global_batch() {
            return Err(Error::Contract(format!(
                "union batch of {} exceeds {} workers × {}",
                batch.len(),
                self.config.workers,
                self.config.batch_per_worker
            )));
        }
        let t = self.iteration;
        let mut shards: Vec<Vec<Sample>> = batch
            .chunks(self.config.batch_per_worker)
            .map(|c| c.iter().map(|s| (*s).clone()).collect())
            .collect();
        shards.resize_with(self.config.workers, Vec::new);

        let model_config = &self.template.model.config;
        let mut unique = BTreeSet::new();
        let mut image_refs = 0;
        for s in batch {
            let imgs = model_config.required_images(s);
            image_refs += imgs.len();
            unique.extend(imgs);
        }

        for r in self.order(self.config.workers) {
            let drop = self.fault == Some(Fault::DropBarrier { iteration: t, worker: r });
            let shard = std::mem::take(&mut shards[r]);
            self.workers[r].request(&mut self.net, t, shard, !drop)?;
        }
        for s in self.order(self.config.servers) {
            self.servers[s].serve(&mut self.net, t)?;
        }
        for r in self.order(self.config.workers) {
            self.workers[r].compute(&mut self.net, t, batch.len())?;
        }
        self.workers[0].reduce(&mut self.net, t, self.config.workers)?;
        for r in self.order(self.config.workers) {
            self.workers[r].apply(&mut self.net, t, lr)?;
        }
        for s in self.order(self.config.servers) {
            self.servers[s].update(&mut self.net, t, lr)?;
        }
        self.servers[0].reduce(&mut self.net, t)?;
        for s in self.order(self.config.servers) {
            self.servers[s].apply(&mut self.net, t, lr)?;
        }
        if self.net.pending() != 0 {
            return Err(Error::Protocol(format!(
                "{} undelivered message(s) after iteration {t}",
                self.net.pending()
            )));
        }
        self.iteration += 1;

        Ok(IterationStats {
            iteration: t,
            loss: self.workers.iter().map(Worker::loss).sum(),
            lr,
            samples: batch.len(),
            unique_images: unique.len(),
            image_refs,
            embed_forwards: self.servers.iter().map(Server::forwards).collect(),
            replica_fingerprints: self
                .servers
                .iter()
                .map(|s| s.model.params.fingerprint())
                .collect(),
            head_fingerprints: self
                .workers
                .iter()
                .map(|w| w.head.params().fingerprint())
                .collect(),
        })
    }

    /// Reassembles the full model: head from worker 0, image model from
    /// server 0 and ID rows from their owners.
    pub fn state(&self) -> TrainState {
        let mut st = self.template.clone();
        st.model.head = self.workers[0].head.clone();
        st.head_opt = self.workers[0].opt.clone();
        st.model.image = self.servers[0].model.clone();
        st.image_opt = self.servers[0].opt.clone();
        for s in &self.servers {
            s.write_rows(&mut st.model.id_tables);
        }
        st.iteration = self.iteration;
        st
    }
}

/// Trains `state` on `samples` for `options.epochs` epochs.
pub fn run_training(
    config: &ClusterConfig,
    state: TrainState,
    samples: &[Sample],
    store: &ImageFeatureStore,
    options: &TrainOptions,
) -> Result<(TrainState, TrainReport)> {
    let mut cluster = Cluster::new(config.clone(), state, store)?;
    let schedule: LrSchedule = options.schedule;
    let mut iterations = Vec::new();
    for batch in options.schedule_batches(samples, config.global_batch()) {
        let lr = schedule.at(cluster.iteration());
        iterations.push(cluster.step(&batch, lr)?);
    }
    let state = cluster.state();
    Ok((
        state,
        TrainReport {
            iterations,
            meter: cluster.net.meter,
        },
    ))
}
