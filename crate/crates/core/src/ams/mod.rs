//! The Advanced Model Server runtime.
//!
//! Workers hold the head (MLP and aggregator) and compute on disjoint shards
//! of each mini-batch. Servers hold a shard of the image store, a shard of
//! the ID embedding rows and a full replica of the image embedding model.
//! Per iteration, workers ask servers for image embeddings instead of raw
//! features; each server embeds every requested image once, however many
//! workers asked for it, and later backpropagates the summed embedding
//! gradients through its cached activations. Model gradients are all-reduced
//! by gather-sum-broadcast in ascending node order, so every replica applies
//! the same Adam step and stays bit-identical.
//!
//! Nodes are actors that only talk through serialized frames on a
//! [`Network`]; a scheduler drives them through barrier-separated phases.

mod accounting;
mod cluster;
mod message;
mod network;
mod reference;
mod server;
mod worker;

pub use accounting::{accounting, AccountingInput, BatchStats, ModeReport, StorageReport};
pub use cluster::{run_training, Cluster, Fault, IterationStats, TrainReport};
pub use message::{Body, Category, Message};
pub use network::{Direction, Network, NodeId, NodeKind, TrafficMeter};
pub use reference::ReferenceTrainer;
pub use server::Server;
pub use worker::Worker;

use serde::{Deserialize, Serialize};

use crate::data::{minibatches, Sample};
use crate::error::{Error, Result};
use crate::model::{splitmix64, CtrModel};
use crate::numerics::{AdamConfig, AdamState, LrSchedule};

/// Where image data lives and what crosses the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Servers store images and run the embedding model.
    Ams,
    /// Servers store images; workers fetch raw features.
    PsStoreInServer,
    /// Workers store raw features inline with the samples.
    StoreInWorker,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::StoreInWorker, Mode::PsStoreInServer, Mode::Ams];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Ams => "ams",
            Mode::PsStoreInServer => "ps-store-in-server",
            Mode::StoreInWorker => "store-in-worker",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub workers: usize,
    pub servers: usize,
    pub mode: Mode,
    pub batch_per_worker: usize,
    /// Process nodes in ascending id order within each phase. Results do
    /// not depend on it because every reduction is ordered by sender.
    pub deterministic: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            servers: 2,
            mode: Mode::Ams,
            batch_per_worker: 64,
            deterministic: true,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 || self.servers == 0 {
            return Err(Error::Config(format!(
                "cluster needs at least one worker and one server, got {} and {}",
                self.workers, self.servers
            )));
        }
        if self.batch_per_worker == 0 {
            return Err(Error::Config("batch_per_worker must be at least 1".into()));
        }
        Ok(())
    }

    pub fn global_batch(&self) -> usize {
        self.workers * self.batch_per_worker
    }
}

/// Stable owner of a key among `servers` shards.
pub fn shard_of(key: u64, servers: usize) -> usize {
    assert!(servers >= 1, "shard_of needs at least one server");
    (splitmix64(key) % servers as u64) as usize
}

/// Optimizer settings and iteration budget for a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// Seed of the per-epoch shuffle.
    pub shuffle_seed: u64,
    /// Stops early after this many iterations.
    pub max_iterations: Option<u64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 1,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            shuffle_seed: 0,
            max_iterations: None,
        }
    }
}

impl TrainOptions {
    /// Union batches for every iteration of the run, in order.
    pub fn schedule_batches<'a>(
        &self,
        samples: &'a [Sample],
        global_batch: usize,
    ) -> Vec<Vec<&'a Sample>> {
        let mut out = Vec::new();
        for epoch in 0..self.epochs {
            for idx in minibatches(samples.len(), global_batch, self.shuffle_seed, epoch as u64) {
                if self.max_iterations.is_some_and(|m| out.len() as u64 >= m) {
                    return out;
                }
                out.push(idx.into_iter().map(|i| &samples[i]).collect());
            }
        }
        out
    }
}

/// A model together with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: CtrModel,
    pub head_opt: AdamState,
    pub image_opt: AdamState,
    /// Completed iterations; ID rows use it as their Adam step.
    pub iteration: u64,
}

impl TrainState {
    pub fn new(model: CtrModel, adam: AdamConfig) -> Self {
        Self {
            head_opt: AdamState::new(model.head.params().tensors(), adam),
            image_opt: AdamState::new(model.image.params.tensors(), adam),
            model,
            iteration: 0,
        }
    }
}
