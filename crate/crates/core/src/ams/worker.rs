use std::collections::{BTreeMap, BTreeSet};

use super::message::{Body, Message};
use super::network::{Network, NodeId};
use super::shard_of;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{batch_loss, Head, MapImages, MapRows, ModelConfig, HEAD_STORE};
use crate::numerics::{AdamState, Graph, Tensor};

/// A worker: a head replica, its Adam state and the current batch shard.
#[derive(Clone, Debug)]
pub struct Worker {
    pub id: usize,
    pub head: Head,
    pub opt: AdamState,
    config: ModelConfig,
    servers: usize,
    batch: Vec<Sample>,
    grads: Vec<Tensor>,
    loss: f64,
    /// Sync messages that arrived while the root was still computing.
    early: Vec<(NodeId, Message)>,
}

impl Worker {
    pub fn new(id: usize, config: ModelConfig, head: Head, opt: AdamState, servers: usize) -> Self {
        Self {
            id,
            grads: head.params().zero_grads(),
            head,
            opt,
            config,
            servers,
            batch: Vec::new(),
            loss: 0.0,
            early: Vec::new(),
        }
    }

    fn node(&self) -> NodeId {
        NodeId::Worker(self.id)
    }

    /// This worker's share of the last iteration's mean loss.
    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// Head gradient of the last iteration, before the all-reduce.
    pub fn local_grads(&self) -> &[Tensor] {
        &self.grads
    }

    /// Takes a batch shard and sends pulls, embedding requests and a barrier
    /// to every server. A server that owns nothing in the batch only gets
    /// the barrier.
    pub fn request(
        &mut self,
        net: &mut Network,
        iteration: u64,
        batch: Vec<Sample>,
        send_barrier: bool,
    ) -> Result<()> {
        self.batch = batch;
        let mut keys = BTreeSet::new();
        let mut images = BTreeSet::new();
        for s in &self.batch {
            keys.extend(self.config.required_rows(s)?);
            images.extend(self.config.required_images(s));
        }
        let mut key_shards = vec![Vec::new(); self.servers];
        for k in keys {
            key_shards[shard_of(k.pack(), self.servers)].push(k);
        }
        let mut image_shards = vec![Vec::new(); self.servers];
        for i in images {
            image_shards[shard_of(u64::from(i), self.servers)].push(i);
        }
        for (s, (keys, images)) in key_shards.into_iter().zip(image_shards).enumerate() {
            let to = NodeId::Server(s);
            if !keys.is_empty() {
                net.send(self.node(), to, &Message::new(iteration, self.id, Body::IdParamPull(keys)))?;
            }
            if !images.is_empty() {
                net.send(
                    self.node(),
                    to,
                    &Message::new(iteration, self.id, Body::EmbedRequest(images)),
                )?;
            }
            if send_barrier {
                net.send(self.node(), to, &Message::new(iteration, self.id, Body::Barrier))?;
            }
        }
        Ok(())
    }

    /// Receives embeddings and rows, runs forward/backward on the batch
    /// shard, pushes embedding and row gradients to their owners and ships
    /// the head gradient towards worker 0.
    pub fn compute(&mut self, net: &mut Network, iteration: u64, global_batch: usize) -> Result<()> {
        let mut embeddings = BTreeMap::new();
        let mut rows = BTreeMap::new();
        for (from, msg) in net.drain(self.node())? {
            check_iteration(&msg, iteration, self.node())?;
            if self.id == 0 && matches!(msg.body, Body::WorkerSync(_)) {
                self.early.push((from, msg));
                continue;
            }
            match msg.body {
                Body::EmbedResponse(m) => {
                    for (id, e) in m {
                        if e.len() != self.config.schema.image_dim {
                            return Err(Error::Protocol(format!(
                                "embedding for image {id} from {from} has {} values, expected {}",
                                e.len(),
                                self.config.schema.image_dim
                            )));
                        }
                        embeddings.insert(id, e);
                    }
                }
                Body::IdParamValues(m) => rows.extend(m),
                other => {
                    return Err(Error::Protocol(format!(
                        "{} got unexpected {} from {from}",
                        self.node(),
                        other.name()
                    )))
                }
            }
        }

        let mut g = Graph::new();
        let head_vars = self.head.params().bind(&mut g, HEAD_STORE);
        let mut row_src = MapRows::new(&rows, true);
        let mut image_src = MapImages::new(&embeddings, true);
        let batch: Vec<&Sample> = self.batch.iter().collect();
        let loss = batch_loss(
            &mut g,
            &self.config,
            &self.head,
            &head_vars,
            &batch,
            &mut row_src,
            &mut image_src,
            global_batch,
        )?;

        let mut grads = self.head.params().zero_grads();
        let mut image_grads = vec![BTreeMap::new(); self.servers];
        let mut row_grads = vec![BTreeMap::new(); self.servers];
        self.loss = 0.0;
        if let Some(loss) = loss {
            self.loss = g.value(loss).data()[0];
            let back = g.backward(loss)?;
            self.head.params().accumulate(&back, HEAD_STORE, &mut grads)?;
            let d_img = self.config.schema.image_dim;
            for (&id, &v) in &image_src.vars {
                let d = back
                    .get(v)
                    .map_or_else(|| vec![0.0; d_img], |t| t.data().to_vec());
                image_grads[shard_of(u64::from(id), self.servers)].insert(id, d);
            }
            let d_id = self.config.schema.id_dim;
            for (&key, &v) in &row_src.vars {
                let d = back
                    .get(v)
                    .map_or_else(|| vec![0.0; d_id], |t| t.data().to_vec());
                row_grads[shard_of(key.pack(), self.servers)].insert(key, d);
            }
        }
        self.grads = grads;

        for (s, (img, rows)) in image_grads.into_iter().zip(row_grads).enumerate() {
            let to = NodeId::Server(s);
            if !img.is_empty() {
                net.send(self.node(), to, &Message::new(iteration, self.id, Body::EmbedGradPush(img)))?;
            }
            if !rows.is_empty() {
                net.send(self.node(), to, &Message::new(iteration, self.id, Body::IdParamPush(rows)))?;
            }
            net.send(self.node(), to, &Message::new(iteration, self.id, Body::Barrier))?;
        }
        if self.id != 0 {
            let payload = self.grads.iter().map(|t| t.data().to_vec()).collect();
            net.send(
                self.node(),
                NodeId::Worker(0),
                &Message::new(iteration, self.id, Body::WorkerSync(payload)),
            )?;
        }
        Ok(())
    }

    /// Root only: sums every worker's head gradient in ascending worker
    /// order and broadcasts the result.
    pub fn reduce(&mut self, net: &mut Network, iteration: u64, workers: usize) -> Result<()> {
        let mut parts: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
        parts.insert(0, self.grads.iter().map(|t| t.data().to_vec()).collect());
        let mut incoming = std::mem::take(&mut self.early);
        incoming.extend(net.drain(self.node())?);
        for (from, msg) in incoming {
            check_iteration(&msg, iteration, self.node())?;
            match msg.body {
                Body::WorkerSync(p) => {
                    if parts.insert(msg.sender, p).is_some() {
                        return Err(Error::Protocol(format!("duplicate WorkerSync from {from}")));
                    }
                }
                other => {
                    return Err(Error::Protocol(format!(
                        "worker 0 got unexpected {} from {from}",
                        other.name()
                    )))
                }
            }
        }
        if parts.len() != workers {
            return Err(Error::BarrierTimeout {
                iteration,
                node: self.node().to_string(),
                missing: workers - parts.len(),
            });
        }
        let mut sum = self.head.params().zero_grads();
        for part in parts.values() {
            add_flat(&mut sum, part)?;
        }
        let payload: Vec<Vec<f64>> = sum.iter().map(|t| t.data().to_vec()).collect();
        for w in 1..workers {
            net.send(
                self.node(),
                NodeId::Worker(w),
                &Message::new(iteration, self.id, Body::WorkerSync(payload.clone())),
            )?;
        }
        self.grads = sum;
        Ok(())
    }

    /// Applies the all-reduced head gradient.
    pub fn apply(&mut self, net: &mut Network, iteration: u64, lr: f64) -> Result<()> {
        if self.id != 0 {
            let mut got = None;
            for (from, msg) in net.drain(self.node())? {
                check_iteration(&msg, iteration, self.node())?;
                match msg.body {
                    Body::WorkerSync(p) if msg.sender == 0 && got.is_none() => got = Some(p),
                    other => {
                        return Err(Error::Protocol(format!(
                            "{} got unexpected {} from {from}",
                            self.node(),
                            other.name()
                        )))
                    }
                }
            }
            let p = got.ok_or_else(|| Error::BarrierTimeout {
                iteration,
                node: self.node().to_string(),
                missing: 1,
            })?;
            let mut sum = self.head.params().zero_grads();
            add_flat(&mut sum, &p)?;
            self.grads = sum;
        }
        self.opt
            .step(self.head.params_mut().tensors_mut(), &self.grads, lr)
    }
}

pub(super) fn check_iteration(msg: &Message, iteration: u64, node: NodeId) -> Result<()> {
    if msg.iteration != iteration {
        return Err(Error::Protocol(format!(
            "{node} in iteration {iteration} got {} stamped {}",
            msg.body.name(),
            msg.iteration
        )));
    }
    Ok(())
}

pub(super) fn add_flat(acc: &mut [Tensor], part: &[Vec<f64>]) -> Result<()> {
    if acc.len() != part.len() {
        return Err(Error::Protocol(format!(
            "gradient has {} tensors, expected {}",
            part.len(),
            acc.len()
        )));
    }
    for (t, p) in acc.iter_mut().zip(part) {
        if t.len() != p.len() {
            return Err(Error::Dimension {
                op: "gradient sync",
                left: t.shape().to_vec(),
                right: vec![p.len()],
            });
        }
        for (a, b) in t.data_mut().iter_mut().zip(p) {
            *a += b;
        }
    }
    Ok(())
}
