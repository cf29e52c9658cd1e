use std::collections::{BTreeMap, BTreeSet};

use super::message::{Body, Message};
use super::network::{Network, NodeId};
use super::shard_of;
use super::worker::{add_flat, check_iteration};
use crate::data::ImageFeatureStore;
use crate::error::{Error, Result};
use crate::model::{CtrModel, FixedExtractor, IdKey, IdTables, ImageActivations, ImageEmbeddingModel};
use crate::numerics::{adam_update, AdamConfig, AdamState, Tensor};

/// One ID embedding row with its Adam moments.
#[derive(Clone, Debug, PartialEq)]
struct ShardRow {
    value: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// A server: image and ID-row shards plus a replica of the image model.
#[derive(Clone, Debug)]
pub struct Server {
    pub id: usize,
    pub model: ImageEmbeddingModel,
    pub opt: AdamState,
    servers: usize,
    workers: usize,
    extractor: FixedExtractor,
    images: BTreeMap<u32, Vec<f32>>,
    rows: BTreeMap<IdKey, ShardRow>,
    row_adam: AdamConfig,
    cache: BTreeMap<u32, ImageActivations>,
    forwards: usize,
    grads: Vec<Tensor>,
    early: Vec<(NodeId, Message)>,
}

impl Server {
    /// Copies this server's shards out of a full model and image store.
    pub fn new(
        id: usize,
        servers: usize,
        workers: usize,
        model: &CtrModel,
        opt: AdamState,
        store: &ImageFeatureStore,
    ) -> Result<Self> {
        let mut images = BTreeMap::new();
        for i in 0..store.len() as u32 {
            if shard_of(u64::from(i), servers) == id {
                images.insert(i, store.latent(i)?.to_vec());
            }
        }
        let mut rows = BTreeMap::new();
        let t = &model.id_tables;
        for (f, table) in t.tables.iter().enumerate() {
            for r in 0..table.shape()[0] {
                let key = IdKey {
                    field: f as u32,
                    id: r as u32,
                };
                if shard_of(key.pack(), servers) == id {
                    rows.insert(
                        key,
                        ShardRow {
                            value: table.row(r).to_vec(),
                            m: t.m[f].row(r).to_vec(),
                            v: t.v[f].row(r).to_vec(),
                        },
                    );
                }
            }
        }
        Ok(Self {
            id,
            grads: model.image.params.zero_grads(),
            row_adam: opt.config,
            model: model.image.clone(),
            opt,
            servers,
            workers,
            extractor: model.extractor.clone(),
            images,
            rows,
            cache: BTreeMap::new(),
            forwards: 0,
            early: Vec::new(),
        })
    }

    fn node(&self) -> NodeId {
        NodeId::Server(self.id)
    }

    /// Embedding forwards run in the last iteration.
    pub fn forwards(&self) -> usize {
        self.forwards
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    /// Copies the owned rows and their moments into full tables.
    pub fn write_rows(&self, tables: &mut IdTables) {
        for (k, r) in &self.rows {
            let (f, i) = (k.field as usize, k.id as usize);
            tables.tables[f].row_mut(i).copy_from_slice(&r.value);
            tables.m[f].row_mut(i).copy_from_slice(&r.m);
            tables.v[f].row_mut(i).copy_from_slice(&r.v);
        }
    }

    fn owns_image(&self, image: u32) -> Result<()> {
        let owner = shard_of(u64::from(image), self.servers);
        if owner != self.id {
            return Err(Error::Routing {
                key: u64::from(image),
                owner,
                server: self.id,
            });
        }
        Ok(())
    }

    fn owns_key(&self, key: IdKey) -> Result<()> {
        let owner = shard_of(key.pack(), self.servers);
        if owner != self.id {
            return Err(Error::Routing {
                key: key.pack(),
                owner,
                server: self.id,
            });
        }
        Ok(())
    }

    fn barrier_check(&self, iteration: u64, barriers: &BTreeSet<u32>) -> Result<()> {
        if barriers.len() < self.workers {
            return Err(Error::BarrierTimeout {
                iteration,
                node: self.node().to_string(),
                missing: self.workers - barriers.len(),
            });
        }
        Ok(())
    }

    /// Answers pulls and embedding requests. Every requested image is
    /// embedded once, however many workers asked for it.
    pub fn serve(&mut self, net: &mut Network, iteration: u64) -> Result<()> {
        let mut barriers = BTreeSet::new();
        let mut pulls = Vec::new();
        let mut requests = Vec::new();
        for (from, msg) in net.drain(self.node())? {
            check_iteration(&msg, iteration, self.node())?;
            match msg.body {
                Body::Barrier => {
                    barriers.insert(msg.sender);
                }
                Body::IdParamPull(keys) => pulls.push((from, keys)),
                Body::EmbedRequest(ids) => requests.push((from, ids)),
                other => {
                    return Err(Error::Protocol(format!(
                        "{} got unexpected {} from {from}",
                        self.node(),
                        other.name()
                    )))
                }
            }
        }
        self.barrier_check(iteration, &barriers)?;

        let mut unique = BTreeSet::new();
        for (_, ids) in &requests {
            for &id in ids {
                self.owns_image(id)?;
                unique.insert(id);
            }
        }
        self.cache.clear();
        let mut embeddings = BTreeMap::new();
        for id in unique {
            let latent = self
                .images
                .get(&id)
                .ok_or(Error::UnknownImage(u64::from(id)))?;
            let raw = self.extractor.from_latent(latent)?;
            let (e, acts) = self.model.forward_cached(&raw)?;
            self.cache.insert(id, acts);
            embeddings.insert(id, e);
        }
        self.forwards = embeddings.len();

        for (to, ids) in requests {
            let reply = ids.iter().map(|id| (*id, embeddings[id].clone())).collect();
            net.send(
                self.node(),
                to,
                &Message::new(iteration, self.id, Body::EmbedResponse(reply)),
            )?;
        }
        for (to, keys) in pulls {
            let mut reply = BTreeMap::new();
            for k in keys {
                self.owns_key(k)?;
                let row = self.rows.get(&k).ok_or_else(|| {
                    Error::Protocol(format!("{} has no row for {k:?}", self.node()))
                })?;
                reply.insert(k, row.value.clone());
            }
            net.send(
                self.node(),
                to,
                &Message::new(iteration, self.id, Body::IdParamValues(reply)),
            )?;
        }
        Ok(())
    }

    /// Sums pushed gradients by key in ascending worker order, updates the
    /// owned ID rows, backpropagates embedding gradients through the cached
    /// activations and ships the local model gradient to server 0.
    pub fn update(&mut self, net: &mut Network, iteration: u64, lr: f64) -> Result<()> {
        let mut barriers = BTreeSet::new();
        let mut image_pushes = BTreeMap::new();
        let mut row_pushes = BTreeMap::new();
        for (from, msg) in net.drain(self.node())? {
            check_iteration(&msg, iteration, self.node())?;
            match msg.body {
                Body::Barrier => {
                    barriers.insert(msg.sender);
                }
                Body::EmbedGradPush(m) => {
                    image_pushes.insert(msg.sender, m);
                }
                Body::IdParamPush(m) => {
                    row_pushes.insert(msg.sender, m);
                }
                Body::ServerSync(_) if self.id == 0 => self.early.push((from, msg)),
                other => {
                    return Err(Error::Protocol(format!(
                        "{} got unexpected {} from {from}",
                        self.node(),
                        other.name()
                    )))
                }
            }
        }
        self.barrier_check(iteration, &barriers)?;

        let d_img = self.model.output_dim();
        let mut deltas: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for push in image_pushes.into_values() {
            for (id, d) in push {
                if d.len() != d_img {
                    return Err(Error::Protocol(format!(
                        "gradient for image {id} has {} values, expected {d_img}",
                        d.len()
                    )));
                }
                let acc = deltas.entry(id).or_insert_with(|| vec![0.0; d_img]);
                acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            }
        }
        let mut grads = self.model.params.zero_grads();
        for (id, delta) in &deltas {
            let acts = self.cache.get(id).ok_or_else(|| {
                Error::Protocol(format!("gradient pushed for image {id} that was not served"))
            })?;
            self.model.backward_cached(acts, delta, &mut grads);
        }
        self.grads = grads;
        self.cache.clear();

        let mut row_sums: BTreeMap<IdKey, Vec<f64>> = BTreeMap::new();
        for push in row_pushes.into_values() {
            for (k, d) in push {
                self.owns_key(k)?;
                let row = self
                    .rows
                    .get(&k)
                    .ok_or_else(|| Error::Protocol(format!("{} has no row for {k:?}", self.node())))?;
                if d.len() != row.value.len() {
                    return Err(Error::Protocol(format!(
                        "gradient for {k:?} has {} values, expected {}",
                        d.len(),
                        row.value.len()
                    )));
                }
                let acc = row_sums.entry(k).or_insert_with(|| vec![0.0; d.len()]);
                acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            }
        }
        if let Some((k, _)) = row_sums.iter().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of id row {k:?}")));
        }
        for (k, g) in &row_sums {
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let row = self.rows.get_mut(k).expect("checked above");
            adam_update(
                &mut row.value,
                g,
                &mut row.m,
                &mut row.v,
                lr,
                iteration + 1,
                &self.row_adam,
            );
        }

        if self.id != 0 {
            let payload = self.grads.iter().map(|t| t.data().to_vec()).collect();
            net.send(
                self.node(),
                NodeId::Server(0),
                &Message::new(iteration, self.id, Body::ServerSync(payload)),
            )?;
        }
        Ok(())
    }

    /// Root only: sums model gradients in ascending server order and
    /// broadcasts the result.
    pub fn reduce(&mut self, net: &mut Network, iteration: u64) -> Result<()> {
        let mut parts: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
        parts.insert(0, self.grads.iter().map(|t| t.data().to_vec()).collect());
        let mut incoming = std::mem::take(&mut self.early);
        incoming.extend(net.drain(self.node())?);
        for (from, msg) in incoming {
            check_iteration(&msg, iteration, self.node())?;
            match msg.body {
                Body::ServerSync(p) => {
                    if parts.insert(msg.sender, p).is_some() {
                        return Err(Error::Protocol(format!("duplicate ServerSync from {from}")));
                    }
                }
                other => {
                    return Err(Error::Protocol(format!(
                        "server 0 got unexpected {} from {from}",
                        other.name()
                    )))
                }
            }
        }
        if parts.len() != self.servers {
            return Err(Error::BarrierTimeout {
                iteration,
                node: self.node().to_string(),
                missing: self.servers - parts.len(),
            });
        }
        let mut sum = self.model.params.zero_grads();
        for part in parts.values() {
            add_flat(&mut sum, part)?;
        }
        let payload: Vec<Vec<f64>> = sum.iter().map(|t| t.data().to_vec()).collect();
        for s in 1..self.servers {
            net.send(
                self.node(),
                NodeId::Server(s),
                &Message::new(iteration, self.id, Body::ServerSync(payload.clone())),
            )?;
        }
        self.grads = sum;
        Ok(())
    }

    /// Applies the all-reduced model gradient to this replica.
    pub fn apply(&mut self, net: &mut Network, iteration: u64, lr: f64) -> Result<()> {
        if self.id != 0 {
            let mut got = None;
            for (from, msg) in net.drain(self.node())? {
                check_iteration(&msg, iteration, self.node())?;
                match msg.body {
                    Body::ServerSync(p) if msg.sender == 0 && got.is_none() => got = Some(p),
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
            let mut sum = self.model.params.zero_grads();
            add_flat(&mut sum, &p)?;
            self.grads = sum;
        }
        self.opt.step(self.model.params.tensors_mut(), &self.grads, lr)
    }
}
