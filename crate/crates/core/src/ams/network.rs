//! In-process message channels and the traffic meter.

use std::collections::{BTreeMap, VecDeque};

use super::message::{Category, Message};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Worker(usize),
    Server(usize),
}

impl NodeId {
    pub fn kind(self) -> NodeKind {
        match self {
            NodeId::Worker(_) => NodeKind::Worker,
            NodeId::Server(_) => NodeKind::Server,
        }
    }

    pub fn index(self) -> usize {
        match self {
            NodeId::Worker(i) | NodeId::Server(i) => i,
        }
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeId::Worker(i) => write!(f, "worker {i}"),
            NodeId::Server(i) => write!(f, "server {i}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    Worker,
    Server,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Sent,
    Received,
}

/// Byte counters keyed by node group, category and direction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrafficMeter {
    totals: BTreeMap<(NodeKind, Category, Direction), u64>,
    per_iteration: Vec<BTreeMap<Category, u64>>,
    messages: u64,
}

impl TrafficMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, from: NodeId, to: NodeId, iteration: u64, category: Category, bytes: u64) {
        *self
            .totals
            .entry((from.kind(), category, Direction::Sent))
            .or_default() += bytes;
        *self
            .totals
            .entry((to.kind(), category, Direction::Received))
            .or_default() += bytes;
        let it = iteration as usize;
        if self.per_iteration.len() <= it {
            self.per_iteration.resize_with(it + 1, BTreeMap::new);
        }
        *self.per_iteration[it].entry(category).or_default() += bytes;
        self.messages += 1;
    }

    pub fn bytes(&self, kind: NodeKind, category: Category, direction: Direction) -> u64 {
        self.totals
            .get(&(kind, category, direction))
            .copied()
            .unwrap_or(0)
    }

    /// Bytes that crossed the wire in `category`, counting each message once.
    pub fn category_total(&self, category: Category) -> u64 {
        [NodeKind::Worker, NodeKind::Server]
            .iter()
            .map(|&k| self.bytes(k, category, Direction::Sent))
            .sum()
    }

    pub fn iteration(&self, iteration: u64) -> BTreeMap<Category, u64> {
        self.per_iteration
            .get(iteration as usize)
            .cloned()
            .unwrap_or_default()
    }

    pub fn iterations(&self) -> usize {
        self.per_iteration.len()
    }

    pub fn message_count(&self) -> u64 {
        self.messages
    }
}

/// Ordered per-node inboxes of serialized frames.
#[derive(Debug)]
pub struct Network {
    workers: Vec<VecDeque<(NodeId, Vec<u8>)>>,
    servers: Vec<VecDeque<(NodeId, Vec<u8>)>>,
    pub meter: TrafficMeter,
}

impl Network {
    pub fn new(workers: usize, servers: usize) -> Self {
        Self {
            workers: vec![VecDeque::new(); workers],
            servers: vec![VecDeque::new(); servers],
            meter: TrafficMeter::new(),
        }
    }

    fn inbox(&mut self, node: NodeId) -> Result<&mut VecDeque<(NodeId, Vec<u8>)>> {
        let q = match node {
            NodeId::Worker(i) => self.workers.get_mut(i),
            NodeId::Server(i) => self.servers.get_mut(i),
        };
        q.ok_or_else(|| Error::Protocol(format!("no such node: {node}")))
    }

    /// Serializes and enqueues `message`, metering its wire size.
    pub fn send(&mut self, from: NodeId, to: NodeId, message: &Message) -> Result<()> {
        let frame = message.encode()?;
        let bytes = Message::metered_len(frame.len(), &message.body);
        self.inbox(to)?.push_back((from, frame));
        self.meter
            .record(from, to, message.iteration, message.body.category(), bytes);
        Ok(())
    }

    /// Decodes and removes every pending message for `node`, in arrival order.
    pub fn drain(&mut self, node: NodeId) -> Result<Vec<(NodeId, Message)>> {
        let frames: Vec<_> = self.inbox(node)?.drain(..).collect();
        frames
            .into_iter()
            .map(|(from, f)| Ok((from, Message::decode(&f)?)))
            .collect()
    }

    pub fn pending(&self) -> usize {
        self.workers.iter().chain(&self.servers).map(VecDeque::len).sum()
    }
}
