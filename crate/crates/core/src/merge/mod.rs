//! Merges per-lane element streams into one total order.
//!
//! Each lane delivers gap-free sequence numbers. The merger emits elements
//! in `(edge_id, machine_id, lane)` order up to the smallest watermark among
//! active lanes; lanes that have been silent for longer than the QoS
//! threshold stop holding the others back. An edge that references a node
//! published by another lane (a received packet) waits until that node and
//! its in-edge have been emitted; if the node has not turned up after the
//! threshold the edge is quarantined and reported as a dangling packet.

mod vertex_map;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rustc_hash::{FxHashMap, FxHashSet};

use serde::Serialize;
use thiserror::Error;

use crate::model::{Element, Lane, NodeId, RelationKind};

pub use vertex_map::VertexMap;

/// Threshold after which a quiet lane is assumed quiescent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Qos {
    Time(Duration),
    /// Measured in elements pushed to the merger across all lanes.
    Elements(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergePolicy {
    pub qos: Qos,
}

impl Default for MergePolicy {
    fn default() -> Self {
        MergePolicy {
            qos: Qos::Time(Duration::from_millis(100)),
        }
    }
}

impl MergePolicy {
    pub fn time(ms: u64) -> Self {
        MergePolicy {
            qos: Qos::Time(Duration::from_millis(ms.max(1))),
        }
    }

    pub fn elements(n: u64) -> Self {
        MergePolicy {
            qos: Qos::Elements(n.max(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MergeError {
    #[error("stale element {edge_id} on lane {lane} (watermark {watermark})")]
    StaleElement { lane: Lane, edge_id: u64, watermark: u64 },
    #[error("lane {0} is closed")]
    LaneClosed(Lane),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum MergeWarning {
    /// An element referencing a packet that was never published; dropped.
    DanglingPacket { lane: Lane, edge_id: u64, node: NodeId },
}

#[derive(Debug, Clone, Copy)]
struct Stamp {
    at: Instant,
    count: u64,
}

#[derive(Debug)]
struct Pending {
    el: Element,
    arrived: Stamp,
}

/// Per-lane reorder buffer.
#[derive(Debug)]
pub struct LaneBuffer {
    lane: Lane,
    pending: BTreeMap<u64, Pending>,
    watermark: u64,
    closed: bool,
    last_push: Stamp,
}

impl LaneBuffer {
    fn new(lane: Lane, now: Stamp) -> Self {
        LaneBuffer {
            lane,
            pending: BTreeMap::new(),
            watermark: 0,
            closed: false,
            last_push: now,
        }
    }

    pub fn lane(&self) -> Lane {
        self.lane
    }

    /// Highest sequence number up to which every element has arrived.
    pub fn watermark(&self) -> u64 {
        self.watermark
    }

    pub fn buffered(&self) -> usize {
        self.pending.len()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }
}

#[derive(Debug, Clone, Copy)]
struct Published {
    lane: Lane,
    has_in: bool,
}

#[derive(Debug, Default)]
pub struct Drained {
    pub elements: Vec<Element>,
    pub warnings: Vec<MergeWarning>,
}

/// Snapshot of merger state for the metrics stream.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MergeStats {
    pub pushed: u64,
    pub emitted: u64,
    pub buffered: usize,
    pub max_watermark_lag: u64,
    pub live_nodes: usize,
    pub dangling: u64,
}

enum Gate {
    Ready,
    Wait(NodeId),
    Drop,
}

#[derive(Debug)]
pub struct Merger {
    policy: MergePolicy,
    lanes: BTreeMap<Lane, LaneBuffer>,
    published: FxHashMap<NodeId, Published>,
    pending_nodes: FxHashSet<NodeId>,
    dangling: FxHashSet<NodeId>,
    pushed: u64,
    emitted: u64,
    dangling_total: u64,
}

impl Merger {
    pub fn new(policy: MergePolicy) -> Self {
        Merger {
            policy,
            lanes: BTreeMap::new(),
            published: FxHashMap::default(),
            pending_nodes: FxHashSet::default(),
            dangling: FxHashSet::default(),
            pushed: 0,
            emitted: 0,
            dangling_total: 0,
        }
    }

    pub fn policy(&self) -> MergePolicy {
        self.policy
    }

    fn stamp(&self, at: Instant) -> Stamp {
        Stamp { at, count: self.pushed }
    }

    /// Declares a lane so that it holds back the merge before its first push.
    pub fn open_lane(&mut self, lane: Lane) {
        self.open_lane_at(lane, Instant::now());
    }

    pub fn open_lane_at(&mut self, lane: Lane, now: Instant) {
        let stamp = self.stamp(now);
        self.lanes.entry(lane).or_insert_with(|| LaneBuffer::new(lane, stamp));
    }

    pub fn lane(&self, lane: Lane) -> Option<&LaneBuffer> {
        self.lanes.get(&lane)
    }

    pub fn push(&mut self, lane: Lane, el: Element) -> Result<(), MergeError> {
        self.push_at(lane, el, Instant::now())
    }

    pub fn push_at(&mut self, lane: Lane, el: Element, now: Instant) -> Result<(), MergeError> {
        let stamp = self.stamp(now);
        let buf = self.lanes.entry(lane).or_insert_with(|| LaneBuffer::new(lane, stamp));
        if buf.closed {
            return Err(MergeError::LaneClosed(lane));
        }
        let seq = el.seq();
        if seq <= buf.watermark || buf.pending.contains_key(&seq) {
            return Err(MergeError::StaleElement {
                lane,
                edge_id: seq,
                watermark: buf.watermark,
            });
        }
        if let Element::Node(n) = &el {
            self.pending_nodes.insert(n.node.id);
        }
        buf.pending.insert(seq, Pending { el, arrived: stamp });
        while buf.pending.contains_key(&(buf.watermark + 1)) {
            buf.watermark += 1;
        }
        buf.last_push = stamp;
        self.pushed += 1;
        Ok(())
    }

    /// Marks a lane finished: everything it buffered becomes releasable.
    pub fn close(&mut self, lane: Lane) {
        let stamp = self.stamp(Instant::now());
        self.lanes
            .entry(lane)
            .or_insert_with(|| LaneBuffer::new(lane, stamp))
            .closed = true;
    }

    pub fn is_drained(&self) -> bool {
        self.lanes.values().all(|b| b.closed && b.pending.is_empty())
    }

    pub fn buffered(&self) -> usize {
        self.lanes.values().map(|b| b.pending.len()).sum()
    }

    pub fn stats(&self) -> MergeStats {
        let top = self.lanes.values().map(|b| b.watermark).max().unwrap_or(0);
        MergeStats {
            pushed: self.pushed,
            emitted: self.emitted,
            buffered: self.buffered(),
            max_watermark_lag: self
                .lanes
                .values()
                .filter(|b| !b.closed)
                .map(|b| top - b.watermark)
                .max()
                .unwrap_or(0),
            live_nodes: self.published.len(),
            dangling: self.dangling_total,
        }
    }

    fn expired(&self, since: Stamp, now: Instant) -> bool {
        match self.policy.qos {
            Qos::Time(t) => now.saturating_duration_since(since.at) >= t,
            Qos::Elements(n) => self.pushed - since.count >= n,
        }
    }

    fn gate(&self, el: &Element) -> Gate {
        let check = |id: &NodeId, needs_in: bool| match self.published.get(id) {
            Some(p) if needs_in && p.lane != el.lane() && !p.has_in => Gate::Wait(*id),
            Some(_) => Gate::Ready,
            None if self.dangling.contains(id) => Gate::Drop,
            None => Gate::Wait(*id),
        };
        match el {
            Element::Node(_) => Gate::Ready,
            Element::Edge(e) => match check(&e.from, true) {
                Gate::Ready => check(&e.to, false),
                other => other,
            },
            Element::Terminate(t) => check(&t.node, false),
        }
    }

    fn record_emit(&mut self, el: &Element) {
        match el {
            Element::Node(n) => {
                self.pending_nodes.remove(&n.node.id);
                self.published.insert(
                    n.node.id,
                    Published {
                        lane: n.lane,
                        has_in: false,
                    },
                );
            }
            Element::Edge(e) => {
                if let Some(p) = self.published.get_mut(&e.to) {
                    p.has_in = true;
                }
                if e.kind == RelationKind::Version {
                    self.published.remove(&e.from);
                }
            }
            Element::Terminate(t) => {
                self.published.remove(&t.node);
            }
        }
        self.emitted += 1;
    }

    fn quarantine(&mut self, lane: Lane, node: Option<NodeId>, out: &mut Drained) {
        let buf = self.lanes.get_mut(&lane).expect("lane exists");
        let (_, p) = buf.pending.pop_first().expect("head exists");
        if let Element::Terminate(t) = &p.el {
            self.dangling.remove(&t.node);
        }
        if let Element::Node(n) = &p.el {
            self.pending_nodes.remove(&n.node.id);
        }
        if let Some(node) = node {
            log::warn!("dangling packet {node} at lane {lane} edge {}", p.el.seq());
            self.dangling.insert(node);
            self.dangling_total += 1;
            out.warnings.push(MergeWarning::DanglingPacket {
                lane,
                edge_id: p.el.seq(),
                node,
            });
        }
    }

    /// Releases every element that can be ordered now.
    pub fn drain(&mut self, now: Instant) -> Drained {
        let mut out = Drained::default();
        self.drain_into(now, &mut out);
        out
    }

    pub fn drain_into(&mut self, now: Instant, out: &mut Drained) {
        loop {
            let bound = self
                .lanes
                .values()
                .filter(|b| !b.closed && !self.expired(b.last_push, now))
                .map(|b| b.watermark)
                .min();
            let mut best: Option<((u64, u32, Lane), Lane)> = None;
            let mut waiting: Vec<(Lane, NodeId, bool)> = Vec::new();
            let mut drop: Option<(Lane, Option<NodeId>)> = None;
            for buf in self.lanes.values() {
                let Some((&seq, head)) = buf.pending.first_key_value() else {
                    continue;
                };
                let quiet = self.expired(buf.last_push, now);
                let contiguous = seq <= buf.watermark;
                let releasable = buf.closed || (contiguous && (quiet || bound.is_none_or(|b| seq <= b)));
                if !releasable {
                    continue;
                }
                match self.gate(&head.el) {
                    Gate::Ready => {
                        let key = (seq, head.el.machine_id(), buf.lane);
                        if best.is_none_or(|(k, _)| key < k) {
                            best = Some((key, buf.lane));
                        }
                    }
                    Gate::Drop => {
                        drop = Some((buf.lane, None));
                        break;
                    }
                    Gate::Wait(node) => {
                        let arriving = self.pending_nodes.contains(&node);
                        if !arriving && self.expired(head.arrived, now) {
                            drop = Some((buf.lane, Some(node)));
                            break;
                        }
                        waiting.push((buf.lane, node, arriving));
                    }
                }
            }
            if let Some((lane, node)) = drop {
                self.quarantine(lane, node, out);
                continue;
            }
            if let Some((_, lane)) = best {
                let buf = self.lanes.get_mut(&lane).expect("lane exists");
                let (_, p) = buf.pending.pop_first().expect("head exists");
                self.record_emit(&p.el);
                out.elements.push(p.el);
                continue;
            }
            // Nothing can move. Once every lane is closed, waiting heads can
            // only be unblocked by nodes that never arrive.
            if !waiting.is_empty() && self.lanes.values().all(|b| b.closed) {
                let pick = waiting
                    .iter()
                    .find(|w| !w.2)
                    .or(waiting.first())
                    .copied()
                    .expect("non-empty");
                self.quarantine(pick.0, Some(pick.1), out);
                continue;
            }
            break;
        }
    }
}

/// Merges complete per-host streams, ordering each packet's sending
/// subgraph before its receipt.
pub fn cross_host_merge(
    streams: impl IntoIterator<Item = Vec<Element>>,
    policy: MergePolicy,
) -> Result<Drained, MergeError> {
    let mut m = Merger::new(policy);
    let now = Instant::now();
    let mut lanes = Vec::new();
    for stream in streams {
        for el in stream {
            let lane = el.lane();
            lanes.push(lane);
            m.push_at(lane, el, now)?;
        }
    }
    for lane in lanes {
        m.close(lane);
    }
    Ok(m.drain(now))
}

#[cfg(test)]
mod tests;
