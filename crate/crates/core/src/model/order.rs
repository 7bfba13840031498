use rustc_hash::FxHashMap;

use thiserror::Error;

use super::{Element, Lane, NodeId, RelationKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    /// Sequence numbers did not strictly increase within the lane.
    NonMonotonicId {
        previous: u64,
    },
    /// An edge or marker referenced a node that was never published (or was
    /// already collected).
    UnpublishedEndpoint(NodeId),
    /// An in-edge arrived after the vertex had already published out-edges.
    InAfterOut(NodeId),
    DuplicateNode(NodeId),
    SelfLoop(NodeId),
    BadVersionEdge {
        from: NodeId,
        to: NodeId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("ordering violation at edge_id {edge_id} (lane {lane}): {kind:?}")]
pub struct OrderingViolation {
    pub edge_id: u64,
    pub lane: Lane,
    pub kind: ViolationKind,
}

/// Streaming checker for the publish-ordering contract: nodes precede the
/// edges that reference them, every in-edge of a vertex precedes all of its
/// out-edges, and sequence numbers increase within each lane.
///
/// State is dropped for collected vertices, so memory follows the live set.
#[derive(Debug, Default)]
pub struct OrderValidator {
    last_seq: FxHashMap<Lane, u64>,
    sent: FxHashMap<NodeId, bool>,
}

impl OrderValidator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tracked(&self) -> usize {
        self.sent.len()
    }

    pub fn check(&mut self, el: &Element) -> Result<(), OrderingViolation> {
        let lane = el.lane();
        let edge_id = el.seq();
        let fail = |kind| Err(OrderingViolation { edge_id, lane, kind });
        if let Some(&prev) = self.last_seq.get(&lane) {
            if edge_id <= prev {
                return fail(ViolationKind::NonMonotonicId { previous: prev });
            }
        }
        self.last_seq.insert(lane, edge_id);
        match el {
            Element::Node(n) => {
                if self.sent.insert(n.node.id, false).is_some() {
                    return fail(ViolationKind::DuplicateNode(n.node.id));
                }
            }
            Element::Edge(e) => {
                if e.from == e.to {
                    return fail(ViolationKind::SelfLoop(e.from));
                }
                if !self.sent.contains_key(&e.from) {
                    return fail(ViolationKind::UnpublishedEndpoint(e.from));
                }
                match self.sent.get(&e.to) {
                    None => return fail(ViolationKind::UnpublishedEndpoint(e.to)),
                    Some(true) => return fail(ViolationKind::InAfterOut(e.to)),
                    Some(false) => {}
                }
                if e.kind == RelationKind::Version {
                    if !e.from.same_object(&e.to) || e.to.version <= e.from.version {
                        return fail(ViolationKind::BadVersionEdge { from: e.from, to: e.to });
                    }
                    self.sent.remove(&e.from);
                } else {
                    self.sent.insert(e.from, true);
                }
            }
            Element::Terminate(t) => {
                if self.sent.remove(&t.node).is_none() {
                    return fail(ViolationKind::UnpublishedEndpoint(t.node));
                }
            }
        }
        Ok(())
    }
}
