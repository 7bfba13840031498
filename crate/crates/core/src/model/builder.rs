use std::collections::HashMap;

use thiserror::Error;

use super::{
    Attributes, Element, Lane, NodeId, NodeKind, ProvEdge, ProvNode, PublishedNode, QueryScratch, RelationKind,
    TerminateMarker,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown object {0:#x}")]
    UnknownObject(u64),
    #[error("object {0:#x} is already live")]
    DuplicateObject(u64),
    #[error("invalid relation {kind:?} between {source_id:#x} and {sink:#x}")]
    InvalidRelation {
        kind: RelationKind,
        source_id: u64,
        sink: u64,
    },
}

/// Versioning state kept for a live object. Only the two endpoint states
/// are consulted when recording a flow.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveObjectState {
    pub object_id: u64,
    pub machine_id: u32,
    pub boot_id: u32,
    pub current_version: u32,
    pub has_outgoing_since_version: bool,
    pub kind: NodeKind,
    pub attributes: Attributes,
}

impl LiveObjectState {
    pub fn node_id(&self) -> NodeId {
        NodeId::new(self.object_id, self.machine_id, self.boot_id, self.current_version)
    }
}

/// Lane-local graph generation with cycle avoidance.
///
/// A new version of an object is created whenever an object that has sent
/// information since its last version receives new information. Every
/// element published by the builder receives the next lane sequence number.
#[derive(Debug)]
pub struct GraphBuilder {
    lane: Lane,
    machine_id: u32,
    boot_id: u32,
    next_seq: u64,
    next_internal: u64,
    live: HashMap<u64, LiveObjectState>,
}

/// Object ids allocated by the builder itself have the top bit set so they
/// never collide with ids chosen by an event source.
pub const INTERNAL_ID_BIT: u64 = 1 << 63;

impl GraphBuilder {
    pub fn new(lane: Lane, machine_id: u32, boot_id: u32) -> Self {
        GraphBuilder {
            lane,
            machine_id,
            boot_id,
            next_seq: 1,
            next_internal: 1,
            live: HashMap::new(),
        }
    }

    pub fn lane(&self) -> Lane {
        self.lane
    }

    pub fn machine_id(&self) -> u32 {
        self.machine_id
    }

    pub fn boot_id(&self) -> u32 {
        self.boot_id
    }

    /// Sequence number the next published element will carry.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn live(&self, object_id: u64) -> Option<&LiveObjectState> {
        self.live.get(&object_id)
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    fn stamp(&mut self) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        seq
    }

    /// Creates a version-0 object with a builder-allocated id.
    pub fn new_object(&mut self, kind: NodeKind, attributes: Attributes, out: &mut Vec<Element>) -> ProvNode {
        let object_id = INTERNAL_ID_BIT | ((self.lane as u64) << 40) | self.next_internal;
        self.next_internal += 1;
        self.adopt_object(object_id, kind, attributes, out)
            .expect("internal ids are unique")
    }

    /// Creates a version-0 object whose id was chosen by the event source.
    pub fn adopt_object(
        &mut self,
        object_id: u64,
        kind: NodeKind,
        attributes: Attributes,
        out: &mut Vec<Element>,
    ) -> Result<ProvNode, ModelError> {
        if self.live.contains_key(&object_id) {
            return Err(ModelError::DuplicateObject(object_id));
        }
        let state = LiveObjectState {
            object_id,
            machine_id: self.machine_id,
            boot_id: self.boot_id,
            current_version: 0,
            has_outgoing_since_version: false,
            kind,
            attributes,
        };
        let node = ProvNode::new(state.node_id(), kind, state.attributes.clone());
        self.live.insert(object_id, state);
        let edge_id = self.stamp();
        out.push(Element::Node(PublishedNode {
            edge_id,
            lane: self.lane,
            node: node.clone(),
        }));
        Ok(node)
    }

    /// Registers an object published by another lane or host (a received
    /// packet). Nothing is emitted; the node is referenced by id only.
    pub fn import_object(&mut self, id: NodeId, kind: NodeKind) -> Result<(), ModelError> {
        if self.live.contains_key(&id.object_id) {
            return Err(ModelError::DuplicateObject(id.object_id));
        }
        self.live.insert(
            id.object_id,
            LiveObjectState {
                object_id: id.object_id,
                machine_id: id.machine_id,
                boot_id: id.boot_id,
                current_version: id.version,
                has_outgoing_since_version: false,
                kind,
                attributes: Attributes::new(),
            },
        );
        Ok(())
    }

    fn bump_version(&mut self, object_id: u64, updates: Option<Attributes>, out: &mut Vec<Element>) {
        let lane = self.lane;
        let version_seq = self.next_seq;
        self.next_seq += 2;
        let state = self.live.get_mut(&object_id).expect("caller checked liveness");
        let old = state.node_id();
        if let Some(updates) = updates {
            state.attributes.extend(updates);
        }
        state.current_version += 1;
        state.has_outgoing_since_version = false;
        let new = state.node_id();
        out.push(Element::Node(PublishedNode {
            edge_id: version_seq,
            lane,
            node: ProvNode::new(new, state.kind, state.attributes.clone()),
        }));
        out.push(Element::Edge(ProvEdge {
            edge_id: version_seq + 1,
            lane,
            from: old,
            to: new,
            kind: RelationKind::Version,
            attributes: Attributes::new(),
            scratch: QueryScratch::default(),
        }));
    }

    /// Records an information flow from `source` to `sink`, versioning the
    /// sink first if it has sent information since its current version.
    /// Returns the flow edge's id.
    pub fn record_flow(
        &mut self,
        source: u64,
        sink: u64,
        kind: RelationKind,
        attributes: Attributes,
        out: &mut Vec<Element>,
    ) -> Result<u64, ModelError> {
        if !kind.is_flow() || source == sink {
            return Err(ModelError::InvalidRelation {
                kind,
                source_id: source,
                sink,
            });
        }
        if !self.live.contains_key(&source) {
            return Err(ModelError::UnknownObject(source));
        }
        let sink_sent = match self.live.get(&sink) {
            Some(s) => s.has_outgoing_since_version,
            None => return Err(ModelError::UnknownObject(sink)),
        };
        if sink_sent {
            self.bump_version(sink, None, out);
        }
        let to = self.live[&sink].node_id();
        let src = self.live.get_mut(&source).expect("checked above");
        src.has_outgoing_since_version = true;
        let from = src.node_id();
        let edge_id = self.stamp();
        out.push(Element::Edge(ProvEdge {
            edge_id,
            lane: self.lane,
            from,
            to,
            kind,
            attributes,
            scratch: QueryScratch::default(),
        }));
        Ok(edge_id)
    }

    /// Publishes a new version carrying updated attributes (new state means
    /// a new version; published attributes are never mutated).
    pub fn revise(
        &mut self,
        object_id: u64,
        updates: Attributes,
        out: &mut Vec<Element>,
    ) -> Result<NodeId, ModelError> {
        if !self.live.contains_key(&object_id) {
            return Err(ModelError::UnknownObject(object_id));
        }
        self.bump_version(object_id, Some(updates), out);
        Ok(self.live[&object_id].node_id())
    }

    /// Emits the end-of-life marker for the object's current version and
    /// forgets its state.
    pub fn terminate_object(&mut self, object_id: u64, out: &mut Vec<Element>) -> Result<(), ModelError> {
        let state = self
            .live
            .remove(&object_id)
            .ok_or(ModelError::UnknownObject(object_id))?;
        let edge_id = self.stamp();
        out.push(Element::Terminate(TerminateMarker {
            edge_id,
            lane: self.lane,
            node: state.node_id(),
        }));
        Ok(())
    }

    /// Forgets an object without a terminate marker. Used when ownership of
    /// the object passes to another lane or host, which terminates it.
    pub fn release(&mut self, object_id: u64) -> Result<NodeId, ModelError> {
        self.live
            .remove(&object_id)
            .map(|s| s.node_id())
            .ok_or(ModelError::UnknownObject(object_id))
    }

    /// Terminates every live object, in object-id order.
    pub fn shutdown(&mut self, out: &mut Vec<Element>) {
        let mut ids: Vec<u64> = self.live.keys().copied().collect();
        ids.sort_unstable();
        for id in ids {
            self.terminate_object(id, out).expect("id is live");
        }
    }
}
