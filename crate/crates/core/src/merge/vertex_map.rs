use rustc_hash::FxHashMap;

use crate::model::{Element, NodeId, ProvNode, RelationKind};

/// Live vertices of the merged stream, with their query scratch.
///
/// A vertex is dropped once a newer version of it has been linked by a
/// processed Version edge, or when its terminate marker is processed.
#[derive(Debug, Default)]
pub struct VertexMap {
    nodes: FxHashMap<NodeId, ProvNode>,
    peak: usize,
}

impl VertexMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, node: ProvNode) -> Option<ProvNode> {
        let old = self.nodes.insert(node.id, node);
        self.peak = self.peak.max(self.nodes.len());
        old
    }

    pub fn get(&self, id: &NodeId) -> Option<&ProvNode> {
        self.nodes.get(id)
    }

    pub fn get_mut(&mut self, id: &NodeId) -> Option<&mut ProvNode> {
        self.nodes.get_mut(id)
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn remove(&mut self, id: &NodeId) -> Option<ProvNode> {
        self.nodes.remove(id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn peak(&self) -> usize {
        self.peak
    }

    /// Evicts whatever the processed element made unreachable. Edges are
    /// not retained, so only vertices are returned.
    pub fn gc(&mut self, processed: &Element) -> Option<ProvNode> {
        match processed {
            Element::Edge(e) if e.kind == RelationKind::Version => self.nodes.remove(&e.from),
            Element::Terminate(t) => self.nodes.remove(&t.node),
            _ => None,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }
}
