//! Versioned provenance graph elements.
//!
//! Every mutable kernel object is represented by a chain of immutable
//! version vertices. Edges are oriented in the information-flow direction:
//! data flows from `from` to `to`. Each capture lane stamps the elements it
//! publishes with a gap-free sequence number (`edge_id`), which is also the
//! sort key of the trace format.

mod acyclic;
mod builder;
mod order;
pub mod trace;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

pub use acyclic::is_acyclic;
pub use builder::{GraphBuilder, LiveObjectState, ModelError, INTERNAL_ID_BIT};
pub use order::{OrderValidator, OrderingViolation, ViolationKind};

/// Capture lane index (one per core or host stream).
pub type Lane = u16;

/// Identity of one version of one kernel-object stand-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub object_id: u64,
    pub machine_id: u32,
    pub boot_id: u32,
    pub version: u32,
}

impl NodeId {
    pub fn new(object_id: u64, machine_id: u32, boot_id: u32, version: u32) -> Self {
        NodeId {
            object_id,
            machine_id,
            boot_id,
            version,
        }
    }

    /// The id of the version following this one.
    pub fn next_version(self) -> NodeId {
        NodeId {
            version: self.version + 1,
            ..self
        }
    }

    /// True when both ids name versions of the same object.
    pub fn same_object(&self, other: &NodeId) -> bool {
        self.object_id == other.object_id && self.machine_id == other.machine_id && self.boot_id == other.boot_id
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:x}@{}.{}v{}",
            self.object_id, self.machine_id, self.boot_id, self.version
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Task,
    Inode,
    Socket,
    Packet,
    SharedState,
    XattrValue,
    Address,
    Agent,
    Ext(u16),
}

impl NodeKind {
    pub fn name(&self) -> String {
        match self {
            NodeKind::Task => "task".into(),
            NodeKind::Inode => "inode".into(),
            NodeKind::Socket => "socket".into(),
            NodeKind::Packet => "packet".into(),
            NodeKind::SharedState => "shared_state".into(),
            NodeKind::XattrValue => "xattr_value".into(),
            NodeKind::Address => "address".into(),
            NodeKind::Agent => "agent".into(),
            NodeKind::Ext(tag) => format!("ext{tag}"),
        }
    }

    pub fn parse(s: &str) -> Option<NodeKind> {
        Some(match s {
            "task" => NodeKind::Task,
            "inode" => NodeKind::Inode,
            "socket" => NodeKind::Socket,
            "packet" => NodeKind::Packet,
            "shared_state" => NodeKind::SharedState,
            "xattr_value" => NodeKind::XattrValue,
            "address" => NodeKind::Address,
            "agent" => NodeKind::Agent,
            other => NodeKind::Ext(other.strip_prefix("ext")?.parse().ok()?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    Read,
    Write,
    Version,
    Create,
    Exec,
    Fork,
    Clone,
    Send,
    Receive,
    SharedRead,
    SharedWrite,
    SetAttr,
    Terminate,
    Ext(u16),
}

impl RelationKind {
    /// Flow relations carry information; `Version` and `Terminate` are bookkeeping.
    pub fn is_flow(&self) -> bool {
        !matches!(self, RelationKind::Version | RelationKind::Terminate)
    }

    pub fn name(&self) -> String {
        match self {
            RelationKind::Read => "read".into(),
            RelationKind::Write => "write".into(),
            RelationKind::Version => "version".into(),
            RelationKind::Create => "create".into(),
            RelationKind::Exec => "exec".into(),
            RelationKind::Fork => "fork".into(),
            RelationKind::Clone => "clone".into(),
            RelationKind::Send => "send".into(),
            RelationKind::Receive => "receive".into(),
            RelationKind::SharedRead => "shared_read".into(),
            RelationKind::SharedWrite => "shared_write".into(),
            RelationKind::SetAttr => "set_attr".into(),
            RelationKind::Terminate => "terminate".into(),
            RelationKind::Ext(tag) => format!("ext{tag}"),
        }
    }

    pub fn parse(s: &str) -> Option<RelationKind> {
        Some(match s {
            "read" => RelationKind::Read,
            "write" => RelationKind::Write,
            "version" => RelationKind::Version,
            "create" => RelationKind::Create,
            "exec" => RelationKind::Exec,
            "fork" => RelationKind::Fork,
            "clone" => RelationKind::Clone,
            "send" => RelationKind::Send,
            "receive" | "recv" => RelationKind::Receive,
            "shared_read" => RelationKind::SharedRead,
            "shared_write" => RelationKind::SharedWrite,
            "set_attr" => RelationKind::SetAttr,
            "terminate" => RelationKind::Terminate,
            other => RelationKind::Ext(other.strip_prefix("ext")?.parse().ok()?),
        })
    }
}

/// Attribute value. Serialized externally tagged so integer signedness
/// survives a round trip.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scalar {
    Int(i64),
    Uint(u64),
    Str(String),
    Bool(bool),
}

impl Scalar {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Scalar::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match *self {
            Scalar::Int(v) => Some(v),
            Scalar::Uint(v) => i64::try_from(v).ok(),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match *self {
            Scalar::Bool(b) => Some(b),
            _ => None,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Int(v) => write!(f, "{v}"),
            Scalar::Uint(v) => write!(f, "{v}"),
            Scalar::Str(s) => f.write_str(s),
            Scalar::Bool(b) => write!(f, "{b}"),
        }
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::Int(v)
    }
}

impl From<u64> for Scalar {
    fn from(v: u64) -> Self {
        Scalar::Uint(v)
    }
}

impl From<bool> for Scalar {
    fn from(v: bool) -> Self {
        Scalar::Bool(v)
    }
}

impl From<&str> for Scalar {
    fn from(v: &str) -> Self {
        Scalar::Str(v.to_owned())
    }
}

impl From<String> for Scalar {
    fn from(v: String) -> Self {
        Scalar::Str(v)
    }
}

pub type Attributes = BTreeMap<String, Scalar>;

/// Builds an attribute map from `(key, value)` pairs.
pub fn attrs<I, K, V>(pairs: I) -> Attributes
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<Scalar>,
{
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

/// Index of a registered query, in load order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QueryId(pub u16);

/// Opaque handle into state owned by a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueHandle(pub usize);

/// Per-element state written by queries. Bit ownership and value-slot
/// ownership are enforced by the engine's query context.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryScratch {
    labels: u64,
    values: SmallVec<[(QueryId, ValueHandle); 2]>,
}

impl QueryScratch {
    pub fn labels(&self) -> u64 {
        self.labels
    }

    pub fn value_for(&self, query: QueryId) -> Option<ValueHandle> {
        self.values.iter().find(|(q, _)| *q == query).map(|(_, h)| *h)
    }

    pub fn values(&self) -> impl Iterator<Item = (QueryId, ValueHandle)> + '_ {
        self.values.iter().copied()
    }

    pub(crate) fn set_labels(&mut self, labels: u64) {
        self.labels = labels;
    }

    pub(crate) fn set_value(&mut self, query: QueryId, handle: ValueHandle) -> Option<ValueHandle> {
        for slot in self.values.iter_mut() {
            if slot.0 == query {
                return Some(std::mem::replace(&mut slot.1, handle));
            }
        }
        self.values.push((query, handle));
        None
    }

    pub(crate) fn take_value(&mut self, query: QueryId) -> Option<ValueHandle> {
        let idx = self.values.iter().position(|(q, _)| *q == query)?;
        Some(self.values.remove(idx).1)
    }

    pub(crate) fn drain_values(&mut self) -> SmallVec<[(QueryId, ValueHandle); 2]> {
        std::mem::take(&mut self.values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvNode {
    pub id: NodeId,
    pub kind: NodeKind,
    #[serde(default)]
    pub attributes: Attributes,
    #[serde(skip)]
    pub scratch: QueryScratch,
}

impl ProvNode {
    pub fn new(id: NodeId, kind: NodeKind, attributes: Attributes) -> Self {
        ProvNode {
            id,
            kind,
            attributes,
            scratch: QueryScratch::default(),
        }
    }

    pub fn attr(&self, key: &str) -> Option<&Scalar> {
        self.attributes.get(key)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvEdge {
    pub edge_id: u64,
    pub lane: Lane,
    pub from: NodeId,
    pub to: NodeId,
    pub kind: RelationKind,
    #[serde(default)]
    pub attributes: Attributes,
    #[serde(skip)]
    pub scratch: QueryScratch,
}

/// End-of-life marker for an object's current version. Not a flow edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminateMarker {
    pub edge_id: u64,
    pub lane: Lane,
    pub node: NodeId,
}

/// A vertex as published on a lane, stamped with its lane sequence number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedNode {
    pub edge_id: u64,
    pub lane: Lane,
    #[serde(flatten)]
    pub node: ProvNode,
}

/// One record of the provenance stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "elem", rename_all = "snake_case")]
pub enum Element {
    Node(PublishedNode),
    Edge(ProvEdge),
    Terminate(TerminateMarker),
}

impl Element {
    /// Lane sequence number; the record's sort key.
    pub fn seq(&self) -> u64 {
        match self {
            Element::Node(n) => n.edge_id,
            Element::Edge(e) => e.edge_id,
            Element::Terminate(t) => t.edge_id,
        }
    }

    pub fn lane(&self) -> Lane {
        match self {
            Element::Node(n) => n.lane,
            Element::Edge(e) => e.lane,
            Element::Terminate(t) => t.lane,
        }
    }

    /// Machine tag used to break ties between lanes in the merged order.
    pub fn machine_id(&self) -> u32 {
        match self {
            Element::Node(n) => n.node.id.machine_id,
            Element::Edge(e) => e.to.machine_id,
            Element::Terminate(t) => t.node.machine_id,
        }
    }

    pub fn as_edge(&self) -> Option<&ProvEdge> {
        match self {
            Element::Edge(e) => Some(e),
            _ => None,
        }
    }

    pub fn as_node(&self) -> Option<&ProvNode> {
        match self {
            Element::Node(n) => Some(&n.node),
            _ => None,
        }
    }
}
