//! Stacked vertex-centric queries over the merged stream.
//!
//! For every edge `u -> v` each registered query, in load order, sees
//! `out_edge(u, e)` and then `in_edge(e, v)`. Because the merged stream
//! delivers all in-edges of a vertex before any of its out-edges, a vertex
//! has received everything propagated to it before it propagates further.

mod ctx;

use rustc_hash::FxHashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::merge::VertexMap;
use crate::model::{
    Element, NodeId, OrderingViolation, ProvEdge, ProvNode, QueryId, QueryScratch, RelationKind, ValueHandle,
    ViolationKind,
};

pub use ctx::{LabelGrant, QueryCtx};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Detect,
    Enforce,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "detect" => Ok(Mode::Detect),
            "enforce" => Ok(Mode::Enforce),
            other => Err(format!("unknown mode {other:?} (expected detect or enforce)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Allow,
    Alert(Value),
    Deny(Value),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("bit {bit} is not granted to query {query:?}")]
    ForeignBit { query: String, bit: u8 },
    #[error("{0}")]
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("a query named {0:?} is already registered")]
    DuplicateName(String),
    #[error("query {name:?} asks for {requested} label bits, {available} left")]
    LabelBitsExhausted { name: String, requested: u8, available: u8 },
    #[error("query {name:?} failed to initialise: {source}")]
    Init {
        name: String,
        #[source]
        source: QueryError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Ordering(#[from] OrderingViolation),
}

/// A vertex-centric query. Callbacks may keep state only in the query
/// itself or in value slots they own on elements.
pub trait QueryModule {
    fn name(&self) -> &str;

    /// Number of label bits the query needs.
    fn label_bits(&self) -> u8 {
        0
    }

    fn init(&mut self, _ctx: &QueryCtx) -> Result<(), QueryError> {
        Ok(())
    }

    /// A vertex was published.
    fn node(&mut self, _ctx: &QueryCtx, _v: &mut ProvNode) -> Result<(), QueryError> {
        Ok(())
    }

    fn out_edge(&mut self, ctx: &QueryCtx, v: &mut ProvNode, e: &mut ProvEdge) -> Result<Verdict, QueryError>;

    fn in_edge(&mut self, ctx: &QueryCtx, e: &mut ProvEdge, v: &mut ProvNode) -> Result<Verdict, QueryError>;

    /// The vertex is about to be collected.
    fn evict_node(&mut self, _ctx: &QueryCtx, _v: &mut ProvNode) -> Result<(), QueryError> {
        Ok(())
    }

    /// Releases query-owned state behind a handle whose element was collected.
    fn drop_value(&mut self, _handle: ValueHandle) {}

    /// End of stream.
    fn finish(&mut self, _ctx: &QueryCtx) -> Result<(), QueryError> {
        Ok(())
    }
}

/// One line of the verdict output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerdictRecord {
    pub query: String,
    pub verdict: &'static str,
    pub edge_id: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub payload: Value,
}

pub type VerdictSink = Box<dyn FnMut(&VerdictRecord)>;

struct Entry {
    module: Box<dyn QueryModule>,
    ctx: QueryCtx,
    disabled: bool,
}

/// Registered queries in load order, with their label-bit grants.
pub struct QueryRegistry {
    entries: Vec<Entry>,
    next_bit: u8,
    mode: Mode,
}

impl QueryRegistry {
    pub fn new(mode: Mode) -> Self {
        QueryRegistry {
            entries: Vec::new(),
            next_bit: 0,
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.ctx.name()).collect()
    }

    /// Appends a query to the load order and runs its `init` once.
    pub fn register(&mut self, mut module: Box<dyn QueryModule>) -> Result<LabelGrant, RegistryError> {
        let name = module.name().to_owned();
        if self.entries.iter().any(|e| e.ctx.name() == name) {
            return Err(RegistryError::DuplicateName(name));
        }
        let requested = module.label_bits();
        let available = 64 - self.next_bit;
        if requested > available {
            return Err(RegistryError::LabelBitsExhausted {
                name,
                requested,
                available,
            });
        }
        let grant = LabelGrant::new(self.next_bit, requested);
        let id = QueryId(self.entries.len() as u16);
        let ctx = QueryCtx::new(id, name.clone(), grant, self.mode);
        module
            .init(&ctx)
            .map_err(|source| RegistryError::Init { name, source })?;
        self.next_bit += requested;
        self.entries.push(Entry {
            module,
            ctx,
            disabled: false,
        });
        Ok(grant)
    }

    /// Borrow a registered query back, e.g. to read its results.
    pub fn get(&self, name: &str) -> Option<&dyn QueryModule> {
        self.entries
            .iter()
            .find(|e| e.ctx.name() == name)
            .map(|e| e.module.as_ref())
    }

    pub fn is_disabled(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.ctx.name() == name && e.disabled)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EngineStats {
    pub nodes: u64,
    pub edges: u64,
    pub terminated: u64,
    pub alerts: u64,
    pub denies: u64,
    pub suppressed: u64,
    pub query_failures: u64,
}

/// Outcome for one element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Processed {
    /// The edge was denied in enforce mode.
    pub suppressed: bool,
}

pub struct Engine {
    registry: QueryRegistry,
    vertices: VertexMap,
    sent: FxHashSet<NodeId>,
    sink: Option<VerdictSink>,
    stats: EngineStats,
}

enum Step {
    Out,
    In,
}

impl Engine {
    pub fn new(registry: QueryRegistry) -> Self {
        Engine {
            registry,
            vertices: VertexMap::new(),
            sent: FxHashSet::default(),
            sink: None,
            stats: EngineStats::default(),
        }
    }

    pub fn with_sink(mut self, sink: impl FnMut(&VerdictRecord) + 'static) -> Self {
        self.sink = Some(Box::new(sink));
        self
    }

    pub fn registry(&self) -> &QueryRegistry {
        &self.registry
    }

    pub fn vertices(&self) -> &VertexMap {
        &self.vertices
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    fn emit(&mut self, record: VerdictRecord) {
        match record.verdict {
            "deny" => self.stats.denies += 1,
            "error" => self.stats.query_failures += 1,
            _ => self.stats.alerts += 1,
        }
        if let Some(sink) = self.sink.as_mut() {
            sink(&record);
        }
    }

    pub fn process(&mut self, el: &mut Element) -> Result<Processed, EngineError> {
        match el {
            Element::Node(n) => {
                self.stats.nodes += 1;
                let mut node = n.node.clone();
                for i in 0..self.registry.entries.len() {
                    let entry = &mut self.registry.entries[i];
                    if entry.disabled {
                        continue;
                    }
                    let res = catch_unwind(AssertUnwindSafe(|| entry.module.node(&entry.ctx, &mut node)));
                    if let Some(reason) = failure(res) {
                        self.disable(i, reason, node.id, node.id, n.edge_id);
                    }
                }
                self.vertices.insert(node);
                Ok(Processed::default())
            }
            Element::Edge(e) => {
                self.stats.edges += 1;
                let result = self.process_edge(e);
                self.dispose_scratch(&mut e.scratch);
                let result = result?;
                if e.kind == RelationKind::Version {
                    self.collect(e.from, e.edge_id);
                } else {
                    self.sent.insert(e.from);
                }
                Ok(result)
            }
            Element::Terminate(t) => {
                self.stats.terminated += 1;
                if !self.vertices.contains(&t.node) {
                    return Err(OrderingViolation {
                        edge_id: t.edge_id,
                        lane: t.lane,
                        kind: ViolationKind::UnpublishedEndpoint(t.node),
                    }
                    .into());
                }
                self.collect(t.node, t.edge_id);
                Ok(Processed::default())
            }
        }
    }

    fn process_edge(&mut self, e: &mut ProvEdge) -> Result<Processed, EngineError> {
        let violation = |kind| OrderingViolation {
            edge_id: e.edge_id,
            lane: e.lane,
            kind,
        };
        for id in [e.from, e.to] {
            if !self.vertices.contains(&id) {
                return Err(violation(ViolationKind::UnpublishedEndpoint(id)).into());
            }
        }
        if self.sent.contains(&e.to) {
            return Err(violation(ViolationKind::InAfterOut(e.to)).into());
        }
        let saved_labels = self.vertices.get(&e.to).expect("checked").scratch.labels();
        let mut processed = Processed::default();
        for i in 0..self.registry.entries.len() {
            if self.registry.entries[i].disabled {
                continue;
            }
            for step in [Step::Out, Step::In] {
                let entry = &mut self.registry.entries[i];
                let node_id = match step {
                    Step::Out => e.from,
                    Step::In => e.to,
                };
                let node = self.vertices.get_mut(&node_id).expect("checked");
                let res = catch_unwind(AssertUnwindSafe(|| match step {
                    Step::Out => entry.module.out_edge(&entry.ctx, node, e),
                    Step::In => entry.module.in_edge(&entry.ctx, e, node),
                }));
                let verdict = match res {
                    Ok(Ok(v)) => v,
                    Ok(Err(err)) => {
                        self.disable(i, err.to_string(), e.from, e.to, e.edge_id);
                        break;
                    }
                    Err(panic) => {
                        self.disable(i, panic_message(panic), e.from, e.to, e.edge_id);
                        break;
                    }
                };
                let name = || self.registry.entries[i].ctx.name().to_owned();
                match verdict {
                    Verdict::Allow => {}
                    Verdict::Alert(payload) => self.emit(record(name(), "alert", e, payload)),
                    Verdict::Deny(payload) if self.registry.mode == Mode::Detect => {
                        self.emit(record(name(), "alert", e, payload))
                    }
                    Verdict::Deny(payload) => {
                        self.emit(record(name(), "deny", e, payload));
                        processed.suppressed = true;
                        break;
                    }
                }
            }
            if processed.suppressed {
                break;
            }
        }
        if processed.suppressed {
            self.stats.suppressed += 1;
            let v = self.vertices.get_mut(&e.to).expect("checked");
            v.scratch.set_labels(saved_labels);
        }
        Ok(processed)
    }

    fn disable(&mut self, i: usize, reason: String, from: NodeId, to: NodeId, edge_id: u64) {
        let entry = &mut self.registry.entries[i];
        entry.disabled = true;
        let name = entry.ctx.name().to_owned();
        log::error!("query {name} disabled: {reason}");
        self.emit(VerdictRecord {
            query: name,
            verdict: "error",
            edge_id,
            from,
            to,
            payload: serde_json::json!({ "error": reason }),
        });
    }

    fn collect(&mut self, id: NodeId, edge_id: u64) {
        let Some(mut node) = self.vertices.remove(&id) else {
            return;
        };
        self.sent.remove(&id);
        for i in 0..self.registry.entries.len() {
            let entry = &mut self.registry.entries[i];
            if entry.disabled {
                continue;
            }
            let res = catch_unwind(AssertUnwindSafe(|| entry.module.evict_node(&entry.ctx, &mut node)));
            if let Some(reason) = failure(res) {
                self.disable(i, reason, id, id, edge_id);
            }
        }
        self.dispose_scratch(&mut node.scratch);
    }

    fn dispose_scratch(&mut self, scratch: &mut QueryScratch) {
        for (q, handle) in scratch.drain_values() {
            if let Some(entry) = self.registry.entries.get_mut(q.0 as usize) {
                entry.module.drop_value(handle);
            }
        }
    }

    /// Ends the stream: evicts anything still live and lets every query
    /// flush. Returns the number of vertices that were never terminated.
    pub fn finish(&mut self) -> usize {
        let mut leftover: Vec<NodeId> = self.vertices.ids().collect();
        leftover.sort();
        for id in &leftover {
            self.collect(*id, 0);
        }
        for i in 0..self.registry.entries.len() {
            let entry = &mut self.registry.entries[i];
            if entry.disabled {
                continue;
            }
            let res = catch_unwind(AssertUnwindSafe(|| entry.module.finish(&entry.ctx)));
            if let Some(reason) = failure(res) {
                let id = NodeId::new(0, 0, 0, 0);
                self.disable(i, reason, id, id, 0);
            }
        }
        leftover.len()
    }

    pub fn into_registry(self) -> QueryRegistry {
        self.registry
    }
}

fn record(query: String, verdict: &'static str, e: &ProvEdge, payload: Value) -> VerdictRecord {
    VerdictRecord {
        query,
        verdict,
        edge_id: e.edge_id,
        from: e.from,
        to: e.to,
        payload,
    }
}

fn failure(res: std::thread::Result<Result<(), QueryError>>) -> Option<String> {
    match res {
        Ok(Ok(())) => None,
        Ok(Err(e)) => Some(e.to_string()),
        Err(panic) => Some(panic_message(panic)),
    }
}

fn panic_message(panic: Box<dyn std::any::Any + Send>) -> String {
    match panic.downcast_ref::<&str>() {
        Some(s) => format!("panic: {s}"),
        None => match panic.downcast_ref::<String>() {
            Some(s) => format!("panic: {s}"),
            None => "panic".into(),
        },
    }
}
