use std::io::Write;
use std::rc::Rc;

use slab::Slab;

use super::{dtw, QueryConfigError};
use crate::engine::{QueryCtx, QueryError, QueryModule, Verdict};
use crate::model::{NodeId, NodeKind, ProvEdge, ProvNode, RelationKind, ValueHandle};

pub const DEFAULT_DEPTH: usize = 3;
pub const DEFAULT_WIDTH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructIdConfig {
    /// Number of ancestor generations, at least 1.
    pub depth: usize,
    /// Entries kept per generation.
    pub width: usize,
}

impl Default for StructIdConfig {
    fn default() -> Self {
        StructIdConfig {
            depth: DEFAULT_DEPTH,
            width: DEFAULT_WIDTH,
        }
    }
}

impl StructIdConfig {
    pub fn with_options(mut self, opts: &[(String, String)]) -> Result<Self, QueryConfigError> {
        for (k, v) in opts {
            let n: usize = v.parse().map_err(|_| QueryConfigError::bad("structid", k, v))?;
            match k.as_str() {
                "depth" | "n" => self.depth = n,
                "width" => self.width = n,
                _ => {
                    return Err(QueryConfigError::UnknownOption {
                        query: "structid".into(),
                        key: k.clone(),
                    })
                }
            }
        }
        if self.depth == 0 || self.width == 0 {
            return Err(QueryConfigError::bad(
                "structid",
                "depth",
                "depth and width must be at least 1",
            ));
        }
        Ok(self)
    }
}

/// In-degree of a vertex followed by the sorted in-degrees of each
/// ancestor generation. An ancestor reached over several paths is counted
/// once per path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegreeList {
    pub in_degree: u32,
    /// `generations[i]` holds generation `i + 1`, ascending, at most `width` long.
    pub generations: Vec<Vec<u32>>,
    /// Untruncated size of each generation.
    pub totals: Vec<u64>,
}

impl DegreeList {
    pub fn new(depth: usize) -> Self {
        DegreeList {
            in_degree: 0,
            generations: vec![Vec::new(); depth],
            totals: vec![0; depth],
        }
    }

    /// Folds in a parent's list, shifted one generation back.
    pub fn absorb(&mut self, parent: &DegreeList, width: usize) {
        self.in_degree += 1;
        let depth = self.generations.len();
        merge_into(&mut self.generations[0], &[parent.in_degree], width);
        self.totals[0] += 1;
        for i in 1..depth {
            merge_into(&mut self.generations[i], &parent.generations[i - 1], width);
            self.totals[i] += parent.totals[i - 1];
        }
    }

    pub fn saturated(&self, width: usize) -> bool {
        self.totals.iter().any(|&t| t > width as u64)
    }

    /// `[[L_0], L_1, ..]` with trailing empty generations dropped.
    pub fn as_lists(&self) -> Vec<Vec<u32>> {
        let mut out = vec![vec![self.in_degree]];
        out.extend(self.generations.iter().cloned());
        while out.len() > 1 && out.last().is_some_and(|g| g.is_empty()) {
            out.pop();
        }
        out
    }

    /// DTW between the vertex's own sequence and each generation.
    pub fn distances(&self) -> Vec<f64> {
        let own = [f64::from(self.in_degree)];
        self.generations
            .iter()
            .map(|g| {
                let seq: Vec<f64> = g.iter().map(|&d| f64::from(d)).collect();
                dtw(&own, &seq)
            })
            .collect()
    }
}

fn merge_into(dst: &mut Vec<u32>, src: &[u32], width: usize) {
    if src.is_empty() {
        return;
    }
    let mut merged = Vec::with_capacity((dst.len() + src.len()).min(width));
    let (mut i, mut j) = (0, 0);
    while merged.len() < width && (i < dst.len() || j < src.len()) {
        if j >= src.len() || (i < dst.len() && dst[i] <= src[j]) {
            merged.push(dst[i]);
            i += 1;
        } else {
            merged.push(src[j]);
            j += 1;
        }
    }
    *dst = merged;
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Snapshot {
    uid: Option<i64>,
    mem: Option<i64>,
    cpu: Option<i64>,
}

impl Snapshot {
    fn of(v: &ProvNode) -> Self {
        let int = |k| v.attr(k).and_then(|s| s.as_i64());
        Snapshot {
            uid: int("uid"),
            mem: int("mem_usage"),
            cpu: int("cpu_time"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub node: NodeId,
    pub kind: NodeKind,
    pub uid: Option<i64>,
    pub gid: Option<i64>,
    pub ns: Option<String>,
    pub secctx: Option<String>,
    /// `None` when there is no previous version to compare with.
    pub uid_changed: Option<bool>,
    pub mem_delta: Option<i64>,
    pub cpu_delta: Option<i64>,
    pub distances: Vec<f64>,
    pub saturated: bool,
    pub list: DegreeList,
}

struct VertexState {
    list: Rc<DegreeList>,
    prev: Option<Snapshot>,
    published: bool,
}

struct EdgeState {
    list: Rc<DegreeList>,
    prev: Option<Snapshot>,
}

enum Slot {
    Vertex(VertexState),
    Edge(EdgeState),
}

pub type FeatureSink = Box<dyn FnMut(&FeatureVector)>;

/// Structural identity features from generation-wise in-degree lists.
pub struct StructId {
    config: StructIdConfig,
    slots: Slab<Slot>,
    sink: FeatureSink,
    published: u64,
}

impl StructId {
    pub fn new(config: StructIdConfig, sink: impl FnMut(&FeatureVector) + 'static) -> Self {
        StructId {
            config,
            slots: Slab::new(),
            sink: Box::new(sink),
            published: 0,
        }
    }

    pub fn published(&self) -> u64 {
        self.published
    }

    pub fn live_values(&self) -> usize {
        self.slots.len()
    }

    fn vertex<'a>(&'a mut self, ctx: &QueryCtx, v: &mut ProvNode) -> &'a mut VertexState {
        let h = match ctx.value(&v.scratch) {
            Some(h) => h,
            None => {
                let h = ValueHandle(self.slots.insert(Slot::Vertex(VertexState {
                    list: Rc::new(DegreeList::new(self.config.depth)),
                    prev: None,
                    published: false,
                })));
                ctx.set_value(&mut v.scratch, h);
                h
            }
        };
        match &mut self.slots[h.0] {
            Slot::Vertex(s) => s,
            Slot::Edge(_) => unreachable!("vertex handle points at edge state"),
        }
    }

    fn publish(&mut self, ctx: &QueryCtx, v: &mut ProvNode) {
        let width = self.config.width;
        let state = self.vertex(ctx, v);
        if state.published {
            return;
        }
        state.published = true;
        let list = (*state.list).clone();
        let prev = state.prev.clone();
        let cur = Snapshot::of(v);
        let delta = |a: Option<i64>, b: Option<i64>| Some(a? - b?);
        let fv = FeatureVector {
            node: v.id,
            kind: v.kind,
            uid: cur.uid,
            gid: v.attr("gid").and_then(|s| s.as_i64()),
            ns: v.attr("ns").map(|s| s.to_string()),
            secctx: v.attr("secctx").map(|s| s.to_string()),
            uid_changed: prev.as_ref().map(|p| p.uid != cur.uid),
            mem_delta: prev.as_ref().and_then(|p| delta(cur.mem, p.mem)),
            cpu_delta: prev.as_ref().and_then(|p| delta(cur.cpu, p.cpu)),
            distances: list.distances(),
            saturated: list.saturated(width),
            list,
        };
        self.published += 1;
        (self.sink)(&fv);
    }
}

impl QueryModule for StructId {
    fn name(&self) -> &str {
        "structid"
    }

    fn out_edge(&mut self, ctx: &QueryCtx, v: &mut ProvNode, e: &mut ProvEdge) -> Result<Verdict, QueryError> {
        self.publish(ctx, v);
        let list = Rc::clone(&self.vertex(ctx, v).list);
        let prev = (e.kind == RelationKind::Version).then(|| Snapshot::of(v));
        let h = self.slots.insert(Slot::Edge(EdgeState { list, prev }));
        if let Some(old) = ctx.set_value(&mut e.scratch, ValueHandle(h)) {
            self.slots.try_remove(old.0);
        }
        Ok(Verdict::Allow)
    }

    fn in_edge(&mut self, ctx: &QueryCtx, e: &mut ProvEdge, v: &mut ProvNode) -> Result<Verdict, QueryError> {
        let Some(h) = ctx.value(&e.scratch) else {
            return Err(QueryError::Failed(format!("edge {} carries no list", e.edge_id)));
        };
        let (parent, prev) = match &self.slots[h.0] {
            Slot::Edge(s) => (Rc::clone(&s.list), s.prev.clone()),
            Slot::Vertex(_) => unreachable!("edge handle points at vertex state"),
        };
        let width = self.config.width;
        let state = self.vertex(ctx, v);
        Rc::make_mut(&mut state.list).absorb(&parent, width);
        if prev.is_some() {
            state.prev = prev;
        }
        Ok(Verdict::Allow)
    }

    fn evict_node(&mut self, ctx: &QueryCtx, v: &mut ProvNode) -> Result<(), QueryError> {
        self.publish(ctx, v);
        Ok(())
    }

    fn drop_value(&mut self, handle: ValueHandle) {
        self.slots.try_remove(handle.0);
    }
}

/// CSV header for feature vectors of depth `n`.
pub fn feature_header(n: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "node",
        "kind",
        "uid",
        "gid",
        "ns",
        "secctx",
        "uid_changed",
        "mem_delta",
        "cpu_delta",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=n).map(|i| format!("dist_{i}")));
    h.push("saturated".into());
    h
}

/// Missing values are written as `NA`.
pub fn feature_row(fv: &FeatureVector) -> Vec<String> {
    fn opt<T: ToString>(v: &Option<T>) -> String {
        v.as_ref().map_or_else(|| "NA".to_owned(), |x| x.to_string())
    }
    let mut row = vec![
        fv.node.to_string(),
        fv.kind.name(),
        opt(&fv.uid),
        opt(&fv.gid),
        opt(&fv.ns),
        opt(&fv.secctx),
        opt(&fv.uid_changed.map(u8::from)),
        opt(&fv.mem_delta),
        opt(&fv.cpu_delta),
    ];
    row.extend(fv.distances.iter().map(|d| d.to_string()));
    row.push(u8::from(fv.saturated).to_string());
    row
}

pub struct FeatureCsv<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> FeatureCsv<W> {
    pub fn new(out: W, depth: usize) -> csv::Result<Self> {
        let mut out = csv::Writer::from_writer(out);
        out.write_record(feature_header(depth))?;
        Ok(FeatureCsv { out })
    }

    pub fn write(&mut self, fv: &FeatureVector) -> csv::Result<()> {
        self.out.write_record(feature_row(fv))
    }

    pub fn finish(self) -> csv::Result<W> {
        self.out.into_inner().map_err(|e| e.into_error().into())
    }
}
