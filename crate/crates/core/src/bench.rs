//! Per-edge latency measurements for streaming queries, and a stored-graph
//! baseline that answers the loss-prevention question by searching the
//! ancestry of every sink it is asked about.

use std::collections::HashMap;
use std::time::Instant;

use serde::Serialize;

use crate::capture::WorkloadConfig;
use crate::engine::{Engine, Processed};
use crate::model::{Element, NodeId, NodeKind, RelationKind};
use crate::pipeline::{Observer, PipelineError};
use crate::queries::{Selector, DEFAULT_RELEVANT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WindowStat {
    /// Edge count at the end of the window.
    pub end_edge: u64,
    pub median_ns: u64,
    pub p95_ns: u64,
}

/// Median and 95th percentile, in place.
pub fn median_p95(samples: &mut [u64]) -> (u64, u64) {
    if samples.is_empty() {
        return (0, 0);
    }
    samples.sort_unstable();
    let n = samples.len();
    (
        samples[(n - 1) / 2],
        samples[((n * 95).div_ceil(100)).saturating_sub(1).min(n - 1)],
    )
}

/// Collects per-edge processing times in fixed windows.
pub struct EdgeTimer {
    window: usize,
    current: Vec<u64>,
    edges: u64,
    pub windows: Vec<WindowStat>,
}

impl EdgeTimer {
    pub fn new(window: usize) -> Self {
        let window = window.max(1);
        EdgeTimer {
            window,
            current: Vec::with_capacity(window),
            edges: 0,
            windows: Vec::new(),
        }
    }

    pub fn edges(&self) -> u64 {
        self.edges
    }

    /// The window ending at `edge`, if one was recorded.
    pub fn at(&self, edge: u64) -> Option<&WindowStat> {
        self.windows.iter().find(|w| w.end_edge == edge)
    }
}

impl Observer for EdgeTimer {
    fn timed(&self) -> bool {
        true
    }

    fn element(&mut self, el: &Element, _: &Processed, nanos: u64) {
        if !matches!(el, Element::Edge(_)) {
            return;
        }
        self.edges += 1;
        self.current.push(nanos);
        if self.current.len() == self.window {
            let (median_ns, p95_ns) = median_p95(&mut self.current);
            self.windows.push(WindowStat {
                end_edge: self.edges,
                median_ns,
                p95_ns,
            });
            self.current.clear();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineStat {
    /// Edges stored when the queries ran.
    pub at_edges: u64,
    pub queries: usize,
    pub median_ns: u64,
    pub mean_visited: f64,
    /// Sinks with a confidential ancestor among those queried.
    pub leaking: usize,
}

/// Keeps the whole graph and, after each checkpoint, answers the next few
/// sink arrivals by a reverse search over relevant edges.
pub struct StoredBaseline {
    sources: Vec<Selector>,
    index: HashMap<NodeId, u32>,
    kinds: Vec<NodeKind>,
    confidential: Vec<bool>,
    parents: Vec<Vec<u32>>,
    stamp: Vec<u32>,
    epoch: u32,
    edges: u64,
    checkpoints: Vec<u64>,
    per_checkpoint: usize,
    active: Option<(u64, Vec<u64>, Vec<usize>, usize)>,
    pub results: Vec<BaselineStat>,
}

impl StoredBaseline {
    pub fn new(sources: Vec<Selector>, mut checkpoints: Vec<u64>, per_checkpoint: usize) -> Self {
        checkpoints.sort_unstable();
        checkpoints.reverse();
        StoredBaseline {
            sources,
            index: HashMap::new(),
            kinds: Vec::new(),
            confidential: Vec::new(),
            parents: Vec::new(),
            stamp: Vec::new(),
            epoch: 0,
            edges: 0,
            checkpoints,
            per_checkpoint: per_checkpoint.max(1),
            active: None,
            results: Vec::new(),
        }
    }

    pub fn stored_edges(&self) -> u64 {
        self.edges
    }

    /// Reverse search from `sink`; returns (visited, confidential ancestors).
    fn ancestry(&mut self, sink: u32) -> (usize, usize) {
        self.epoch += 1;
        let epoch = self.epoch;
        let mut stack = vec![sink];
        self.stamp[sink as usize] = epoch;
        let (mut visited, mut found) = (0, 0);
        while let Some(v) = stack.pop() {
            visited += 1;
            if self.confidential[v as usize] {
                found += 1;
            }
            for &p in &self.parents[v as usize] {
                if self.stamp[p as usize] != epoch {
                    self.stamp[p as usize] = epoch;
                    stack.push(p);
                }
            }
        }
        (visited, found)
    }

    fn finish_checkpoint(&mut self) {
        if let Some((at, mut times, visited, leaking)) = self.active.take() {
            let (median_ns, _) = median_p95(&mut times);
            self.results.push(BaselineStat {
                at_edges: at,
                queries: times.len(),
                median_ns,
                mean_visited: visited.iter().sum::<usize>() as f64 / visited.len().max(1) as f64,
                leaking,
            });
        }
    }

    pub fn finish(&mut self) {
        self.finish_checkpoint();
    }
}

impl Observer for StoredBaseline {
    fn element(&mut self, el: &Element, p: &Processed, _: u64) {
        match el {
            Element::Node(n) => {
                let i = self.kinds.len() as u32;
                self.index.insert(n.node.id, i);
                self.kinds.push(n.node.kind);
                self.confidential.push(self.sources.iter().any(|s| s.matches(&n.node)));
                self.parents.push(Vec::new());
                self.stamp.push(0);
            }
            Element::Edge(e) if !p.suppressed => {
                self.edges += 1;
                let (Some(&from), Some(&to)) = (self.index.get(&e.from), self.index.get(&e.to)) else {
                    return;
                };
                if DEFAULT_RELEVANT.contains(&e.kind) || e.kind == RelationKind::Version {
                    self.parents[to as usize].push(from);
                }
                if self.checkpoints.last().is_some_and(|&c| self.edges >= c) {
                    self.checkpoints.pop();
                    self.finish_checkpoint();
                    self.active = Some((self.edges, Vec::new(), Vec::new(), 0));
                }
                let sink = matches!(self.kinds[to as usize], NodeKind::Socket | NodeKind::Packet);
                if sink && self.active.is_some() {
                    let t = Instant::now();
                    let (visited, found) = self.ancestry(to);
                    let ns = t.elapsed().as_nanos() as u64;
                    let (_, times, vis, leaking) = self.active.as_mut().expect("checked");
                    times.push(ns);
                    vis.push(visited);
                    *leaking += usize::from(found > 0);
                    if times.len() >= self.per_checkpoint {
                        self.finish_checkpoint();
                    }
                }
            }
            _ => {}
        }
    }
}

/// Mean cost per workload event of capture and merge alone, and of the
/// engine with each query loaded on its own.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub events: usize,
    pub elements: usize,
    pub capture_ns: f64,
    /// `(query, engine ns per event)`.
    pub queries: Vec<(String, f64)>,
}

impl CostReport {
    pub fn engine_ns(&self, name: &str) -> Option<f64> {
        self.queries.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }

    /// Full per-event pipeline cost with `name` loaded.
    pub fn pipeline_ns(&self, name: &str) -> Option<f64> {
        Some(self.capture_ns + self.engine_ns(name)?)
    }

    /// Cost added by `name` relative to capture alone.
    pub fn overhead(&self, name: &str) -> Option<f64> {
        Some(self.engine_ns(name)? / self.capture_ns)
    }
}

/// Measures capture and per-query engine costs on one workload, keeping
/// the fastest of `repeats` runs of each.
pub fn cost_ordering(
    cfg: &WorkloadConfig,
    engines: &mut dyn FnMut(&str) -> Engine,
    names: &[&str],
    repeats: usize,
) -> Result<CostReport, PipelineError> {
    let repeats = repeats.max(1);
    let events = {
        let mut w = crate::capture::Workload::new(cfg.clone());
        w.by_ref().count()
    };
    let mut capture = f64::INFINITY;
    let mut merged = Vec::new();
    for _ in 0..repeats {
        let t = Instant::now();
        let (els, _) = crate::pipeline::capture_all(cfg)?;
        let mut lanes: std::collections::BTreeMap<_, Vec<Element>> = Default::default();
        for el in els {
            lanes.entry(el.lane()).or_default().push(el);
        }
        let out = crate::merge::cross_host_merge(lanes.into_values(), crate::merge::MergePolicy::elements(u64::MAX))?;
        capture = capture.min(t.elapsed().as_nanos() as f64);
        merged = out.elements;
    }
    // Rounds interleave the queries so drift in machine speed hits all alike.
    let mut best = vec![f64::INFINITY; names.len()];
    for _ in 0..repeats {
        for (i, name) in names.iter().enumerate() {
            let mut engine = engines(name);
            let mut input = merged.clone();
            let t = Instant::now();
            for el in input.iter_mut() {
                engine.process(el)?;
            }
            engine.finish();
            best[i] = best[i].min(t.elapsed().as_nanos() as f64);
        }
    }
    let queries = names
        .iter()
        .zip(best)
        .map(|(n, b)| (n.to_string(), b / events as f64))
        .collect();
    Ok(CostReport {
        events,
        elements: merged.len(),
        capture_ns: capture / events as f64,
        queries,
    })
}
