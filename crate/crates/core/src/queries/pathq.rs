use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::{QueryConfigError, Selector};
use crate::engine::{QueryCtx, QueryError, QueryModule, Verdict};
use crate::model::{ProvEdge, ProvNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Which {
    Q1,
    Q2,
    Q3,
    Q4,
    Q5,
}

impl FromStr for Which {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim_start_matches(['q', 'Q']) {
            "1" => Ok(Which::Q1),
            "2" => Ok(Which::Q2),
            "3" => Ok(Which::Q3),
            "4" => Ok(Which::Q4),
            "5" => Ok(Which::Q5),
            _ => Err(format!("unknown path query {s:?}")),
        }
    }
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Which path property to check and over which vertices.
///
/// * Q1: some path from `a` to `b`.
/// * Q2: `b` is reachable from `a`, and every such path passes through `v`.
/// * Q3: no path from `a` to `b` touches `v`.
/// * Q4: no vertex is reachable from both `x` and `y`.
/// * Q5: `b` is reachable from `a`, and no path between them touches a
///   vertex matching `t` that fails `p`.
///
/// A path has at least one edge; vertices on a path include its endpoints.
#[derive(Debug, Clone)]
pub struct PathQuerySpec {
    pub which: Which,
    pub a: Option<Selector>,
    pub b: Option<Selector>,
    pub v: Option<Selector>,
    pub x: Option<Selector>,
    pub y: Option<Selector>,
    pub t: Option<Selector>,
    pub p: Option<Selector>,
}

impl PathQuerySpec {
    pub fn new(which: Which) -> Self {
        PathQuerySpec {
            which,
            a: None,
            b: None,
            v: None,
            x: None,
            y: None,
            t: None,
            p: None,
        }
    }

    pub fn from_options(opts: &[(String, String)]) -> Result<Self, QueryConfigError> {
        let mut which = None;
        let mut spec = PathQuerySpec::new(Which::Q1);
        for (k, val) in opts {
            if k == "q" || k == "which" {
                which = Some(val.parse().map_err(|e: String| QueryConfigError::bad("pathq", k, e))?);
                continue;
            }
            let sel: Selector = val.parse().map_err(|e| QueryConfigError::bad("pathq", k, e))?;
            let slot = match k.as_str() {
                "a" => &mut spec.a,
                "b" => &mut spec.b,
                "v" => &mut spec.v,
                "x" => &mut spec.x,
                "y" => &mut spec.y,
                "t" => &mut spec.t,
                "p" => &mut spec.p,
                _ => {
                    return Err(QueryConfigError::UnknownOption {
                        query: "pathq".into(),
                        key: k.clone(),
                    })
                }
            };
            *slot = Some(sel);
        }
        spec.which = which.ok_or_else(|| QueryConfigError::bad("pathq", "q", "missing"))?;
        spec.validate()?;
        Ok(spec)
    }

    fn required(&self) -> Vec<(&'static str, &Option<Selector>)> {
        match self.which {
            Which::Q1 => vec![("a", &self.a), ("b", &self.b)],
            Which::Q2 | Which::Q3 => vec![("a", &self.a), ("b", &self.b), ("v", &self.v)],
            Which::Q4 => vec![("x", &self.x), ("y", &self.y)],
            Which::Q5 => vec![("a", &self.a), ("b", &self.b), ("t", &self.t), ("p", &self.p)],
        }
    }

    pub fn validate(&self) -> Result<(), QueryConfigError> {
        for (name, sel) in self.required() {
            if sel.is_none() {
                return Err(QueryConfigError::bad(
                    "pathq",
                    name,
                    format!("required by {}", self.which),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PathReport {
    pub query: Which,
    pub holds: bool,
    /// Some selector matched nothing, so the result is vacuously true.
    pub vacuous: bool,
    pub unresolved: Vec<String>,
    /// First edge that settled the answer, if any.
    pub witness: Option<u64>,
}

pub type ReportSink = Box<dyn FnMut(&PathReport)>;

fn matches(sel: &Option<Selector>, v: &ProvNode) -> bool {
    sel.as_ref().is_some_and(|s| s.matches(v))
}

/// Path properties reduced to two label bits per element.
pub struct PathQuery {
    spec: PathQuerySpec,
    resolved: Vec<bool>,
    /// First edge at which a `b` vertex picked up the reach bit.
    reached: Option<u64>,
    /// First edge at which the query became false.
    broken: Option<u64>,
    broken_at_node: bool,
    sink: ReportSink,
}

impl PathQuery {
    pub fn new(spec: PathQuerySpec, sink: impl FnMut(&PathReport) + 'static) -> Self {
        let n = spec.required().len();
        PathQuery {
            spec,
            resolved: vec![false; n],
            reached: None,
            broken: None,
            broken_at_node: false,
            sink: Box::new(sink),
        }
    }

    pub fn report(&self) -> PathReport {
        let unresolved: Vec<String> = self
            .spec
            .required()
            .iter()
            .zip(&self.resolved)
            // `p` is a property filter; matching nothing is meaningful.
            .filter(|((name, _), ok)| !**ok && *name != "p")
            .map(|((name, _), _)| name.to_string())
            .collect();
        if !unresolved.is_empty() {
            return PathReport {
                query: self.spec.which,
                holds: true,
                vacuous: true,
                unresolved,
                witness: None,
            };
        }
        let broken = self.broken.is_some() || self.broken_at_node;
        let (holds, witness) = match self.spec.which {
            Which::Q1 => (self.reached.is_some(), self.reached),
            Which::Q2 | Which::Q5 if broken => (false, self.broken),
            Which::Q2 | Which::Q5 => (self.reached.is_some(), self.reached),
            Which::Q3 | Which::Q4 => (!broken, self.broken),
        };
        PathReport {
            query: self.spec.which,
            holds,
            vacuous: false,
            unresolved,
            witness,
        }
    }

    fn is_bad(&self, v: &ProvNode) -> bool {
        matches(&self.spec.t, v) && !matches(&self.spec.p, v)
    }
}

impl QueryModule for PathQuery {
    fn name(&self) -> &str {
        "pathq"
    }

    fn label_bits(&self) -> u8 {
        2
    }

    fn init(&mut self, _ctx: &QueryCtx) -> Result<(), QueryError> {
        self.spec.validate().map_err(|e| QueryError::Failed(e.to_string()))
    }

    fn node(&mut self, ctx: &QueryCtx, v: &mut ProvNode) -> Result<(), QueryError> {
        for (i, (_, sel)) in self.spec.required().iter().enumerate() {
            if matches(sel, v) {
                self.resolved[i] = true;
            }
        }
        let (b0, b1) = (ctx.grant().bit(0), ctx.grant().bit(1));
        let s = &self.spec;
        match s.which {
            Which::Q1 => {
                if matches(&s.a, v) {
                    ctx.add_label(&mut v.scratch, b0)?;
                }
            }
            Which::Q2 => {
                if matches(&s.a, v) {
                    ctx.add_label(&mut v.scratch, b0)?;
                    if !matches(&s.v, v) {
                        ctx.add_label(&mut v.scratch, b1)?;
                    }
                }
            }
            Which::Q3 => {
                if matches(&s.a, v) {
                    ctx.add_label(&mut v.scratch, b0)?;
                    if matches(&s.v, v) {
                        ctx.add_label(&mut v.scratch, b1)?;
                    }
                }
            }
            Which::Q4 => {
                let (x, y) = (matches(&s.x, v), matches(&s.y, v));
                if x {
                    ctx.add_label(&mut v.scratch, b0)?;
                }
                if y {
                    ctx.add_label(&mut v.scratch, b1)?;
                }
                if x && y {
                    self.broken_at_node = true;
                }
            }
            Which::Q5 => {
                if matches(&s.a, v) {
                    ctx.add_label(&mut v.scratch, b0)?;
                    if self.is_bad(v) {
                        ctx.add_label(&mut v.scratch, b1)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn out_edge(&mut self, ctx: &QueryCtx, v: &mut ProvNode, e: &mut ProvEdge) -> Result<Verdict, QueryError> {
        for i in 0..2 {
            let bit = ctx.grant().bit(i);
            if ctx.has_label(&v.scratch, bit)? {
                ctx.add_label(&mut e.scratch, bit)?;
            }
        }
        Ok(Verdict::Allow)
    }

    fn in_edge(&mut self, ctx: &QueryCtx, e: &mut ProvEdge, v: &mut ProvNode) -> Result<Verdict, QueryError> {
        let (b0, b1) = (ctx.grant().bit(0), ctx.grant().bit(1));
        let r = ctx.has_label(&e.scratch, b0)?;
        let mut second = ctx.has_label(&e.scratch, b1)?;
        let s = &self.spec;
        match s.which {
            // Reach stops at `v`.
            Which::Q2 if matches(&s.v, v) => second = false,
            Which::Q3 if r && matches(&s.v, v) => second = true,
            Which::Q3 if matches(&s.v, v) && ctx.has_label(&v.scratch, b0)? => second = true,
            Which::Q5 if r && self.is_bad(v) => second = true,
            _ => {}
        }
        if r {
            ctx.add_label(&mut v.scratch, b0)?;
        }
        if second {
            ctx.add_label(&mut v.scratch, b1)?;
        }
        let first = |slot: &mut Option<u64>| {
            slot.get_or_insert(e.edge_id);
        };
        if s.which == Which::Q4 {
            if ctx.has_label(&v.scratch, b0)? && ctx.has_label(&v.scratch, b1)? {
                first(&mut self.broken);
            }
        } else if matches(&s.b, v) {
            if r {
                first(&mut self.reached);
            }
            if second {
                first(&mut self.broken);
            }
        }
        Ok(Verdict::Allow)
    }

    fn finish(&mut self, _ctx: &QueryCtx) -> Result<(), QueryError> {
        let report = self.report();
        (self.sink)(&report);
        Ok(())
    }
}
