use rustc_hash::FxHashSet;

use serde_json::json;

use super::{QueryConfigError, Selector};
use crate::engine::{Mode, QueryCtx, QueryError, QueryModule, Verdict};
use crate::model::{NodeKind, ProvEdge, ProvNode, RelationKind};

#[derive(Debug, Clone)]
pub struct LpsConfig {
    pub sources: Vec<Selector>,
    pub relevant: FxHashSet<RelationKind>,
    pub sinks: FxHashSet<NodeKind>,
}

pub const DEFAULT_RELEVANT: [RelationKind; 9] = [
    RelationKind::Read,
    RelationKind::Write,
    RelationKind::Version,
    RelationKind::Send,
    RelationKind::Receive,
    RelationKind::SharedRead,
    RelationKind::SharedWrite,
    RelationKind::Create,
    RelationKind::Exec,
];

impl Default for LpsConfig {
    fn default() -> Self {
        LpsConfig {
            sources: vec!["kind:inode+path~/secret/*".parse().expect("static selector")],
            relevant: DEFAULT_RELEVANT.into_iter().collect(),
            sinks: [NodeKind::Socket, NodeKind::Packet].into_iter().collect(),
        }
    }
}

impl LpsConfig {
    /// Applies `key=value` options: `source` (selector, `|`-separated for
    /// several), `relevant` and `sinks` (`|`-separated kind names).
    pub fn with_options(mut self, opts: &[(String, String)]) -> Result<Self, QueryConfigError> {
        for (k, v) in opts {
            match k.as_str() {
                "source" | "sources" => {
                    self.sources = v
                        .split('|')
                        .map(|s| s.parse().map_err(|e| QueryConfigError::bad("lps", k, e)))
                        .collect::<Result<_, _>>()?;
                }
                "relevant" => {
                    self.relevant = v
                        .split('|')
                        .map(|s| RelationKind::parse(s).ok_or_else(|| QueryConfigError::bad("lps", k, s)))
                        .collect::<Result<_, _>>()?;
                }
                "sinks" => {
                    self.sinks = v
                        .split('|')
                        .map(|s| NodeKind::parse(s).ok_or_else(|| QueryConfigError::bad("lps", k, s)))
                        .collect::<Result<_, _>>()?;
                }
                _ => {
                    return Err(QueryConfigError::UnknownOption {
                        query: "lps".into(),
                        key: k.clone(),
                    })
                }
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), QueryConfigError> {
        for s in &self.sources {
            if s.kinds().iter().any(|k| self.sinks.contains(k)) {
                return Err(QueryConfigError::bad(
                    "lps",
                    "source",
                    format!("{s} selects a sink kind"),
                ));
            }
        }
        Ok(())
    }
}

/// Loss prevention: confidential sources must not reach a network sink.
pub struct Lps {
    config: LpsConfig,
}

impl Lps {
    pub fn new(config: LpsConfig) -> Self {
        Lps { config }
    }
}

impl QueryModule for Lps {
    fn name(&self) -> &str {
        "lps"
    }

    fn label_bits(&self) -> u8 {
        1
    }

    fn init(&mut self, _ctx: &QueryCtx) -> Result<(), QueryError> {
        self.config.validate().map_err(|e| QueryError::Failed(e.to_string()))
    }

    fn node(&mut self, ctx: &QueryCtx, v: &mut ProvNode) -> Result<(), QueryError> {
        if self.config.sources.iter().any(|s| s.matches(v)) {
            ctx.add_label(&mut v.scratch, ctx.grant().bit(0))?;
        }
        Ok(())
    }

    fn out_edge(&mut self, ctx: &QueryCtx, v: &mut ProvNode, e: &mut ProvEdge) -> Result<Verdict, QueryError> {
        let bit = ctx.grant().bit(0);
        if self.config.relevant.contains(&e.kind) && ctx.has_label(&v.scratch, bit)? {
            ctx.add_label(&mut e.scratch, bit)?;
        }
        Ok(Verdict::Allow)
    }

    fn in_edge(&mut self, ctx: &QueryCtx, e: &mut ProvEdge, v: &mut ProvNode) -> Result<Verdict, QueryError> {
        let bit = ctx.grant().bit(0);
        if !ctx.has_label(&e.scratch, bit)? {
            return Ok(Verdict::Allow);
        }
        ctx.add_label(&mut v.scratch, bit)?;
        if !self.config.sinks.contains(&v.kind) {
            return Ok(Verdict::Allow);
        }
        let payload = json!({ "sink": v.id, "kind": v.kind });
        Ok(match ctx.mode() {
            Mode::Detect => Verdict::Alert(payload),
            Mode::Enforce => Verdict::Deny(payload),
        })
    }
}
