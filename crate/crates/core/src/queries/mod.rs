//! Built-in queries: loss prevention, structural identity features, path
//! properties and hash-chain signing.

mod dtw;
mod lps;
mod pathq;
mod selector;
mod sign;
mod structid;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::engine::{QueryCtx, QueryError, QueryModule, Verdict};
use crate::model::{ProvEdge, ProvNode};

pub use dtw::dtw;
pub use lps::{Lps, LpsConfig, DEFAULT_RELEVANT};
pub use pathq::{PathQuery, PathQuerySpec, PathReport, ReportSink, Which};
pub use selector::{Selector, SelectorError};
pub use sign::{
    canonical_bytes, read_entries, verify, vertex_digest, write_entries, Digest32, EntrySink, HashChainEntry,
    HmacSigner, Sign, SignError, Signer, VerifyFailure, VerifyReport,
};
pub use structid::{
    feature_header, feature_row, DegreeList, FeatureCsv, FeatureSink, FeatureVector, StructId, StructIdConfig,
    DEFAULT_DEPTH, DEFAULT_WIDTH,
};

pub const BUILTIN: [&str; 5] = ["nil", "lps", "structid", "pathq", "sign"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryConfigError {
    #[error("unknown query {0:?} (built-ins: nil, lps, structid, pathq, sign)")]
    UnknownQuery(String),
    #[error("query {query}: unknown option {key:?}")]
    UnknownOption { query: String, key: String },
    #[error("query {query}: bad value for {key}: {reason}")]
    BadValue { query: String, key: String, reason: String },
}

impl QueryConfigError {
    pub(crate) fn bad(query: &str, key: &str, reason: impl fmt::Display) -> Self {
        QueryConfigError::BadValue {
            query: query.to_owned(),
            key: key.to_owned(),
            reason: reason.to_string(),
        }
    }
}

/// A query name with its `key=value` options, written `name:k=v,k=v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySpec {
    pub name: String,
    pub options: Vec<(String, String)>,
}

impl QuerySpec {
    pub fn option(&self, key: &str) -> Option<&str> {
        self.options
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

impl FromStr for QuerySpec {
    type Err = QueryConfigError;

    fn from_str(s: &str) -> Result<Self, QueryConfigError> {
        let (name, rest) = s.split_once(':').unwrap_or((s, ""));
        if !BUILTIN.contains(&name) {
            return Err(QueryConfigError::UnknownQuery(name.to_owned()));
        }
        let mut options = Vec::new();
        for kv in rest.split(',').filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| QueryConfigError::bad(name, kv, "expected key=value"))?;
            options.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        Ok(QuerySpec {
            name: name.to_owned(),
            options,
        })
    }
}

impl fmt::Display for QuerySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)?;
        for (i, (k, v)) in self.options.iter().enumerate() {
            write!(f, "{}{k}={v}", if i == 0 { ':' } else { ',' })?;
        }
        Ok(())
    }
}

/// Does nothing; measures the engine's own overhead.
#[derive(Debug, Default)]
pub struct Nil;

impl QueryModule for Nil {
    fn name(&self) -> &str {
        "nil"
    }

    fn out_edge(&mut self, _ctx: &QueryCtx, _v: &mut ProvNode, _e: &mut ProvEdge) -> Result<Verdict, QueryError> {
        Ok(Verdict::Allow)
    }

    fn in_edge(&mut self, _ctx: &QueryCtx, _e: &mut ProvEdge, _v: &mut ProvNode) -> Result<Verdict, QueryError> {
        Ok(Verdict::Allow)
    }
}
