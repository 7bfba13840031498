use std::fmt;
use std::str::FromStr;

use crate::model::{NodeKind, ProvNode};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad selector {input:?}: {reason}")]
pub struct SelectorError {
    pub input: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
enum Term {
    Kind(NodeKind),
    Id(u64),
    Glob(String, glob::Pattern),
    Eq(String, String),
}

/// Node predicate: a conjunction of terms joined by `+`, each one of
/// `kind:<kind>`, `id:<object id>`, `<attr>~<glob>` or `<attr>=<value>`.
///
/// `kind:inode+path~/secret/*` selects inodes whose path matches the glob.
#[derive(Debug, Clone)]
pub struct Selector {
    text: String,
    terms: Vec<Term>,
}

impl Selector {
    pub fn matches(&self, node: &ProvNode) -> bool {
        self.terms.iter().all(|t| match t {
            Term::Kind(k) => node.kind == *k,
            Term::Id(id) => node.id.object_id == *id,
            Term::Glob(attr, p) => node.attr(attr).is_some_and(|v| match v.as_str() {
                Some(s) => p.matches(s),
                None => p.matches(&v.to_string()),
            }),
            Term::Eq(attr, want) => node.attr(attr).is_some_and(|v| match v.as_str() {
                Some(s) => s == want,
                None => v.to_string() == *want,
            }),
        })
    }

    /// Kinds this selector is restricted to, if any.
    pub fn kinds(&self) -> Vec<NodeKind> {
        self.terms
            .iter()
            .filter_map(|t| match t {
                Term::Kind(k) => Some(*k),
                _ => None,
            })
            .collect()
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl FromStr for Selector {
    type Err = SelectorError;

    fn from_str(s: &str) -> Result<Self, SelectorError> {
        let err = |reason: String| SelectorError {
            input: s.to_owned(),
            reason,
        };
        let mut terms = Vec::new();
        for raw in s.split('+') {
            let raw = raw.trim();
            if raw.is_empty() {
                return Err(err("empty term".into()));
            }
            let term = if let Some(k) = raw.strip_prefix("kind:") {
                Term::Kind(NodeKind::parse(k).ok_or_else(|| err(format!("unknown kind {k:?}")))?)
            } else if let Some(id) = raw.strip_prefix("id:") {
                let parsed = match id.strip_prefix("0x") {
                    Some(hex) => u64::from_str_radix(hex, 16),
                    None => id.parse(),
                };
                Term::Id(parsed.map_err(|_| err(format!("bad id {id:?}")))?)
            } else if let Some((attr, pat)) = raw.split_once('~') {
                let p = glob::Pattern::new(pat).map_err(|e| err(e.to_string()))?;
                Term::Glob(attr.to_owned(), p)
            } else if let Some((attr, value)) = raw.split_once('=') {
                Term::Eq(attr.to_owned(), value.to_owned())
            } else {
                return Err(err(format!("cannot parse term {raw:?}")));
            };
            terms.push(term);
        }
        Ok(Selector {
            text: s.to_owned(),
            terms,
        })
    }
}
