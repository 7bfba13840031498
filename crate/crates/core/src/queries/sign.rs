use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use hmac::{Hmac, Mac};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slab::Slab;
use thiserror::Error;

use super::QueryConfigError;
use crate::engine::{QueryCtx, QueryError, QueryModule, Verdict};
use crate::model::{Element, NodeId, ProvEdge, ProvNode, ValueHandle};

pub type Digest32 = [u8; 32];

/// Detached signatures over vertex digests.
pub trait Signer {
    fn sign(&self, digest: &Digest32) -> Vec<u8>;
    fn verify(&self, digest: &Digest32, signature: &[u8]) -> bool;
}

/// HMAC-SHA256 keyed signer.
#[derive(Clone)]
pub struct HmacSigner {
    key: Vec<u8>,
}

impl HmacSigner {
    pub fn new(key: impl Into<Vec<u8>>) -> Result<Self, SignError> {
        let key = key.into();
        if key.is_empty() {
            return Err(SignError::KeyMissing);
        }
        Ok(HmacSigner { key })
    }

    fn mac(&self) -> Hmac<Sha256> {
        Hmac::<Sha256>::new_from_slice(&self.key).expect("hmac takes any key length")
    }
}

impl Signer for HmacSigner {
    fn sign(&self, digest: &Digest32) -> Vec<u8> {
        let mut m = self.mac();
        m.update(digest);
        m.finalize().into_bytes().to_vec()
    }

    fn verify(&self, digest: &Digest32, signature: &[u8]) -> bool {
        let mut m = self.mac();
        m.update(digest);
        m.verify_slice(signature).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SignError {
    #[error("no signing key configured")]
    KeyMissing,
    #[error("verification failed at vertex {node}: {reason}")]
    VerifyFailed { node: NodeId, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashChainEntry {
    pub node: NodeId,
    #[serde(with = "hex::serde")]
    pub digest: Digest32,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_hex")]
    pub signature: Option<Vec<u8>>,
}

mod opt_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_str(&hex::encode(b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| hex::decode(s).map_err(serde::de::Error::custom))
            .transpose()
    }
}

/// Bytes hashed for a vertex: its id, kind and attributes as JSON.
pub fn canonical_bytes(v: &ProvNode) -> Vec<u8> {
    serde_json::to_vec(&(&v.id, &v.kind, &v.attributes)).expect("node serializes")
}

/// `H(canonical(v) || sorted parent digests)`.
pub fn vertex_digest(v: &ProvNode, parents: &mut [Digest32]) -> Digest32 {
    parents.sort_unstable();
    let mut h = Sha256::new();
    h.update(canonical_bytes(v));
    for p in parents.iter() {
        h.update(p);
    }
    h.finalize().into()
}

enum Slot {
    Parents(Vec<Digest32>),
    Final(Digest32),
}

pub type EntrySink = Box<dyn FnMut(&HashChainEntry)>;

/// Signs every vertex over its own content and its parents' digests.
pub struct Sign {
    signer: Box<dyn Signer>,
    slots: Slab<Slot>,
    sink: EntrySink,
    signed: u64,
}

impl Sign {
    pub fn new(signer: Box<dyn Signer>, sink: impl FnMut(&HashChainEntry) + 'static) -> Self {
        Sign {
            signer,
            slots: Slab::new(),
            sink: Box::new(sink),
            signed: 0,
        }
    }

    /// Builds an HMAC signer from `key=<text>` or `key_hex=<hex>`.
    pub fn from_options(
        opts: &[(String, String)],
        sink: impl FnMut(&HashChainEntry) + 'static,
    ) -> Result<Self, QueryConfigError> {
        let mut key = None;
        for (k, v) in opts {
            match k.as_str() {
                "key" => key = Some(v.as_bytes().to_vec()),
                "key_hex" => key = Some(hex::decode(v).map_err(|e| QueryConfigError::bad("sign", k, e))?),
                _ => {
                    return Err(QueryConfigError::UnknownOption {
                        query: "sign".into(),
                        key: k.clone(),
                    })
                }
            }
        }
        let signer = HmacSigner::new(key.unwrap_or_default()).map_err(|e| QueryConfigError::bad("sign", "key", e))?;
        Ok(Sign::new(Box::new(signer), sink))
    }

    pub fn signed(&self) -> u64 {
        self.signed
    }

    pub fn live_values(&self) -> usize {
        self.slots.len()
    }

    fn finalize(&mut self, ctx: &QueryCtx, v: &mut ProvNode) -> Digest32 {
        let h = ctx.value(&v.scratch);
        let mut parents = match h.map(|h| &mut self.slots[h.0]) {
            Some(Slot::Final(d)) => return *d,
            Some(Slot::Parents(p)) => std::mem::take(p),
            None => Vec::new(),
        };
        let digest = vertex_digest(v, &mut parents);
        let signature = self.signer.sign(&digest);
        match h {
            Some(h) => self.slots[h.0] = Slot::Final(digest),
            None => {
                let h = ValueHandle(self.slots.insert(Slot::Final(digest)));
                ctx.set_value(&mut v.scratch, h);
            }
        }
        self.signed += 1;
        (self.sink)(&HashChainEntry {
            node: v.id,
            digest,
            signature: Some(signature),
        });
        digest
    }
}

impl QueryModule for Sign {
    fn name(&self) -> &str {
        "sign"
    }

    fn out_edge(&mut self, ctx: &QueryCtx, v: &mut ProvNode, e: &mut ProvEdge) -> Result<Verdict, QueryError> {
        let digest = self.finalize(ctx, v);
        let h = self.slots.insert(Slot::Final(digest));
        if let Some(old) = ctx.set_value(&mut e.scratch, ValueHandle(h)) {
            self.slots.try_remove(old.0);
        }
        Ok(Verdict::Allow)
    }

    fn in_edge(&mut self, ctx: &QueryCtx, e: &mut ProvEdge, v: &mut ProvNode) -> Result<Verdict, QueryError> {
        let digest = match ctx.value(&e.scratch).map(|h| &self.slots[h.0]) {
            Some(Slot::Final(d)) => *d,
            _ => return Err(QueryError::Failed(format!("edge {} carries no digest", e.edge_id))),
        };
        match ctx.value(&v.scratch) {
            Some(h) => match &mut self.slots[h.0] {
                Slot::Parents(p) => p.push(digest),
                Slot::Final(_) => {
                    return Err(QueryError::Failed(format!("{} already signed", v.id)));
                }
            },
            None => {
                let h = ValueHandle(self.slots.insert(Slot::Parents(vec![digest])));
                ctx.set_value(&mut v.scratch, h);
            }
        }
        Ok(Verdict::Allow)
    }

    fn evict_node(&mut self, ctx: &QueryCtx, v: &mut ProvNode) -> Result<(), QueryError> {
        self.finalize(ctx, v);
        Ok(())
    }

    fn drop_value(&mut self, handle: ValueHandle) {
        self.slots.try_remove(handle.0);
    }
}

pub fn write_entries<W: Write>(out: &mut W, entries: &[HashChainEntry]) -> io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut *out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_entries<R: BufRead>(input: R) -> io::Result<Vec<HashChainEntry>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyFailure {
    pub node: NodeId,
    /// Position of the vertex's record in the graph.
    pub position: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub checked: usize,
    pub failures: Vec<VerifyFailure>,
}

impl VerifyReport {
    /// Earliest failing vertex in graph order.
    pub fn first_failure(&self) -> Option<&VerifyFailure> {
        self.failures.first()
    }

    pub fn into_result(self) -> Result<usize, SignError> {
        match self.failures.into_iter().next() {
            None => Ok(self.checked),
            Some(f) => Err(SignError::VerifyFailed {
                node: f.node,
                reason: f.reason,
            }),
        }
    }
}

/// Checks every vertex of a stored graph against the entry log. Each check
/// reads only the vertex, its in-edges and its parents' entries.
pub fn verify(graph: &[Element], entries: &[HashChainEntry], signer: &(dyn Signer + Sync)) -> VerifyReport {
    let by_node: HashMap<NodeId, &HashChainEntry> = entries.iter().map(|e| (e.node, e)).collect();
    let mut parents: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    let mut nodes = Vec::new();
    for (pos, el) in graph.iter().enumerate() {
        match el {
            Element::Node(n) => nodes.push((pos, &n.node)),
            Element::Edge(e) => parents.entry(e.to).or_default().push(e.from),
            Element::Terminate(_) => {}
        }
    }
    let check = |v: &ProvNode| -> Result<(), String> {
        let entry = by_node.get(&v.id).ok_or("no entry")?;
        let mut digests = Vec::new();
        for p in parents.get(&v.id).map(Vec::as_slice).unwrap_or_default() {
            digests.push(by_node.get(p).ok_or_else(|| format!("no entry for parent {p}"))?.digest);
        }
        if vertex_digest(v, &mut digests) != entry.digest {
            return Err("digest mismatch".into());
        }
        match &entry.signature {
            Some(sig) if signer.verify(&entry.digest, sig) => Ok(()),
            Some(_) => Err("bad signature".into()),
            None => Err("unsigned".into()),
        }
    };
    let mut failures: Vec<VerifyFailure> = nodes
        .par_iter()
        .filter_map(|(pos, v)| {
            check(v).err().map(|reason| VerifyFailure {
                node: v.id,
                position: *pos,
                reason,
            })
        })
        .collect();
    failures.sort_by_key(|f| f.position);
    VerifyReport {
        checked: nodes.len(),
        failures,
    }
}
