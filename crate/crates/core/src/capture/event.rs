use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Lane, NodeId, Scalar};

/// Simulated system-call or network-hook event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Read,
    Write,
    Open,
    Exec,
    Fork,
    CloneThread,
    Mmap,
    MsyncRead,
    MsyncWrite,
    Send,
    Recv,
    SetXattr,
    Exit,
    PacketOut,
    PacketIn,
}

impl EventKind {
    pub const ALL: [EventKind; 15] = [
        EventKind::Read,
        EventKind::Write,
        EventKind::Open,
        EventKind::Exec,
        EventKind::Fork,
        EventKind::CloneThread,
        EventKind::Mmap,
        EventKind::MsyncRead,
        EventKind::MsyncWrite,
        EventKind::Send,
        EventKind::Recv,
        EventKind::SetXattr,
        EventKind::Exit,
        EventKind::PacketOut,
        EventKind::PacketIn,
    ];
}

/// What the event acts on: a live object, or a descriptor resolved at
/// first `Open`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectRef {
    Id(u64),
    Path(String),
    Address(String),
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SysEvent {
    pub lane: Lane,
    pub seq: u64,
    pub kind: EventKind,
    pub subject: u64,
    pub object: ObjectRef,
    #[serde(default)]
    pub params: BTreeMap<String, Scalar>,
    /// Origin id of a packet published elsewhere (`PacketIn` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<NodeId>,
}

impl SysEvent {
    pub fn new(lane: Lane, seq: u64, kind: EventKind, subject: u64, object: ObjectRef) -> Self {
        SysEvent {
            lane,
            seq,
            kind,
            subject,
            object,
            params: BTreeMap::new(),
            origin: None,
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Scalar>) -> Self {
        self.params.insert(key.to_owned(), value.into());
        self
    }

    pub fn param(&self, key: &str) -> Option<&Scalar> {
        self.params.get(key)
    }

    pub fn param_u64(&self, key: &str) -> Option<u64> {
        match self.params.get(key)? {
            Scalar::Uint(v) => Some(*v),
            Scalar::Int(v) => u64::try_from(*v).ok(),
            _ => None,
        }
    }
}

/// Bits of an object id that carry the owning lane. Objects never migrate,
/// so the lane of any event is a pure function of its subject's id.
pub const LANE_SHIFT: u32 = 40;

pub fn lane_prefix(lane: Lane) -> u64 {
    (lane as u64 + 1) << LANE_SHIFT
}

/// Lane owning the object (for ids allocated by an event source).
pub fn lane_of(object_id: u64) -> Lane {
    (((object_id & !crate::model::INTERNAL_ID_BIT) >> LANE_SHIFT) as Lane).wrapping_sub(1)
}

/// Id of the task created when a lane boots.
pub fn root_task_id(lane: Lane) -> u64 {
    lane_prefix(lane) | 1
}
