use std::collections::HashMap;

use smallvec::SmallVec;
use thiserror::Error;

use super::event::{root_task_id, EventKind, ObjectRef, SysEvent};
use crate::model::{attrs, Attributes, Element, GraphBuilder, Lane, ModelError, NodeKind, RelationKind, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CaptureError {
    #[error("unknown object {0:#x}")]
    UnknownObject(u64),
    #[error("malformed event (lane {lane}, seq {seq}): {reason}")]
    MalformedEvent { lane: Lane, seq: u64, reason: String },
    #[error(transparent)]
    Model(ModelError),
}

impl From<ModelError> for CaptureError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::UnknownObject(id) => CaptureError::UnknownObject(id),
            other => CaptureError::Model(other),
        }
    }
}

/// Attributes a task's version carries; `Exec` may revise any of them.
pub const TASK_ATTRS: [&str; 6] = ["uid", "gid", "ns", "secctx", "mem_usage", "cpu_time"];

#[derive(Debug, Default)]
struct TaskShare {
    /// Shared states the task is attached to: its process memory first,
    /// then memory-mapped files.
    attached: SmallVec<[u64; 4]>,
}

#[derive(Debug)]
struct SharedInfo {
    refs: u32,
    /// Backing inode for mapped files.
    file: Option<u64>,
}

/// Per-lane hook models: translates events into provenance subgraphs.
#[derive(Debug)]
pub struct Capture {
    builder: GraphBuilder,
    names: HashMap<String, u64>,
    tasks: HashMap<u64, TaskShare>,
    shared: HashMap<u64, SharedInfo>,
    mappings: HashMap<u64, u64>,
}

impl Capture {
    pub fn new(lane: Lane, machine_id: u32, boot_id: u32) -> Self {
        Capture {
            builder: GraphBuilder::new(lane, machine_id, boot_id),
            names: HashMap::new(),
            tasks: HashMap::new(),
            shared: HashMap::new(),
            mappings: HashMap::new(),
        }
    }

    pub fn lane(&self) -> Lane {
        self.builder.lane()
    }

    pub fn builder(&self) -> &GraphBuilder {
        &self.builder
    }

    /// Publishes the lane's root task and its process memory.
    pub fn boot(&mut self) -> Vec<Element> {
        let mut out = Vec::new();
        let root = root_task_id(self.lane());
        let task_attrs = attrs([
            ("uid", Scalar::Uint(0)),
            ("gid", Scalar::Uint(0)),
            ("ns", Scalar::Uint(1)),
            ("secctx", Scalar::from("system_u:system_r:init_t")),
            ("pid", Scalar::Uint(root)),
            ("mem_usage", Scalar::Uint(4096)),
            ("cpu_time", Scalar::Uint(0)),
        ]);
        self.builder
            .adopt_object(root, NodeKind::Task, task_attrs, &mut out)
            .expect("fresh lane");
        let mem = self.new_memory(root, &mut out);
        self.tasks.insert(
            root,
            TaskShare {
                attached: SmallVec::from_slice(&[mem]),
            },
        );
        out
    }

    /// Terminates every live object on the lane.
    pub fn shutdown(&mut self) -> Vec<Element> {
        let mut out = Vec::new();
        self.builder.shutdown(&mut out);
        self.names.clear();
        self.tasks.clear();
        self.shared.clear();
        self.mappings.clear();
        out
    }

    pub fn translate(&mut self, ev: &SysEvent) -> Result<Vec<Element>, CaptureError> {
        let mut out = Vec::new();
        self.translate_into(ev, &mut out)?;
        Ok(out)
    }

    /// Appends the event's subgraph to `out`. On error nothing is appended
    /// unless the failure happens mid-template, which the checks up front
    /// rule out for well-formed input.
    pub fn translate_into(&mut self, ev: &SysEvent, out: &mut Vec<Element>) -> Result<(), CaptureError> {
        if ev.lane != self.lane() {
            return Err(self.malformed(ev, format!("event for lane {} on lane {}", ev.lane, self.lane())));
        }
        let t = ev.subject;
        match self.builder.live(t) {
            Some(s) if s.kind == NodeKind::Task => {}
            Some(_) => return Err(self.malformed(ev, "subject is not a task")),
            None => return Err(CaptureError::UnknownObject(t)),
        }
        match ev.kind {
            EventKind::Read => {
                let f = self.object_of(ev, NodeKind::Inode)?;
                self.builder
                    .record_flow(f, t, RelationKind::Read, flow_attrs(ev), out)?;
                self.spill(t, None, out)?;
            }
            EventKind::Write => {
                let f = self.object_of(ev, NodeKind::Inode)?;
                self.absorb(t, out)?;
                self.builder
                    .record_flow(t, f, RelationKind::Write, flow_attrs(ev), out)?;
            }
            EventKind::Open => self.open(ev, out)?,
            EventKind::Exec => {
                let f = self.object_of(ev, NodeKind::Inode)?;
                self.builder
                    .record_flow(f, t, RelationKind::Exec, Attributes::new(), out)?;
                let updates: Attributes = TASK_ATTRS
                    .iter()
                    .filter_map(|k| ev.param(k).map(|v| (k.to_string(), v.clone())))
                    .collect();
                if !updates.is_empty() {
                    self.builder.revise(t, updates, out)?;
                }
                self.spill(t, None, out)?;
            }
            EventKind::Fork | EventKind::CloneThread => self.spawn(ev, out)?,
            EventKind::Mmap => self.mmap(ev, out)?,
            EventKind::MsyncWrite => {
                let f = self.object_of(ev, NodeKind::Inode)?;
                let s = self.attached_mapping(ev, f)?;
                self.builder
                    .record_flow(t, s, RelationKind::SharedWrite, Attributes::new(), out)?;
                self.builder
                    .record_flow(s, f, RelationKind::Write, Attributes::new(), out)?;
            }
            EventKind::MsyncRead => {
                let f = self.object_of(ev, NodeKind::Inode)?;
                let s = self.attached_mapping(ev, f)?;
                self.builder
                    .record_flow(f, s, RelationKind::Read, Attributes::new(), out)?;
                self.builder
                    .record_flow(s, t, RelationKind::SharedRead, Attributes::new(), out)?;
                self.spill(t, Some(s), out)?;
            }
            EventKind::Send | EventKind::PacketOut => {
                let k = self.object_of(ev, NodeKind::Socket)?;
                let p = ev
                    .param_u64("packet")
                    .ok_or_else(|| self.malformed(ev, "missing packet id"))?;
                if self.builder.live(p).is_some() {
                    return Err(self.malformed(ev, "packet id already live"));
                }
                self.absorb(t, out)?;
                self.builder
                    .record_flow(t, k, RelationKind::Send, flow_attrs(ev), out)?;
                let mut pattrs = attrs([("remote", ev.kind == EventKind::PacketOut)]);
                if let Some(dst) = ev.param("dst") {
                    pattrs.insert("dst".into(), dst.clone());
                }
                self.builder.adopt_object(p, NodeKind::Packet, pattrs, out)?;
                self.builder
                    .record_flow(k, p, RelationKind::Send, Attributes::new(), out)?;
                if ev.kind == EventKind::PacketOut {
                    self.builder.release(p)?;
                }
            }
            EventKind::Recv | EventKind::PacketIn => {
                let k = self.object_of(ev, NodeKind::Socket)?;
                let p = if ev.kind == EventKind::PacketIn {
                    let origin = ev
                        .origin
                        .ok_or_else(|| self.malformed(ev, "packet-in without origin"))?;
                    self.builder.import_object(origin, NodeKind::Packet)?;
                    origin.object_id
                } else {
                    let p = ev
                        .param_u64("packet")
                        .ok_or_else(|| self.malformed(ev, "missing packet id"))?;
                    match self.builder.live(p) {
                        Some(s) if s.kind == NodeKind::Packet => p,
                        Some(_) => return Err(self.malformed(ev, "not a packet")),
                        None => return Err(CaptureError::UnknownObject(p)),
                    }
                };
                self.builder
                    .record_flow(p, k, RelationKind::Receive, Attributes::new(), out)?;
                self.builder
                    .record_flow(k, t, RelationKind::Receive, flow_attrs(ev), out)?;
                self.builder.terminate_object(p, out)?;
                self.spill(t, None, out)?;
            }
            EventKind::SetXattr => {
                let f = self.object_of(ev, NodeKind::Inode)?;
                let name = ev
                    .param("name")
                    .and_then(Scalar::as_str)
                    .ok_or_else(|| self.malformed(ev, "missing xattr name"))?
                    .to_owned();
                let value = ev.param("value").cloned().unwrap_or(Scalar::from(""));
                self.absorb(t, out)?;
                let x = self
                    .builder
                    .new_object(
                        NodeKind::XattrValue,
                        attrs([("name", Scalar::from(name.as_str())), ("value", value.clone())]),
                        out,
                    )
                    .id
                    .object_id;
                self.builder
                    .record_flow(t, x, RelationKind::SetAttr, Attributes::new(), out)?;
                self.builder.revise(f, attrs([(format!("xattr.{name}"), value)]), out)?;
                self.builder
                    .record_flow(x, f, RelationKind::SetAttr, Attributes::new(), out)?;
                self.builder.terminate_object(x, out)?;
            }
            EventKind::Exit => {
                let share = self.tasks.remove(&t).unwrap_or_default();
                self.builder.terminate_object(t, out)?;
                for s in share.attached {
                    self.detach(s, out)?;
                }
            }
        }
        Ok(())
    }

    fn malformed(&self, ev: &SysEvent, reason: impl Into<String>) -> CaptureError {
        CaptureError::MalformedEvent {
            lane: ev.lane,
            seq: ev.seq,
            reason: reason.into(),
        }
    }

    fn resolve(&self, r: &ObjectRef) -> Option<u64> {
        match r {
            ObjectRef::Id(id) => Some(*id),
            ObjectRef::Path(p) => self.names.get(p.as_str()).copied(),
            ObjectRef::Address(a) => self.names.get(a.as_str()).copied(),
            ObjectRef::None => None,
        }
    }

    fn object_of(&self, ev: &SysEvent, kind: NodeKind) -> Result<u64, CaptureError> {
        let id = self
            .resolve(&ev.object)
            .ok_or_else(|| self.malformed(ev, format!("unresolved object {:?}", ev.object)))?;
        match self.builder.live(id) {
            Some(s) if s.kind == kind => Ok(id),
            Some(s) => Err(self.malformed(ev, format!("expected {}, found {}", kind.name(), s.kind.name()))),
            None => Err(CaptureError::UnknownObject(id)),
        }
    }

    fn open(&mut self, ev: &SysEvent, out: &mut Vec<Element>) -> Result<(), CaptureError> {
        let path = ev.param("path").and_then(Scalar::as_str).map(str::to_owned);
        let addr = ev.param("address").and_then(Scalar::as_str).map(str::to_owned);
        let (id, name, kind) = match &ev.object {
            ObjectRef::Id(id) => match (path, addr) {
                (Some(p), _) => (Some(*id), p, NodeKind::Inode),
                (None, Some(a)) => (Some(*id), a, NodeKind::Socket),
                (None, None) => {
                    return match self.builder.live(*id) {
                        Some(_) => Ok(()),
                        None => Err(self.malformed(ev, "open of unknown id without path or address")),
                    }
                }
            },
            ObjectRef::Path(p) => (None, p.clone(), NodeKind::Inode),
            ObjectRef::Address(a) => (None, a.clone(), NodeKind::Socket),
            ObjectRef::None => return Err(self.malformed(ev, "open without object")),
        };
        if let Some(&known) = self.names.get(&name) {
            if self.builder.live(known).is_some() {
                return Ok(());
            }
        }
        let key = if kind == NodeKind::Inode { "path" } else { "address" };
        let a = attrs([(key, Scalar::from(name.as_str()))]);
        let obj = match id {
            Some(id) if self.builder.live(id).is_some() => id,
            Some(id) => self.builder.adopt_object(id, kind, a, out)?.id.object_id,
            None => self.builder.new_object(kind, a, out).id.object_id,
        };
        self.names.insert(name, obj);
        Ok(())
    }

    fn spawn(&mut self, ev: &SysEvent, out: &mut Vec<Element>) -> Result<(), CaptureError> {
        let t = ev.subject;
        let c = ev
            .param_u64("child")
            .ok_or_else(|| self.malformed(ev, "missing child id"))?;
        if self.builder.live(c).is_some() {
            return Err(self.malformed(ev, "child id already live"));
        }
        let mut child_attrs: Attributes = self
            .builder
            .live(t)
            .map(|s| {
                s.attributes
                    .iter()
                    .filter(|(k, _)| TASK_ATTRS.contains(&k.as_str()))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect()
            })
            .unwrap_or_default();
        child_attrs.insert("pid".into(), Scalar::Uint(c));
        child_attrs.insert("cpu_time".into(), Scalar::Uint(0));
        self.absorb(t, out)?;
        self.builder.adopt_object(c, NodeKind::Task, child_attrs, out)?;
        if ev.kind == EventKind::Fork {
            self.builder
                .record_flow(t, c, RelationKind::Fork, Attributes::new(), out)?;
            let mem = self.new_memory(c, out);
            self.builder
                .record_flow(c, mem, RelationKind::SharedWrite, Attributes::new(), out)?;
            self.tasks.insert(
                c,
                TaskShare {
                    attached: SmallVec::from_slice(&[mem]),
                },
            );
        } else {
            self.builder
                .record_flow(t, c, RelationKind::Clone, Attributes::new(), out)?;
            let attached = self.tasks.get(&t).map(|s| s.attached.clone()).unwrap_or_default();
            let mem = *attached
                .first()
                .ok_or_else(|| self.malformed(ev, "parent has no process memory"))?;
            self.builder
                .record_flow(t, mem, RelationKind::SharedWrite, Attributes::new(), out)?;
            self.builder
                .record_flow(mem, c, RelationKind::SharedRead, Attributes::new(), out)?;
            for s in &attached {
                self.shared.get_mut(s).expect("attached state is tracked").refs += 1;
            }
            self.tasks.insert(c, TaskShare { attached });
        }
        Ok(())
    }

    fn mmap(&mut self, ev: &SysEvent, out: &mut Vec<Element>) -> Result<(), CaptureError> {
        let t = ev.subject;
        let f = self.object_of(ev, NodeKind::Inode)?;
        let prot = ev.param("prot").and_then(Scalar::as_str).unwrap_or("rw");
        let (read, write) = (prot.contains('r'), prot.contains('w'));
        if !read && !write {
            return Err(self.malformed(ev, format!("bad protection {prot:?}")));
        }
        let s = match self.mappings.get(&f) {
            Some(&s) => s,
            None => {
                let path = self
                    .builder
                    .live(f)
                    .and_then(|st| st.attributes.get("path").cloned())
                    .unwrap_or(Scalar::from(""));
                let s = self
                    .builder
                    .new_object(
                        NodeKind::SharedState,
                        attrs([("role", Scalar::from("mmap")), ("path", path)]),
                        out,
                    )
                    .id
                    .object_id;
                self.builder
                    .record_flow(f, s, RelationKind::Read, Attributes::new(), out)?;
                self.shared.insert(s, SharedInfo { refs: 0, file: Some(f) });
                self.mappings.insert(f, s);
                s
            }
        };
        let share = self.tasks.entry(t).or_default();
        if !share.attached.contains(&s) {
            share.attached.push(s);
            self.shared.get_mut(&s).expect("mapping is tracked").refs += 1;
        }
        if write {
            self.builder
                .record_flow(t, s, RelationKind::SharedWrite, Attributes::new(), out)?;
        }
        if read {
            self.builder
                .record_flow(s, t, RelationKind::SharedRead, Attributes::new(), out)?;
            self.spill(t, Some(s), out)?;
        }
        Ok(())
    }

    fn attached_mapping(&self, ev: &SysEvent, f: u64) -> Result<u64, CaptureError> {
        let s = self
            .mappings
            .get(&f)
            .copied()
            .ok_or_else(|| self.malformed(ev, "file is not mapped"))?;
        let attached = self
            .tasks
            .get(&ev.subject)
            .is_some_and(|share| share.attached.contains(&s));
        if attached {
            Ok(s)
        } else {
            Err(self.malformed(ev, "task has not mapped the file"))
        }
    }

    fn new_memory(&mut self, task: u64, out: &mut Vec<Element>) -> u64 {
        let mem = self
            .builder
            .new_object(
                NodeKind::SharedState,
                attrs([("role", Scalar::from("process_memory")), ("owner", Scalar::Uint(task))]),
                out,
            )
            .id
            .object_id;
        self.shared.insert(mem, SharedInfo { refs: 1, file: None });
        mem
    }

    /// Before a task emits information, state it shares with other tasks
    /// flows into it.
    fn absorb(&mut self, t: u64, out: &mut Vec<Element>) -> Result<(), CaptureError> {
        let attached = match self.tasks.get(&t) {
            Some(share) => share.attached.clone(),
            None => return Ok(()),
        };
        for s in attached {
            self.builder
                .record_flow(s, t, RelationKind::SharedRead, Attributes::new(), out)?;
        }
        Ok(())
    }

    /// After a task receives information, it flows on into every shared
    /// state the task is attached to (except the one it came from).
    fn spill(&mut self, t: u64, except: Option<u64>, out: &mut Vec<Element>) -> Result<(), CaptureError> {
        let attached = match self.tasks.get(&t) {
            Some(share) => share.attached.clone(),
            None => return Ok(()),
        };
        for s in attached {
            if Some(s) != except {
                self.builder
                    .record_flow(t, s, RelationKind::SharedWrite, Attributes::new(), out)?;
            }
        }
        Ok(())
    }

    fn detach(&mut self, s: u64, out: &mut Vec<Element>) -> Result<(), CaptureError> {
        let info = self.shared.get_mut(&s).expect("attached state is tracked");
        info.refs -= 1;
        if info.refs == 0 {
            let info = self.shared.remove(&s).expect("present");
            if let Some(f) = info.file {
                self.mappings.remove(&f);
            }
            self.builder.terminate_object(s, out)?;
        }
        Ok(())
    }
}

fn flow_attrs(ev: &SysEvent) -> Attributes {
    ["offset", "flags", "mode", "len"]
        .iter()
        .filter_map(|k| ev.param(k).map(|v| (k.to_string(), v.clone())))
        .collect()
}
