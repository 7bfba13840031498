//! Seeded synthetic workloads standing in for live system activity.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::event::{lane_prefix, root_task_id, EventKind, ObjectRef, SysEvent};
use crate::model::{Lane, NodeId, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub n_tasks: usize,
    pub n_files: usize,
    pub n_sockets: usize,
    pub event_count: usize,
    pub confidential_paths: Vec<String>,
    pub seed: u64,
    pub lanes: u16,
    pub exfiltration_rate: f64,
    /// Probability that an ordinary event is a fork, clone or exit.
    pub churn: f64,
    pub machine_id: u32,
    pub boot_id: u32,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            n_tasks: 32,
            n_files: 64,
            n_sockets: 8,
            event_count: 10_000,
            confidential_paths: vec!["/secret/*".into()],
            seed: 1,
            lanes: 1,
            exfiltration_rate: 0.01,
            churn: 0.05,
            machine_id: 1,
            boot_id: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config i/o: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl WorkloadConfig {
    /// Reads a flat `key = value` file; `#` starts a comment.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = WorkloadConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                value: value.into(),
            })
        }
        match key {
            "n_tasks" => self.n_tasks = num(key, value)?,
            "n_files" => self.n_files = num(key, value)?,
            "n_sockets" => self.n_sockets = num(key, value)?,
            "event_count" => self.event_count = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "lanes" => self.lanes = num(key, value)?,
            "exfiltration_rate" => self.exfiltration_rate = num(key, value)?,
            "churn" => self.churn = num(key, value)?,
            "machine_id" => self.machine_id = num(key, value)?,
            "boot_id" => self.boot_id = num(key, value)?,
            "confidential_paths" => {
                self.confidential_paths = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.lanes == 0 {
            return Err(ConfigError::Invalid("lanes must be at least 1".into()));
        }
        if self.n_files == 0 || self.n_sockets == 0 {
            return Err(ConfigError::Invalid("need at least one file and one socket".into()));
        }
        if !(0.0..=1.0).contains(&self.exfiltration_rate) || !(0.0..=1.0).contains(&self.churn) {
            return Err(ConfigError::Invalid("rates must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn is_confidential(&self, path: &str) -> bool {
        self.confidential_paths
            .iter()
            .filter_map(|g| glob::Pattern::new(g).ok())
            .any(|p| p.matches(path))
    }
}

/// Ground-truth record of one planted leak.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plant {
    pub plant_id: u64,
    /// Object id of the confidential inode that was read.
    pub source_node: u64,
    pub sink_event: SinkEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SinkEvent {
    pub lane: Lane,
    pub seq: u64,
    /// Packet created by the send.
    pub packet: u64,
}

const MAX_PENDING_PACKETS: usize = 64;
const MAX_MAPPINGS: usize = 2;

#[derive(Debug, Default)]
struct LaneState {
    next_id: u64,
    next_seq: u64,
    tasks: Vec<u64>,
    target_tasks: usize,
    files: Vec<(u64, String)>,
    confidential: Vec<u64>,
    sockets: Vec<u64>,
    local_packets: VecDeque<u64>,
    inbound: VecDeque<NodeId>,
    mappings: HashMap<u64, Vec<u64>>,
}

/// Deterministic event source. Iterate it, or call [`Workload::collect_all`].
///
/// Besides `event_count` ordinary events the stream contains a boot prefix
/// (opens and forks) and a drain suffix receiving any packets still in
/// flight between lanes, so that every object is eventually terminated.
pub struct Workload {
    cfg: WorkloadConfig,
    rng: ChaCha8Rng,
    lanes: Vec<LaneState>,
    queue: VecDeque<SysEvent>,
    emitted: usize,
    plants: Vec<Plant>,
    next_plant: u64,
    phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Boot,
    Main,
    Drain,
    Done,
}

impl Workload {
    pub fn new(cfg: WorkloadConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let lanes = (0..cfg.lanes)
            .map(|_| LaneState {
                next_id: 2,
                next_seq: 1,
                ..LaneState::default()
            })
            .collect();
        Workload {
            cfg,
            rng,
            lanes,
            queue: VecDeque::new(),
            emitted: 0,
            plants: Vec::new(),
            next_plant: 1,
            phase: Phase::Boot,
        }
    }

    pub fn config(&self) -> &WorkloadConfig {
        &self.cfg
    }

    /// Plants recorded so far.
    pub fn plants(&self) -> &[Plant] {
        &self.plants
    }

    /// Runs the generator to completion.
    pub fn collect_all(mut self) -> (Vec<SysEvent>, Vec<Plant>) {
        let events: Vec<SysEvent> = self.by_ref().collect();
        (events, self.plants)
    }

    fn alloc(&mut self, lane: Lane) -> u64 {
        let st = &mut self.lanes[lane as usize];
        let id = lane_prefix(lane) | st.next_id;
        st.next_id += 1;
        id
    }

    fn push(&mut self, lane: Lane, kind: EventKind, subject: u64, object: ObjectRef) -> &mut SysEvent {
        let st = &mut self.lanes[lane as usize];
        let seq = st.next_seq;
        st.next_seq += 1;
        self.queue.push_back(SysEvent::new(lane, seq, kind, subject, object));
        self.queue.back_mut().expect("just pushed")
    }

    fn boot(&mut self) {
        let lanes = self.cfg.lanes as usize;
        for l in 0..self.cfg.lanes {
            let li = l as usize;
            let root = root_task_id(l);
            self.lanes[li].tasks.push(root);
            let share = |n: usize| n / lanes + usize::from(li < n % lanes);
            self.lanes[li].target_tasks = share(self.cfg.n_tasks).max(1);
            let n_files = share(self.cfg.n_files).max(1);
            let n_conf = (n_files / 8).max(1);
            for i in 0..n_files + n_conf {
                let path = if i < n_files {
                    format!("/data/{l}/f{i}")
                } else {
                    format!("/secret/{l}/c{}", i - n_files)
                };
                let id = self.alloc(l);
                self.push(l, EventKind::Open, root, ObjectRef::Id(id))
                    .params
                    .insert("path".into(), Scalar::from(path.as_str()));
                if self.cfg.is_confidential(&path) {
                    self.lanes[li].confidential.push(id);
                } else {
                    self.lanes[li].files.push((id, path));
                }
            }
            for i in 0..share(self.cfg.n_sockets).max(1) {
                let id = self.alloc(l);
                let addr = format!("10.0.{l}.{i}:443");
                self.push(l, EventKind::Open, root, ObjectRef::Id(id))
                    .params
                    .insert("address".into(), Scalar::from(addr.as_str()));
                self.lanes[li].sockets.push(id);
            }
            while self.lanes[li].tasks.len() < self.lanes[li].target_tasks {
                self.fork(l, root, EventKind::Fork);
            }
        }
    }

    fn fork(&mut self, lane: Lane, parent: u64, kind: EventKind) {
        let child = self.alloc(lane);
        let mem = self.rng.gen_range(1..64u64) * 4096;
        self.push(lane, kind, parent, ObjectRef::None).params.extend([
            ("child".into(), Scalar::Uint(child)),
            ("mem_usage".into(), Scalar::Uint(mem)),
        ]);
        self.lanes[lane as usize].tasks.push(child);
    }

    fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
        *items.choose(rng).expect("non-empty pool")
    }

    fn plain_file(&mut self, lane: Lane) -> u64 {
        let files = &self.lanes[lane as usize].files;
        if files.is_empty() {
            return Self::pick(&mut self.rng, &self.lanes[lane as usize].confidential);
        }
        files[self.rng.gen_range(0..files.len())].0
    }

    fn send(&mut self, lane: Lane, task: u64) -> (u64, u64) {
        let socket = Self::pick(&mut self.rng, &self.lanes[lane as usize].sockets);
        let packet = self.alloc(lane);
        let len = self.rng.gen_range(1..1500u64);
        let ev = self.push(lane, EventKind::Send, task, ObjectRef::Id(socket));
        ev.params.insert("packet".into(), Scalar::Uint(packet));
        ev.params.insert("len".into(), Scalar::Uint(len));
        let seq = ev.seq;
        self.lanes[lane as usize].local_packets.push_back(packet);
        (seq, packet)
    }

    fn recv(&mut self, lane: Lane, task: u64) {
        let li = lane as usize;
        let socket = Self::pick(&mut self.rng, &self.lanes[li].sockets);
        if let Some(packet) = self.lanes[li].local_packets.pop_front() {
            self.push(lane, EventKind::Recv, task, ObjectRef::Id(socket))
                .params
                .insert("packet".into(), Scalar::Uint(packet));
        }
    }

    fn packet_in(&mut self, lane: Lane, task: u64) {
        let li = lane as usize;
        let socket = Self::pick(&mut self.rng, &self.lanes[li].sockets);
        if let Some(origin) = self.lanes[li].inbound.pop_front() {
            self.push(lane, EventKind::PacketIn, task, ObjectRef::Id(socket)).origin = Some(origin);
        }
    }

    fn plant(&mut self) {
        let lane = self.rng.gen_range(0..self.cfg.lanes);
        let li = lane as usize;
        let t = Self::pick(&mut self.rng, &self.lanes[li].tasks);
        let c = Self::pick(&mut self.rng, &self.lanes[li].confidential);
        self.push(lane, EventKind::Read, t, ObjectRef::Id(c));
        let mut sender = t;
        if self.rng.gen_bool(0.5) && !self.lanes[li].files.is_empty() {
            let mid = self.plain_file(lane);
            self.push(lane, EventKind::Write, t, ObjectRef::Id(mid));
            let u = Self::pick(&mut self.rng, &self.lanes[li].tasks);
            self.push(lane, EventKind::Read, u, ObjectRef::Id(mid));
            sender = u;
        }
        let (seq, packet) = self.send(lane, sender);
        self.plants.push(Plant {
            plant_id: self.next_plant,
            source_node: c,
            sink_event: SinkEvent { lane, seq, packet },
        });
        self.next_plant += 1;
        if self.lanes[li].local_packets.len() > MAX_PENDING_PACKETS {
            self.recv(lane, sender);
        }
    }

    fn ordinary(&mut self) {
        let lane = self.rng.gen_range(0..self.cfg.lanes);
        let li = lane as usize;
        let t = Self::pick(&mut self.rng, &self.lanes[li].tasks);
        if self.rng.gen_bool(self.cfg.churn) {
            let n = self.lanes[li].tasks.len();
            if n < self.lanes[li].target_tasks {
                let kind = if self.rng.gen_bool(0.8) {
                    EventKind::Fork
                } else {
                    EventKind::CloneThread
                };
                self.fork(lane, t, kind);
                return;
            }
            if n > 1 {
                let root = root_task_id(lane);
                let victims: Vec<u64> = self.lanes[li].tasks.iter().copied().filter(|&x| x != root).collect();
                let v = Self::pick(&mut self.rng, &victims);
                self.push(lane, EventKind::Exit, v, ObjectRef::None);
                self.lanes[li].tasks.retain(|&x| x != v);
                self.lanes[li].mappings.remove(&v);
                return;
            }
        }
        let roll = self.rng.gen_range(0..100u32);
        let multi = self.cfg.lanes > 1;
        match roll {
            0..=29 => {
                let f = self.plain_file(lane);
                let off = self.rng.gen_range(0..1u64 << 20);
                self.push(lane, EventKind::Read, t, ObjectRef::Id(f))
                    .params
                    .insert("offset".into(), Scalar::Uint(off));
            }
            30..=49 => {
                let f = self.plain_file(lane);
                let off = self.rng.gen_range(0..1u64 << 20);
                self.push(lane, EventKind::Write, t, ObjectRef::Id(f))
                    .params
                    .insert("offset".into(), Scalar::Uint(off));
            }
            50..=51 => {
                let f = self.plain_file(lane);
                self.push(lane, EventKind::Open, t, ObjectRef::Id(f));
            }
            52..=54 => {
                let f = self.plain_file(lane);
                let mem = self.rng.gen_range(1..256u64) * 4096;
                let cpu = self.rng.gen_range(0..10_000u64);
                let ev = self.push(lane, EventKind::Exec, t, ObjectRef::Id(f));
                ev.params.insert("mem_usage".into(), Scalar::Uint(mem));
                ev.params.insert("cpu_time".into(), Scalar::Uint(cpu));
                if roll == 54 {
                    ev.params.insert("uid".into(), Scalar::Uint(0));
                    ev.params
                        .insert("secctx".into(), Scalar::from("unconfined_u:unconfined_r:unconfined_t"));
                }
            }
            55..=58 => {
                let mapped = self.lanes[li].mappings.get(&t).cloned().unwrap_or_default();
                let f = self.plain_file(lane);
                if mapped.len() >= MAX_MAPPINGS || mapped.contains(&f) {
                    let f = Self::pick(&mut self.rng, &mapped);
                    let kind = if roll % 2 == 0 {
                        EventKind::MsyncRead
                    } else {
                        EventKind::MsyncWrite
                    };
                    self.push(lane, kind, t, ObjectRef::Id(f));
                } else {
                    let prot = ["r", "w", "rw"][self.rng.gen_range(0..3)];
                    self.push(lane, EventKind::Mmap, t, ObjectRef::Id(f))
                        .params
                        .insert("prot".into(), Scalar::from(prot));
                    self.lanes[li].mappings.entry(t).or_default().push(f);
                }
            }
            59..=60 => {
                let mapped = self.lanes[li].mappings.get(&t).cloned().unwrap_or_default();
                if let Some(&f) = mapped.choose(&mut self.rng) {
                    let kind = if roll == 59 {
                        EventKind::MsyncRead
                    } else {
                        EventKind::MsyncWrite
                    };
                    self.push(lane, kind, t, ObjectRef::Id(f));
                } else {
                    let f = self.plain_file(lane);
                    self.push(lane, EventKind::Read, t, ObjectRef::Id(f));
                }
            }
            61..=62 => {
                let f = self.plain_file(lane);
                let v = self.rng.gen_range(0..1000u32);
                let ev = self.push(lane, EventKind::SetXattr, t, ObjectRef::Id(f));
                ev.params.insert("name".into(), Scalar::from("user.tag"));
                ev.params.insert("value".into(), Scalar::from(format!("v{v}")));
            }
            63..=66 if multi => {
                let dest = (lane + self.rng.gen_range(1..self.cfg.lanes)) % self.cfg.lanes;
                if self.lanes[dest as usize].inbound.len() >= MAX_PENDING_PACKETS {
                    self.packet_in(dest, root_task_id(dest));
                }
                let socket = Self::pick(&mut self.rng, &self.lanes[li].sockets);
                let packet = self.alloc(lane);
                let (machine_id, boot_id) = (self.cfg.machine_id, self.cfg.boot_id);
                let ev = self.push(lane, EventKind::PacketOut, t, ObjectRef::Id(socket));
                ev.params.insert("packet".into(), Scalar::Uint(packet));
                ev.params.insert("dst".into(), Scalar::Uint(dest as u64));
                self.lanes[dest as usize]
                    .inbound
                    .push_back(NodeId::new(packet, machine_id, boot_id, 0));
            }
            67..=70 if multi => {
                if self.lanes[li].inbound.is_empty() {
                    let f = self.plain_file(lane);
                    self.push(lane, EventKind::Write, t, ObjectRef::Id(f));
                } else {
                    self.packet_in(lane, t);
                }
            }
            _ => {
                let pending = self.lanes[li].local_packets.len();
                let want_send = if pending == 0 {
                    true
                } else if pending >= MAX_PENDING_PACKETS {
                    false
                } else {
                    roll % 2 == 0
                };
                if want_send {
                    self.send(lane, t);
                } else if pending > 0 {
                    self.recv(lane, t);
                } else {
                    let f = self.plain_file(lane);
                    self.push(lane, EventKind::Read, t, ObjectRef::Id(f));
                }
            }
        }
    }

    fn drain(&mut self) {
        for l in 0..self.cfg.lanes {
            let root = root_task_id(l);
            while !self.lanes[l as usize].inbound.is_empty() {
                self.packet_in(l, root);
            }
        }
    }

    fn refill(&mut self) {
        while self.queue.is_empty() {
            match self.phase {
                Phase::Boot => {
                    self.boot();
                    self.phase = Phase::Main;
                }
                Phase::Main => {
                    if self.emitted >= self.cfg.event_count {
                        self.phase = Phase::Drain;
                    } else if self.cfg.exfiltration_rate > 0.0 && self.rng.gen_bool(self.cfg.exfiltration_rate) {
                        self.plant();
                    } else {
                        self.ordinary();
                    }
                }
                Phase::Drain => {
                    self.drain();
                    self.phase = Phase::Done;
                }
                Phase::Done => return,
            }
        }
    }
}

impl Iterator for Workload {
    type Item = SysEvent;

    fn next(&mut self) -> Option<SysEvent> {
        self.refill();
        let ev = self.queue.pop_front()?;
        self.emitted += 1;
        Some(ev)
    }
}
