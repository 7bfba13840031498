//! Simulated capture layer: system events, the hook models translating
//! them into provenance subgraphs, workload generation and trace replay.

mod event;
mod hooks;
mod replay;
pub mod scenario;
mod workload;

pub use event::{lane_of, lane_prefix, root_task_id, EventKind, ObjectRef, SysEvent, LANE_SHIFT};
pub use hooks::{Capture, CaptureError, TASK_ATTRS};
pub use replay::{replay, replay_by_lane, Replay, ReplayError};
pub use workload::{ConfigError, Plant, SinkEvent, Workload, WorkloadConfig};
