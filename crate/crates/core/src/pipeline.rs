//! Capture, merge and query execution wired together.
//!
//! In threaded mode one worker per lane runs the capture hooks and ships
//! batches of elements to the calling thread, which merges them and drives
//! the engine. Inline mode does the same work on one thread.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, RecvTimeoutError, Sender};
use serde::Serialize;
use thiserror::Error;

use crate::capture::{Capture, CaptureError, Plant, SysEvent, Workload, WorkloadConfig};
use crate::engine::{Engine, EngineError, EngineStats, Processed};
use crate::merge::{Drained, MergeError, MergePolicy, MergeStats, MergeWarning, Merger};
use crate::model::{Element, Lane};

pub const DEFAULT_BATCH: usize = 4096;
pub const DEFAULT_FLUSH: Duration = Duration::from_millis(100);

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub policy: MergePolicy,
    /// Elements per batch handed from a lane to the merger.
    pub batch: usize,
    /// A lane ships a partial batch after this long.
    pub flush: Duration,
    pub threaded: bool,
    /// Elements between metric samples; 0 disables sampling.
    pub sample_every: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            policy: MergePolicy::default(),
            batch: DEFAULT_BATCH,
            flush: DEFAULT_FLUSH,
            threaded: false,
            sample_every: 0,
        }
    }
}

pub enum Input {
    Generate(WorkloadConfig),
    /// Recorded per-lane streams, always merged inline.
    Lanes(BTreeMap<Lane, Vec<Element>>),
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSample {
    pub elements: u64,
    pub edges: u64,
    pub live_vertices: usize,
    pub merge_buffered: usize,
    pub alerts: u64,
    pub denies: u64,
    pub elapsed_ms: f64,
}

/// Hooks into the consumer loop.
pub trait Observer {
    /// Whether `element` should receive per-element processing times.
    fn timed(&self) -> bool {
        false
    }

    fn element(&mut self, _el: &Element, _processed: &Processed, _nanos: u64) {}

    fn sample(&mut self, _s: &MetricSample) {}

    fn warning(&mut self, _w: &MergeWarning) {}
}

impl Observer for () {}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub elements: u64,
    pub engine: EngineStats,
    pub merge: MergeStats,
    pub warnings: Vec<MergeWarning>,
    pub plants: Vec<Plant>,
    /// Vertices still live at the end of the stream.
    pub leftover: usize,
    pub elapsed: Duration,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("capture: {0}")]
    Capture(#[from] CaptureError),
    #[error("merge: {0}")]
    Merge(#[from] MergeError),
    #[error("engine: {0}")]
    Engine(#[from] EngineError),
    #[error("worker thread failed: {0}")]
    Worker(String),
}

/// Translates a workload into elements, lane streams interleaved in
/// production order.
pub fn capture_all(cfg: &WorkloadConfig) -> Result<(Vec<Element>, Vec<Plant>), CaptureError> {
    let mut caps: Vec<Capture> = (0..cfg.lanes)
        .map(|l| Capture::new(l, cfg.machine_id, cfg.boot_id))
        .collect();
    let mut out = Vec::new();
    for c in caps.iter_mut() {
        out.extend(c.boot());
    }
    let mut workload = Workload::new(cfg.clone());
    for ev in workload.by_ref() {
        caps[ev.lane as usize].translate_into(&ev, &mut out)?;
    }
    for c in caps.iter_mut() {
        out.extend(c.shutdown());
    }
    Ok((out, workload.plants().to_vec()))
}

struct Consumer<'a> {
    merger: Merger,
    engine: &'a mut Engine,
    obs: &'a mut dyn Observer,
    timed: bool,
    drained: Drained,
    elements: u64,
    next_sample: u64,
    sample_every: u64,
    warnings: Vec<MergeWarning>,
    start: Instant,
}

impl<'a> Consumer<'a> {
    fn new(engine: &'a mut Engine, obs: &'a mut dyn Observer, cfg: &PipelineConfig) -> Self {
        Consumer {
            merger: Merger::new(cfg.policy),
            timed: obs.timed(),
            engine,
            obs,
            drained: Drained::default(),
            elements: 0,
            next_sample: cfg.sample_every,
            sample_every: cfg.sample_every,
            warnings: Vec::new(),
            start: Instant::now(),
        }
    }

    fn push(&mut self, lane: Lane, batch: Vec<Element>) -> Result<(), PipelineError> {
        let now = Instant::now();
        for el in batch {
            self.merger.push_at(lane, el, now)?;
        }
        self.pump(now)
    }

    fn pump(&mut self, now: Instant) -> Result<(), PipelineError> {
        self.merger.drain_into(now, &mut self.drained);
        for w in self.drained.warnings.drain(..) {
            self.obs.warning(&w);
            self.warnings.push(w);
        }
        for mut el in std::mem::take(&mut self.drained.elements) {
            let t = self.timed.then(Instant::now);
            let processed = self.engine.process(&mut el)?;
            let nanos = t.map_or(0, |t| t.elapsed().as_nanos() as u64);
            self.obs.element(&el, &processed, nanos);
            self.elements += 1;
            if self.sample_every > 0 && self.elements >= self.next_sample {
                self.next_sample += self.sample_every;
                let s = self.sample();
                self.obs.sample(&s);
            }
        }
        Ok(())
    }

    fn sample(&self) -> MetricSample {
        let st = self.engine.stats();
        MetricSample {
            elements: self.elements,
            edges: st.edges,
            live_vertices: self.engine.vertices().len(),
            merge_buffered: self.merger.buffered(),
            alerts: st.alerts,
            denies: st.denies,
            elapsed_ms: self.start.elapsed().as_secs_f64() * 1e3,
        }
    }

    fn finish(mut self, plants: Vec<Plant>) -> Result<RunSummary, PipelineError> {
        self.pump(Instant::now())?;
        if !self.merger.is_drained() {
            // Only reachable if a lane never closed.
            return Err(PipelineError::Worker(
                "merger still holds elements at end of input".into(),
            ));
        }
        let leftover = self.engine.finish();
        if self.sample_every > 0 {
            let s = self.sample();
            self.obs.sample(&s);
        }
        Ok(RunSummary {
            elements: self.elements,
            engine: self.engine.stats().clone(),
            merge: self.merger.stats(),
            warnings: self.warnings,
            plants,
            leftover,
            elapsed: self.start.elapsed(),
        })
    }
}

/// Runs `input` through merge and `engine`, which is finished afterwards.
pub fn run(
    input: Input,
    engine: &mut Engine,
    cfg: &PipelineConfig,
    obs: &mut dyn Observer,
) -> Result<RunSummary, PipelineError> {
    match input {
        Input::Lanes(lanes) => run_lanes(lanes, engine, cfg, obs),
        Input::Generate(w) if cfg.threaded => run_threaded(w, engine, cfg, obs),
        Input::Generate(w) => run_inline(w, engine, cfg, obs),
    }
}

fn run_lanes(
    lanes: BTreeMap<Lane, Vec<Element>>,
    engine: &mut Engine,
    cfg: &PipelineConfig,
    obs: &mut dyn Observer,
) -> Result<RunSummary, PipelineError> {
    let mut c = Consumer::new(engine, obs, cfg);
    let mut iters: Vec<(Lane, std::vec::IntoIter<Element>)> =
        lanes.into_iter().map(|(l, v)| (l, v.into_iter())).collect();
    for (lane, _) in &iters {
        c.merger.open_lane(*lane);
    }
    let batch = cfg.batch.max(1);
    while !iters.is_empty() {
        let mut i = 0;
        while i < iters.len() {
            let lane = iters[i].0;
            let chunk: Vec<Element> = iters[i].1.by_ref().take(batch).collect();
            let done = chunk.len() < batch;
            c.push(lane, chunk)?;
            if done {
                c.merger.close(lane);
                iters.remove(i);
            } else {
                i += 1;
            }
        }
        c.pump(Instant::now())?;
    }
    c.finish(Vec::new())
}

fn run_inline(
    w: WorkloadConfig,
    engine: &mut Engine,
    cfg: &PipelineConfig,
    obs: &mut dyn Observer,
) -> Result<RunSummary, PipelineError> {
    let mut c = Consumer::new(engine, obs, cfg);
    let mut caps: Vec<Capture> = (0..w.lanes).map(|l| Capture::new(l, w.machine_id, w.boot_id)).collect();
    let mut bufs: Vec<Vec<Element>> = caps.iter_mut().map(|cap| cap.boot()).collect();
    for l in 0..w.lanes {
        c.merger.open_lane(l);
    }
    let batch = cfg.batch.max(1);
    let mut pending = 0;
    let mut workload = Workload::new(w);
    for ev in workload.by_ref() {
        let lane = ev.lane as usize;
        let before = bufs[lane].len();
        caps[lane].translate_into(&ev, &mut bufs[lane])?;
        pending += bufs[lane].len() - before;
        if pending >= batch {
            pending = 0;
            for (l, buf) in bufs.iter_mut().enumerate() {
                c.push(l as Lane, std::mem::take(buf))?;
            }
        }
    }
    for (l, cap) in caps.iter_mut().enumerate() {
        bufs[l].extend(cap.shutdown());
        c.push(l as Lane, std::mem::take(&mut bufs[l]))?;
        c.merger.close(l as Lane);
    }
    let plants = workload.plants().to_vec();
    c.finish(plants)
}

enum Msg {
    Batch(Lane, Vec<Element>),
    Closed(Lane),
    Failed(CaptureError),
}

fn lane_worker(
    lane: Lane,
    machine: u32,
    boot: u32,
    events: crossbeam_channel::Receiver<Vec<SysEvent>>,
    out: Sender<Msg>,
    batch: usize,
    flush: Duration,
) {
    let mut cap = Capture::new(lane, machine, boot);
    let mut buf = cap.boot();
    let mut last = Instant::now();
    for evs in events {
        for ev in &evs {
            if let Err(e) = cap.translate_into(ev, &mut buf) {
                let _ = out.send(Msg::Failed(e));
                return;
            }
        }
        if buf.len() >= batch || last.elapsed() >= flush {
            last = Instant::now();
            if out.send(Msg::Batch(lane, std::mem::take(&mut buf))).is_err() {
                return;
            }
        }
    }
    buf.extend(cap.shutdown());
    let _ = out.send(Msg::Batch(lane, buf));
    let _ = out.send(Msg::Closed(lane));
}

const EVENT_CHUNK: usize = 256;

fn run_threaded(
    w: WorkloadConfig,
    engine: &mut Engine,
    cfg: &PipelineConfig,
    obs: &mut dyn Observer,
) -> Result<RunSummary, PipelineError> {
    let lanes = w.lanes;
    let (machine, boot) = (w.machine_id, w.boot_id);
    let batch = cfg.batch.max(1);
    let flush = cfg.flush;
    let mut c = Consumer::new(engine, obs, cfg);
    for l in 0..lanes {
        c.merger.open_lane(l);
    }
    std::thread::scope(|s| {
        let (out_tx, out_rx) = bounded::<Msg>(64);
        let mut lane_txs = Vec::new();
        for l in 0..lanes {
            let (tx, rx) = bounded::<Vec<SysEvent>>(64);
            lane_txs.push(tx);
            let out = out_tx.clone();
            s.spawn(move || lane_worker(l, machine, boot, rx, out, batch, flush));
        }
        drop(out_tx);
        let generator = s.spawn(move || {
            let mut chunks: Vec<Vec<SysEvent>> = vec![Vec::new(); lane_txs.len()];
            let mut workload = Workload::new(w);
            for ev in workload.by_ref() {
                let l = ev.lane as usize;
                chunks[l].push(ev);
                if chunks[l].len() >= EVENT_CHUNK && lane_txs[l].send(std::mem::take(&mut chunks[l])).is_err() {
                    break;
                }
            }
            for (tx, chunk) in lane_txs.iter().zip(chunks) {
                let _ = tx.send(chunk);
            }
            workload.plants().to_vec()
        });

        let mut open = lanes as usize;
        let mut failure = None;
        while open > 0 {
            match out_rx.recv_timeout(flush) {
                Ok(Msg::Batch(lane, els)) => {
                    if let Err(e) = c.push(lane, els) {
                        failure = Some(e);
                        break;
                    }
                }
                Ok(Msg::Closed(lane)) => {
                    c.merger.close(lane);
                    open -= 1;
                }
                Ok(Msg::Failed(e)) => {
                    failure = Some(e.into());
                    break;
                }
                Err(RecvTimeoutError::Timeout) => {
                    if let Err(e) = c.pump(Instant::now()) {
                        failure = Some(e);
                        break;
                    }
                }
                Err(RecvTimeoutError::Disconnected) => {
                    failure = Some(PipelineError::Worker("lane worker exited early".into()));
                    break;
                }
            }
        }
        // Unblock producers before joining them.
        drop(out_rx);
        let plants = generator
            .join()
            .map_err(|_| PipelineError::Worker("generator panicked".into()))?;
        match failure {
            Some(e) => Err(e),
            None => c.finish(plants),
        }
    })
}
