use std::cell::RefCell;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use anyhow::{Context, Result};
use provstream::engine::{Engine, Mode, Processed, QueryModule, QueryRegistry, VerdictRecord};
use provstream::model::trace::TraceWriter;
use provstream::model::Element;
use provstream::pipeline::{MetricSample, Observer};
use provstream::queries::{
    FeatureCsv, FeatureVector, HashChainEntry, Lps, LpsConfig, Nil, PathQuery, PathQuerySpec, PathReport, QuerySpec,
    Sign, StructId, StructIdConfig,
};

type Shared<T> = Rc<RefCell<T>>;

fn shared<T>(v: T) -> Shared<T> {
    Rc::new(RefCell::new(v))
}

#[derive(Debug, Default, Clone)]
pub struct OutputPaths {
    pub alerts: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub signatures: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Tally {
    pub denies: u64,
    pub failures: u64,
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Files a run writes. Write errors raised inside query callbacks are kept
/// and reported when the outputs are closed.
pub struct Outputs {
    error: Shared<Option<io::Error>>,
    alerts: Shared<Box<dyn Write>>,
    features_path: Option<PathBuf>,
    features: Option<Shared<FeatureCsv<BufWriter<File>>>>,
    signatures: Option<Shared<BufWriter<File>>>,
    reports: Shared<Vec<PathReport>>,
    report_path: Option<PathBuf>,
    has_pathq: bool,
    graph: Option<TraceWriter<BufWriter<File>>>,
    metrics: Option<BufWriter<File>>,
    tally: Shared<Tally>,
}

fn keep(slot: &Shared<Option<io::Error>>, r: io::Result<()>) {
    if let Err(e) = r {
        slot.borrow_mut().get_or_insert(e);
    }
}

impl Outputs {
    /// Alerts go to stdout unless a path is given.
    pub fn open(paths: &OutputPaths) -> Result<Self> {
        let alerts: Box<dyn Write> = match &paths.alerts {
            Some(p) => Box::new(create(p)?),
            None => Box::new(BufWriter::new(io::stdout())),
        };
        Ok(Outputs {
            error: shared(None),
            alerts: shared(alerts),
            features_path: paths.features.clone(),
            features: None,
            signatures: paths.signatures.as_deref().map(create).transpose()?.map(shared),
            reports: shared(Vec::new()),
            report_path: paths.report.clone(),
            has_pathq: false,
            graph: paths.graph.as_deref().map(create).transpose()?.map(TraceWriter::new),
            metrics: paths.metrics.as_deref().map(create).transpose()?,
            tally: shared(Tally::default()),
        })
    }

    pub fn wants_metrics(&self) -> bool {
        self.metrics.is_some()
    }

    fn build(&mut self, spec: &QuerySpec, depth: usize) -> Result<Box<dyn QueryModule>> {
        let err = self.error.clone();
        Ok(match spec.name.as_str() {
            "nil" => Box::new(Nil),
            "lps" => Box::new(Lps::new(LpsConfig::default().with_options(&spec.options)?)),
            "structid" => {
                let cfg = StructIdConfig {
                    depth,
                    ..StructIdConfig::default()
                }
                .with_options(&spec.options)?;
                let csv = match &self.features_path {
                    Some(p) => Some(shared(FeatureCsv::new(create(p)?, cfg.depth)?)),
                    None => None,
                };
                self.features = csv.clone();
                Box::new(StructId::new(cfg, move |fv: &FeatureVector| {
                    if let Some(w) = &csv {
                        keep(&err, w.borrow_mut().write(fv).map_err(io::Error::from));
                    }
                }))
            }
            "pathq" => {
                self.has_pathq = true;
                let reports = self.reports.clone();
                let spec = PathQuerySpec::from_options(&spec.options)?;
                Box::new(PathQuery::new(spec, move |r: &PathReport| {
                    reports.borrow_mut().push(r.clone())
                }))
            }
            "sign" => {
                let out = self.signatures.clone();
                Box::new(Sign::from_options(&spec.options, move |e: &HashChainEntry| {
                    if let Some(w) = &out {
                        let mut w = w.borrow_mut();
                        let r = serde_json::to_writer(&mut *w, e)
                            .map_err(io::Error::from)
                            .and_then(|()| w.write_all(b"\n"));
                        keep(&err, r);
                    }
                })?)
            }
            other => anyhow::bail!("unknown query {other:?}"),
        })
    }

    /// Registers the queries in order and attaches the verdict writer.
    pub fn engine(&mut self, specs: &[QuerySpec], mode: Mode, depth: usize) -> Result<Engine> {
        let mut reg = QueryRegistry::new(mode);
        for spec in specs {
            let q = self.build(spec, depth)?;
            reg.register(q).with_context(|| format!("cannot load query {spec}"))?;
        }
        let (alerts, tally, err) = (self.alerts.clone(), self.tally.clone(), self.error.clone());
        Ok(Engine::new(reg).with_sink(move |r: &VerdictRecord| {
            {
                let mut t = tally.borrow_mut();
                match r.verdict {
                    "deny" => t.denies += 1,
                    "error" => t.failures += 1,
                    _ => {}
                }
            }
            let mut w = alerts.borrow_mut();
            let res = serde_json::to_writer(&mut *w, r)
                .map_err(io::Error::from)
                .and_then(|()| w.write_all(b"\n"));
            keep(&err, res);
        }))
    }

    pub fn close(mut self) -> Result<Tally> {
        self.alerts.borrow_mut().flush()?;
        if let Some(f) = self.features.take() {
            let f = Rc::try_unwrap(f).map_err(|_| anyhow::anyhow!("feature writer still shared"))?;
            f.into_inner().finish()?.flush()?;
        }
        if let Some(s) = &self.signatures {
            s.borrow_mut().flush()?;
        }
        if let Some(g) = self.graph.take() {
            g.finish()?.flush()?;
        }
        if let Some(m) = self.metrics.as_mut() {
            m.flush()?;
        }
        if self.has_pathq {
            let reports = self.reports.borrow();
            let json = if reports.len() == 1 {
                serde_json::to_string_pretty(&reports[0])?
            } else {
                serde_json::to_string_pretty(&*reports)?
            };
            match &self.report_path {
                Some(p) => std::fs::write(p, json + "\n").with_context(|| format!("cannot write {}", p.display()))?,
                None => println!("{json}"),
            }
        }
        if let Some(e) = self.error.borrow_mut().take() {
            return Err(e).context("writing query output");
        }
        let t = *self.tally.borrow();
        Ok(t)
    }
}

impl Observer for Outputs {
    fn element(&mut self, el: &Element, processed: &Processed, _: u64) {
        if processed.suppressed {
            return;
        }
        if let Some(g) = self.graph.as_mut() {
            keep(&self.error, g.write(el));
        }
    }

    fn sample(&mut self, s: &MetricSample) {
        if let Some(m) = self.metrics.as_mut() {
            let r = serde_json::to_writer(&mut *m, s)
                .map_err(io::Error::from)
                .and_then(|()| m.write_all(b"\n"));
            keep(&self.error, r);
        }
    }
}
