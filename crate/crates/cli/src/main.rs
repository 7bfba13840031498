//! `provstream` command line: generate or replay provenance streams, run
//! queries over them, benchmark per-edge cost, and verify signed graphs.

mod outputs;

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use provstream::bench::{cost_ordering, EdgeTimer, StoredBaseline};
use provstream::capture::{replay, replay_by_lane, scenario, WorkloadConfig};
use provstream::engine::{Engine, Mode, QueryRegistry};
use provstream::merge::MergePolicy;
use provstream::model::trace::{TraceReader, TraceWriter};
use provstream::model::Element;
use provstream::pipeline::{self, Input, PipelineConfig, RunSummary};
use provstream::queries::{
    read_entries, verify, HashChainEntry, HmacSigner, Lps, LpsConfig, Nil, QuerySpec, Selector, Sign, DEFAULT_DEPTH,
};

use outputs::{create, OutputPaths, Outputs};

#[derive(Parser)]
#[command(name = "provstream", version, about = "Streaming provenance analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic workload and write its provenance trace.
    Generate {
        #[command(flatten)]
        workload: WorkloadArgs,
        /// Trace output (JSON lines).
        #[arg(short, long)]
        output: PathBuf,
        /// Ground-truth leak plants (JSON).
        #[arg(long)]
        plants: Option<PathBuf>,
    },
    /// Run queries over a recorded trace.
    Replay {
        trace: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate a workload and run queries over it as it is produced.
    Run {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Run lanes on worker threads.
        #[arg(long)]
        threaded: bool,
    },
    /// Measure per-edge query latency.
    Bench(BenchArgs),
    /// Check a stored graph against its hash-chain log.
    Verify {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        entries: PathBuf,
        /// Signing key (text).
        #[arg(long)]
        key: Option<String>,
    },
    /// Write a built-in scenario as a trace, or a trace as Graphviz.
    Export {
        /// `leak` or the path of a trace.
        source: String,
        #[arg(long, value_enum, default_value_t = Format::Jsonl)]
        format: Format,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Dot,
}

#[derive(Args, Clone)]
struct WorkloadArgs {
    /// key=value workload config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lanes: Option<u16>,
    #[arg(long)]
    events: Option<usize>,
    /// Override a config key, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl WorkloadArgs {
    fn config(&self) -> Result<WorkloadConfig> {
        let mut cfg = match &self.config {
            Some(p) => WorkloadConfig::from_file(p)?,
            None => WorkloadConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set {kv}: expected key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(l) = self.lanes {
            cfg.lanes = l;
        }
        if let Some(n) = self.events {
            cfg.event_count = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Query to load, in order: `name[:key=value,...]`.
    #[arg(long = "query", short = 'q', default_value = "lps")]
    queries: Vec<String>,
    #[arg(long, default_value = "detect")]
    mode: String,
    /// Merge QoS threshold in milliseconds.
    #[arg(long, default_value_t = 100)]
    qos_ms: u64,
    /// Ancestor generations for structid.
    #[arg(long, default_value_t = DEFAULT_DEPTH)]
    depth: usize,
    /// Verdicts (JSON lines); stdout if omitted.
    #[arg(long)]
    alerts: Option<PathBuf>,
    /// structid feature vectors (CSV).
    #[arg(long)]
    features: Option<PathBuf>,
    /// sign hash-chain entries (JSON lines).
    #[arg(long)]
    signatures: Option<PathBuf>,
    /// pathq report (JSON); stdout if omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// The processed graph as a trace, without suppressed edges.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Metrics stream (JSON lines).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Elements between metric samples.
    #[arg(long, default_value_t = 10_000)]
    sample_every: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[arg(long, default_value = "lps")]
    query: String,
    /// Edges per latency window.
    #[arg(long, default_value_t = 10_000)]
    window: usize,
    /// Also run the stored-graph baseline at these edge counts.
    #[arg(long, value_delimiter = ',')]
    baseline: Vec<u64>,
    /// Sink queries timed per baseline checkpoint.
    #[arg(long, default_value_t = 20)]
    baseline_queries: usize,
    /// Also compare mean per-event cost of nil, lps and sign.
    #[arg(long)]
    cost: bool,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn parse_queries(raw: &[String]) -> Result<Vec<QuerySpec>> {
    raw.iter()
        .map(|q| q.parse().with_context(|| format!("--query {q}")))
        .collect()
}

/// Exit status for a finished run.
fn conclude(mode: Mode, summary: &RunSummary, out: Outputs) -> Result<ExitCode> {
    let tally = out.close()?;
    log::info!(
        "{} elements, {} edges, {} alerts, {} denies in {:.2?}",
        summary.elements,
        summary.engine.edges,
        summary.engine.alerts,
        summary.engine.denies,
        summary.elapsed
    );
    if tally.failures > 0 {
        bail!("{} queries failed during the run", tally.failures);
    }
    Ok(if mode == Mode::Enforce && tally.denies > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn execute(input: Input, run: &RunArgs, threaded: bool) -> Result<ExitCode> {
    let mode: Mode = run.mode.parse().map_err(anyhow::Error::msg)?;
    let specs = parse_queries(&run.queries)?;
    let paths = OutputPaths {
        alerts: run.alerts.clone(),
        features: run.features.clone(),
        signatures: run.signatures.clone(),
        report: run.report.clone(),
        graph: run.graph.clone(),
        metrics: run.metrics.clone(),
    };
    let mut out = Outputs::open(&paths)?;
    let mut engine = out.engine(&specs, mode, run.depth)?;
    let cfg = PipelineConfig {
        policy: MergePolicy::time(run.qos_ms),
        threaded,
        sample_every: if out.wants_metrics() { run.sample_every } else { 0 },
        ..PipelineConfig::default()
    };
    let summary = pipeline::run(input, &mut engine, &cfg, &mut out)?;
    drop(engine);
    conclude(mode, &summary, out)
}

fn generate(workload: &WorkloadArgs, output: &Path, plants: Option<&Path>) -> Result<()> {
    let cfg = workload.config()?;
    let (els, planted) = pipeline::capture_all(&cfg)?;
    let mut w = TraceWriter::new(create(output)?);
    w.write_all(&els)?;
    w.finish()?.flush()?;
    if let Some(p) = plants {
        std::fs::write(p, serde_json::to_string_pretty(&planted)? + "\n")?;
    }
    log::info!("{} elements, {} plants", els.len(), planted.len());
    Ok(())
}

fn bench_engine(name: &str) -> Result<Engine> {
    let mut reg = QueryRegistry::new(Mode::Detect);
    match name {
        "nil" => reg.register(Box::new(Nil))?,
        "lps" => reg.register(Box::new(Lps::new(LpsConfig::default())))?,
        "sign" => reg.register(Box::new(Sign::new(
            Box::new(HmacSigner::new("bench")?),
            |_: &HashChainEntry| {},
        )))?,
        other => bail!("bench supports nil, lps and sign, not {other:?}"),
    };
    Ok(Engine::new(reg))
}

fn bench(args: &BenchArgs) -> Result<()> {
    let cfg = args.workload.config()?;
    let pcfg = PipelineConfig::default();
    let mut engine = bench_engine(&args.query)?;
    let mut timer = EdgeTimer::new(args.window);
    let summary = pipeline::run(Input::Generate(cfg.clone()), &mut engine, &pcfg, &mut timer)?;
    let mut report = serde_json::json!({
        "query": args.query,
        "events": cfg.event_count,
        "edges": summary.engine.edges,
        "window": args.window,
        "windows": timer.windows,
    });
    if !args.baseline.is_empty() {
        let sources: Vec<Selector> = LpsConfig::default().sources;
        let mut baseline = StoredBaseline::new(sources, args.baseline.clone(), args.baseline_queries);
        pipeline::run(
            Input::Generate(cfg.clone()),
            &mut bench_engine("nil")?,
            &pcfg,
            &mut baseline,
        )?;
        baseline.finish();
        report["baseline"] = serde_json::to_value(&baseline.results)?;
    }
    if args.cost {
        let mut make = |n: &str| bench_engine(n).expect("known query");
        let cost = cost_ordering(&cfg, &mut make, &["nil", "lps", "sign"], 5)?;
        report["cost"] = serde_json::to_value(&cost)?;
    }
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &args.output {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn verify_cmd(graph: &PathBuf, entries: &PathBuf, key: Option<&str>) -> Result<ExitCode> {
    let signer = HmacSigner::new(key.unwrap_or_default()).context("verify needs --key")?;
    let els: Vec<Element> = TraceReader::open(graph)
        .with_context(|| format!("cannot open {}", graph.display()))?
        .collect::<Result<_, _>>()?;
    let log = read_entries(BufReader::new(
        File::open(entries).with_context(|| format!("cannot open {}", entries.display()))?,
    ))?;
    let report = verify(&els, &log, &signer);
    println!("{}", serde_json::to_string_pretty(&report)?);
    match report.into_result() {
        Ok(_) => Ok(ExitCode::SUCCESS),
        Err(e) => {
            eprintln!("{e}");
            Ok(ExitCode::from(1))
        }
    }
}

fn export(source: &str, format: Format, output: Option<&PathBuf>) -> Result<()> {
    let els: Vec<Element> = if source == "leak" {
        scenario::leak_scenario().0
    } else {
        let f = File::open(source).with_context(|| format!("cannot open {source}"))?;
        replay(std::io::BufReader::new(f)).collect::<Result<_, _>>()?
    };
    let mut sink: Box<dyn Write> = match output {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    match format {
        Format::Jsonl => {
            let mut w = TraceWriter::new(sink);
            w.write_all(&els)?;
            w.finish()?.flush()?;
        }
        Format::Dot => {
            writeln!(sink, "digraph provenance {{")?;
            for el in &els {
                match el {
                    Element::Node(n) => {
                        let label = n
                            .node
                            .attributes
                            .iter()
                            .next()
                            .map(|(_, v)| v.to_string())
                            .unwrap_or_default();
                        writeln!(
                            sink,
                            "  \"{}\" [label=\"{} {}\\n{}\"];",
                            n.node.id,
                            n.node.kind.name(),
                            n.node.id,
                            label.replace('"', "'")
                        )?;
                    }
                    Element::Edge(e) => {
                        writeln!(sink, "  \"{}\" -> \"{}\" [label=\"{}\"];", e.from, e.to, e.kind.name())?
                    }
                    Element::Terminate(_) => {}
                }
            }
            writeln!(sink, "}}")?;
            sink.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate {
            workload,
            output,
            plants,
        } => generate(workload, output, plants.as_deref()).map(|()| ExitCode::SUCCESS),
        Command::Replay { trace, run } => File::open(trace)
            .with_context(|| format!("cannot open {}", trace.display()))
            .and_then(|f| Ok(replay_by_lane(BufReader::new(f))?))
            .and_then(|lanes| execute(Input::Lanes(lanes), run, false)),
        Command::Run {
            workload,
            run,
            threaded,
        } => workload
            .config()
            .and_then(|cfg| execute(Input::Generate(cfg), run, *threaded)),
        Command::Bench(args) => bench(args).map(|()| ExitCode::SUCCESS),
        Command::Verify { graph, entries, key } => verify_cmd(graph, entries, key.as_deref()),
        Command::Export { source, format, output } => {
            export(source, *format, output.as_ref()).map(|()| ExitCode::SUCCESS)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
