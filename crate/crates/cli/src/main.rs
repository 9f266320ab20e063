#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use glasspipe_core::audio::{self, synth, PcmStream, SegmenterConfig};
use glasspipe_core::bus::tcp::{BusClient, BusServer};
use glasspipe_core::bus::{Broker, BrokerConfig, Envelope, SubscriptionSpec};
use glasspipe_core::clock::SystemClock;
use glasspipe_core::gaze::{Calibration, GazeFuser, GazeMessage, GazeScript, SyntheticGaze};
use glasspipe_core::harness::{self, RunOptions, Scenario};
use glasspipe_core::intent::{self, FusionWeights, IntentEngine};
use glasspipe_core::memory::MemoryStore;
use glasspipe_core::netpath::{evaluate_session, LinkSession, MethodProfile, PathWeights, RateConfig};
use glasspipe_core::scheduler::{
    Decision, Executor, ResourcePool, Scheduler, SchedulerConfig, SchedulerService, StubExecutor, Task,
};

// println! that returns write errors instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(io::stdout().lock(), $($arg)*)?
    };
}

#[derive(Parser)]
#[command(name = "glasspipe", version, about = "Voice-to-task pipeline for smart glasses")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Window an audio file and print one VAD record per window.
    Segment(SegmentArgs),
    /// Generate test audio.
    #[command(subcommand)]
    Audio(AudioCmd),
    /// Rank the registry's intents for a command.
    Classify {
        #[arg(long)]
        command: String,
        #[arg(long, default_value = "scenarios/intents.json")]
        registry: PathBuf,
        /// JSONL corpus used as conversational context.
        #[arg(long)]
        memory: Option<PathBuf>,
    },
    /// Add to or query a JSONL document store.
    Memory {
        #[arg(long, default_value = "memory.jsonl")]
        store: PathBuf,
        #[command(subcommand)]
        cmd: MemoryCmd,
    },
    /// Score connection paths over a link trace.
    #[command(subcommand)]
    Netpath(NetpathCmd),
    /// Serve, tail or publish to the message bus.
    #[command(subcommand)]
    Bus(BusCmd),
    /// Schedule and execute tasks under resource limits.
    #[command(subcommand)]
    Sched(SchedCmd),
    /// Binocular gaze fusion tools.
    #[command(subcommand)]
    Gaze(GazeCmd),
    /// Run a scenario end to end and write its report.
    Run(ScenarioArgs),
    /// Run a scenario and check its effects and latency budget.
    Verify(ScenarioArgs),
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    audio: PathBuf,
    /// Sample rate of raw PCM input; WAV headers take precedence.
    #[arg(long, default_value_t = 16_000)]
    rate: u32,
    #[arg(long, default_value_t = 1.0)]
    window: f64,
    #[arg(long, default_value_t = 0.5)]
    hop: f64,
    #[arg(long, default_value_t = 2.0)]
    energy_threshold: f64,
    #[arg(long, default_value_t = 0.35)]
    zcr_threshold: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Voiced,
    Silence,
}

#[derive(Subcommand)]
enum AudioCmd {
    /// Write a synthetic 16-bit mono WAV.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 3.0)]
        seconds: f64,
        /// Hiss before and after voiced audio.
        #[arg(long, default_value_t = 1.0)]
        pad: f64,
        #[arg(long, default_value_t = 16_000)]
        rate: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum MemoryCmd {
    /// Embed and append a document.
    Add {
        #[arg(long)]
        id: String,
        #[arg(long)]
        text: String,
    },
    /// Print the k nearest documents.
    Query {
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        text: String,
    },
}

#[derive(Subcommand)]
enum NetpathCmd {
    /// Per-tick method choice and rate for a link trace, as JSONL.
    Score {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        tick: f64,
    },
}

#[derive(Subcommand)]
enum BusCmd {
    /// Run a broker on a TCP port.
    Serve {
        #[arg(long, default_value_t = 5672)]
        port: u16,
        #[arg(long, default_value = "0.0.0.0")]
        host: String,
        /// Persist topic logs here; in memory otherwise.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Print messages matching a pattern and ack them.
    Tail {
        pattern: String,
        #[arg(long, default_value = "127.0.0.1:5672")]
        addr: String,
        /// Resume from a named durable subscription.
        #[arg(long)]
        durable: Option<String>,
    },
    /// Publish one message and print its receipt.
    Publish {
        #[arg(long)]
        topic: String,
        /// JSON payload.
        #[arg(long)]
        payload: String,
        #[arg(long, default_value = "cli")]
        command_type: String,
        #[arg(long, default_value = "default")]
        group: String,
        #[arg(long, default_value = "127.0.0.1:5672")]
        addr: String,
    },
}

#[derive(Subcommand)]
enum SchedCmd {
    /// Schedule tasks from a file in virtual time, or serve a bus.
    Run {
        #[arg(long, default_value = "cpu=4,display=1")]
        capacity: String,
        #[arg(long, default_value_t = false, action = ArgAction::Set)]
        backfill: bool,
        /// JSON array of tasks; `payload.duration_s` sets how long each holds its resources.
        #[arg(long, conflicts_with = "bus")]
        tasks: Option<PathBuf>,
        /// Consume `task.submit.#` from a running bus instead.
        #[arg(long)]
        bus: Option<String>,
        #[arg(long, default_value_t = 0.1)]
        tick: f64,
        #[arg(long)]
        effects_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GazeCmd {
    /// Fuse a synthetic binocular stream and print the wire messages.
    Simulate {
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    scenario: PathBuf,
    /// Output directory for the report, effects and HTML.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the full report to stdout.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(io::stderr)
        .init();
    match dispatch(Cli::parse().cmd) {
        Ok(code) => code,
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Segment(a) => segment(a)?,
        Cmd::Audio(AudioCmd::Synth {
            kind,
            seconds,
            pad,
            rate,
            seed,
            out,
        }) => {
            let stream = match kind {
                SynthKind::Voiced => synth::voiced(seconds, pad, rate, seed)?,
                SynthKind::Silence => synth::silence(seconds, rate, seed)?,
            };
            stream.write_wav(&out)?;
        }
        Cmd::Classify {
            command,
            registry,
            memory,
        } => {
            let engine = IntentEngine::new(intent::load_registry(&registry)?, FusionWeights::default())?;
            let store = match memory {
                Some(p) => MemoryStore::load(p)?,
                None => MemoryStore::new(),
            };
            out!("{}", serde_json::to_string_pretty(&engine.classify(&command, &store)?)?);
        }
        Cmd::Memory { store, cmd } => {
            let mut s = MemoryStore::open(&store)?;
            match cmd {
                MemoryCmd::Add { id, text } => {
                    let doc = s.add(id, text)?;
                    out!("{}", json!({ "doc_id": doc.doc_id, "timestamp": doc.timestamp }));
                }
                MemoryCmd::Query { k, text } => {
                    for r in s.query(&text, k)? {
                        out!("{}", serde_json::to_string(&r)?);
                    }
                }
            }
        }
        Cmd::Netpath(NetpathCmd::Score { trace, tick }) => {
            let link = LinkSession::load(&trace)?;
            let ticks = evaluate_session(&link, &MethodProfile::defaults(), &PathWeights::default(), &RateConfig::default(), tick)?;
            let mut out = BufWriter::new(io::stdout().lock());
            for t in ticks {
                writeln!(out, "{}", serde_json::to_string(&t)?)?;
            }
        }
        Cmd::Bus(b) => bus(b)?,
        Cmd::Sched(SchedCmd::Run {
            capacity,
            backfill,
            tasks,
            bus,
            tick,
            effects_dir,
        }) => {
            let pool: ResourcePool = capacity.parse()?;
            let config = SchedulerConfig {
                backfill,
                ..Default::default()
            };
            match (tasks, bus) {
                (Some(path), _) => sched_offline(&path, pool, config, tick, effects_dir)?,
                (None, Some(addr)) => sched_bus(&addr, pool, config, tick, effects_dir)?,
                (None, None) => bail!("pass --tasks <file> or --bus <addr>"),
            }
        }
        Cmd::Gaze(GazeCmd::Simulate {
            seconds,
            seed,
            calibration,
        }) => {
            let cal = match calibration {
                Some(p) => Calibration::load(p)?,
                None => Calibration::identity(),
            };
            let fuser = GazeFuser::new(cal);
            let mut out = BufWriter::new(io::stdout().lock());
            let mut seq = 0;
            for (l, r) in SyntheticGaze::new(GazeScript::fixation(seconds), seed) {
                match fuser.fuse(&l, &r) {
                    Ok(f) => {
                        writeln!(out, "{}", serde_json::to_string(&GazeMessage::new(&f, seq))?)?;
                        seq += 1;
                    }
                    Err(e) => eprintln!("dropped pair at {} us: {e}", l.timestamp_us),
                }
            }
        }
        Cmd::Run(a) => return scenario(a, false),
        Cmd::Verify(a) => return scenario(a, true),
    }
    Ok(ExitCode::SUCCESS)
}

fn segment(a: SegmentArgs) -> Result<()> {
    let stream = PcmStream::open(&a.audio, a.rate).with_context(|| format!("reading {}", a.audio.display()))?;
    let cfg = SegmenterConfig {
        window_duration_s: a.window,
        hop_s: a.hop,
        energy_threshold: a.energy_threshold,
        zcr_threshold: a.zcr_threshold,
    };
    let mut out = BufWriter::new(io::stdout().lock());
    for r in audio::segment(&stream, &cfg)? {
        writeln!(out, "{}", serde_json::to_string(&r)?)?;
    }
    Ok(())
}

fn bus(cmd: BusCmd) -> Result<()> {
    match cmd {
        BusCmd::Serve { port, host, data_dir } => {
            let config = match data_dir {
                Some(d) => BrokerConfig::durable(d),
                None => BrokerConfig::in_memory(),
            };
            let broker = Broker::open(config, Arc::new(SystemClock))?;
            let server = BusServer::bind((host.as_str(), port), broker)?;
            eprintln!("listening on {}", server.local_addr()?);
            server.serve()?;
        }
        BusCmd::Tail { pattern, addr, durable } => {
            let mut client = BusClient::connect(&addr).with_context(|| format!("connecting to {addr}"))?;
            let spec = match &durable {
                Some(name) => SubscriptionSpec::durable(name, &pattern),
                None => SubscriptionSpec::transient(&pattern),
            };
            client.subscribe(spec)?;
            loop {
                if let Some(d) = client.recv_timeout(Duration::from_millis(500))? {
                    out!("{}", serde_json::to_string(&d)?);
                    client.ack(&d.envelope.msg_id)?;
                }
            }
        }
        BusCmd::Publish {
            topic,
            payload,
            command_type,
            group,
            addr,
        } => {
            let payload: serde_json::Value = serde_json::from_str(&payload).context("payload is not JSON")?;
            let mut client = BusClient::connect(&addr).with_context(|| format!("connecting to {addr}"))?;
            let receipt = client.publish(Envelope::new(topic, command_type, group, payload))?;
            out!("{}", serde_json::to_string(&receipt)?);
        }
    }
    Ok(())
}

fn sched_offline(path: &Path, pool: ResourcePool, config: SchedulerConfig, tick: f64, effects_dir: Option<PathBuf>) -> Result<()> {
    if !(tick > 0.0) {
        bail!("--tick must be positive");
    }
    let mut pending: Vec<Task> = serde_json::from_slice(&std::fs::read(path)?)?;
    pending.sort_by(|a, b| a.arrival_s.total_cmp(&b.arrival_s).then_with(|| a.task_id.cmp(&b.task_id)));
    let mut pending = pending.into_iter().peekable();
    let mut sched = Scheduler::new(pool, config);
    let mut exec = StubExecutor::new(effects_dir.as_ref().map(|d| d.join("html")));
    let mut running: Vec<(f64, String)> = Vec::new();
    let mut out = BufWriter::new(io::stdout().lock());
    let mut t = 0.0;
    loop {
        while let Some(task) = pending.next_if(|task| task.arrival_s <= t) {
            if let Err(e) = sched.submit(task) {
                eprintln!("t={t:.3}: {e}");
            }
        }
        running.retain(|(end, id)| {
            let done = *end <= t;
            if done {
                sched.complete(id).expect("running task");
            }
            !done
        });
        while let Decision::Dispatched { task, .. } = sched.step(t) {
            let effect = exec.execute(&task, t);
            if let Some(dir) = &effects_dir {
                glasspipe_core::scheduler::write_effect(dir, &effect)?;
            }
            writeln!(out, "{}", serde_json::to_string(&effect)?)?;
            let hold = task.payload.get("duration_s").and_then(|v| v.as_f64()).unwrap_or(0.0);
            running.push((t + hold, task.task_id));
        }
        running.retain(|(end, id)| {
            let done = *end <= t;
            if done {
                sched.complete(id).expect("running task");
            }
            !done
        });
        if pending.peek().is_none() && sched.queue_len() == 0 && running.is_empty() {
            break;
        }
        t += tick;
    }
    out.flush()?;
    eprintln!("{}", serde_json::to_string(&sched.stats())?);
    Ok(())
}

fn sched_bus(addr: &str, pool: ResourcePool, config: SchedulerConfig, tick: f64, effects_dir: Option<PathBuf>) -> Result<()> {
    let mut source = BusClient::connect(addr).with_context(|| format!("connecting to {addr}"))?;
    source.subscribe(SubscriptionSpec::durable("scheduler", "task.submit.#"))?;
    let sink = BusClient::connect(addr)?;
    let exec = StubExecutor::new(effects_dir.as_ref().map(|d| d.join("html")));
    let mut svc = SchedulerService::new(Scheduler::new(pool, config), Box::new(exec), source, sink);
    if let Some(dir) = effects_dir {
        svc = svc.with_effects_dir(dir);
    }
    let start = std::time::Instant::now();
    loop {
        let now = start.elapsed().as_secs_f64();
        svc.intake(now)?;
        for e in svc.dispatch(now)? {
            out!("{}", serde_json::to_string(&e)?);
        }
        std::thread::sleep(Duration::from_secs_f64(tick.max(0.001)));
    }
}

fn scenario(a: ScenarioArgs, verify: bool) -> Result<ExitCode> {
    let s = Scenario::load(&a.scenario)?;
    let out_dir = a.data_dir.unwrap_or_else(|| PathBuf::from("runs").join(&s.name));
    let report = harness::run(
        &s,
        &RunOptions {
            out_dir: Some(out_dir.clone()),
            seed: a.seed,
        },
    );
    let check = harness::report_check(&report, &s);
    if a.json {
        out!("{}", serde_json::to_string_pretty(&json!({ "report": report, "check": check }))?);
    } else {
        out!(
            "{}: {} effect(s), compute {} us, report in {}",
            s.name,
            report.effects.len(),
            report.compute_us,
            out_dir.join("report.json").display()
        );
        if let Some(stage) = &report.failure_stage {
            out!("failed at {stage}: {}", report.error.as_deref().unwrap_or(""));
        }
        if verify {
            out!("{}", if check.pass { "PASS" } else { "FAIL" });
            for m in &check.missing {
                out!("  missing: {}", serde_json::to_string(m)?);
            }
            for u in &check.unexpected {
                out!("  unexpected: {} {}", u.effect_type, u.details);
            }
            if !check.within_budget {
                out!("  compute {} us exceeds budget", check.compute_us);
            }
        }
    }
    let ok = report.ok && (!verify || check.pass);
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
