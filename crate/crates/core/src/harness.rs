//! End-to-end scenario runner.
//!
//! A scenario names an optional audio file, the transcript its speech maps
//! to, an intent registry, documents to seed the memory store with, an
//! optional link trace and gaze script, and the effects it should produce.
//! Relative paths resolve against the scenario file's directory.
//!
//! The task path runs on a [`VirtualClock`]: the link trace decides which
//! deliveries and acks are lost at each virtual instant, and redelivery
//! follows the ack deadline in virtual time. Stage latencies are measured on
//! the wall clock.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::audio::{self, PcmStream, SegmenterConfig};
use crate::bus::{Broker, BrokerConfig, Envelope, LossyConsumer, SubscriptionSpec};
use crate::clock::{Clock, VirtualClock};
use crate::gaze::{GazeFuser, GazeScript, GazeStream, GazeStreamStats, SyntheticGaze, DEFAULT_BUFFER_S};
use crate::intent::{self, FusionWeights, IntentEngine};
use crate::memory::MemoryStore;
use crate::netpath::{evaluate_session, LinkSession, MethodProfile, PathWeights, RateConfig};
use crate::scheduler::{
    Effect, ResourcePool, Scheduler, SchedulerConfig, SchedulerService, StubExecutor, Task, TaskKind,
};

/// Compute budget for one command, in microseconds.
pub const LATENCY_BUDGET_US: u64 = 200_000;
/// Required headroom under the budget.
pub const BUDGET_HEADROOM: u64 = 3;

const TICK_US: u64 = 100_000;
const ACK_DEADLINE_MS: u64 = 300;
const MAX_TICKS: u64 = 100_000;
const DEFAULT_CAPACITY: &str = "cpu=4,display=1";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario {path}: {reason}")]
    Scenario { path: String, reason: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDoc {
    pub doc_id: String,
    pub text: String,
}

/// An effect the run must produce. Every field in `details` must appear,
/// with the same value, in the actual effect's details.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedEffect {
    pub effect_type: String,
    #[serde(default)]
    pub details: serde_json::Map<String, Value>,
}

impl ExpectedEffect {
    pub fn matches(&self, e: &Effect) -> bool {
        e.effect_type == self.effect_type && self.details.iter().all(|(k, v)| e.details.get(k) == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub audio_path: Option<PathBuf>,
    /// What the speech in `audio_path` says, one command per line. Used
    /// directly when there is no audio.
    #[serde(default)]
    pub transcript: Option<String>,
    pub intent_registry_path: PathBuf,
    #[serde(default)]
    pub memory_seed: Vec<SeedDoc>,
    #[serde(default)]
    pub link_trace_path: Option<PathBuf>,
    #[serde(default)]
    pub gaze_script: Option<GazeScript>,
    #[serde(default)]
    pub expected_effects: Vec<ExpectedEffect>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub capacity: Option<String>,
    #[serde(default)]
    pub backfill: bool,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Scenario {
    /// Reads a scenario and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let mut s: Scenario = serde_json::from_slice(&std::fs::read(path)?)?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let err = |reason: String| HarnessError::Scenario {
            path: path.display().to_string(),
            reason,
        };
        let mut files = vec![&s.intent_registry_path];
        files.extend(s.audio_path.iter());
        files.extend(s.link_trace_path.iter());
        for f in files {
            let p = s.resolve(f);
            if !p.is_file() {
                return Err(err(format!("missing file {}", p.display())));
            }
        }
        if s.audio_path.is_none() && s.transcript.is_none() {
            return Err(err("needs audio_path or transcript".into()));
        }
        Ok(s)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn commands(&self) -> Vec<String> {
        self.transcript
            .as_deref()
            .unwrap_or("")
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where the report, effects and HTML go. Nothing is written without it.
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLatencies {
    pub segmentation_us: u64,
    pub classify_us: u64,
    /// Publishing plus intake until every task is dispatched.
    pub bus_us: u64,
    pub execute_us: u64,
}

impl StageLatencies {
    pub fn compute_us(&self) -> u64 {
        self.segmentation_us + self.classify_us + self.bus_us + self.execute_us
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub windows: u64,
    pub speech_windows: u64,
    pub commands: u64,
    pub unmatched_commands: u64,
    pub published: u64,
    pub received: u64,
    pub duplicates: u64,
    pub lost_deliveries: u64,
    pub lost_acks: u64,
    pub redelivered: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub done: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t_us: u64,
    pub stage: String,
    pub detail: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetpathSummary {
    pub ticks: u64,
    pub method_ticks: BTreeMap<String, u64>,
    pub mean_rate: f64,
    pub min_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub ok: bool,
    #[serde(default)]
    pub failure_stage: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
    pub latencies: StageLatencies,
    pub compute_us: u64,
    /// Virtual time from the first publish to the last settled message.
    pub virtual_elapsed_us: u64,
    pub counters: Counters,
    pub decisions: Vec<LogRecord>,
    pub effects: Vec<Effect>,
    #[serde(default)]
    pub netpath: Option<NetpathSummary>,
    #[serde(default)]
    pub gaze: Option<GazeStreamStats>,
}

impl RunReport {
    fn new(scenario: &str, seed: u64) -> Self {
        Self {
            scenario: scenario.to_string(),
            seed,
            ok: false,
            failure_stage: None,
            error: None,
            latencies: StageLatencies::default(),
            compute_us: 0,
            virtual_elapsed_us: 0,
            counters: Counters::default(),
            decisions: Vec::new(),
            effects: Vec::new(),
            netpath: None,
            gaze: None,
        }
    }

    fn log(&mut self, t_us: u64, stage: &str, detail: Value) {
        self.decisions.push(LogRecord {
            t_us,
            stage: stage.to_string(),
            detail,
        });
    }

    /// Decision log without timestamps, one JSON object per line.
    pub fn normalized_decisions(&self) -> String {
        let mut out = String::new();
        for r in &self.decisions {
            out.push_str(&json!({ "stage": r.stage, "detail": strip_times(&r.detail) }).to_string());
            out.push('\n');
        }
        out
    }

    /// Effects sorted by task id with completion times removed.
    pub fn normalized_effects(&self) -> String {
        let mut effects: Vec<Value> = self
            .effects
            .iter()
            .map(|e| json!({ "task_id": e.task_id, "effect_type": e.effect_type, "ok": e.ok, "details": e.details }))
            .collect();
        effects.sort_by(|a, b| a["task_id"].as_str().cmp(&b["task_id"].as_str()));
        serde_json::to_string(&effects).unwrap_or_default()
    }
}

fn strip_times(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.iter()
                .filter(|(k, _)| !matches!(k.as_str(), "t_us" | "t_s" | "ts_us" | "completed_s"))
                .map(|(k, v)| (k.clone(), strip_times(v)))
                .collect(),
        ),
        Value::Array(a) => Value::Array(a.iter().map(strip_times).collect()),
        other => other.clone(),
    }
}

struct Failure {
    stage: &'static str,
    error: String,
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> Failure {
    move |e| Failure {
        stage,
        error: e.to_string(),
    }
}

fn micros(start: Instant) -> u64 {
    start.elapsed().as_micros() as u64
}

/// Runs a scenario. Failures are reported, not returned.
pub fn run(scenario: &Scenario, opts: &RunOptions) -> RunReport {
    let seed = opts.seed.unwrap_or(scenario.seed);
    let mut report = RunReport::new(&scenario.name, seed);
    match run_inner(scenario, opts, seed, &mut report) {
        Ok(()) => report.ok = true,
        Err(f) => {
            tracing::error!("{} failed at {}: {}", scenario.name, f.stage, f.error);
            report.failure_stage = Some(f.stage.to_string());
            report.error = Some(f.error);
        }
    }
    report.compute_us = report.latencies.compute_us();
    if let Some(dir) = &opts.out_dir {
        let written = serde_json::to_vec_pretty(&report)
            .map_err(std::io::Error::from)
            .and_then(|bytes| std::fs::write(dir.join("report.json"), bytes));
        if let Err(e) = written {
            report.ok = false;
            report.failure_stage.get_or_insert_with(|| "report".into());
            report.error.get_or_insert_with(|| e.to_string());
        }
    }
    report
}

fn run_inner(scenario: &Scenario, opts: &RunOptions, seed: u64, report: &mut RunReport) -> Result<(), Failure> {
    let clock = VirtualClock::new(0);
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(stage("setup"))?;
    }

    // audio
    let commands = match &scenario.audio_path {
        Some(p) => {
            let t0 = Instant::now();
            let stream = PcmStream::open(scenario.resolve(p), 16_000).map_err(stage("segmentation"))?;
            let records = audio::segment(&stream, &SegmenterConfig::default()).map_err(stage("segmentation"))?;
            report.latencies.segmentation_us = micros(t0);
            let speech: Vec<usize> = records.iter().filter(|r| r.is_speech).map(|r| r.index).collect();
            report.counters.windows = records.len() as u64;
            report.counters.speech_windows = speech.len() as u64;
            report.log(clock.now_us(), "vad", json!({ "windows": records.len(), "speech": speech }));
            if speech.is_empty() {
                Vec::new()
            } else {
                scenario.commands()
            }
        }
        None => scenario.commands(),
    };
    report.counters.commands = commands.len() as u64;

    // intents and memory
    let registry = intent::load_registry(scenario.resolve(&scenario.intent_registry_path)).map_err(stage("registry"))?;
    let engine = IntentEngine::new(registry, FusionWeights::default()).map_err(stage("registry"))?;
    let mut memory = MemoryStore::new();
    for d in &scenario.memory_seed {
        memory.add(d.doc_id.clone(), d.text.clone()).map_err(stage("memory"))?;
    }

    let mut tasks = Vec::new();
    let t0 = Instant::now();
    for (i, command) in commands.iter().enumerate() {
        report.log(clock.now_us(), "transcript", json!({ "command": command }));
        let ranked = engine.classify(command, &memory).map_err(stage("classify"))?;
        let top: Vec<Value> = ranked
            .iter()
            .take(3)
            .map(|s| json!({ "intent_id": s.intent_id, "c_intent": s.c_intent, "p_s": s.p_s, "l_s": s.l_s, "c_context": s.c_context }))
            .collect();
        let best = ranked.first().filter(|s| s.c_intent >= engine.cutoff());
        report.log(
            clock.now_us(),
            "classify",
            json!({ "command": command, "top": top, "selected": best.map(|s| s.intent_id.clone()) }),
        );
        let Some(best) = best else {
            report.counters.unmatched_commands += 1;
            continue;
        };
        let def = engine.intent(&best.intent_id).expect("ranked intent is registered");
        let mut task = Task::new(&format!("{}-{i}", scenario.name), TaskKind::from(def.task_type.as_str()), clock.now_s());
        task.group = def.group.clone();
        task.resources = def.resources.clone();
        task.payload = if def.payload.is_null() { json!({}) } else { def.payload.clone() };
        if task.task_type == TaskKind::DisplayHtml && task.payload.get("html").is_none() {
            let hits = memory.query(command, 1).map_err(stage("memory"))?;
            if let Some(doc) = hits.first().and_then(|h| memory.get(&h.doc_id)) {
                task.payload["doc_id"] = json!(doc.doc_id);
                task.payload["title"] = json!(doc.doc_id);
                task.payload["html"] = json!(render_html(command, &doc.doc_id, &doc.text));
            }
            report.log(clock.now_us(), "retrieve", json!({ "hits": hits }));
        }
        tasks.push(task);
    }
    report.latencies.classify_us = micros(t0);

    // bus
    let broker = Broker::open(BrokerConfig::in_memory(), Arc::new(clock.clone())).map_err(stage("bus"))?;
    let consumer = broker
        .subscribe(&SubscriptionSpec::durable("scheduler", "task.submit.#").ack_deadline_ms(ACK_DEADLINE_MS))
        .map_err(stage("bus"))?;
    let link = match &scenario.link_trace_path {
        Some(p) => Some(LinkSession::load(scenario.resolve(p)).map_err(stage("netpath"))?),
        None => None,
    };
    let lossy = match &link {
        Some(link) => {
            let mut drops = link.drops(seed);
            let c = clock.clone();
            LossyConsumer::new(consumer, move || drops.should_drop(c.now_s()))
        }
        None => LossyConsumer::new(consumer, || false),
    };
    let pool: ResourcePool = scenario
        .capacity
        .as_deref()
        .unwrap_or(DEFAULT_CAPACITY)
        .parse()
        .map_err(stage("scheduler"))?;
    let html_dir = opts.out_dir.as_ref().map(|d| d.join("html"));
    let mut svc = SchedulerService::new(
        Scheduler::new(pool, SchedulerConfig { backfill: scenario.backfill, ..Default::default() }),
        Box::new(StubExecutor::new(html_dir)),
        lossy,
        broker.clone(),
    );
    if let Some(dir) = &opts.out_dir {
        svc = svc.with_effects_dir(dir.join("effects"));
    }

    let t_bus = Instant::now();
    let start_us = clock.now_us();
    for task in &tasks {
        let payload = serde_json::to_value(task).map_err(stage("publish"))?;
        let env = Envelope::new(format!("task.submit.{}", task.group), task.task_type.as_str(), task.group.clone(), payload)
            .with_ts(clock.now_us().max(1));
        let receipt = broker.publish(env).map_err(stage("publish"))?;
        report.log(clock.now_us(), "publish", json!({ "task_id": task.task_id, "msg_id": receipt.msg_id }));
        report.counters.published += 1;
    }
    let mut execute_us = 0;
    let mut ticks = 0;
    loop {
        svc.intake(clock.now_s()).map_err(stage("intake"))?;
        let t_exec = Instant::now();
        svc.dispatch(clock.now_s()).map_err(stage("dispatch"))?;
        execute_us += micros(t_exec);
        let st = svc.scheduler().stats();
        let settled = st.completed + st.rejected == report.counters.published;
        if settled && svc.source().inner().backlog() == 0 {
            break;
        }
        ticks += 1;
        if ticks > MAX_TICKS {
            return Err(Failure {
                stage: "bus",
                error: format!("not settled after {MAX_TICKS} ticks"),
            });
        }
        clock.advance_us(TICK_US);
    }
    report.latencies.execute_us = execute_us;
    report.latencies.bus_us = micros(t_bus).saturating_sub(execute_us);
    report.virtual_elapsed_us = clock.now_us() - start_us;

    let intake = svc.intake_stats();
    report.counters.received = intake.received;
    report.counters.duplicates = intake.duplicates;
    report.counters.lost_deliveries = svc.source().lost_deliveries();
    report.counters.lost_acks = svc.source().lost_acks();
    report.counters.redelivered = broker.stats().redelivered;
    let st = svc.scheduler().stats();
    report.counters.accepted = st.submitted - st.rejected;
    report.counters.rejected = st.rejected;
    report.counters.done = st.completed;
    for e in svc.log() {
        report.log(
            (e.t_s * 1e6).round() as u64,
            &format!("sched.{}", e.event),
            json!({ "task_id": e.task_id, "detail": e.detail }),
        );
    }
    report.effects = svc.effects().to_vec();

    if let Some(link) = &link {
        let ticks = evaluate_session(link, &MethodProfile::defaults(), &PathWeights::default(), &RateConfig::default(), 0.1)
            .map_err(stage("netpath"))?;
        let mut method_ticks = BTreeMap::new();
        for t in &ticks {
            *method_ticks.entry(t.method.as_str().to_string()).or_insert(0) += 1;
        }
        let n = ticks.len().max(1) as f64;
        let summary = NetpathSummary {
            ticks: ticks.len() as u64,
            method_ticks,
            mean_rate: ticks.iter().map(|t| t.rate).sum::<f64>() / n,
            min_rate: ticks.iter().map(|t| t.rate).fold(f64::INFINITY, f64::min),
        };
        report.log(clock.now_us(), "netpath", serde_json::to_value(&summary).map_err(stage("netpath"))?);
        report.netpath = Some(summary);
    }

    if let Some(script) = &scenario.gaze_script {
        let mut stream = GazeStream::new(broker.clone(), &script.device_id, GazeFuser::default(), script.rate_hz, DEFAULT_BUFFER_S);
        for (l, r) in SyntheticGaze::new(script.clone(), seed) {
            stream.push(&l, &r).map_err(stage("gaze"))?;
        }
        let stats = stream.stats();
        report.log(clock.now_us(), "gaze", json!({ "topic": stream.topic(), "stats": stats }));
        report.gaze = Some(stats);
    }
    Ok(())
}

fn render_html(command: &str, doc_id: &str, text: &str) -> String {
    fn esc(s: &str) -> String {
        s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
    }
    format!(
        "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>{id}</title></head>\n<body>\n<h1>{id}</h1>\n<p class=\"query\">{q}</p>\n<pre>{t}</pre>\n</body></html>\n",
        id = esc(doc_id),
        q = esc(command),
        t = esc(text)
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub pass: bool,
    pub effects_match: bool,
    pub missing: Vec<ExpectedEffect>,
    pub unexpected: Vec<Effect>,
    pub compute_us: u64,
    pub within_budget: bool,
    #[serde(default)]
    pub failure: Option<String>,
}

/// Order-insensitive match of effects against expectations, plus the
/// compute budget with headroom.
pub fn report_check(report: &RunReport, scenario: &Scenario) -> CheckResult {
    let mut unmatched: Vec<&Effect> = report.effects.iter().collect();
    let mut missing = Vec::new();
    for exp in &scenario.expected_effects {
        match unmatched.iter().position(|e| exp.matches(e)) {
            Some(i) => {
                unmatched.remove(i);
            }
            None => missing.push(exp.clone()),
        }
    }
    let effects_match = missing.is_empty() && unmatched.is_empty();
    let compute_us = report.latencies.compute_us();
    let within_budget = compute_us * BUDGET_HEADROOM <= LATENCY_BUDGET_US;
    let failure = report
        .failure_stage
        .as_ref()
        .map(|s| format!("{s}: {}", report.error.as_deref().unwrap_or("")));
    CheckResult {
        pass: effects_match && within_budget && report.ok,
        effects_match,
        missing,
        unexpected: unmatched.into_iter().cloned().collect(),
        compute_us,
        within_budget,
        failure,
    }
}
