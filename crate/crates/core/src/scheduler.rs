//! Priority dispatch with resource gating.
//!
//! Priority is `U · exp(−α · wait) / D`, recomputed for every pending task
//! at each step. Note that with `α > 0` this *decreases* with waiting time,
//! so long-waiting tasks lose ground; [`PriorityMode::Aging`] flips the
//! exponent (with a cap) for experiments but is never the default.
//!
//! When the top task does not fit the free resources the scheduler waits
//! (head-of-line blocking) unless `backfill` is enabled.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bus::{BusError, Envelope, MessageSink, MessageSource};

pub const DEFAULT_UTILITY: f64 = 1.0;
pub const DEFAULT_DECAY: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("invalid task {task_id:?}: {reason}")]
    InvalidTask { task_id: String, reason: String },
    #[error("task {task_id:?} needs {need} {resource} but capacity is {capacity}")]
    OverCapacity {
        task_id: String,
        resource: String,
        need: f64,
        capacity: f64,
    },
    #[error("task {0:?} was already submitted")]
    Duplicate(String),
    #[error("task {0:?} is not running")]
    NotRunning(String),
    #[error("bad capacity spec {0:?}")]
    BadCapacity(String),
    #[error("bus: {0}")]
    Bus(#[from] BusError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    OpenUrl,
    LaunchApp,
    FileOp,
    DisplayHtml,
    Other(String),
}

impl TaskKind {
    pub fn as_str(&self) -> &str {
        match self {
            TaskKind::OpenUrl => "open_url",
            TaskKind::LaunchApp => "launch_app",
            TaskKind::FileOp => "file_op",
            TaskKind::DisplayHtml => "display_html",
            TaskKind::Other(s) => s,
        }
    }
}

impl From<&str> for TaskKind {
    fn from(s: &str) -> Self {
        match s {
            "open_url" => TaskKind::OpenUrl,
            "launch_app" => TaskKind::LaunchApp,
            "file_op" => TaskKind::FileOp,
            "display_html" => TaskKind::DisplayHtml,
            other => TaskKind::Other(other.to_string()),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for TaskKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for TaskKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(TaskKind::from(String::deserialize(d)?.as_str()))
    }
}

fn default_utility() -> f64 {
    DEFAULT_UTILITY
}
fn default_decay() -> f64 {
    DEFAULT_DECAY
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_group() -> String {
    "default".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub task_type: TaskKind,
    #[serde(default = "default_utility")]
    pub utility: f64,
    /// Static divisor on the priority.
    #[serde(default = "default_decay")]
    pub decay: f64,
    /// Per second.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub arrival_s: f64,
    #[serde(default)]
    pub resources: BTreeMap<String, f64>,
    #[serde(default)]
    pub payload: Value,
    #[serde(default = "default_group")]
    pub group: String,
}

impl Task {
    pub fn new(task_id: &str, task_type: impl Into<TaskKind>, arrival_s: f64) -> Self {
        Self {
            task_id: task_id.to_string(),
            task_type: task_type.into(),
            utility: DEFAULT_UTILITY,
            decay: DEFAULT_DECAY,
            alpha: DEFAULT_ALPHA,
            arrival_s,
            resources: BTreeMap::new(),
            payload: Value::Null,
            group: default_group(),
        }
    }

    pub fn with_params(mut self, utility: f64, decay: f64, alpha: f64) -> Self {
        self.utility = utility;
        self.decay = decay;
        self.alpha = alpha;
        self
    }

    pub fn with_resource(mut self, name: &str, units: f64) -> Self {
        self.resources.insert(name.to_string(), units);
        self
    }

    pub fn with_payload(mut self, payload: Value) -> Self {
        self.payload = payload;
        self
    }

    pub fn validate(&self) -> Result<(), SchedError> {
        let bad = |reason: String| SchedError::InvalidTask {
            task_id: self.task_id.clone(),
            reason,
        };
        if self.task_id.is_empty() {
            return Err(bad("empty task_id".into()));
        }
        if !(self.utility > 0.0 && self.utility.is_finite()) {
            return Err(bad(format!("utility {}", self.utility)));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(bad(format!("decay {}", self.decay)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(bad(format!("alpha {}", self.alpha)));
        }
        if !self.arrival_s.is_finite() {
            return Err(bad("non-finite arrival".into()));
        }
        if let Some((r, v)) = self.resources.iter().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
            return Err(bad(format!("resource {r} = {v}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PriorityMode {
    #[default]
    Literal,
    /// `U · min(exp(α·wait), cap) / D`.
    Aging { cap: f64 },
}

/// `U · exp(−α · (t − arrival)) / D`; a negative wait counts as zero.
pub fn priority(task: &Task, t_current: f64) -> f64 {
    priority_with(task, t_current, PriorityMode::Literal)
}

pub fn priority_with(task: &Task, t_current: f64, mode: PriorityMode) -> f64 {
    let wait = (t_current - task.arrival_s).max(0.0);
    let factor = match mode {
        PriorityMode::Literal => (-task.alpha * wait).exp(),
        PriorityMode::Aging { cap } => (task.alpha * wait).exp().min(cap),
    };
    task.utility * factor / task.decay
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResourcePool {
    capacity: BTreeMap<String, f64>,
    allocated: BTreeMap<String, f64>,
}

impl ResourcePool {
    pub fn new(capacity: BTreeMap<String, f64>) -> Self {
        Self {
            capacity,
            allocated: BTreeMap::new(),
        }
    }

    pub fn capacity(&self, resource: &str) -> f64 {
        self.capacity.get(resource).copied().unwrap_or(0.0)
    }

    pub fn allocated(&self, resource: &str) -> f64 {
        self.allocated.get(resource).copied().unwrap_or(0.0)
    }

    pub fn available(&self, resource: &str) -> f64 {
        self.capacity(resource) - self.allocated(resource)
    }

    pub fn fits(&self, need: &BTreeMap<String, f64>) -> bool {
        need.iter().all(|(r, v)| *v <= self.available(r))
    }

    /// First resource whose total capacity is below the request.
    pub fn exceeds_capacity<'a>(&self, need: &'a BTreeMap<String, f64>) -> Option<(&'a str, f64)> {
        need.iter()
            .find(|(r, v)| **v > self.capacity(r))
            .map(|(r, v)| (r.as_str(), *v))
    }

    fn allocate(&mut self, need: &BTreeMap<String, f64>) {
        for (r, v) in need {
            *self.allocated.entry(r.clone()).or_insert(0.0) += v;
        }
    }

    fn release(&mut self, need: &BTreeMap<String, f64>) {
        for (r, v) in need {
            if let Some(a) = self.allocated.get_mut(r) {
                *a = (*a - v).max(0.0);
            }
        }
    }

    pub fn invariant_holds(&self) -> bool {
        self.allocated
            .iter()
            .all(|(r, a)| *a >= 0.0 && *a <= self.capacity(r) + 1e-9)
    }

    pub fn is_idle(&self) -> bool {
        self.allocated.values().all(|a| *a == 0.0)
    }
}

impl FromStr for ResourcePool {
    type Err = SchedError;

    /// Parses `cpu=4,display=1`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut cap = BTreeMap::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| SchedError::BadCapacity(part.into()))?;
            let v: f64 = v.trim().parse().map_err(|_| SchedError::BadCapacity(part.into()))?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SchedError::BadCapacity(part.into()));
            }
            cap.insert(k.trim().to_string(), v);
        }
        Ok(Self::new(cap))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub backfill: bool,
    pub mode: PriorityMode,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Idle,
    Dispatched { task: Task, priority: f64 },
    /// The top task does not fit and nothing was dispatched.
    Blocked { task_id: String, priority: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerStats {
    pub submitted: u64,
    pub rejected: u64,
    pub dispatched: u64,
    pub completed: u64,
    pub blocked_steps: u64,
    pub clock_skew_warnings: u64,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    config: SchedulerConfig,
    pool: ResourcePool,
    queue: Vec<Task>,
    running: BTreeMap<String, Task>,
    known: BTreeSet<String>,
    stats: SchedulerStats,
}

impl Scheduler {
    pub fn new(pool: ResourcePool, config: SchedulerConfig) -> Self {
        Self {
            config,
            pool,
            queue: Vec::new(),
            running: BTreeMap::new(),
            known: BTreeSet::new(),
            stats: SchedulerStats::default(),
        }
    }

    pub fn pool(&self) -> &ResourcePool {
        &self.pool
    }

    pub fn stats(&self) -> SchedulerStats {
        self.stats
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn running(&self) -> impl Iterator<Item = &Task> {
        self.running.values()
    }

    pub fn is_known(&self, task_id: &str) -> bool {
        self.known.contains(task_id)
    }

    /// Queues a task. Tasks that can never fit are rejected and counted.
    pub fn submit(&mut self, task: Task) -> Result<(), SchedError> {
        if self.known.contains(&task.task_id) {
            return Err(SchedError::Duplicate(task.task_id));
        }
        self.known.insert(task.task_id.clone());
        self.stats.submitted += 1;
        let verdict = task.validate().and_then(|_| match self.pool.exceeds_capacity(&task.resources) {
            Some((r, need)) => Err(SchedError::OverCapacity {
                task_id: task.task_id.clone(),
                resource: r.to_string(),
                need,
                capacity: self.pool.capacity(r),
            }),
            None => Ok(()),
        });
        match verdict {
            Ok(()) => {
                self.queue.push(task);
                Ok(())
            }
            Err(e) => {
                self.stats.rejected += 1;
                tracing::warn!("rejected: {e}");
                Err(e)
            }
        }
    }

    /// Pending tasks ordered by priority at `t`, ties broken by arrival and id.
    pub fn ranked(&self, t: f64) -> Vec<(f64, &Task)> {
        let mut v: Vec<(f64, &Task)> = self
            .queue
            .iter()
            .map(|task| (priority_with(task, t, self.config.mode), task))
            .collect();
        v.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.arrival_s.total_cmp(&b.1.arrival_s))
                .then_with(|| a.1.task_id.cmp(&b.1.task_id))
        });
        v
    }

    pub fn step(&mut self, t: f64) -> Decision {
        let skewed = self.queue.iter().filter(|task| t < task.arrival_s).count() as u64;
        if skewed > 0 {
            self.stats.clock_skew_warnings += skewed;
            tracing::warn!("{skewed} task(s) have arrival after t={t}");
        }
        let pick = {
            let ranked = self.ranked(t);
            let Some(&(head_p, head)) = ranked.first() else {
                return Decision::Idle;
            };
            let chosen = if self.pool.fits(&head.resources) {
                Some((head_p, head.task_id.clone()))
            } else if self.config.backfill {
                ranked
                    .iter()
                    .find(|(_, task)| self.pool.fits(&task.resources))
                    .map(|(p, task)| (*p, task.task_id.clone()))
            } else {
                None
            };
            chosen.ok_or((head_p, head.task_id.clone()))
        };
        match pick {
            Ok((p, id)) => {
                let idx = self.queue.iter().position(|task| task.task_id == id).expect("ranked task is queued");
                let task = self.queue.remove(idx);
                self.pool.allocate(&task.resources);
                debug_assert!(self.pool.invariant_holds());
                self.running.insert(id, task.clone());
                self.stats.dispatched += 1;
                Decision::Dispatched { task, priority: p }
            }
            Err((p, id)) => {
                self.stats.blocked_steps += 1;
                Decision::Blocked { task_id: id, priority: p }
            }
        }
    }

    /// Releases a running task's resources.
    pub fn complete(&mut self, task_id: &str) -> Result<Task, SchedError> {
        let task = self
            .running
            .remove(task_id)
            .ok_or_else(|| SchedError::NotRunning(task_id.to_string()))?;
        self.pool.release(&task.resources);
        self.stats.completed += 1;
        Ok(task)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub task_id: String,
    pub effect_type: String,
    pub ok: bool,
    pub details: Value,
    pub completed_s: f64,
}

pub trait Executor: Send {
    fn execute(&mut self, task: &Task, now_s: f64) -> Effect;
}

/// Records what each task would have done. `display_html` writes its HTML
/// under `html_dir` when one is set.
#[derive(Debug, Clone, Default)]
pub struct StubExecutor {
    pub html_dir: Option<PathBuf>,
}

impl StubExecutor {
    pub fn new(html_dir: Option<PathBuf>) -> Self {
        Self { html_dir }
    }

    fn run(&self, task: &Task) -> Result<(String, Value), String> {
        let field = |k: &str| -> Result<String, String> {
            task.payload
                .get(k)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| format!("payload missing {k:?}"))
        };
        match &task.task_type {
            TaskKind::OpenUrl => Ok(("open_url".into(), json!({ "url": field("url")? }))),
            TaskKind::LaunchApp => Ok(("launch_app".into(), json!({ "app": field("app")? }))),
            TaskKind::FileOp => Ok((
                "file_op".into(),
                json!({ "op": field("op")?, "path": field("path")? }),
            )),
            TaskKind::DisplayHtml => {
                let html = field("html")?;
                let mut details = json!({ "bytes": html.len() });
                for k in ["title", "doc_id"] {
                    if let Some(v) = task.payload.get(k) {
                        details[k] = v.clone();
                    }
                }
                if let Some(dir) = &self.html_dir {
                    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
                    let name = format!("{}.html", sanitize(&task.task_id));
                    std::fs::write(dir.join(&name), &html).map_err(|e| e.to_string())?;
                    details["file"] = json!(name);
                }
                Ok(("display_html".into(), details))
            }
            TaskKind::Other(t) => Err(format!("unknown task type {t:?}")),
        }
    }
}

impl Executor for StubExecutor {
    fn execute(&mut self, task: &Task, now_s: f64) -> Effect {
        let (effect_type, ok, details) = match self.run(task) {
            Ok((ty, d)) => (ty, true, d),
            Err(e) => (
                "failure".to_string(),
                false,
                json!({ "task_type": task.task_type.as_str(), "error": e }),
            ),
        };
        Effect {
            task_id: task.task_id.clone(),
            effect_type,
            ok,
            details,
            completed_s: now_s,
        }
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `<dir>/<task_id>.json`.
pub fn write_effect(dir: &Path, effect: &Effect) -> Result<PathBuf, SchedError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.json", sanitize(&effect.task_id)));
    std::fs::write(&path, serde_json::to_vec_pretty(effect)?)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub t_s: f64,
    pub event: String,
    pub task_id: String,
    #[serde(default)]
    pub detail: Value,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntakeStats {
    pub received: u64,
    pub duplicates: u64,
    pub malformed: u64,
    pub done_published: u64,
}

/// Pulls tasks from `task.submit.#`, dispatches them and publishes a
/// completion on `task.done.<group>` for every executed or rejected task.
/// Redelivered tasks are recognised by `task_id` and only acked.
pub struct SchedulerService<Src, Snk> {
    scheduler: Scheduler,
    executor: Box<dyn Executor>,
    source: Src,
    sink: Snk,
    effects_dir: Option<PathBuf>,
    effects: Vec<Effect>,
    log: Vec<LogEntry>,
    stats: IntakeStats,
}

impl<Src: MessageSource, Snk: MessageSink> SchedulerService<Src, Snk> {
    pub fn new(scheduler: Scheduler, executor: Box<dyn Executor>, source: Src, sink: Snk) -> Self {
        Self {
            scheduler,
            executor,
            source,
            sink,
            effects_dir: None,
            effects: Vec::new(),
            log: Vec::new(),
            stats: IntakeStats::default(),
        }
    }

    pub fn with_effects_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.effects_dir = Some(dir.into());
        self
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn source(&self) -> &Src {
        &self.source
    }

    pub fn effects(&self) -> &[Effect] {
        &self.effects
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn intake_stats(&self) -> IntakeStats {
        self.stats
    }

    fn record(&mut self, t_s: f64, event: &str, task_id: &str, detail: Value) {
        self.log.push(LogEntry {
            t_s,
            event: event.to_string(),
            task_id: task_id.to_string(),
            detail,
        });
    }

    fn publish_done(&mut self, group: &str, body: Value, now_s: f64) -> Result<(), SchedError> {
        let env = Envelope::new(format!("task.done.{group}"), "task_done", group, body)
            .with_ts((now_s * 1e6).round().max(0.0) as u64);
        self.sink.publish(env)?;
        self.stats.done_published += 1;
        Ok(())
    }

    /// Drains every delivery currently available. Returns how many new
    /// tasks were accepted or rejected.
    pub fn intake(&mut self, now_s: f64) -> Result<usize, SchedError> {
        let mut n = 0;
        while let Some(d) = self.source.next_delivery()? {
            self.stats.received += 1;
            let msg_id = d.envelope.msg_id.clone();
            let task: Task = match serde_json::from_value(d.envelope.payload.clone()) {
                Ok(t) => t,
                Err(e) => {
                    self.stats.malformed += 1;
                    self.record(now_s, "malformed", &msg_id, json!(e.to_string()));
                    self.source.ack(&msg_id)?;
                    continue;
                }
            };
            if self.scheduler.is_known(&task.task_id) {
                self.stats.duplicates += 1;
                self.record(now_s, "duplicate", &task.task_id, json!({ "msg_id": msg_id }));
                self.source.ack(&msg_id)?;
                continue;
            }
            let (id, group) = (task.task_id.clone(), task.group.clone());
            match self.scheduler.submit(task) {
                Ok(()) => self.record(now_s, "accepted", &id, Value::Null),
                Err(e) => {
                    self.record(now_s, "rejected", &id, json!(e.to_string()));
                    self.publish_done(&group, json!({ "task_id": id, "status": "rejected", "reason": e.to_string() }), now_s)?;
                }
            }
            self.source.ack(&msg_id)?;
            n += 1;
        }
        Ok(n)
    }

    /// Dispatches and executes until the scheduler is idle or blocked.
    pub fn dispatch(&mut self, now_s: f64) -> Result<Vec<Effect>, SchedError> {
        let mut out = Vec::new();
        loop {
            match self.scheduler.step(now_s) {
                Decision::Idle => break,
                Decision::Blocked { task_id, priority } => {
                    self.record(now_s, "blocked", &task_id, json!({ "priority": priority }));
                    break;
                }
                Decision::Dispatched { task, priority } => {
                    self.record(now_s, "dispatched", &task.task_id, json!({ "priority": priority }));
                    let effect = self.executor.execute(&task, now_s);
                    if let Some(dir) = &self.effects_dir {
                        write_effect(dir, &effect)?;
                    }
                    self.scheduler.complete(&task.task_id)?;
                    self.record(now_s, "completed", &task.task_id, json!({ "effect_type": effect.effect_type, "ok": effect.ok }));
                    self.publish_done(&task.group, json!({ "task_id": task.task_id, "status": if effect.ok { "done" } else { "failed" }, "effect": effect }), now_s)?;
                    self.effects.push(effect.clone());
                    out.push(effect);
                }
            }
        }
        Ok(out)
    }

    pub fn into_parts(self) -> (Scheduler, Vec<Effect>, Vec<LogEntry>, Src, Snk) {
        (self.scheduler, self.effects, self.log, self.source, self.sink)
    }
}
