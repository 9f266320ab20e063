use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::topic::{validate_topic, TopicPattern};
use super::{
    AckOutcome, BusError, Delivery, Envelope, MessageSink, MessageSource, Receipt, SubscriptionSpec,
    DEFAULT_MAX_PAYLOAD_BYTES,
};
use crate::clock::{Clock, SystemClock};

const SUBSCRIPTIONS_DIR: &str = "subscriptions";

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    /// Where topic logs live. `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub fsync: bool,
    pub max_payload_bytes: usize,
}

impl BrokerConfig {
    pub fn in_memory() -> Self {
        Self {
            data_dir: None,
            fsync: false,
            max_payload_bytes: DEFAULT_MAX_PAYLOAD_BYTES,
        }
    }

    pub fn durable(dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: Some(dir.into()),
            fsync: true,
            max_payload_bytes: DEFAULT_MAX_PAYLOAD_BYTES,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokerStats {
    pub published: u64,
    pub delivered: u64,
    pub redelivered: u64,
    pub acked: u64,
    pub nacked: u64,
    pub unknown_acks: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Stored {
    ordinal: u64,
    #[serde(flatten)]
    env: Envelope,
}

struct TopicLog {
    entries: Vec<Stored>,
    file: Option<File>,
}

#[derive(Debug, Clone, Copy)]
struct Inflight {
    deadline_us: u64,
    deliveries: u32,
}

/// Per-topic position of a subscription. Everything below `next` is acked;
/// `inflight`, if set, refers to the message at `next`.
#[derive(Debug, Clone, Copy)]
struct Cursor {
    next: u64,
    inflight: Option<Inflight>,
}

struct Sub {
    name: Option<String>,
    pattern: TopicPattern,
    ack_deadline_us: u64,
    start_ordinal: u64,
    cursors: BTreeMap<String, Cursor>,
    attached: bool,
}

#[derive(Serialize, Deserialize)]
struct SubRecord {
    name: String,
    pattern: String,
    ack_deadline_ms: u64,
    cursors: BTreeMap<String, u64>,
}

#[derive(Default)]
struct State {
    topics: BTreeMap<String, TopicLog>,
    next_ordinal: u64,
    subs: HashMap<u64, Sub>,
    durable: HashMap<String, u64>,
    next_sub: u64,
    stats: BrokerStats,
}

struct Inner {
    state: Mutex<State>,
    arrived: Condvar,
    clock: Arc<dyn Clock>,
    config: BrokerConfig,
}

/// In-process broker handle. Clones share the same broker.
#[derive(Clone)]
pub struct Broker {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker").field("config", &self.inner.config).finish()
    }
}

impl Broker {
    pub fn in_memory() -> Self {
        Self::open(BrokerConfig::in_memory(), Arc::new(SystemClock)).expect("in-memory broker cannot fail to open")
    }

    /// Opens a broker, recovering topic logs and durable subscriptions from
    /// the data directory if one is configured.
    pub fn open(config: BrokerConfig, clock: Arc<dyn Clock>) -> Result<Self, BusError> {
        let mut state = State::default();
        if let Some(dir) = &config.data_dir {
            fs::create_dir_all(dir.join(SUBSCRIPTIONS_DIR))?;
            recover_topics(dir, &mut state)?;
            recover_subscriptions(dir, &mut state)?;
        }
        Ok(Self {
            inner: Arc::new(Inner {
                state: Mutex::new(state),
                arrived: Condvar::new(),
                clock,
                config,
            }),
        })
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.inner.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.inner.clock
    }

    /// Appends to the topic log, then returns the receipt. The broker
    /// assigns `msg_id` and `seq`, and `ts_us` when it is zero.
    pub fn publish(&self, mut env: Envelope) -> Result<Receipt, BusError> {
        validate_topic(&env.topic)?;
        let size = serde_json::to_vec(&env.payload)?.len();
        let max = self.inner.config.max_payload_bytes;
        if size > max {
            return Err(BusError::PayloadTooLarge { size, max });
        }
        let mut st = self.lock();
        if !st.topics.contains_key(&env.topic) {
            let file = match &self.inner.config.data_dir {
                Some(dir) => Some(OpenOptions::new().create(true).append(true).open(log_path(dir, &env.topic))?),
                None => None,
            };
            st.topics.insert(env.topic.clone(), TopicLog { entries: Vec::new(), file });
        }
        let ordinal = st.next_ordinal;
        let log = st.topics.get_mut(&env.topic).expect("inserted above");
        env.seq = log.entries.len() as u64;
        env.msg_id = format!("{}:{}", env.topic, env.seq);
        if env.ts_us == 0 {
            env.ts_us = self.inner.clock.now_us();
        }
        let stored = Stored { ordinal, env };
        if let Some(f) = log.file.as_mut() {
            let mut line = serde_json::to_vec(&stored)?;
            line.push(b'\n');
            f.write_all(&line)?;
            if self.inner.config.fsync {
                f.sync_data()?;
            }
        }
        let receipt = Receipt {
            msg_id: stored.env.msg_id.clone(),
            topic: stored.env.topic.clone(),
            seq: stored.env.seq,
        };
        log.entries.push(stored);
        st.next_ordinal += 1;
        st.stats.published += 1;
        drop(st);
        self.inner.arrived.notify_all();
        Ok(receipt)
    }

    pub fn subscribe(&self, spec: &SubscriptionSpec) -> Result<Consumer, BusError> {
        let pattern: TopicPattern = spec.pattern.parse()?;
        let ack_deadline_us = spec.ack_deadline_ms.saturating_mul(1000);
        let mut st = self.lock();
        let id = if spec.durable {
            let name = spec.name.clone().ok_or(BusError::UnnamedDurable)?;
            validate_topic(&name).map_err(|_| BusError::Protocol(format!("bad subscription name {name:?}")))?;
            match st.durable.get(&name).copied() {
                Some(id) => {
                    let sub = st.subs.get_mut(&id).expect("durable index is consistent");
                    if sub.attached {
                        return Err(BusError::AlreadyAttached(name));
                    }
                    sub.attached = true;
                    sub.pattern = pattern;
                    sub.ack_deadline_us = ack_deadline_us;
                    // whatever was in flight when the consumer went away is due now
                    for c in sub.cursors.values_mut() {
                        if let Some(inf) = c.inflight.as_mut() {
                            inf.deadline_us = 0;
                        }
                    }
                    id
                }
                None => {
                    let id = st.next_sub;
                    st.next_sub += 1;
                    st.subs.insert(
                        id,
                        Sub {
                            name: Some(name.clone()),
                            pattern,
                            ack_deadline_us,
                            start_ordinal: 0,
                            cursors: BTreeMap::new(),
                            attached: true,
                        },
                    );
                    st.durable.insert(name, id);
                    id
                }
            }
        } else {
            let id = st.next_sub;
            st.next_sub += 1;
            let start_ordinal = st.next_ordinal;
            st.subs.insert(
                id,
                Sub {
                    name: None,
                    pattern,
                    ack_deadline_us,
                    start_ordinal,
                    cursors: BTreeMap::new(),
                    attached: true,
                },
            );
            id
        };
        self.persist_sub(&st, id)?;
        Ok(Consumer {
            broker: self.clone(),
            id,
        })
    }

    fn persist_sub(&self, st: &State, id: u64) -> Result<(), BusError> {
        let (Some(dir), Some(sub)) = (&self.inner.config.data_dir, st.subs.get(&id)) else {
            return Ok(());
        };
        let Some(name) = &sub.name else {
            return Ok(());
        };
        let record = SubRecord {
            name: name.clone(),
            pattern: sub.pattern.to_string(),
            ack_deadline_ms: sub.ack_deadline_us / 1000,
            cursors: sub.cursors.iter().map(|(t, c)| (t.clone(), c.next)).collect(),
        };
        let path = dir.join(SUBSCRIPTIONS_DIR).join(format!("{name}.json"));
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(&record)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    fn poll(&self, id: u64) -> Option<Delivery> {
        let now = self.inner.clock.now_us();
        let mut st = self.lock();
        let State { topics, subs, stats, .. } = &mut *st;
        let sub = subs.get_mut(&id)?;
        let start = sub.start_ordinal;
        let mut best: Option<(u64, &String)> = None;
        for (name, log) in topics.iter() {
            if !sub.pattern.matches(name) {
                continue;
            }
            let cursor = sub.cursors.entry(name.clone()).or_insert_with(|| Cursor {
                next: log.entries.partition_point(|e| e.ordinal < start) as u64,
                inflight: None,
            });
            let Some(entry) = log.entries.get(cursor.next as usize) else {
                continue;
            };
            if cursor.inflight.is_some_and(|inf| inf.deadline_us > now) {
                continue;
            }
            if best.is_none_or(|(o, _)| entry.ordinal < o) {
                best = Some((entry.ordinal, name));
            }
        }
        let (_, topic) = best?;
        let cursor = sub.cursors.get_mut(topic).expect("cursor created above");
        let deliveries = cursor.inflight.map_or(0, |i| i.deliveries) + 1;
        cursor.inflight = Some(Inflight {
            deadline_us: now.saturating_add(sub.ack_deadline_us),
            deliveries,
        });
        stats.delivered += 1;
        if deliveries > 1 {
            stats.redelivered += 1;
        }
        let env = topics[topic].entries[cursor.next as usize].env.clone();
        Some(Delivery {
            envelope: env,
            redelivered: deliveries > 1,
            delivery_count: deliveries,
        })
    }

    /// Waits on wall-clock time for a delivery.
    fn recv_timeout(&self, id: u64, timeout: Duration) -> Option<Delivery> {
        let until = Instant::now() + timeout;
        loop {
            if let Some(d) = self.poll(id) {
                return Some(d);
            }
            let now = Instant::now();
            if now >= until {
                return None;
            }
            // short waits so expiring ack deadlines are noticed without a publish
            let step = (until - now).min(Duration::from_millis(10));
            let guard = self.lock();
            let _unused = self.inner.arrived.wait_timeout(guard, step);
        }
    }

    fn settle(&self, id: u64, msg_id: &str, ack: bool) -> Result<AckOutcome, BusError> {
        let mut st = self.lock();
        let State { topics, subs, stats, .. } = &mut *st;
        let found = inflight_cursor(subs, topics, id, msg_id);
        let Some(cursor) = found else {
            stats.unknown_acks += 1;
            warn!(msg_id, "ack/nack for a message that is not in flight");
            return Ok(AckOutcome::Unknown);
        };
        if ack {
            cursor.next += 1;
            cursor.inflight = None;
            stats.acked += 1;
            let durable = subs[&id].name.is_some();
            if durable {
                self.persist_sub(&st, id)?;
            }
            Ok(AckOutcome::Acked)
        } else {
            if let Some(inf) = cursor.inflight.as_mut() {
                inf.deadline_us = 0;
            }
            stats.nacked += 1;
            Ok(AckOutcome::Requeued)
        }
    }

    /// Messages in `topic` from `from_seq` on, in order.
    pub fn replay(&self, topic: &str, from_seq: u64) -> Vec<Envelope> {
        let st = self.lock();
        st.topics
            .get(topic)
            .map(|log| log.entries.iter().skip(from_seq as usize).map(|e| e.env.clone()).collect())
            .unwrap_or_default()
    }

    pub fn topics(&self) -> Vec<String> {
        self.lock().topics.keys().cloned().collect()
    }

    pub fn topic_len(&self, topic: &str) -> u64 {
        self.lock().topics.get(topic).map_or(0, |l| l.entries.len() as u64)
    }

    pub fn stats(&self) -> BrokerStats {
        self.lock().stats
    }

    /// Unacked messages visible to a subscription.
    fn backlog(&self, id: u64) -> u64 {
        let st = self.lock();
        let Some(sub) = st.subs.get(&id) else { return 0 };
        st.topics
            .iter()
            .filter(|(name, _)| sub.pattern.matches(name))
            .map(|(name, log)| {
                let next = sub
                    .cursors
                    .get(name)
                    .map_or_else(|| log.entries.partition_point(|e| e.ordinal < sub.start_ordinal) as u64, |c| c.next);
                log.entries.len() as u64 - next.min(log.entries.len() as u64)
            })
            .sum()
    }

    fn detach(&self, id: u64) {
        let mut st = self.lock();
        let durable = st.subs.get(&id).is_some_and(|s| s.name.is_some());
        if durable {
            if let Some(s) = st.subs.get_mut(&id) {
                s.attached = false;
            }
        } else {
            st.subs.remove(&id);
        }
    }
}

impl MessageSink for Broker {
    fn publish(&mut self, env: Envelope) -> Result<Receipt, BusError> {
        Broker::publish(self, env)
    }
}

fn inflight_cursor<'a>(
    subs: &'a mut HashMap<u64, Sub>,
    topics: &BTreeMap<String, TopicLog>,
    id: u64,
    msg_id: &str,
) -> Option<&'a mut Cursor> {
    let (topic, _) = msg_id.rsplit_once(':')?;
    let cursor = subs.get_mut(&id)?.cursors.get_mut(topic)?;
    cursor.inflight?;
    let entry = topics.get(topic)?.entries.get(cursor.next as usize)?;
    (entry.env.msg_id == msg_id).then_some(cursor)
}

fn log_path(dir: &Path, topic: &str) -> PathBuf {
    dir.join(format!("{topic}.jsonl"))
}

fn recover_topics(dir: &Path, state: &mut State) -> Result<(), BusError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    paths.sort();
    for path in paths {
        let Some(topic) = path.file_stem().and_then(|s| s.to_str()).map(String::from) else {
            continue;
        };
        if validate_topic(&topic).is_err() {
            continue;
        }
        let text = fs::read_to_string(&path)?;
        let corrupt = |line: usize, reason: String| BusError::CorruptLog {
            path: path.display().to_string(),
            line,
            reason,
        };
        let mut entries = Vec::new();
        let mut valid_len = 0usize;
        let mut pieces = text.split_inclusive('\n').peekable();
        let mut line_no = 0;
        while let Some(piece) = pieces.next() {
            line_no += 1;
            let is_last = pieces.peek().is_none();
            let complete = piece.ends_with('\n');
            if piece.trim().is_empty() {
                valid_len += piece.len();
                continue;
            }
            match serde_json::from_str::<Stored>(piece.trim_end()) {
                Ok(s) => {
                    if s.env.seq != entries.len() as u64 || s.env.topic != topic {
                        return Err(corrupt(line_no, format!("unexpected seq {} / topic {}", s.env.seq, s.env.topic)));
                    }
                    entries.push(s);
                    valid_len += piece.len();
                }
                // a torn final write was never receipted
                Err(_) if is_last && !complete => {
                    warn!(path = %path.display(), "dropping torn final log line");
                    break;
                }
                Err(e) => return Err(corrupt(line_no, e.to_string())),
            }
        }
        let mut file = OpenOptions::new().append(true).open(&path)?;
        if valid_len < text.len() {
            file.set_len(valid_len as u64)?;
        } else if !text.is_empty() && !text.ends_with('\n') {
            file.write_all(b"\n")?;
        }
        if let Some(last) = entries.last() {
            state.next_ordinal = state.next_ordinal.max(last.ordinal + 1);
        }
        state.topics.insert(topic, TopicLog { entries, file: Some(file) });
    }
    Ok(())
}

fn recover_subscriptions(dir: &Path, state: &mut State) -> Result<(), BusError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.join(SUBSCRIPTIONS_DIR))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    for path in paths {
        let record: SubRecord = serde_json::from_slice(&fs::read(&path)?).map_err(|e| BusError::CorruptLog {
            path: path.display().to_string(),
            line: 1,
            reason: e.to_string(),
        })?;
        let id = state.next_sub;
        state.next_sub += 1;
        state.subs.insert(
            id,
            Sub {
                name: Some(record.name.clone()),
                pattern: record.pattern.parse()?,
                ack_deadline_us: record.ack_deadline_ms * 1000,
                start_ordinal: 0,
                cursors: record
                    .cursors
                    .into_iter()
                    .map(|(t, next)| (t, Cursor { next, inflight: None }))
                    .collect(),
                attached: false,
            },
        );
        state.durable.insert(record.name, id);
    }
    Ok(())
}

/// A live subscription. Dropping it detaches a durable subscription (its
/// position and in-flight messages are kept) and removes a transient one.
pub struct Consumer {
    broker: Broker,
    id: u64,
}

impl std::fmt::Debug for Consumer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Consumer").field("id", &self.id).finish()
    }
}

impl Consumer {
    /// Next due delivery, without waiting.
    pub fn poll(&self) -> Option<Delivery> {
        self.broker.poll(self.id)
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Delivery> {
        self.broker.recv_timeout(self.id, timeout)
    }

    pub fn ack(&self, msg_id: &str) -> Result<AckOutcome, BusError> {
        self.broker.settle(self.id, msg_id, true)
    }

    /// Makes the in-flight message due for immediate redelivery.
    pub fn nack(&self, msg_id: &str) -> Result<AckOutcome, BusError> {
        self.broker.settle(self.id, msg_id, false)
    }

    /// Messages matching this subscription that are not acked yet.
    pub fn backlog(&self) -> u64 {
        self.broker.backlog(self.id)
    }
}

impl Drop for Consumer {
    fn drop(&mut self) {
        self.broker.detach(self.id);
    }
}

impl MessageSource for Consumer {
    fn next_delivery(&mut self) -> Result<Option<Delivery>, BusError> {
        Ok(self.poll())
    }

    fn ack(&mut self, msg_id: &str) -> Result<AckOutcome, BusError> {
        Consumer::ack(self, msg_id)
    }

    fn nack(&mut self, msg_id: &str) -> Result<AckOutcome, BusError> {
        Consumer::nack(self, msg_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use serde_json::json;

    fn vbroker() -> (Broker, VirtualClock) {
        let clock = VirtualClock::new(1_000);
        (Broker::open(BrokerConfig::in_memory(), Arc::new(clock.clone())).unwrap(), clock)
    }

    fn env(topic: &str, i: u64) -> Envelope {
        Envelope::new(topic, "test", "g", json!({ "i": i }))
    }

    #[test]
    fn publish_without_subscribers_is_logged() {
        let (b, _) = vbroker();
        let r = b.publish(env("task.submit.ops", 0)).unwrap();
        assert_eq!(r.seq, 0);
        assert_eq!(b.replay("task.submit.ops", 0).len(), 1);
    }

    #[test]
    fn routing_respects_wildcards() {
        let (b, _) = vbroker();
        let c = b.subscribe(&SubscriptionSpec::transient("task.*")).unwrap();
        b.publish(env("task.browser.open", 0)).unwrap();
        assert!(c.poll().is_none());
        b.publish(env("task.browser", 1)).unwrap();
        assert_eq!(c.poll().unwrap().envelope.topic, "task.browser");
    }

    #[test]
    fn transient_starts_at_subscribe_time() {
        let (b, _) = vbroker();
        b.publish(env("a", 0)).unwrap();
        let c = b.subscribe(&SubscriptionSpec::transient("#")).unwrap();
        b.publish(env("a", 1)).unwrap();
        b.publish(env("b", 2)).unwrap();
        let d = c.poll().unwrap();
        assert_eq!((d.envelope.topic.as_str(), d.envelope.seq), ("a", 1));
        c.ack(&d.envelope.msg_id).unwrap();
        assert_eq!(c.poll().unwrap().envelope.topic, "b");
    }

    #[test]
    fn durable_late_subscriber_replays_everything_in_order() {
        let (b, _) = vbroker();
        for i in 0..500 {
            b.publish(env("gaze.dev", i)).unwrap();
        }
        let c = b.subscribe(&SubscriptionSpec::durable("audit", "gaze.#")).unwrap();
        for i in 500..1000 {
            b.publish(env("gaze.dev", i)).unwrap();
        }
        let mut seen = Vec::new();
        while let Some(d) = c.poll() {
            seen.push(d.envelope.seq);
            c.ack(&d.envelope.msg_id).unwrap();
        }
        assert_eq!(seen, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn unacked_message_is_redelivered_after_deadline() {
        let (b, clock) = vbroker();
        let c = b.subscribe(&SubscriptionSpec::transient("t").ack_deadline_ms(100)).unwrap();
        b.publish(env("t", 0)).unwrap();
        let first = c.poll().unwrap();
        assert!(!first.redelivered);
        assert!(c.poll().is_none());
        clock.advance_us(100_000);
        let again = c.poll().unwrap();
        assert!(again.redelivered);
        assert_eq!(again.delivery_count, 2);
        assert_eq!(again.envelope.msg_id, first.envelope.msg_id);
    }

    #[test]
    fn nack_redelivers_immediately() {
        let (b, _) = vbroker();
        let c = b.subscribe(&SubscriptionSpec::transient("t")).unwrap();
        b.publish(env("t", 0)).unwrap();
        let d = c.poll().unwrap();
        assert_eq!(c.nack(&d.envelope.msg_id).unwrap(), AckOutcome::Requeued);
        assert!(c.poll().unwrap().redelivered);
    }

    #[test]
    fn double_ack_is_a_noop() {
        let (b, _) = vbroker();
        let c = b.subscribe(&SubscriptionSpec::transient("t")).unwrap();
        b.publish(env("t", 0)).unwrap();
        b.publish(env("t", 1)).unwrap();
        let d = c.poll().unwrap();
        assert_eq!(c.ack(&d.envelope.msg_id).unwrap(), AckOutcome::Acked);
        assert_eq!(c.ack(&d.envelope.msg_id).unwrap(), AckOutcome::Unknown);
        assert_eq!(c.ack("nope").unwrap(), AckOutcome::Unknown);
        assert_eq!(c.poll().unwrap().envelope.seq, 1);
        assert_eq!(b.stats().unknown_acks, 2);
    }

    #[test]
    fn consumer_crash_then_reconnect_redelivers() {
        let (b, _) = vbroker();
        let spec = SubscriptionSpec::durable("worker", "task.#").ack_deadline_ms(60_000);
        let c = b.subscribe(&spec).unwrap();
        assert!(matches!(b.subscribe(&spec), Err(BusError::AlreadyAttached(_))));
        b.publish(env("task.x", 0)).unwrap();
        let d = c.poll().unwrap();
        drop(c);
        let c = b.subscribe(&spec).unwrap();
        let again = c.poll().unwrap();
        assert!(again.redelivered);
        assert_eq!(again.envelope.msg_id, d.envelope.msg_id);
    }

    #[test]
    fn oversize_and_malformed_publishes_fail() {
        let cfg = BrokerConfig {
            max_payload_bytes: 16,
            ..BrokerConfig::in_memory()
        };
        let b = Broker::open(cfg, Arc::new(SystemClock)).unwrap();
        assert!(matches!(
            b.publish(Envelope::new("t", "x", "g", json!("a long string payload"))),
            Err(BusError::PayloadTooLarge { .. })
        ));
        assert!(matches!(b.publish(env("bad topic", 0)), Err(BusError::InvalidTopic(_))));
        assert!(b.subscribe(&SubscriptionSpec::transient("a.*b")).is_err());
        assert!(b.replay("missing", 0).is_empty());
        b.publish(Envelope::new("t", "x", "g", json!(1))).unwrap();
        assert!(b.replay("t", 5).is_empty());
    }

    #[test]
    fn restart_recovers_logs_and_cursors() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(VirtualClock::new(5));
        let receipts: Vec<Receipt> = {
            let b = Broker::open(BrokerConfig::durable(dir.path()), clock.clone()).unwrap();
            let c = b.subscribe(&SubscriptionSpec::durable("w", "task.#")).unwrap();
            let rs = (0..10).map(|i| b.publish(env("task.a", i)).unwrap()).collect();
            for _ in 0..4 {
                let d = c.poll().unwrap();
                c.ack(&d.envelope.msg_id).unwrap();
            }
            rs
        };
        // torn write from a crash mid-append
        let log = dir.path().join("task.a.jsonl");
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"{\"ordinal\":99,\"topic\":\"ta").unwrap();
        drop(f);

        let b = Broker::open(BrokerConfig::durable(dir.path()), clock).unwrap();
        let replayed = b.replay("task.a", 0);
        assert_eq!(replayed.len(), receipts.len());
        for (r, e) in receipts.iter().zip(&replayed) {
            assert_eq!(r.msg_id, e.msg_id);
        }
        let c = b.subscribe(&SubscriptionSpec::durable("w", "task.#")).unwrap();
        assert_eq!(c.poll().unwrap().envelope.seq, 4);
        assert_eq!(b.publish(env("task.a", 10)).unwrap().seq, 10);
        assert_eq!(b.replay("task.a", 10).len(), 1);
    }

    #[test]
    fn recv_timeout_wakes_on_publish() {
        let b = Broker::in_memory();
        let c = b.subscribe(&SubscriptionSpec::transient("t")).unwrap();
        let b2 = b.clone();
        let h = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(20));
            b2.publish(env("t", 0)).unwrap();
        });
        assert!(c.recv_timeout(Duration::from_secs(5)).is_some());
        h.join().unwrap();
        assert!(c.recv_timeout(Duration::from_millis(5)).is_none());
    }

    #[test]
    fn backlog_counts_unacked() {
        let (b, _) = vbroker();
        let c = b.subscribe(&SubscriptionSpec::durable("x", "#")).unwrap();
        for i in 0..3 {
            b.publish(env("a", i)).unwrap();
        }
        assert_eq!(c.backlog(), 3);
        let d = c.poll().unwrap();
        c.ack(&d.envelope.msg_id).unwrap();
        assert_eq!(c.backlog(), 2);
    }
}
