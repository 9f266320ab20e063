//! Topic-routed message broker.
//!
//! Messages are appended to a per-topic log (JSONL on disk when a data
//! directory is configured) before the publish receipt is returned.
//! Subscriptions pull from those logs with at-least-once semantics: a
//! delivery stays in flight until acked, and is redelivered once its ack
//! deadline passes or it is nacked. Within one topic a subscription has at
//! most one message in flight, so consumers observe each topic in `seq`
//! order, possibly with repeats.
//!
//! [`tcp`] exposes the broker over length-prefixed JSON frames.

mod broker;
pub mod link;
pub mod tcp;
pub mod topic;

pub use broker::{Broker, BrokerConfig, BrokerStats, Consumer};
pub use link::{LossyConsumer, ReconnectingPublisher};
pub use topic::{validate_topic, TopicPattern};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_PAYLOAD_BYTES: usize = 1 << 20;
pub const DEFAULT_ACK_DEADLINE_MS: u64 = 1_000;

#[derive(Debug, Error)]
pub enum BusError {
    #[error("malformed topic {0:?}")]
    InvalidTopic(String),
    #[error("malformed topic pattern {0:?}")]
    InvalidPattern(String),
    #[error("payload of {size} bytes exceeds the {max} byte limit")]
    PayloadTooLarge { size: usize, max: usize },
    #[error("durable subscription {0:?} is already attached")]
    AlreadyAttached(String),
    #[error("durable subscriptions need a name")]
    UnnamedDurable,
    #[error("corrupt log {path}: line {line}: {reason}")]
    CorruptLog {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("remote: {0}")]
    Remote(String),
    #[error("connection closed")]
    Disconnected,
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A routed message. `msg_id` and `seq` are assigned by the broker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(default)]
    pub msg_id: String,
    pub topic: String,
    #[serde(default)]
    pub command_type: String,
    #[serde(default)]
    pub group: String,
    #[serde(default)]
    pub payload: serde_json::Value,
    #[serde(default)]
    pub priority_hint: f64,
    #[serde(default)]
    pub ts_us: u64,
    #[serde(default)]
    pub seq: u64,
}

impl Envelope {
    pub fn new(
        topic: impl Into<String>,
        command_type: impl Into<String>,
        group: impl Into<String>,
        payload: serde_json::Value,
    ) -> Self {
        Self {
            msg_id: String::new(),
            topic: topic.into(),
            command_type: command_type.into(),
            group: group.into(),
            payload,
            priority_hint: 0.0,
            ts_us: 0,
            seq: 0,
        }
    }

    pub fn with_ts(mut self, ts_us: u64) -> Self {
        self.ts_us = ts_us;
        self
    }

    pub fn with_priority_hint(mut self, hint: f64) -> Self {
        self.priority_hint = hint;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub msg_id: String,
    pub topic: String,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    #[serde(flatten)]
    pub envelope: Envelope,
    pub redelivered: bool,
    pub delivery_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckOutcome {
    Acked,
    Requeued,
    /// The id is not in flight for this subscription; nothing changed.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscriptionSpec {
    pub pattern: String,
    #[serde(default)]
    pub durable: bool,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_deadline")]
    pub ack_deadline_ms: u64,
}

fn default_deadline() -> u64 {
    DEFAULT_ACK_DEADLINE_MS
}

impl SubscriptionSpec {
    pub fn transient(pattern: &str) -> Self {
        Self {
            pattern: pattern.to_string(),
            durable: false,
            name: None,
            ack_deadline_ms: DEFAULT_ACK_DEADLINE_MS,
        }
    }

    pub fn durable(name: &str, pattern: &str) -> Self {
        Self {
            pattern: pattern.to_string(),
            durable: true,
            name: Some(name.to_string()),
            ack_deadline_ms: DEFAULT_ACK_DEADLINE_MS,
        }
    }

    pub fn ack_deadline_ms(mut self, ms: u64) -> Self {
        self.ack_deadline_ms = ms;
        self
    }
}

/// Anything messages can be published to.
pub trait MessageSink {
    fn publish(&mut self, env: Envelope) -> Result<Receipt, BusError>;
}

/// Anything deliveries can be pulled from and acknowledged on.
pub trait MessageSource {
    /// Next delivery if one is available now.
    fn next_delivery(&mut self) -> Result<Option<Delivery>, BusError>;
    fn ack(&mut self, msg_id: &str) -> Result<AckOutcome, BusError>;
    fn nack(&mut self, msg_id: &str) -> Result<AckOutcome, BusError>;
}
