//! Length-prefixed JSON framing over TCP.
//!
//! Every frame is a 4-byte big-endian length followed by that many bytes of
//! UTF-8 JSON. The JSON object carries an `op` tag:
//!
//! | op | direction | body |
//! |----|-----------|------|
//! | `publish` | client → server | envelope fields |
//! | `subscribe` | client → server | `pattern`, `durable`, `name`, `ack_deadline_ms` |
//! | `ack`, `nack` | client → server | `msg_id` |
//! | `replay` | client → server | `topic`, `from_seq` |
//! | `receipt` | server → client | `msg_id`, `topic`, `seq` |
//! | `subscribed` | server → client | `pattern` |
//! | `deliver` | server → client | envelope fields, `redelivered`, `delivery_count` |
//! | `message` | server → client | one replayed envelope |
//! | `replay_end` | server → client | `topic`, `count` |
//! | `settled` | server → client | `msg_id`, `outcome` |
//! | `error` | server → client | `message` |

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::{
    AckOutcome, Broker, BusError, Consumer, Delivery, Envelope, MessageSink, MessageSource, Receipt,
    SubscriptionSpec,
};

pub const MAX_FRAME_BYTES: usize = 8 << 20;

const RESPONSE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Frame {
    Publish(Envelope),
    Subscribe(SubscriptionSpec),
    Ack {
        msg_id: String,
    },
    Nack {
        msg_id: String,
    },
    Replay {
        topic: String,
        #[serde(default)]
        from_seq: u64,
    },
    Receipt(Receipt),
    Subscribed {
        pattern: String,
    },
    Deliver(Delivery),
    Message(Envelope),
    ReplayEnd {
        topic: String,
        count: u64,
    },
    Settled {
        msg_id: String,
        outcome: AckOutcome,
    },
    Error {
        message: String,
    },
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<(), BusError> {
    let body = serde_json::to_vec(frame)?;
    if body.len() > MAX_FRAME_BYTES {
        return Err(BusError::Protocol(format!("frame of {} bytes is too large", body.len())));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>, BusError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(BusError::Protocol(format!("frame of {len} bytes is too large")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(serde_json::from_slice(&body)?))
}

pub struct BusServer {
    listener: TcpListener,
    broker: Broker,
}

impl BusServer {
    pub fn bind(addr: impl ToSocketAddrs, broker: Broker) -> Result<Self, BusError> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            broker,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, BusError> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections until the listener fails, one thread per connection.
    pub fn serve(self) -> Result<(), BusError> {
        for stream in self.listener.incoming() {
            let stream = stream?;
            let broker = self.broker.clone();
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = handle_connection(stream, broker) {
                    debug!(?peer, error = %e, "connection ended");
                }
            });
        }
        Ok(())
    }

    /// Runs [`serve`](Self::serve) on a background thread.
    pub fn spawn(self) -> Result<(SocketAddr, JoinHandle<Result<(), BusError>>), BusError> {
        let addr = self.local_addr()?;
        Ok((addr, thread::spawn(move || self.serve())))
    }
}

fn handle_connection(stream: TcpStream, broker: Broker) -> Result<(), BusError> {
    stream.set_nodelay(true)?;
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let closed = Arc::new(AtomicBool::new(false));
    let mut consumers: Vec<Arc<Consumer>> = Vec::new();
    let mut pumps: Vec<JoinHandle<()>> = Vec::new();
    let mut reader = stream;

    let send = |frame: &Frame| -> Result<(), BusError> {
        let mut w = writer.lock().unwrap_or_else(|e| e.into_inner());
        write_frame(&mut *w, frame)
    };

    let result = loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        };
        let reply = match frame {
            Frame::Publish(env) => match broker.publish(env) {
                Ok(r) => Frame::Receipt(r),
                Err(e) => error_frame(e),
            },
            Frame::Subscribe(spec) => match broker.subscribe(&spec) {
                Ok(c) => {
                    let c = Arc::new(c);
                    consumers.push(Arc::clone(&c));
                    pumps.push(spawn_pump(c, Arc::clone(&writer), Arc::clone(&closed)));
                    Frame::Subscribed { pattern: spec.pattern }
                }
                Err(e) => error_frame(e),
            },
            Frame::Ack { msg_id } => settle(&consumers, msg_id, true),
            Frame::Nack { msg_id } => settle(&consumers, msg_id, false),
            Frame::Replay { topic, from_seq } => {
                let msgs = broker.replay(&topic, from_seq);
                let count = msgs.len() as u64;
                for m in msgs {
                    if let Err(e) = send(&Frame::Message(m)) {
                        closed.store(true, Ordering::SeqCst);
                        return Err(e);
                    }
                }
                Frame::ReplayEnd { topic, count }
            }
            other => Frame::Error {
                message: format!("unexpected client frame {other:?}"),
            },
        };
        if let Err(e) = send(&reply) {
            break Err(e);
        }
    };

    closed.store(true, Ordering::SeqCst);
    for p in pumps {
        let _ = p.join();
    }
    result
}

fn error_frame(e: BusError) -> Frame {
    Frame::Error { message: e.to_string() }
}

fn settle(consumers: &[Arc<Consumer>], msg_id: String, ack: bool) -> Frame {
    let mut outcome = AckOutcome::Unknown;
    for c in consumers {
        let r = if ack { c.ack(&msg_id) } else { c.nack(&msg_id) };
        match r {
            Ok(AckOutcome::Unknown) => continue,
            Ok(o) => {
                outcome = o;
                break;
            }
            Err(e) => return error_frame(e),
        }
    }
    Frame::Settled { msg_id, outcome }
}

fn spawn_pump(consumer: Arc<Consumer>, writer: Arc<Mutex<TcpStream>>, closed: Arc<AtomicBool>) -> JoinHandle<()> {
    thread::spawn(move || {
        while !closed.load(Ordering::SeqCst) {
            let Some(d) = consumer.recv_timeout(Duration::from_millis(50)) else {
                continue;
            };
            let mut w = writer.lock().unwrap_or_else(|e| e.into_inner());
            if let Err(e) = write_frame(&mut *w, &Frame::Deliver(d)) {
                warn!(error = %e, "delivery write failed");
                closed.store(true, Ordering::SeqCst);
            }
        }
    })
}

/// Blocking client for [`BusServer`].
pub struct BusClient {
    writer: TcpStream,
    responses: Receiver<Frame>,
    deliveries: Receiver<Delivery>,
    _reader: JoinHandle<()>,
}

impl BusClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, BusError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut reader = stream.try_clone()?;
        let (resp_tx, responses) = mpsc::channel();
        let (del_tx, deliveries) = mpsc::channel();
        let handle = thread::spawn(move || loop {
            match read_frame(&mut reader) {
                Ok(Some(Frame::Deliver(d))) => {
                    if del_tx.send(d).is_err() {
                        break;
                    }
                }
                Ok(Some(other)) => {
                    if resp_tx.send(other).is_err() {
                        break;
                    }
                }
                Ok(None) | Err(_) => break,
            }
        });
        Ok(Self {
            writer: stream,
            responses,
            deliveries,
            _reader: handle,
        })
    }

    fn response(&self) -> Result<Frame, BusError> {
        match self.responses.recv_timeout(RESPONSE_TIMEOUT) {
            Ok(Frame::Error { message }) => Err(BusError::Remote(message)),
            Ok(f) => Ok(f),
            Err(RecvTimeoutError::Timeout) => Err(BusError::Protocol("timed out waiting for the server".into())),
            Err(RecvTimeoutError::Disconnected) => Err(BusError::Disconnected),
        }
    }

    fn request(&mut self, frame: &Frame) -> Result<Frame, BusError> {
        write_frame(&mut self.writer, frame)?;
        self.response()
    }

    pub fn publish(&mut self, env: Envelope) -> Result<Receipt, BusError> {
        match self.request(&Frame::Publish(env))? {
            Frame::Receipt(r) => Ok(r),
            other => Err(unexpected(other)),
        }
    }

    pub fn subscribe(&mut self, spec: SubscriptionSpec) -> Result<(), BusError> {
        match self.request(&Frame::Subscribe(spec))? {
            Frame::Subscribed { .. } => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Delivery>, BusError> {
        match self.deliveries.recv_timeout(timeout) {
            Ok(d) => Ok(Some(d)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(BusError::Disconnected),
        }
    }

    fn settle(&mut self, frame: Frame) -> Result<AckOutcome, BusError> {
        match self.request(&frame)? {
            Frame::Settled { outcome, .. } => Ok(outcome),
            other => Err(unexpected(other)),
        }
    }

    pub fn ack(&mut self, msg_id: &str) -> Result<AckOutcome, BusError> {
        self.settle(Frame::Ack {
            msg_id: msg_id.to_string(),
        })
    }

    pub fn nack(&mut self, msg_id: &str) -> Result<AckOutcome, BusError> {
        self.settle(Frame::Nack {
            msg_id: msg_id.to_string(),
        })
    }

    pub fn replay(&mut self, topic: &str, from_seq: u64) -> Result<Vec<Envelope>, BusError> {
        write_frame(
            &mut self.writer,
            &Frame::Replay {
                topic: topic.to_string(),
                from_seq,
            },
        )?;
        let mut out = Vec::new();
        loop {
            match self.response()? {
                Frame::Message(e) => out.push(e),
                Frame::ReplayEnd { .. } => return Ok(out),
                other => return Err(unexpected(other)),
            }
        }
    }
}

fn unexpected(frame: Frame) -> BusError {
    BusError::Protocol(format!("unexpected server frame {frame:?}"))
}

impl MessageSink for BusClient {
    fn publish(&mut self, env: Envelope) -> Result<Receipt, BusError> {
        BusClient::publish(self, env)
    }
}

impl MessageSource for BusClient {
    fn next_delivery(&mut self) -> Result<Option<Delivery>, BusError> {
        match self.deliveries.try_recv() {
            Ok(d) => Ok(Some(d)),
            Err(mpsc::TryRecvError::Empty) => Ok(None),
            Err(mpsc::TryRecvError::Disconnected) => Err(BusError::Disconnected),
        }
    }

    fn ack(&mut self, msg_id: &str) -> Result<AckOutcome, BusError> {
        BusClient::ack(self, msg_id)
    }

    fn nack(&mut self, msg_id: &str) -> Result<AckOutcome, BusError> {
        BusClient::nack(self, msg_id)
    }
}
