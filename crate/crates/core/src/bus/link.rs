//! Client-side link behaviour: buffering across disconnects and simulated
//! loss between a consumer and the broker.

use std::collections::VecDeque;

use super::{AckOutcome, BusError, Delivery, Envelope, MessageSink, MessageSource, Receipt};

/// Publisher that queues messages while disconnected and flushes them in
/// order on reconnect. When the queue is full the oldest message is dropped.
pub struct ReconnectingPublisher<S> {
    sink: S,
    connected: bool,
    buffer: VecDeque<Envelope>,
    capacity: usize,
    overflow_dropped: u64,
}

impl<S: MessageSink> ReconnectingPublisher<S> {
    pub fn new(sink: S, capacity: usize) -> Self {
        Self {
            sink,
            connected: true,
            buffer: VecDeque::new(),
            capacity: capacity.max(1),
            overflow_dropped: 0,
        }
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn overflow_dropped(&self) -> u64 {
        self.overflow_dropped
    }

    pub fn disconnect(&mut self) {
        self.connected = false;
    }

    /// Marks the link up and flushes the backlog.
    pub fn reconnect(&mut self) -> Result<Vec<Receipt>, BusError> {
        self.connected = true;
        self.flush()
    }

    fn flush(&mut self) -> Result<Vec<Receipt>, BusError> {
        let mut receipts = Vec::with_capacity(self.buffer.len());
        while let Some(env) = self.buffer.front() {
            receipts.push(self.sink.publish(env.clone())?);
            self.buffer.pop_front();
        }
        Ok(receipts)
    }

    /// Publishes now, or buffers and returns `None` while disconnected.
    pub fn send(&mut self, env: Envelope) -> Result<Option<Receipt>, BusError> {
        if !self.connected {
            if self.buffer.len() == self.capacity {
                self.buffer.pop_front();
                self.overflow_dropped += 1;
            }
            self.buffer.push_back(env);
            return Ok(None);
        }
        self.flush()?;
        self.sink.publish(env).map(Some)
    }

    pub fn into_inner(self) -> S {
        self.sink
    }
}

/// Wraps a source so that deliveries and acks are lost whenever `dropper`
/// says so. A lost delivery stays in flight at the broker until its ack
/// deadline; a lost ack looks successful to the caller, as it would on a
/// real network, and leads to a duplicate delivery.
pub struct LossyConsumer<S> {
    inner: S,
    dropper: Box<dyn FnMut() -> bool + Send>,
    lost_deliveries: u64,
    lost_acks: u64,
}

impl<S: MessageSource> LossyConsumer<S> {
    pub fn new(inner: S, dropper: impl FnMut() -> bool + Send + 'static) -> Self {
        Self {
            inner,
            dropper: Box::new(dropper),
            lost_deliveries: 0,
            lost_acks: 0,
        }
    }

    pub fn lost_deliveries(&self) -> u64 {
        self.lost_deliveries
    }

    pub fn lost_acks(&self) -> u64 {
        self.lost_acks
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: MessageSource> MessageSource for LossyConsumer<S> {
    fn next_delivery(&mut self) -> Result<Option<Delivery>, BusError> {
        while let Some(d) = self.inner.next_delivery()? {
            if (self.dropper)() {
                self.lost_deliveries += 1;
                continue;
            }
            return Ok(Some(d));
        }
        Ok(None)
    }

    fn ack(&mut self, msg_id: &str) -> Result<AckOutcome, BusError> {
        if (self.dropper)() {
            self.lost_acks += 1;
            return Ok(AckOutcome::Acked);
        }
        self.inner.ack(msg_id)
    }

    fn nack(&mut self, msg_id: &str) -> Result<AckOutcome, BusError> {
        if (self.dropper)() {
            self.lost_acks += 1;
            return Ok(AckOutcome::Requeued);
        }
        self.inner.nack(msg_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::{Broker, BrokerConfig, SubscriptionSpec};
    use crate::clock::VirtualClock;
    use crate::netpath::LinkSession;
    use serde_json::json;
    use std::collections::HashSet;
    use std::sync::Arc;

    #[test]
    fn buffered_messages_flush_in_order() {
        let broker = Broker::in_memory();
        let mut p = ReconnectingPublisher::new(broker.clone(), 3);
        p.send(Envelope::new("g", "x", "g", json!(0))).unwrap();
        p.disconnect();
        for i in 1..=5 {
            assert!(p.send(Envelope::new("g", "x", "g", json!(i))).unwrap().is_none());
        }
        assert_eq!(p.overflow_dropped(), 2);
        let receipts = p.reconnect().unwrap();
        assert_eq!(receipts.len(), 3);
        let payloads: Vec<_> = broker.replay("g", 0).into_iter().map(|e| e.payload).collect();
        assert_eq!(payloads, [json!(0), json!(3), json!(4), json!(5)]);
    }

    #[test]
    fn lossy_link_still_acks_everything() {
        let clock = VirtualClock::new(1);
        let broker = Broker::open(BrokerConfig::in_memory(), Arc::new(clock.clone())).unwrap();
        let consumer = broker
            .subscribe(&SubscriptionSpec::durable("w", "task.#").ack_deadline_ms(50))
            .unwrap();
        for i in 0..50 {
            broker.publish(Envelope::new("task.a", "x", "g", json!(i))).unwrap();
        }
        let link = LinkSession::constant(1.0, 0.0, 0.3);
        let mut drops = link.drops(9);
        let mut lossy = LossyConsumer::new(consumer, move || drops.should_drop(0.0));
        let mut seen = HashSet::new();
        let mut last_seq = 0;
        let mut dup = 0;
        while lossy.inner().backlog() > 0 {
            match lossy.next_delivery().unwrap() {
                Some(d) => {
                    assert!(d.envelope.seq >= last_seq);
                    last_seq = d.envelope.seq;
                    if !seen.insert(d.envelope.msg_id.clone()) {
                        dup += 1;
                    }
                    lossy.ack(&d.envelope.msg_id).unwrap();
                }
                None => {
                    clock.advance_us(50_000);
                }
            }
        }
        assert_eq!(seen.len(), 50);
        assert!(dup > 0);
        assert!(lossy.lost_deliveries() > 0 && lossy.lost_acks() > 0);
    }
}
