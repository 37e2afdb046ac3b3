//! In-process message bus.
//!
//! Named queues with at-least-once delivery: a received message stays
//! in flight until it is acked or its visibility timeout lapses, at which
//! point it becomes visible again with a bumped `delivery_count`. Messages
//! that exhaust `max_redeliveries` are moved to `<queue>.dead`.
//!
//! Ordering inside a queue is not part of the contract. The current
//! implementation happens to be FIFO, consumers must not rely on it.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clock::{SharedClock, Timestamp};

pub const DEFAULT_VISIBILITY: Duration = Duration::from_secs(30);
pub const DEFAULT_MAX_REDELIVERIES: u32 = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BusError {
    #[error("unknown queue `{0}`")]
    UnknownQueue(String),
    #[error("queue `{0}` is empty")]
    Empty(String),
    #[error("message {0} is not in flight")]
    NotInFlight(String),
    #[error("request on `{0}` timed out")]
    Timeout(String),
    #[error("message bus unavailable")]
    Unavailable,
    #[error("message has no reply_to")]
    NoReplyTo,
    #[error("bad wire message: {0}")]
    BadWire(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub message_id: String,
    pub queue: String,
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_to: Option<String>,
    pub delivery_count: u32,
    pub enqueued_at: Timestamp,
    /// Identifies one particular delivery; acks are matched on it.
    #[serde(skip)]
    receipt: u64,
}

/// Envelope used when a message crosses a process or file boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireEnvelope {
    message_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    correlation_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reply_to: Option<String>,
    ts: Timestamp,
    body: Value,
}

impl Message {
    pub fn to_wire(&self) -> String {
        let env = WireEnvelope {
            message_id: self.message_id.clone(),
            correlation_id: self.correlation_id.clone(),
            reply_to: self.reply_to.clone(),
            ts: self.enqueued_at,
            body: self.payload.clone(),
        };
        serde_json::to_string(&env).expect("json values always serialize")
    }

    pub fn from_wire(queue: &str, wire: &str) -> Result<Message, BusError> {
        let env: WireEnvelope =
            serde_json::from_str(wire).map_err(|e| BusError::BadWire(e.to_string()))?;
        Ok(Message {
            message_id: env.message_id,
            queue: queue.to_string(),
            payload: env.body,
            correlation_id: env.correlation_id,
            reply_to: env.reply_to,
            delivery_count: 0,
            enqueued_at: env.ts,
            receipt: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueConfig {
    pub name: String,
    pub visibility_timeout: Duration,
    pub max_redeliveries: u32,
}

impl QueueConfig {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            visibility_timeout: DEFAULT_VISIBILITY,
            max_redeliveries: DEFAULT_MAX_REDELIVERIES,
        }
    }

    pub fn visibility_timeout(mut self, d: Duration) -> Self {
        assert!(!d.is_zero(), "visibility timeout must be positive");
        self.visibility_timeout = d;
        self
    }

    pub fn max_redeliveries(mut self, n: u32) -> Self {
        self.max_redeliveries = n;
        self
    }
}

#[derive(Debug)]
struct InFlight {
    msg: Message,
    deadline: Timestamp,
}

#[derive(Debug)]
struct Queue {
    config: QueueConfig,
    ready: VecDeque<Message>,
    in_flight: BTreeMap<u64, InFlight>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct BusStats {
    pub sent: u64,
    pub delivered: u64,
    pub acked: u64,
    pub dead_lettered: u64,
}

#[derive(Debug)]
struct State {
    queues: BTreeMap<String, Queue>,
    next_message: u64,
    next_receipt: u64,
    next_correlation: u64,
    available: bool,
    duplicate_delivery: bool,
    stats: BusStats,
}

/// Cloneable handle onto a shared bus.
#[derive(Debug, Clone)]
pub struct Bus {
    inner: Arc<(Mutex<State>, Condvar)>,
    clock: SharedClock,
}

pub fn dead_queue_name(queue: &str) -> String {
    format!("{queue}.dead")
}

fn reply_queue_name(queue: &str) -> String {
    format!("{queue}.replies")
}

impl Bus {
    pub fn new(clock: SharedClock) -> Self {
        let state = State {
            queues: BTreeMap::new(),
            next_message: 0,
            next_receipt: 0,
            next_correlation: 0,
            available: true,
            duplicate_delivery: false,
            stats: BusStats::default(),
        };
        Self {
            inner: Arc::new((Mutex::new(state), Condvar::new())),
            clock,
        }
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.inner.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Declares a queue (and its dead-letter queue). Redeclaring keeps the
    /// existing contents and replaces the config.
    pub fn declare(&self, config: QueueConfig) {
        let mut st = self.lock();
        let dead = dead_queue_name(&config.name);
        if !st.queues.contains_key(&dead) && !config.name.ends_with(".dead") {
            let dead_cfg = QueueConfig {
                name: dead.clone(),
                ..config.clone()
            };
            st.queues.insert(dead, Queue::new(dead_cfg));
        }
        match st.queues.get_mut(&config.name) {
            Some(q) => q.config = config,
            None => {
                st.queues.insert(config.name.clone(), Queue::new(config));
            }
        }
    }

    pub fn declare_default(&self, name: &str) {
        self.declare(QueueConfig::new(name));
    }

    pub fn has_queue(&self, name: &str) -> bool {
        self.lock().queues.contains_key(name)
    }

    /// Simulates a broker outage: sends fail with [`BusError::Unavailable`].
    pub fn set_available(&self, up: bool) {
        self.lock().available = up;
    }

    /// When on, every send enqueues two deliveries of the same message.
    pub fn set_duplicate_delivery(&self, on: bool) {
        self.lock().duplicate_delivery = on;
    }

    pub fn stats(&self) -> BusStats {
        self.lock().stats
    }

    pub fn send(
        &self,
        queue: &str,
        payload: Value,
        correlation_id: Option<String>,
        reply_to: Option<String>,
    ) -> Result<String, BusError> {
        let now = self.clock.now();
        let mut st = self.lock();
        if !st.available {
            return Err(BusError::Unavailable);
        }
        if !st.queues.contains_key(queue) {
            return Err(BusError::UnknownQueue(queue.to_string()));
        }
        st.next_message += 1;
        let message_id = format!("msg-{:06}", st.next_message);
        let msg = Message {
            message_id: message_id.clone(),
            queue: queue.to_string(),
            payload,
            correlation_id,
            reply_to,
            delivery_count: 0,
            enqueued_at: now,
            receipt: 0,
        };
        let copies = if st.duplicate_delivery { 2 } else { 1 };
        st.stats.sent += copies;
        let q = st.queues.get_mut(queue).expect("checked above");
        for _ in 1..copies {
            q.ready.push_back(msg.clone());
        }
        q.ready.push_back(msg);
        drop(st);
        self.inner.1.notify_all();
        Ok(message_id)
    }

    /// Non-blocking receive of any visible message.
    pub fn receive(&self, queue: &str) -> Result<Message, BusError> {
        self.receive_where(queue, |_| true)
    }

    /// Non-blocking receive of the first visible message accepted by `pred`.
    pub fn receive_where(
        &self,
        queue: &str,
        pred: impl Fn(&Message) -> bool,
    ) -> Result<Message, BusError> {
        let now = self.clock.now();
        let mut st = self.lock();
        st.take(queue, now, &pred)
    }

    /// Blocks up to `timeout` (real time) for a message.
    pub fn receive_timeout(&self, queue: &str, timeout: Duration) -> Result<Message, BusError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        loop {
            let now = self.clock.now();
            match st.take(queue, now, &|_: &Message| true) {
                Err(BusError::Empty(_)) => {}
                other => return other,
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(BusError::Empty(queue.to_string()));
            }
            // Short waits so simulated-clock expiries are noticed too.
            let wait = left.min(Duration::from_millis(20));
            st = self
                .inner
                .1
                .wait_timeout(st, wait)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    pub fn ack(&self, msg: &Message) -> Result<(), BusError> {
        let now = self.clock.now();
        let mut st = self.lock();
        st.reap(&msg.queue, now)?;
        let q = st
            .queues
            .get_mut(&msg.queue)
            .ok_or_else(|| BusError::UnknownQueue(msg.queue.clone()))?;
        match q.in_flight.remove(&msg.receipt) {
            Some(_) => {
                st.stats.acked += 1;
                Ok(())
            }
            None => Err(BusError::NotInFlight(msg.message_id.clone())),
        }
    }

    /// Sends `payload` to the requester named in `to.reply_to`.
    pub fn reply(&self, to: &Message, payload: Value) -> Result<String, BusError> {
        let reply_to = to.reply_to.clone().ok_or(BusError::NoReplyTo)?;
        let corr = to
            .correlation_id
            .clone()
            .unwrap_or_else(|| to.message_id.clone());
        self.send(&reply_to, payload, Some(corr), None)
    }

    /// Synchronous call over the asynchronous queues. Replies carrying a
    /// different correlation id are left in place for their own requesters.
    pub fn request(&self, queue: &str, payload: Value, timeout: Duration) -> Result<Value, BusError> {
        let replies = reply_queue_name(queue);
        if !self.has_queue(&replies) {
            self.declare_default(&replies);
        }
        let corr = {
            let mut st = self.lock();
            st.next_correlation += 1;
            format!("corr-{:06}", st.next_correlation)
        };
        self.send(queue, payload, Some(corr.clone()), Some(replies.clone()))?;
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        loop {
            let now = self.clock.now();
            let want = corr.clone();
            match st.take(&replies, now, &move |m: &Message| {
                m.correlation_id.as_deref() == Some(want.as_str())
            }) {
                Ok(msg) => {
                    let q = st.queues.get_mut(&replies).expect("declared above");
                    q.in_flight.remove(&msg.receipt);
                    st.stats.acked += 1;
                    return Ok(msg.payload);
                }
                Err(BusError::Empty(_)) => {}
                Err(e) => return Err(e),
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(BusError::Timeout(queue.to_string()));
            }
            st = self
                .inner
                .1
                .wait_timeout(st, left.min(Duration::from_millis(20)))
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    /// Visible (not in flight) messages on a queue.
    pub fn depth(&self, queue: &str) -> Result<usize, BusError> {
        let now = self.clock.now();
        let mut st = self.lock();
        st.reap(queue, now)?;
        Ok(st.queues[queue].ready.len())
    }

    pub fn in_flight(&self, queue: &str) -> Result<usize, BusError> {
        let now = self.clock.now();
        let mut st = self.lock();
        st.reap(queue, now)?;
        Ok(st.queues[queue].in_flight.len())
    }

    /// Copies of everything sitting on `<queue>.dead`, without consuming.
    pub fn dead_letters(&self, queue: &str) -> Result<Vec<Message>, BusError> {
        let now = self.clock.now();
        let mut st = self.lock();
        st.reap(queue, now)?;
        let dead = dead_queue_name(queue);
        Ok(st
            .queues
            .get(&dead)
            .map(|q| q.ready.iter().cloned().collect())
            .unwrap_or_default())
    }

    /// Puts previously persisted dead letters back onto `<queue>.dead`.
    pub fn restore_dead_letters(&self, queue: &str, msgs: Vec<Message>) -> Result<(), BusError> {
        let mut st = self.lock();
        let dead = dead_queue_name(queue);
        let q = st
            .queues
            .get_mut(&dead)
            .ok_or_else(|| BusError::UnknownQueue(dead.clone()))?;
        q.ready.extend(msgs);
        Ok(())
    }

    pub fn queue_names(&self) -> Vec<String> {
        self.lock().queues.keys().cloned().collect()
    }
}

impl Queue {
    fn new(config: QueueConfig) -> Self {
        Self {
            config,
            ready: VecDeque::new(),
            in_flight: BTreeMap::new(),
        }
    }
}

impl State {
    /// Returns expired in-flight messages to the ready list, or to the dead
    /// queue once their redelivery budget is spent.
    fn reap(&mut self, queue: &str, now: Timestamp) -> Result<(), BusError> {
        let q = self
            .queues
            .get_mut(queue)
            .ok_or_else(|| BusError::UnknownQueue(queue.to_string()))?;
        let expired: Vec<u64> = q
            .in_flight
            .iter()
            .filter(|(_, f)| f.deadline <= now)
            .map(|(r, _)| *r)
            .collect();
        if expired.is_empty() {
            return Ok(());
        }
        let max = q.config.max_redeliveries;
        let mut dead = Vec::new();
        for r in expired {
            let f = q.in_flight.remove(&r).expect("listed above");
            if f.msg.delivery_count > max {
                dead.push(f.msg);
            } else {
                q.ready.push_back(f.msg);
            }
        }
        if !dead.is_empty() {
            let name = dead_queue_name(queue);
            self.stats.dead_lettered += dead.len() as u64;
            let dq = self
                .queues
                .entry(name.clone())
                .or_insert_with(|| Queue::new(QueueConfig::new(name)));
            for mut m in dead {
                m.queue = dq.config.name.clone();
                m.delivery_count = 0;
                dq.ready.push_back(m);
            }
        }
        Ok(())
    }

    fn take(
        &mut self,
        queue: &str,
        now: Timestamp,
        pred: &dyn Fn(&Message) -> bool,
    ) -> Result<Message, BusError> {
        self.reap(queue, now)?;
        self.next_receipt += 1;
        let receipt = self.next_receipt;
        let q = self.queues.get_mut(queue).expect("reap checked existence");
        let pos = q
            .ready
            .iter()
            .position(&pred)
            .ok_or_else(|| BusError::Empty(queue.to_string()))?;
        let mut msg = q.ready.remove(pos).expect("position is in range");
        msg.delivery_count += 1;
        msg.receipt = receipt;
        let deadline = now + q.config.visibility_timeout.as_millis() as u64;
        q.in_flight.insert(
            receipt,
            InFlight {
                msg: msg.clone(),
                deadline,
            },
        );
        self.stats.delivered += 1;
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimClock;
    use serde_json::json;
    use std::collections::BTreeSet;

    fn bus() -> (Bus, Arc<SimClock>) {
        let clock = SimClock::shared();
        let bus = Bus::new(clock.clone());
        bus.declare(QueueConfig::new("orders.management").max_redeliveries(2));
        (bus, clock)
    }

    #[test]
    fn send_increases_depth() {
        let (bus, _) = bus();
        let id = bus
            .send("orders.management", json!({"order": 1}), None, None)
            .unwrap();
        assert!(!id.is_empty());
        assert_eq!(bus.depth("orders.management").unwrap(), 1);
    }

    #[test]
    fn send_to_unknown_queue() {
        let (bus, _) = bus();
        assert_eq!(
            bus.send("nope", json!(1), None, None),
            Err(BusError::UnknownQueue("nope".into()))
        );
    }

    #[test]
    fn hundred_sends_drain_as_multiset() {
        let (bus, _) = bus();
        let mut sent = Vec::new();
        for i in 0..100 {
            let p = json!({"n": i % 17});
            sent.push(p.to_string());
            bus.send("orders.management", p, None, None).unwrap();
        }
        let mut ids = BTreeSet::new();
        let mut got = Vec::new();
        while let Ok(m) = bus.receive("orders.management") {
            ids.insert(m.message_id.clone());
            got.push(m.payload.to_string());
            bus.ack(&m).unwrap();
        }
        sent.sort();
        got.sort();
        assert_eq!(ids.len(), 100);
        assert_eq!(sent, got);
    }

    #[test]
    fn unacked_message_is_redelivered_after_timeout() {
        let (bus, clock) = bus();
        bus.send("orders.management", json!("x"), None, None).unwrap();
        let first = bus.receive("orders.management").unwrap();
        assert_eq!(first.delivery_count, 1);
        assert!(matches!(bus.receive("orders.management"), Err(BusError::Empty(_))));
        clock.advance(DEFAULT_VISIBILITY + Duration::from_millis(1));
        let second = bus.receive("orders.management").unwrap();
        assert_eq!(second.payload, json!("x"));
        assert_eq!(second.delivery_count, 2);
        assert_eq!(bus.ack(&first), Err(BusError::NotInFlight(first.message_id.clone())));
        bus.ack(&second).unwrap();
    }

    #[test]
    fn acked_message_never_comes_back() {
        let (bus, clock) = bus();
        bus.send("orders.management", json!("x"), None, None).unwrap();
        let m = bus.receive("orders.management").unwrap();
        bus.ack(&m).unwrap();
        clock.advance(Duration::from_secs(3600));
        assert!(matches!(bus.receive("orders.management"), Err(BusError::Empty(_))));
        assert_eq!(bus.ack(&m), Err(BusError::NotInFlight(m.message_id.clone())));
    }

    #[test]
    fn poison_message_lands_on_dead_queue() {
        let (bus, clock) = bus();
        bus.send("orders.management", json!("poison"), None, None).unwrap();
        // max_redeliveries = 2: one delivery plus two redeliveries.
        for expected in 1..=3 {
            let m = bus.receive("orders.management").unwrap();
            assert_eq!(m.delivery_count, expected);
            clock.advance(DEFAULT_VISIBILITY);
        }
        assert!(matches!(bus.receive("orders.management"), Err(BusError::Empty(_))));
        assert_eq!(bus.in_flight("orders.management").unwrap(), 0);
        let dead = bus.dead_letters("orders.management").unwrap();
        assert_eq!(dead.len(), 1);
        assert_eq!(dead[0].payload, json!("poison"));
        assert_eq!(dead[0].queue, "orders.management.dead");
    }

    #[test]
    fn unavailable_bus_rejects_sends() {
        let (bus, _) = bus();
        bus.set_available(false);
        assert_eq!(
            bus.send("orders.management", json!(1), None, None),
            Err(BusError::Unavailable)
        );
        bus.set_available(true);
        assert!(bus.send("orders.management", json!(1), None, None).is_ok());
    }

    #[test]
    fn duplicate_delivery_doubles_each_send() {
        let (bus, _) = bus();
        bus.set_duplicate_delivery(true);
        let id = bus.send("orders.management", json!(7), None, None).unwrap();
        let a = bus.receive("orders.management").unwrap();
        let b = bus.receive("orders.management").unwrap();
        assert_eq!(a.message_id, id);
        assert_eq!(b.message_id, id);
        bus.ack(&a).unwrap();
        bus.ack(&b).unwrap();
    }

    #[test]
    fn echo_request_reply() {
        let (bus, _) = bus();
        bus.declare_default("echo");
        let responder = bus.clone();
        let h = std::thread::spawn(move || {
            let m = responder.receive_timeout("echo", Duration::from_secs(5)).unwrap();
            responder.reply(&m, m.payload.clone()).unwrap();
            responder.ack(&m).unwrap();
        });
        let got = bus
            .request("echo", json!({"ping": 1}), Duration::from_secs(5))
            .unwrap();
        h.join().unwrap();
        assert_eq!(got, json!({"ping": 1}));
    }

    #[test]
    fn request_without_responder_times_out() {
        let (bus, _) = bus();
        bus.declare_default("void");
        let started = Instant::now();
        let r = bus.request("void", json!(1), Duration::from_millis(60));
        assert_eq!(r, Err(BusError::Timeout("void".into())));
        assert!(started.elapsed() >= Duration::from_millis(60));
    }

    #[test]
    fn interleaved_replies_reach_their_own_requesters() {
        let (bus, _) = bus();
        bus.declare_default("svc");
        // Responder collects both requests and answers them in reverse order.
        let responder = bus.clone();
        let h = std::thread::spawn(move || {
            let a = responder.receive_timeout("svc", Duration::from_secs(5)).unwrap();
            let b = responder.receive_timeout("svc", Duration::from_secs(5)).unwrap();
            for m in [&b, &a] {
                responder
                    .reply(m, json!({"echo": m.payload.clone()}))
                    .unwrap();
                responder.ack(m).unwrap();
            }
        });
        let b1 = bus.clone();
        let b2 = bus.clone();
        let r1 = std::thread::spawn(move || b1.request("svc", json!("one"), Duration::from_secs(5)));
        let r2 = std::thread::spawn(move || b2.request("svc", json!("two"), Duration::from_secs(5)));
        assert_eq!(r1.join().unwrap().unwrap(), json!({"echo": "one"}));
        assert_eq!(r2.join().unwrap().unwrap(), json!({"echo": "two"}));
        h.join().unwrap();
    }

    #[test]
    fn wire_round_trip() {
        let (bus, _) = bus();
        bus.send("orders.management", json!({"order": {"id": "A"}}), Some("c1".into()), Some("r".into()))
            .unwrap();
        let m = bus.receive("orders.management").unwrap();
        let back = Message::from_wire("orders.management", &m.to_wire()).unwrap();
        assert_eq!(back.message_id, m.message_id);
        assert_eq!(back.payload, m.payload);
        assert_eq!(back.correlation_id.as_deref(), Some("c1"));
        assert_eq!(back.reply_to.as_deref(), Some("r"));
        assert!(Message::from_wire("q", "<order/>").is_err());
    }
}
