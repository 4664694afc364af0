//! In-process ordered event bus.
//!
//! Each session has its own sequence counter, append-only log and set of
//! subscribers. Publication and delivery for one session happen under a single
//! lock, which gives every subscriber the session's events in strictly
//! increasing `seq` order, exactly once. Subscriber queues are bounded; a full
//! queue blocks the publisher instead of dropping events.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use thiserror::Error;

pub use crate::events::{BusEvent, EventPayload, Topic};

pub const DEFAULT_QUEUE_BOUND: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("unknown session '{0}'")]
    UnknownSession(String),
    #[error("session '{0}' is closed")]
    SessionClosed(String),
    #[error("session '{0}' already exists")]
    SessionExists(String),
    #[error("event log for '{session}' is not contiguous at seq {seq}")]
    BrokenLog { session: String, seq: u64 },
}

struct Subscriber {
    topics: Option<BTreeSet<Topic>>,
    tx: SyncSender<BusEvent>,
}

impl Subscriber {
    fn wants(&self, topic: Topic) -> bool {
        self.topics.as_ref().is_none_or(|t| t.contains(&topic))
    }
}

#[derive(Default)]
struct Channel {
    log: Vec<BusEvent>,
    subscribers: Vec<Subscriber>,
    closed: bool,
}

impl Channel {
    fn next_seq(&self) -> u64 {
        self.log.last().map_or(1, |e| e.seq + 1)
    }

    fn deliver(&mut self, event: &BusEvent) {
        let topic = event.topic();
        // A failed send means the receiver was dropped.
        self.subscribers.retain(|s| !s.wants(topic) || s.tx.send(event.clone()).is_ok());
    }

    fn append(&mut self, session_id: &str, ts: u64, payload: EventPayload) -> BusEvent {
        let closing = payload.topic() == Topic::SessionEnded;
        let event = BusEvent { seq: self.next_seq(), session_id: session_id.to_string(), ts, payload };
        self.log.push(event.clone());
        self.deliver(&event);
        if closing {
            self.closed = true;
            // Dropping the senders ends every subscription once drained.
            self.subscribers.clear();
        }
        event
    }
}

pub struct MessageBus {
    sessions: RwLock<HashMap<String, Arc<Mutex<Channel>>>>,
    queue_bound: usize,
}

impl Default for MessageBus {
    fn default() -> Self {
        Self::new()
    }
}

impl MessageBus {
    pub fn new() -> Self {
        Self::with_queue_bound(DEFAULT_QUEUE_BOUND)
    }

    pub fn with_queue_bound(queue_bound: usize) -> Self {
        Self { sessions: RwLock::new(HashMap::new()), queue_bound: queue_bound.max(1) }
    }

    fn channel(&self, session_id: &str) -> Result<Arc<Mutex<Channel>>, BusError> {
        self.sessions
            .read()
            .expect("bus registry lock")
            .get(session_id)
            .cloned()
            .ok_or_else(|| BusError::UnknownSession(session_id.to_string()))
    }

    pub fn open_session(&self, session_id: &str) -> Result<(), BusError> {
        let mut sessions = self.sessions.write().expect("bus registry lock");
        if sessions.contains_key(session_id) {
            return Err(BusError::SessionExists(session_id.to_string()));
        }
        sessions.insert(session_id.to_string(), Arc::default());
        Ok(())
    }

    /// Re-registers a session from a persisted log, e.g. after restart.
    pub fn restore_session(&self, session_id: &str, log: Vec<BusEvent>) -> Result<(), BusError> {
        for (i, event) in log.iter().enumerate() {
            if event.seq != i as u64 + 1 || event.session_id != session_id {
                return Err(BusError::BrokenLog { session: session_id.to_string(), seq: event.seq });
            }
        }
        let closed = log.iter().any(|e| e.topic() == Topic::SessionEnded);
        let mut sessions = self.sessions.write().expect("bus registry lock");
        if sessions.contains_key(session_id) {
            return Err(BusError::SessionExists(session_id.to_string()));
        }
        sessions.insert(session_id.to_string(), Arc::new(Mutex::new(Channel { log, subscribers: Vec::new(), closed })));
        Ok(())
    }

    pub fn publish(&self, session_id: &str, ts: u64, payload: EventPayload) -> Result<u64, BusError> {
        let channel = self.channel(session_id)?;
        let mut ch = channel.lock().expect("bus channel lock");
        if ch.closed {
            return Err(BusError::SessionClosed(session_id.to_string()));
        }
        Ok(ch.append(session_id, ts, payload).seq)
    }

    /// Publishes pre-sequenced events atomically. Every event must carry the
    /// next expected seq, so a batch built against a stale view is rejected
    /// before anything is appended.
    pub fn publish_batch(&self, session_id: &str, events: &[BusEvent]) -> Result<(), BusError> {
        let channel = self.channel(session_id)?;
        let mut ch = channel.lock().expect("bus channel lock");
        if ch.closed {
            return Err(BusError::SessionClosed(session_id.to_string()));
        }
        for (i, (expected, e)) in (ch.next_seq()..).zip(events).enumerate() {
            let ends_early = e.topic() == Topic::SessionEnded && i + 1 != events.len();
            if e.seq != expected || e.session_id != session_id || ends_early {
                return Err(BusError::BrokenLog { session: session_id.to_string(), seq: e.seq });
            }
        }
        for e in events {
            let appended = ch.append(session_id, e.ts, e.payload.clone());
            debug_assert_eq!(appended.seq, e.seq);
        }
        Ok(())
    }

    /// Live subscription from the current point forward. `None` means all
    /// topics.
    pub fn subscribe(&self, session_id: &str, topics: Option<&[Topic]>) -> Result<Subscription, BusError> {
        self.attach(session_id, topics, None)
    }

    /// Historical events with `seq >= from_seq` followed by live events, with
    /// no gap or duplicate at the boundary.
    pub fn replay_from(&self, session_id: &str, from_seq: u64, topics: Option<&[Topic]>) -> Result<Subscription, BusError> {
        self.attach(session_id, topics, Some(from_seq))
    }

    fn attach(&self, session_id: &str, topics: Option<&[Topic]>, from: Option<u64>) -> Result<Subscription, BusError> {
        let channel = self.channel(session_id)?;
        let mut ch = channel.lock().expect("bus channel lock");
        let topics: Option<BTreeSet<Topic>> = topics.map(|t| t.iter().copied().collect());
        let backlog = match from {
            Some(from) => ch
                .log
                .iter()
                .filter(|e| e.seq >= from && topics.as_ref().is_none_or(|t| t.contains(&e.topic())))
                .cloned()
                .collect(),
            None => VecDeque::new(),
        };
        let (tx, rx) = mpsc::sync_channel(self.queue_bound);
        if !ch.closed {
            ch.subscribers.push(Subscriber { topics, tx });
        }
        Ok(Subscription { backlog, rx })
    }

    /// Snapshot of a session's full log.
    pub fn log(&self, session_id: &str) -> Result<Vec<BusEvent>, BusError> {
        Ok(self.channel(session_id)?.lock().expect("bus channel lock").log.clone())
    }

    /// Log entries with `seq > after`.
    pub fn events_after(&self, session_id: &str, after: u64) -> Result<Vec<BusEvent>, BusError> {
        let channel = self.channel(session_id)?;
        let guard = channel.lock().expect("bus channel lock");
        let start = guard.log.partition_point(|e| e.seq <= after);
        Ok(guard.log[start..].to_vec())
    }

    pub fn last_seq(&self, session_id: &str) -> Result<u64, BusError> {
        Ok(self.channel(session_id)?.lock().expect("bus channel lock").next_seq() - 1)
    }

    pub fn is_closed(&self, session_id: &str) -> Result<bool, BusError> {
        Ok(self.channel(session_id)?.lock().expect("bus channel lock").closed)
    }
}

/// Ordered stream of events for one session.
pub struct Subscription {
    backlog: VecDeque<BusEvent>,
    rx: Receiver<BusEvent>,
}

impl Subscription {
    /// Blocks for the next event; `None` once the session has ended and all
    /// delivered events were consumed.
    pub fn recv(&mut self) -> Option<BusEvent> {
        self.backlog.pop_front().or_else(|| self.rx.recv().ok())
    }

    pub fn try_recv(&mut self) -> Option<BusEvent> {
        self.backlog.pop_front().or_else(|| self.rx.try_recv().ok())
    }

    pub fn recv_timeout(&mut self, timeout: Duration) -> Option<BusEvent> {
        self.backlog.pop_front().or_else(|| self.rx.recv_timeout(timeout).ok())
    }

    /// Drains whatever is immediately available.
    pub fn drain(&mut self) -> Vec<BusEvent> {
        std::iter::from_fn(|| self.try_recv()).collect()
    }
}

impl Iterator for Subscription {
    type Item = BusEvent;

    fn next(&mut self) -> Option<BusEvent> {
        self.recv()
    }
}
