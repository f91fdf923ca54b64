//! In-process message board shared by the pipeline stages.
//!
//! Each subscription owns a bounded FIFO. A full queue drops its oldest
//! message; the count is reported on the `log` topic the next time the
//! subscriber polls, so publishers never stall and losses are never silent.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

use crate::audio::OnsetEvent;
use crate::hwlink::WireMessage;
use crate::schema::TrialEvent;
use crate::vision::Blob;

pub const DEFAULT_QUEUE_CAPACITY: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Topic {
    Vision,
    Audio,
    Hw,
    Schema,
    Log,
}

impl Topic {
    pub const ALL: [Topic; 5] = [
        Topic::Vision,
        Topic::Audio,
        Topic::Hw,
        Topic::Schema,
        Topic::Log,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Topic::Vision => "vision",
            Topic::Audio => "audio",
            Topic::Hw => "hw",
            Topic::Schema => "schema",
            Topic::Log => "log",
        }
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Topic {
    type Err = BusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Topic::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| BusError::UnknownTopic(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Blobs { camera_id: u8, blobs: Vec<Blob> },
    Audio(OnsetEvent),
    Hw(WireMessage),
    Trial(TrialEvent),
    Log { line: String },
    Dropped { topic: Topic, subscription: u64, count: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BusMessage {
    pub topic: Topic,
    pub publisher: String,
    pub seq: u64,
    pub t_sim_ms: u64,
    pub payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    /// Subscribers the message was enqueued for.
    pub delivered_to: usize,
    /// Messages evicted from full queues by this publish.
    pub dropped: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BusError {
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("topic {0} is not registered on this bus")]
    Unregistered(Topic),
    #[error("sequence from {publisher} on {topic} went from {last} to {got}")]
    SeqRegression {
        publisher: String,
        topic: Topic,
        last: u64,
        got: u64,
    },
    #[error("time from {publisher} went backwards: {last} ms then {got} ms")]
    TimeRegression {
        publisher: String,
        last: u64,
        got: u64,
    },
    #[error("subscription {0} is closed")]
    Closed(u64),
}

/// Handle to one subscriber queue. Not `Clone`: exactly one consumer owns it.
#[derive(Debug)]
pub struct Subscription {
    id: u64,
    topic: Topic,
}

impl Subscription {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn topic(&self) -> Topic {
        self.topic
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TopicStats {
    pub published: u64,
    pub dropped: u64,
}

#[derive(Debug)]
struct Queue {
    topic: Topic,
    items: VecDeque<BusMessage>,
    unreported_drops: u64,
}

#[derive(Debug)]
struct Inner {
    capacity: usize,
    registered: Vec<Topic>,
    queues: HashMap<u64, Queue>,
    next_sub: u64,
    last_seq: HashMap<(String, Topic), u64>,
    last_t: HashMap<String, u64>,
    stats: HashMap<Topic, TopicStats>,
    notice_seq: u64,
    notice_t: u64,
    closed: bool,
}

/// Cheaply clonable handle; all clones share one board.
#[derive(Debug, Clone)]
pub struct Bus {
    inner: Arc<Mutex<Inner>>,
}

const BUS_PUBLISHER: &str = "bus";

impl Default for Bus {
    fn default() -> Self {
        Self::new(&Topic::ALL, DEFAULT_QUEUE_CAPACITY)
    }
}

impl Bus {
    pub fn new(topics: &[Topic], capacity: usize) -> Self {
        let mut registered = topics.to_vec();
        registered.sort();
        registered.dedup();
        Self {
            inner: Arc::new(Mutex::new(Inner {
                capacity: capacity.max(1),
                registered,
                queues: HashMap::new(),
                next_sub: 1,
                last_seq: HashMap::new(),
                last_t: HashMap::new(),
                stats: HashMap::new(),
                notice_seq: 0,
                notice_t: 0,
                closed: false,
            })),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn subscribe(&self, topic: Topic) -> Result<Subscription, BusError> {
        let mut inner = self.lock();
        if !inner.registered.contains(&topic) {
            return Err(BusError::Unregistered(topic));
        }
        let id = inner.next_sub;
        inner.next_sub += 1;
        inner.queues.insert(
            id,
            Queue {
                topic,
                items: VecDeque::new(),
                unreported_drops: 0,
            },
        );
        Ok(Subscription { id, topic })
    }

    pub fn unsubscribe(&self, sub: &Subscription) {
        self.lock().queues.remove(&sub.id);
    }

    /// Closes every subscription; subsequent polls fail.
    pub fn close(&self) {
        let mut inner = self.lock();
        inner.closed = true;
        inner.queues.clear();
    }

    pub fn publish(&self, msg: BusMessage) -> Result<Ack, BusError> {
        let mut inner = self.lock();
        if !inner.registered.contains(&msg.topic) {
            return Err(BusError::Unregistered(msg.topic));
        }
        let key = (msg.publisher.clone(), msg.topic);
        if let Some(&last) = inner.last_seq.get(&key) {
            if msg.seq <= last {
                return Err(BusError::SeqRegression {
                    publisher: msg.publisher,
                    topic: msg.topic,
                    last,
                    got: msg.seq,
                });
            }
        }
        if let Some(&last) = inner.last_t.get(&msg.publisher) {
            if msg.t_sim_ms < last {
                return Err(BusError::TimeRegression {
                    publisher: msg.publisher,
                    last,
                    got: msg.t_sim_ms,
                });
            }
        }
        inner.last_seq.insert(key, msg.seq);
        inner.last_t.insert(msg.publisher.clone(), msg.t_sim_ms);
        inner.notice_t = inner.notice_t.max(msg.t_sim_ms);
        Ok(inner.enqueue(msg))
    }

    pub fn poll(&self, sub: &Subscription, max_n: usize) -> Result<Vec<BusMessage>, BusError> {
        let mut inner = self.lock();
        if inner.closed {
            return Err(BusError::Closed(sub.id));
        }
        let inner = &mut *inner;
        let queue = inner
            .queues
            .get_mut(&sub.id)
            .ok_or(BusError::Closed(sub.id))?;
        let n = max_n.min(queue.items.len());
        let out: Vec<BusMessage> = queue.items.drain(..n).collect();
        let drops = std::mem::take(&mut queue.unreported_drops);
        let topic = queue.topic;
        if drops > 0 {
            inner.notice_seq += 1;
            let notice = BusMessage {
                topic: Topic::Log,
                publisher: BUS_PUBLISHER.into(),
                seq: inner.notice_seq,
                t_sim_ms: inner.notice_t,
                payload: Payload::Dropped {
                    topic,
                    subscription: sub.id,
                    count: drops,
                },
            };
            if inner.registered.contains(&Topic::Log) {
                inner.enqueue(notice);
            }
        }
        Ok(out)
    }

    pub fn pending(&self, sub: &Subscription) -> usize {
        self.lock()
            .queues
            .get(&sub.id)
            .map_or(0, |q| q.items.len())
    }

    pub fn stats(&self, topic: Topic) -> TopicStats {
        self.lock().stats.get(&topic).copied().unwrap_or_default()
    }
}

impl Inner {
    fn enqueue(&mut self, msg: BusMessage) -> Ack {
        let capacity = self.capacity;
        let mut ids: Vec<u64> = self
            .queues
            .iter()
            .filter(|(_, q)| q.topic == msg.topic)
            .map(|(id, _)| *id)
            .collect();
        ids.sort_unstable();
        let mut dropped = 0;
        for id in &ids {
            let q = self.queues.get_mut(id).expect("queue id just listed");
            if q.items.len() >= capacity {
                q.items.pop_front();
                q.unreported_drops += 1;
                dropped += 1;
            }
            q.items.push_back(msg.clone());
        }
        let stats = self.stats.entry(msg.topic).or_default();
        stats.published += 1;
        stats.dropped += dropped as u64;
        Ack {
            delivered_to: ids.len(),
            dropped,
        }
    }
}

/// Per-publisher helper that stamps monotonically increasing sequence numbers.
#[derive(Debug, Clone)]
pub struct Publisher {
    bus: Bus,
    name: String,
    seq: HashMap<Topic, u64>,
}

impl Publisher {
    pub fn new(bus: &Bus, name: impl Into<String>) -> Self {
        Self {
            bus: bus.clone(),
            name: name.into(),
            seq: HashMap::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn send(&mut self, topic: Topic, t_sim_ms: u64, payload: Payload) -> Result<Ack, BusError> {
        let seq = self.seq.entry(topic).or_insert(0);
        *seq += 1;
        self.bus.publish(BusMessage {
            topic,
            publisher: self.name.clone(),
            seq: *seq,
            t_sim_ms,
            payload,
        })
    }

    pub fn log(&mut self, t_sim_ms: u64, line: impl Into<String>) -> Result<Ack, BusError> {
        self.send(Topic::Log, t_sim_ms, Payload::Log { line: line.into() })
    }
}
