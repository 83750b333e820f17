//! Per-session outbound queue with backpressure.
//!
//! Past [`PRESSURE_THRESHOLD`] queued messages, map deltas merge into the one
//! already queued, and state, mesh and metrics updates keep only the newest copy.
//! Plan results, acks and errors are never dropped.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use mrnav_core::mapping::CellState;

use crate::codec::{MapDelta, Message, MessageType, Payload};

pub const PRESSURE_THRESHOLD: usize = 100;

#[derive(Debug, Default)]
struct Queue {
    items: VecDeque<Message>,
    next_seq: u64,
    closed: bool,
    dropped: u64,
    coalesced: u64,
}

/// Thread-safe queue shared by the mission loop (producer) and a session writer.
#[derive(Debug, Default)]
pub struct Outbox {
    queue: Mutex<Queue>,
    ready: Condvar,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OutboxStats {
    pub queued: usize,
    pub dropped: u64,
    pub coalesced: u64,
}

fn merge_delta(into: &mut MapDelta, from: MapDelta) {
    let mut cells: BTreeMap<[i32; 3], CellState> = if from.full {
        BTreeMap::new()
    } else {
        into.cells.drain(..).collect()
    };
    cells.extend(from.cells);
    into.full |= from.full;
    if from.config.is_some() {
        into.config = from.config;
    }
    into.cells = cells.into_iter().collect();
}

impl Outbox {
    pub fn new() -> Self {
        Self::default()
    }

    /// Assigns the next outbound seq and queues the message. Returns the seq.
    pub fn push(&self, stamp: f64, payload: Payload) -> u64 {
        let mut q = self.queue.lock().expect("outbox lock");
        q.next_seq += 1;
        let seq = q.next_seq;
        let msg = Message::new(seq, stamp, payload);
        if q.closed {
            return seq;
        }
        if q.items.len() >= PRESSURE_THRESHOLD {
            match msg.kind() {
                MessageType::MapDelta => {
                    if let Some(pos) = q.items.iter().position(|m| m.kind() == MessageType::MapDelta) {
                        let Payload::MapDelta(new) = msg.payload else { unreachable!() };
                        let mut old = q.items.remove(pos).expect("position is in range");
                        if let Payload::MapDelta(d) = &mut old.payload {
                            merge_delta(d, new);
                        }
                        old.seq = seq;
                        old.stamp = stamp;
                        q.items.push_back(old);
                        q.coalesced += 1;
                        drop(q);
                        self.ready.notify_all();
                        return seq;
                    }
                }
                MessageType::StateUpdate | MessageType::MeshUpdate | MessageType::MetricsUpdate => {
                    let kind = msg.kind();
                    let before = q.items.len();
                    q.items.retain(|m| m.kind() != kind);
                    q.dropped += (before - q.items.len()) as u64;
                }
                _ => {}
            }
        }
        q.items.push_back(msg);
        drop(q);
        self.ready.notify_all();
        seq
    }

    /// Next message, waiting up to `timeout`. `None` on timeout or once closed and drained.
    pub fn pop(&self, timeout: Duration) -> Option<Message> {
        let mut q = self.queue.lock().expect("outbox lock");
        if q.items.is_empty() && !q.closed {
            q = self.ready.wait_timeout_while(q, timeout, |q| q.items.is_empty() && !q.closed).expect("outbox lock").0;
        }
        q.items.pop_front()
    }

    /// Everything queued right now, without waiting.
    pub fn drain(&self) -> Vec<Message> {
        self.queue.lock().expect("outbox lock").items.drain(..).collect()
    }

    pub fn close(&self) {
        self.queue.lock().expect("outbox lock").closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.queue.lock().expect("outbox lock").closed
    }

    pub fn stats(&self) -> OutboxStats {
        let q = self.queue.lock().expect("outbox lock");
        OutboxStats { queued: q.items.len(), dropped: q.dropped, coalesced: q.coalesced }
    }
}
