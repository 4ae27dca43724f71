//! Virtual-time event queue.
//!
//! Events are ordered by `(fire_at, seq)` where `seq` is the insertion
//! counter, so simultaneous events pop in the order they were pushed.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::Serialize;
use thiserror::Error;

use crate::infra::{LeaseId, ResourceId};
use crate::market::ReservationId;
use crate::time::SimTime;
use crate::workload::TaskId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("event at {fire_at} is before the current clock {clock}")]
    PastEvent { fire_at: SimTime, clock: SimTime },
    #[error("event queue is empty")]
    EmptyQueue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    TaskArrival {
        task: TaskId,
    },
    /// Wake-up for a resource's allocator. Stale when `epoch` no longer
    /// matches the resource's current epoch.
    TaskCompletion {
        resource: ResourceId,
        epoch: u64,
    },
    LeaseReady {
        lease: LeaseId,
    },
    LeaseExpired {
        lease: LeaseId,
    },
    DispatchTick,
    RequestArrival {
        request: u32,
    },
    RequestCompletion {
        request: u32,
    },
    RequirementSubmitted {
        index: u32,
    },
    ReservationStart {
        reservation: ReservationId,
    },
    ReservationEnd {
        reservation: ReservationId,
    },
    OutageStart {
        index: u32,
    },
    OutageEnd {
        index: u32,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event<K = EventKind> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub kind: K,
}

struct Entry<K> {
    fire_at: SimTime,
    seq: u64,
    kind: K,
}

impl<K> PartialEq for Entry<K> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl<K> Eq for Entry<K> {}

impl<K> PartialOrd for Entry<K> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<K> Ord for Entry<K> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.fire_at, self.seq).cmp(&(other.fire_at, other.seq))
    }
}

/// Min-queue of events plus the virtual clock it drives.
pub struct EventQueue<K = EventKind> {
    heap: BinaryHeap<Reverse<Entry<K>>>,
    clock: SimTime,
    next_seq: u64,
}

impl<K> Default for EventQueue<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K> EventQueue<K> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            clock: SimTime::ZERO,
            next_seq: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|Reverse(e)| e.fire_at)
    }

    /// Schedules `kind` at `fire_at` and returns the assigned sequence number.
    pub fn push(&mut self, fire_at: SimTime, kind: K) -> Result<u64, EngineError> {
        if fire_at < self.clock {
            return Err(EngineError::PastEvent {
                fire_at,
                clock: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Entry { fire_at, seq, kind }));
        Ok(seq)
    }

    /// Pops the `(fire_at, seq)`-minimal event and moves the clock to it.
    pub fn advance(&mut self) -> Result<Event<K>, EngineError> {
        let Reverse(entry) = self.heap.pop().ok_or(EngineError::EmptyQueue)?;
        self.clock = entry.fire_at;
        Ok(Event {
            fire_at: entry.fire_at,
            seq: entry.seq,
            kind: entry.kind,
        })
    }
}
