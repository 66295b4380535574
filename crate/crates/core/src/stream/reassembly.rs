use std::collections::{HashMap, HashSet, VecDeque};
use std::time::{Duration, Instant};

use super::FrameChunk;

/// Incomplete frames older than this are dropped.
pub const EXPIRY: Duration = Duration::from_millis(500);
/// Most frames held incomplete at once; the oldest is evicted beyond this.
pub const MAX_IN_FLIGHT: usize = 64;
/// Recently completed frame ids remembered to ignore late duplicates.
const COMPLETED_MEMORY: usize = 1024;

#[derive(Debug)]
struct Pending {
    first_seen: Instant,
    parts: Vec<Option<Vec<u8>>>,
    received: usize,
}

/// Outcome of feeding one chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Insert {
    /// Last missing chunk arrived; the frame is handed out exactly once.
    Complete { frame_id: u32, frame: Vec<u8> },
    Pending,
    /// Chunk already received, or its frame already completed.
    Duplicate,
    /// Chunk disagrees with earlier chunks of the same frame.
    Inconsistent,
}

#[derive(Debug)]
pub struct ReassemblyBuffer {
    expiry: Duration,
    max_in_flight: usize,
    pending: HashMap<u32, Pending>,
    completed: HashSet<u32>,
    completed_order: VecDeque<u32>,
    lost: u64,
}

impl ReassemblyBuffer {
    pub fn new(expiry: Duration, max_in_flight: usize) -> Self {
        ReassemblyBuffer {
            expiry,
            max_in_flight: max_in_flight.max(1),
            pending: HashMap::new(),
            completed: HashSet::new(),
            completed_order: VecDeque::new(),
            lost: 0,
        }
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    /// Frames dropped so far by expiry or eviction.
    pub fn lost(&self) -> u64 {
        self.lost
    }

    pub fn insert(&mut self, chunk: FrameChunk, now: Instant) -> Insert {
        let id = chunk.frame_id;
        if self.completed.contains(&id) {
            return Insert::Duplicate;
        }
        if !self.pending.contains_key(&id) && self.pending.len() >= self.max_in_flight {
            self.evict_oldest();
        }
        let entry = self.pending.entry(id).or_insert_with(|| Pending {
            first_seen: now,
            parts: vec![None; chunk.chunk_count as usize],
            received: 0,
        });
        if entry.parts.len() != chunk.chunk_count as usize {
            return Insert::Inconsistent;
        }
        let slot = &mut entry.parts[chunk.chunk_index as usize];
        if slot.is_some() {
            return Insert::Duplicate;
        }
        *slot = Some(chunk.payload);
        entry.received += 1;
        if entry.received < entry.parts.len() {
            return Insert::Pending;
        }
        let done = self.pending.remove(&id).expect("entry present");
        self.remember(id);
        let frame = done.parts.into_iter().flatten().flatten().collect();
        Insert::Complete { frame_id: id, frame }
    }

    /// Drops incomplete frames first seen more than the expiry ago;
    /// returns how many were dropped.
    pub fn expire(&mut self, now: Instant) -> usize {
        let expiry = self.expiry;
        let before = self.pending.len();
        self.pending
            .retain(|_, p| now.saturating_duration_since(p.first_seen) <= expiry);
        let dropped = before - self.pending.len();
        self.lost += dropped as u64;
        dropped
    }

    fn evict_oldest(&mut self) {
        let oldest = self
            .pending
            .iter()
            .min_by_key(|(&id, p)| (p.first_seen, id))
            .map(|(&id, _)| id);
        if let Some(id) = oldest {
            self.pending.remove(&id);
            self.lost += 1;
        }
    }

    fn remember(&mut self, id: u32) {
        self.completed.insert(id);
        self.completed_order.push_back(id);
        if self.completed_order.len() > COMPLETED_MEMORY {
            if let Some(old) = self.completed_order.pop_front() {
                self.completed.remove(&old);
            }
        }
    }
}
