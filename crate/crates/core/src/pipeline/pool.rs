//! Fixed-capacity pool of reusable frame-piece buffers.
//!
//! Every slot is in exactly one of four states and only moves along the
//! edges below; the pool enforces them and rejects anything else:
//!
//! ```text
//! free ──acquire──► filling ──mark_ready──► ready ──mark_processing──► processing
//!   ▲                  │                      │                            │
//!   └──────release─────┴───────release────────┴──────────release───────────┘
//! ```
//!
//! A `release` from `ready` is a drop (the piece was never handed to a
//! consumer); from `processing` it is normal completion. Checked-out slots
//! are owned values, so a slot can never be held by two owners or double
//! released; the state table exists to catch protocol bugs and to let tests
//! observe that free + filling + ready + processing always sums to the
//! capacity.

use crate::error::{Result, SpikeError};
use std::sync::{Arc, Condvar, Mutex};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    Free,
    Filling,
    Ready,
    Processing,
}

/// An owned frame piece checked out of a [`FramePool`] slot.
///
/// `index` is the monotone piece counter assigned by the assembler and
/// `frames` the number of whole polling frames in `data` (the final piece of
/// a stream may be short).
#[derive(Debug)]
pub struct FrameSlot {
    slot_id: usize,
    pub index: u64,
    pub frames: usize,
    data: Vec<u8>,
}

impl FrameSlot {
    pub fn slot_id(&self) -> usize {
        self.slot_id
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Vec<u8> {
        &mut self.data
    }

    /// Moves the payload out (for zero-copy hand-off); leaves an empty
    /// buffer behind.
    pub fn take_data(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.data)
    }

    /// Puts a buffer back after a hand-off so the capacity is recycled.
    pub fn restore_data(&mut self, data: Vec<u8>) {
        self.data = data;
    }
}

struct PoolInner {
    states: Vec<SlotState>,
    free: Vec<FrameSlot>,
    closed: bool,
}

/// Thread-safe fixed set of frame slots. `acquire` blocks while the pool is
/// empty (the acquisition side of the pipeline waits rather than losing
/// data) and fails once the pool is closed.
pub struct FramePool {
    inner: Mutex<PoolInner>,
    available: Condvar,
    capacity: usize,
}

impl FramePool {
    pub fn new(capacity: usize, slot_bytes: usize) -> Arc<Self> {
        let free = (0..capacity)
            .map(|slot_id| FrameSlot {
                slot_id,
                index: 0,
                frames: 0,
                data: Vec::with_capacity(slot_bytes),
            })
            .collect();
        Arc::new(Self {
            inner: Mutex::new(PoolInner {
                states: vec![SlotState::Free; capacity],
                free,
                closed: false,
            }),
            available: Condvar::new(),
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Takes a free slot without blocking.
    pub fn try_acquire(&self) -> Option<FrameSlot> {
        let mut inner = self.inner.lock().unwrap();
        let slot = inner.free.pop()?;
        inner.states[slot.slot_id] = SlotState::Filling;
        Some(slot)
    }

    /// Takes a free slot, waiting until one is released. Fails with
    /// [`SpikeError::Closed`] once the pool has been closed.
    pub fn acquire(&self) -> Result<FrameSlot> {
        let mut inner = self.inner.lock().unwrap();
        loop {
            if let Some(slot) = inner.free.pop() {
                inner.states[slot.slot_id] = SlotState::Filling;
                return Ok(slot);
            }
            if inner.closed {
                return Err(SpikeError::Closed);
            }
            inner = self.available.wait(inner).unwrap();
        }
    }

    /// filling → ready: the slot now carries a complete piece.
    pub fn mark_ready(&self, slot: &FrameSlot) -> Result<()> {
        self.transition(slot, SlotState::Filling, SlotState::Ready)
    }

    /// ready → processing: the piece has been handed to the task set.
    pub fn mark_processing(&self, slot: &FrameSlot) -> Result<()> {
        self.transition(slot, SlotState::Ready, SlotState::Processing)
    }

    /// Returns a checked-out slot to the free list from any held state.
    pub fn release(&self, slot: FrameSlot) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        match inner.states[slot.slot_id] {
            SlotState::Free => {
                return Err(SpikeError::PoolMisuse(format!(
                    "slot {} released while already free",
                    slot.slot_id
                )))
            }
            SlotState::Filling | SlotState::Ready | SlotState::Processing => {}
        }
        inner.states[slot.slot_id] = SlotState::Free;
        inner.free.push(slot);
        drop(inner);
        self.available.notify_one();
        Ok(())
    }

    /// Wakes every blocked `acquire` with [`SpikeError::Closed`].
    pub fn close(&self) {
        self.inner.lock().unwrap().closed = true;
        self.available.notify_all();
    }

    /// Slot counts as (free, filling, ready, processing); always sums to the
    /// capacity.
    pub fn state_counts(&self) -> (usize, usize, usize, usize) {
        let inner = self.inner.lock().unwrap();
        let mut counts = (0, 0, 0, 0);
        for state in &inner.states {
            match state {
                SlotState::Free => counts.0 += 1,
                SlotState::Filling => counts.1 += 1,
                SlotState::Ready => counts.2 += 1,
                SlotState::Processing => counts.3 += 1,
            }
        }
        counts
    }

    fn transition(&self, slot: &FrameSlot, from: SlotState, to: SlotState) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let current = inner.states[slot.slot_id];
        if current != from {
            return Err(SpikeError::PoolMisuse(format!(
                "slot {} is {current:?}, expected {from:?} before {to:?}",
                slot.slot_id
            )));
        }
        inner.states[slot.slot_id] = to;
        Ok(())
    }
}
