//! Back-channel over the track's power rails.
//!
//! The car may answer in up to `slots_per_cycle` slots of `bits_per_slot`
//! bits each per protocol cycle. Only that slot/cycle envelope is modeled:
//! bytes are packed MSB-first into 13-bit slot values, preceded by one header
//! slot carrying the byte count.

use std::collections::VecDeque;

use thiserror::Error;

use super::frame::{Frame, FrameError};

pub const SLOT_BITS: u32 = 13;
pub const SLOT_LIMIT: u16 = 1 << SLOT_BITS;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PowerlineError {
    #[error("slot value {0:#x} does not fit in 13 bits")]
    CorruptSlot(u16),
    #[error("message of {0} bytes is too long for the 13-bit length header")]
    TooLong(usize),
    #[error("missing length header slot")]
    MissingHeader,
    #[error("expected {expected} data slots, got {got}")]
    SlotCount { expected: usize, got: usize },
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Theoretical back-channel capacity in bits per second.
pub fn powerline_bandwidth(cycle_period: f64, slots: u32, bits: u32) -> f64 {
    (1.0 / cycle_period) * f64::from(slots) * f64::from(bits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PowerlineSlot {
    pub payload: u16,
    pub slot_index: u8,
    pub cycle_index: u64,
}

impl PowerlineSlot {
    pub fn new(payload: u16, slot_index: u8, cycle_index: u64) -> Result<Self, PowerlineError> {
        if payload >= SLOT_LIMIT {
            return Err(PowerlineError::CorruptSlot(payload));
        }
        Ok(Self {
            payload,
            slot_index,
            cycle_index,
        })
    }

    fn at(position: u64, payload: u16, slots_per_cycle: u32) -> Self {
        let per = u64::from(slots_per_cycle);
        Self {
            payload,
            slot_index: (position % per) as u8,
            cycle_index: position / per,
        }
    }
}

fn data_slots_for(bytes: usize) -> usize {
    (bytes * 8).div_ceil(SLOT_BITS as usize)
}

/// Packs the first `bit_len` bits of `data` (MSB-first) into 13-bit values,
/// zero-padding the last one.
pub fn pack_bits(data: &[u8], bit_len: usize) -> Vec<u16> {
    let bit_len = bit_len.min(data.len() * 8);
    let mut out = Vec::with_capacity(bit_len.div_ceil(SLOT_BITS as usize));
    let mut acc: u32 = 0;
    let mut filled = 0;
    for i in 0..bit_len {
        let bit = (data[i / 8] >> (7 - i % 8)) & 1;
        acc = (acc << 1) | u32::from(bit);
        filled += 1;
        if filled == SLOT_BITS {
            out.push(acc as u16);
            acc = 0;
            filled = 0;
        }
    }
    if filled > 0 {
        out.push((acc << (SLOT_BITS - filled)) as u16);
    }
    out
}

/// Header slot plus `ceil(8n / 13)` data slots, numbered from slot 0.
pub fn powerline_pack(bytes: &[u8]) -> Result<Vec<PowerlineSlot>, PowerlineError> {
    if bytes.len() >= SLOT_LIMIT as usize {
        return Err(PowerlineError::TooLong(bytes.len()));
    }
    let values = std::iter::once(bytes.len() as u16).chain(pack_bits(bytes, bytes.len() * 8));
    Ok(values
        .enumerate()
        .map(|(i, v)| PowerlineSlot::at(i as u64, v, 8))
        .collect())
}

pub fn powerline_unpack(slots: &[PowerlineSlot]) -> Result<Vec<u8>, PowerlineError> {
    let values: Vec<u16> = slots.iter().map(|s| s.payload).collect();
    unpack_values(&values)
}

fn unpack_values(values: &[u16]) -> Result<Vec<u8>, PowerlineError> {
    if let Some(&bad) = values.iter().find(|&&v| v >= SLOT_LIMIT) {
        return Err(PowerlineError::CorruptSlot(bad));
    }
    let (&header, data) = values.split_first().ok_or(PowerlineError::MissingHeader)?;
    let len = header as usize;
    let expected = data_slots_for(len);
    if data.len() != expected {
        return Err(PowerlineError::SlotCount {
            expected,
            got: data.len(),
        });
    }
    let mut out = vec![0u8; len];
    for i in 0..len * 8 {
        let slot = data[i / SLOT_BITS as usize];
        let bit = (slot >> (SLOT_BITS as usize - 1 - i % SLOT_BITS as usize)) & 1;
        out[i / 8] |= (bit as u8) << (7 - i % 8);
    }
    Ok(out)
}

/// Host-side reassembly of a slot stream into byte messages.
#[derive(Debug, Default, Clone)]
pub struct PowerlineDecoder {
    pending: Vec<u16>,
}

impl PowerlineDecoder {
    /// Feeds one slot value; returns a message once its last slot arrives.
    pub fn feed(&mut self, value: u16) -> Option<Result<Vec<u8>, PowerlineError>> {
        if value >= SLOT_LIMIT {
            self.pending.clear();
            return Some(Err(PowerlineError::CorruptSlot(value)));
        }
        self.pending.push(value);
        let expected = data_slots_for(self.pending[0] as usize);
        if self.pending.len() == expected + 1 {
            let msg = unpack_values(&self.pending);
            self.pending.clear();
            return Some(msg);
        }
        None
    }

    pub fn reset(&mut self) {
        self.pending.clear();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerlineParams {
    pub cycle_period: f64,
    pub slots_per_cycle: u32,
    pub bits_per_slot: u32,
}

impl Default for PowerlineParams {
    fn default() -> Self {
        Self {
            cycle_period: 0.075,
            slots_per_cycle: 8,
            bits_per_slot: SLOT_BITS,
        }
    }
}

impl PowerlineParams {
    pub fn slot_time(&self) -> f64 {
        self.cycle_period / f64::from(self.slots_per_cycle)
    }

    pub fn bandwidth(&self) -> f64 {
        powerline_bandwidth(self.cycle_period, self.slots_per_cycle, self.bits_per_slot)
    }
}

#[derive(Debug, Clone)]
struct QueuedSlot {
    value: u16,
    frame_seq: u32,
    last_of_frame: bool,
}

/// A slot the host actually received.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveredSlot {
    pub slot: PowerlineSlot,
    pub frame_seq: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PowerlineStats {
    pub slots_delivered: u64,
    pub slots_blacked_out: u64,
    pub slots_idle: u64,
    pub frames_delivered: u64,
    pub decode_errors: u64,
}

/// Slot-timed channel. Slot `k` occupies `[k * T, (k + 1) * T)` and is
/// delivered at its end, unless the car lost rail contact at any point
/// during it.
#[derive(Debug, Clone)]
pub struct PowerlineLink {
    params: PowerlineParams,
    queue: VecDeque<QueuedSlot>,
    next_slot: u64,
    last_unpowered_end: f64,
    decoder: PowerlineDecoder,
    pub stats: PowerlineStats,
    pub delivered: Vec<DeliveredSlot>,
}

impl PowerlineLink {
    pub fn new(params: PowerlineParams) -> Self {
        Self {
            params,
            queue: VecDeque::new(),
            next_slot: 0,
            last_unpowered_end: f64::NEG_INFINITY,
            decoder: PowerlineDecoder::default(),
            stats: PowerlineStats::default(),
            delivered: Vec::new(),
        }
    }

    pub fn params(&self) -> &PowerlineParams {
        &self.params
    }

    pub fn queued_slots(&self) -> usize {
        self.queue.len()
    }

    pub fn queued_frames(&self) -> usize {
        self.queue.iter().filter(|s| s.last_of_frame).count()
    }

    /// Packs a frame into the slot queue. Returns the number of slots used.
    pub fn enqueue(&mut self, frame: &Frame) -> Result<usize, PowerlineError> {
        let bytes = frame.encode()?;
        let slots = powerline_pack(&bytes)?;
        let n = slots.len();
        for (i, s) in slots.into_iter().enumerate() {
            self.queue.push_back(QueuedSlot {
                value: s.payload,
                frame_seq: frame.seq,
                last_of_frame: i + 1 == n,
            });
        }
        Ok(n)
    }

    /// Records an interval without rail contact.
    pub fn observe_unpowered(&mut self, _start: f64, end: f64) {
        if end > self.last_unpowered_end {
            self.last_unpowered_end = end;
        }
    }

    /// Delivery time of the last queued slot assuming no blackouts.
    pub fn drain_eta(&self, now: f64) -> f64 {
        let t = self.params.slot_time();
        let first_end = ((now / t).floor() + 1.0) * t;
        first_end + t * self.queue.len().saturating_sub(1) as f64
    }

    /// Runs every slot ending in `(t0, t1]` and returns the frames the host
    /// decoded.
    pub fn advance(&mut self, t0: f64, t1: f64) -> Vec<Frame> {
        let slot_time = self.params.slot_time();
        let mut frames = Vec::new();
        loop {
            let start = self.next_slot as f64 * slot_time;
            let end = (self.next_slot + 1) as f64 * slot_time;
            if end > t1 {
                break;
            }
            let k = self.next_slot;
            self.next_slot += 1;
            if end <= t0 {
                continue;
            }
            if self.last_unpowered_end > start + 1e-12 {
                self.stats.slots_blacked_out += 1;
                continue;
            }
            let Some(q) = self.queue.pop_front() else {
                self.stats.slots_idle += 1;
                continue;
            };
            let slot = PowerlineSlot::at(k, q.value, self.params.slots_per_cycle);
            self.stats.slots_delivered += 1;
            self.delivered.push(DeliveredSlot {
                slot,
                frame_seq: q.frame_seq,
            });
            match self.decoder.feed(q.value) {
                Some(Ok(bytes)) => match Frame::decode(&bytes) {
                    Ok(frame) => {
                        self.stats.frames_delivered += 1;
                        frames.push(frame);
                    }
                    Err(_) => self.stats.decode_errors += 1,
                },
                Some(Err(_)) => self.stats.decode_errors += 1,
                None => {}
            }
        }
        frames
    }

    /// Device reset: queued slots are lost and the host discards any partial
    /// message.
    pub fn reset(&mut self) {
        self.queue.clear();
        self.decoder.reset();
    }

    pub fn bits_delivered(&self) -> u64 {
        self.stats.slots_delivered * u64::from(self.params.bits_per_slot)
    }
}
