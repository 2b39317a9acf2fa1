//! Brownout-tolerant log storage.
//!
//! Records are staged in a bounded RAM buffer and moved to a simulated flash
//! ring on [`LogStore::flush`]. RAM is lost on brownout, flash is not. The
//! last assigned sequence number lives in flash so numbering stays monotonic
//! across reboots.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::transport::crc16;

pub const MAX_PAYLOAD: usize = 255;
/// seq, timestamp, severity, length and crc.
pub const RECORD_OVERHEAD: usize = 4 + 8 + 1 + 1 + 2;
pub const IMAGE_MAGIC: &[u8; 4] = b"PGLG";
pub const IMAGE_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("payload of {0} bytes exceeds {MAX_PAYLOAD}")]
    PayloadTooLarge(usize),
    #[error("ack through {requested} is beyond the high-water mark {high_water}")]
    FutureSeq { requested: u32, high_water: u32 },
    #[error("sequence numbers exhausted")]
    SeqExhausted,
    #[error("flash capacity {0} cannot hold a single maximum-size record")]
    CapacityTooSmall(usize),
    #[error("flash image: bad magic")]
    BadMagic,
    #[error("flash image: unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("flash image truncated")]
    Truncated,
    #[error("flash image: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Severity {
    Debug = 0,
    Info = 1,
    Warn = 2,
    Error = 3,
}

impl Severity {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Severity::Debug),
            1 => Some(Severity::Info),
            2 => Some(Severity::Warn),
            3 => Some(Severity::Error),
            _ => None,
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Severity::Debug => "debug",
            Severity::Info => "info",
            Severity::Warn => "warn",
            Severity::Error => "error",
        };
        f.write_str(s)
    }
}

impl FromStr for Severity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "debug" => Ok(Severity::Debug),
            "info" => Ok(Severity::Info),
            "warn" => Ok(Severity::Warn),
            "error" => Ok(Severity::Error),
            _ => Err(format!("unknown severity '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub seq: u32,
    /// Simulation time of the append, seconds.
    pub timestamp: f64,
    pub severity: Severity,
    pub payload: Vec<u8>,
    pub crc: u16,
}

impl LogRecord {
    pub fn new(seq: u32, timestamp: f64, severity: Severity, payload: Vec<u8>) -> Self {
        let mut rec = Self {
            seq,
            timestamp,
            severity,
            payload,
            crc: 0,
        };
        rec.crc = rec.compute_crc();
        rec
    }

    fn body(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RECORD_OVERHEAD - 2 + self.payload.len());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.timestamp.to_le_bytes());
        out.push(self.severity as u8);
        out.push(self.payload.len() as u8);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn compute_crc(&self) -> u16 {
        crc16(&self.body())
    }

    pub fn crc_valid(&self) -> bool {
        self.payload.len() <= MAX_PAYLOAD && self.crc == self.compute_crc()
    }

    /// Bytes the record occupies in flash.
    pub fn stored_size(&self) -> usize {
        RECORD_OVERHEAD + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.body();
        out.extend_from_slice(&self.crc.to_le_bytes());
        out
    }

    /// Parses one record; the CRC is not checked here.
    fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize), StoreError> {
        if bytes.len() < RECORD_OVERHEAD {
            return Err(StoreError::Truncated);
        }
        let len = bytes[13] as usize;
        let total = RECORD_OVERHEAD + len;
        if bytes.len() < total {
            return Err(StoreError::Truncated);
        }
        let seq = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
        let timestamp = f64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        // An unknown severity byte can only come from a damaged record; keep
        // the record so the CRC check rejects it.
        let severity = Severity::from_byte(bytes[12]).unwrap_or(Severity::Error);
        let payload = bytes[14..14 + len].to_vec();
        let crc = u16::from_le_bytes([bytes[total - 2], bytes[total - 1]]);
        let mut rec = Self {
            seq,
            timestamp,
            severity,
            payload,
            crc,
        };
        if Severity::from_byte(bytes[12]).is_none() {
            rec.crc = !rec.compute_crc();
        }
        Ok((rec, total))
    }
}

/// Volatile staging queue; drop-oldest on overflow.
#[derive(Debug, Clone)]
pub struct RamBuffer {
    records: VecDeque<LogRecord>,
    capacity: usize,
    dropped: u64,
}

impl RamBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            records: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
            dropped: 0,
        }
    }

    pub fn push(&mut self, rec: LogRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
            self.dropped += 1;
        }
        self.records.push_back(rec);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

/// Persistent record ring with a byte quota.
#[derive(Debug, Clone, PartialEq)]
pub struct FlashRing {
    capacity: usize,
    records: VecDeque<LogRecord>,
    used: usize,
    high_water: u32,
    write_counter: u64,
}

impl FlashRing {
    pub fn new(capacity: usize) -> Result<Self, StoreError> {
        if capacity < RECORD_OVERHEAD + MAX_PAYLOAD {
            return Err(StoreError::CapacityTooSmall(capacity));
        }
        Ok(Self {
            capacity,
            records: VecDeque::new(),
            used: 0,
            high_water: 0,
            write_counter: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn used_bytes(&self) -> usize {
        self.used
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn high_water(&self) -> u32 {
        self.high_water
    }

    pub fn write_counter(&self) -> u64 {
        self.write_counter
    }

    /// Oldest and newest stored sequence numbers.
    pub fn head_tail(&self) -> Option<(u32, u32)> {
        Some((self.records.front()?.seq, self.records.back()?.seq))
    }

    pub fn records(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter()
    }

    /// Writes one record, evicting from the front as needed. Returns the
    /// number of records evicted.
    fn write(&mut self, rec: LogRecord) -> usize {
        let mut evicted = 0;
        while self.used + rec.stored_size() > self.capacity {
            let old = self.records.pop_front().expect("record fits in empty ring");
            self.used -= old.stored_size();
            evicted += 1;
        }
        self.used += rec.stored_size();
        self.write_counter += 1;
        self.records.push_back(rec);
        evicted
    }

    /// Drops records that fail their CRC. Returns how many were dropped.
    fn scrub(&mut self) -> usize {
        let before = self.records.len();
        self.records.retain(|r| r.crc_valid());
        self.used = self.records.iter().map(LogRecord::stored_size).sum();
        before - self.records.len()
    }

    fn trim_through(&mut self, seq: u32) -> Vec<LogRecord> {
        let mut out = Vec::new();
        while self.records.front().is_some_and(|r| r.seq <= seq) {
            let r = self.records.pop_front().expect("front exists");
            self.used -= r.stored_size();
            out.push(r);
        }
        out
    }

    pub fn to_image(&self) -> Vec<u8> {
        let (head, tail) = self.head_tail().unwrap_or((0, 0));
        let mut out = Vec::with_capacity(40 + self.used);
        out.extend_from_slice(IMAGE_MAGIC);
        out.push(IMAGE_VERSION);
        out.extend_from_slice(&(self.capacity as u32).to_le_bytes());
        out.extend_from_slice(&self.high_water.to_le_bytes());
        out.extend_from_slice(&head.to_le_bytes());
        out.extend_from_slice(&tail.to_le_bytes());
        out.extend_from_slice(&(self.used as u32).to_le_bytes());
        out.extend_from_slice(&self.write_counter.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.encode());
        }
        out
    }

    /// Parses an image. Records failing their CRC are kept so that the
    /// caller's recovery pass can count and drop them.
    pub fn from_image(bytes: &[u8]) -> Result<Self, StoreError> {
        const HEADER: usize = 4 + 1 + 4 + 4 + 4 + 4 + 4 + 8 + 4;
        if bytes.len() < 5 {
            return Err(StoreError::Truncated);
        }
        if &bytes[..4] != IMAGE_MAGIC {
            return Err(StoreError::BadMagic);
        }
        if bytes[4] != IMAGE_VERSION {
            return Err(StoreError::UnsupportedVersion(bytes[4]));
        }
        if bytes.len() < HEADER {
            return Err(StoreError::Truncated);
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let capacity = u32_at(5) as usize;
        let high_water = u32_at(9);
        let write_counter = u64::from_le_bytes(bytes[25..33].try_into().expect("8 bytes"));
        let count = u32_at(33) as usize;
        let mut ring = FlashRing::new(capacity)?;
        ring.high_water = high_water;
        ring.write_counter = write_counter;
        let mut at = HEADER;
        for _ in 0..count {
            let (rec, used) = LogRecord::decode_prefix(&bytes[at..])?;
            at += used;
            ring.used += rec.stored_size();
            ring.records.push_back(rec);
        }
        Ok(ring)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub appended: u64,
    pub flushed: u64,
    /// RAM overflow, drop-oldest.
    pub dropped: u64,
    /// RAM contents lost to brownouts.
    pub lost_volatile: u64,
    /// Unacked flash records pushed out by the quota.
    pub evicted: u64,
    pub acked: u64,
    /// Records discarded during recovery because of a failed CRC.
    pub torn: u64,
}

#[derive(Debug, Clone)]
pub struct LogStore {
    ram: RamBuffer,
    flash: FlashRing,
    stats: StoreStats,
    /// Fault injection: the next flash write is torn and the flush aborts.
    pub torn_write_next: bool,
}

impl LogStore {
    pub fn new(ram_capacity: usize, flash_capacity: usize) -> Result<Self, StoreError> {
        Ok(Self {
            ram: RamBuffer::new(ram_capacity),
            flash: FlashRing::new(flash_capacity)?,
            stats: StoreStats::default(),
            torn_write_next: false,
        })
    }

    /// Reopens a store on top of persisted flash contents after a restart.
    pub fn with_flash(ram_capacity: usize, mut flash: FlashRing) -> Self {
        let torn = flash.scrub() as u64;
        Self {
            ram: RamBuffer::new(ram_capacity),
            flash,
            stats: StoreStats {
                torn,
                ..StoreStats::default()
            },
            torn_write_next: false,
        }
    }

    pub fn ram(&self) -> &RamBuffer {
        &self.ram
    }

    pub fn flash(&self) -> &FlashRing {
        &self.flash
    }

    pub fn stats(&self) -> StoreStats {
        let mut s = self.stats.clone();
        s.dropped = self.ram.dropped();
        s
    }

    pub fn high_water(&self) -> u32 {
        self.flash.high_water
    }

    pub fn append(
        &mut self,
        now: f64,
        severity: Severity,
        payload: Vec<u8>,
    ) -> Result<u32, StoreError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(StoreError::PayloadTooLarge(payload.len()));
        }
        let seq = self
            .flash
            .high_water
            .checked_add(1)
            .ok_or(StoreError::SeqExhausted)?;
        self.flash.high_water = seq;
        self.ram.push(LogRecord::new(seq, now, severity, payload));
        self.stats.appended += 1;
        Ok(seq)
    }

    /// Moves every staged record to flash in sequence order.
    pub fn flush(&mut self) -> usize {
        let mut n = 0;
        while let Some(rec) = self.ram.records.pop_front() {
            if self.torn_write_next {
                self.torn_write_next = false;
                let mut torn = rec;
                let last = torn.payload.len().saturating_sub(1);
                match torn.payload.get_mut(last) {
                    Some(b) => *b ^= 0xFF,
                    None => torn.crc ^= 0xFFFF,
                }
                self.stats.evicted += self.flash.write(torn) as u64;
                break;
            }
            self.stats.evicted += self.flash.write(rec) as u64;
            n += 1;
        }
        self.stats.flushed += n as u64;
        n
    }

    pub fn ack_through(&mut self, seq: u32) -> Result<usize, StoreError> {
        self.ack_through_records(seq).map(|v| v.len())
    }

    /// Like [`ack_through`](Self::ack_through) but hands back the trimmed
    /// records.
    pub fn ack_through_records(&mut self, seq: u32) -> Result<Vec<LogRecord>, StoreError> {
        if seq > self.flash.high_water {
            return Err(StoreError::FutureSeq {
                requested: seq,
                high_water: self.flash.high_water,
            });
        }
        let out = self.flash.trim_through(seq);
        self.stats.acked += out.len() as u64;
        Ok(out)
    }

    /// Flushed records not yet acknowledged, ascending by seq.
    pub fn unacked(&self) -> impl Iterator<Item = &LogRecord> {
        self.flash.records.iter()
    }

    pub fn unacked_bytes(&self) -> usize {
        self.flash.used
    }

    /// Loses everything volatile and scrubs flash of torn records.
    pub fn on_brownout(&mut self) {
        self.stats.lost_volatile += self.ram.len() as u64;
        self.ram.records.clear();
        self.torn_write_next = false;
        self.stats.torn += self.flash.scrub() as u64;
    }

    /// appended = acked + in flash + in RAM + dropped + lost + evicted + torn.
    pub fn conserved(&self) -> bool {
        let s = self.stats();
        s.appended
            == s.acked
                + self.flash.len() as u64
                + self.ram.len() as u64
                + s.dropped
                + s.lost_volatile
                + s.evicted
                + s.torn
    }

    pub fn save_image(&self, path: &Path) -> Result<(), StoreError> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
        let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or_else(|| Path::new(".")))?;
        tmp.write_all(&self.flash.to_image())?;
        tmp.persist(path).map_err(|e| StoreError::Io(e.error))?;
        Ok(())
    }

    pub fn load_image(path: &Path, ram_capacity: usize) -> Result<Self, StoreError> {
        let bytes = fs::read(path)?;
        Ok(Self::with_flash(
            ram_capacity,
            FlashRing::from_image(&bytes)?,
        ))
    }
}
