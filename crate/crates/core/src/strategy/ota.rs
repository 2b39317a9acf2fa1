//! Resumable, corruption-safe firmware updates over dual image slots.
//!
//! The running image lives in the active slot and is never written. A new
//! image is streamed chunk by chunk into the other slot; progress is
//! persisted after each complete chunk so a reboot resumes where it left
//! off. Only a full-image SHA-256 match activates the new slot, and the swap
//! itself happens at the next reboot.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::transport::{Frame, FrameKind};

pub const DEFAULT_CHUNK_SIZE: usize = 1024;
/// Bytes carried by one OtaChunk frame.
pub const FRAGMENT_SIZE: usize = 128;

pub type ImageHash = [u8; 32];

pub fn image_hash(bytes: &[u8]) -> ImageHash {
    Sha256::digest(bytes).into()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OtaError {
    #[error("image hash mismatch after {chunks} chunks; update discarded")]
    HashMismatch { chunks: u32 },
    #[error("no update session in progress")]
    NoSession,
    #[error("update already in progress")]
    Busy,
    #[error("invalid update parameters: {0}")]
    Invalid(String),
    #[error("unexpected frame kind {0:?}")]
    WrongKind(FrameKind),
    #[error("transfer did not finish within {0} fragments")]
    Stalled(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    A,
    B,
}

impl Slot {
    pub fn other(self) -> Slot {
        match self {
            Slot::A => Slot::B,
            Slot::B => Slot::A,
        }
    }

    fn index(self) -> usize {
        match self {
            Slot::A => 0,
            Slot::B => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OtaState {
    Idle,
    Receiving,
    Verifying,
    Activated,
}

/// Update progress as persisted in flash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OtaSession {
    pub image_size: usize,
    pub chunk_size: usize,
    pub next_chunk: u32,
    pub target_slot: Slot,
    pub image_hash: ImageHash,
    pub state: OtaState,
}

impl OtaSession {
    pub fn chunk_count(&self) -> u32 {
        self.image_size.div_ceil(self.chunk_size) as u32
    }

    fn chunk_len(&self, chunk: u32) -> usize {
        let start = chunk as usize * self.chunk_size;
        self.chunk_size.min(self.image_size - start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    /// Fragment accepted, chunk still incomplete.
    Fragment,
    /// Fragment ignored: not the byte offset the device expects.
    Ignored,
    ChunkPersisted(u32),
    Activated,
}

#[derive(Debug, Clone)]
pub struct OtaDevice {
    slots: [Vec<u8>; 2],
    active: Slot,
    active_hash: ImageHash,
    session: Option<OtaSession>,
    /// Volatile reassembly buffer for the chunk in progress.
    partial: Vec<u8>,
    /// Fault flag: flip this bit of the stored copy of the given chunk,
    /// after the frame CRC has already been checked.
    pub corrupt_chunk: Option<(u32, usize)>,
    pub reboots: u32,
}

impl OtaDevice {
    pub fn new(firmware: Vec<u8>) -> Self {
        let active_hash = image_hash(&firmware);
        Self {
            slots: [firmware, Vec::new()],
            active: Slot::A,
            active_hash,
            session: None,
            partial: Vec::new(),
            corrupt_chunk: None,
            reboots: 0,
        }
    }

    pub fn active_slot(&self) -> Slot {
        self.active
    }

    pub fn active_image(&self) -> &[u8] {
        &self.slots[self.active.index()]
    }

    pub fn slot(&self, slot: Slot) -> &[u8] {
        &self.slots[slot.index()]
    }

    pub fn session(&self) -> Option<&OtaSession> {
        self.session.as_ref()
    }

    pub fn state(&self) -> OtaState {
        self.session.as_ref().map_or(OtaState::Idle, |s| s.state)
    }

    pub fn begin(
        &mut self,
        image_size: usize,
        chunk_size: usize,
        hash: ImageHash,
    ) -> Result<(), OtaError> {
        if matches!(self.state(), OtaState::Receiving | OtaState::Verifying) {
            return Err(OtaError::Busy);
        }
        if image_size == 0 || chunk_size == 0 {
            return Err(OtaError::Invalid(format!(
                "image_size {image_size} and chunk_size {chunk_size} must be > 0"
            )));
        }
        let target = self.active.other();
        self.slots[target.index()] = vec![0; image_size];
        self.partial.clear();
        self.session = Some(OtaSession {
            image_size,
            chunk_size,
            next_chunk: 0,
            target_slot: target,
            image_hash: hash,
            state: OtaState::Receiving,
        });
        Ok(())
    }

    /// Byte offset of the next fragment the device wants, if receiving.
    pub fn next_offset(&self) -> Option<usize> {
        let s = self
            .session
            .as_ref()
            .filter(|s| s.state == OtaState::Receiving)?;
        Some(s.next_chunk as usize * s.chunk_size + self.partial.len())
    }

    pub fn receive(&mut self, frame: &Frame) -> Result<Progress, OtaError> {
        if frame.kind != FrameKind::OtaChunk {
            return Err(OtaError::WrongKind(frame.kind));
        }
        let Some(expected) = self.next_offset() else {
            return Err(OtaError::NoSession);
        };
        if frame.seq as usize != expected || frame.payload.is_empty() {
            return Ok(Progress::Ignored);
        }
        let session = self.session.as_mut().ok_or(OtaError::NoSession)?;
        let chunk = session.next_chunk;
        let want = session.chunk_len(chunk);
        if self.partial.len() + frame.payload.len() > want {
            return Ok(Progress::Ignored);
        }
        self.partial.extend_from_slice(&frame.payload);
        if self.partial.len() < want {
            return Ok(Progress::Fragment);
        }

        let start = chunk as usize * session.chunk_size;
        let target = &mut self.slots[session.target_slot.index()];
        target[start..start + want].copy_from_slice(&self.partial);
        if let Some((c, bit)) = self.corrupt_chunk {
            if c == chunk {
                let bit = bit % (want * 8);
                target[start + bit / 8] ^= 1 << (bit % 8);
            }
        }
        self.partial.clear();
        session.next_chunk += 1;
        if session.next_chunk < session.chunk_count() {
            return Ok(Progress::ChunkPersisted(chunk));
        }

        session.state = OtaState::Verifying;
        if image_hash(target) == session.image_hash {
            session.state = OtaState::Activated;
            Ok(Progress::Activated)
        } else {
            let chunks = session.next_chunk;
            target.clear();
            self.session = None;
            Err(OtaError::HashMismatch { chunks })
        }
    }

    /// Power loss and reboot: volatile state is gone, persisted progress
    /// survives, and an activated image becomes the running one.
    pub fn reboot(&mut self) {
        self.partial.clear();
        self.reboots += 1;
        if let Some(s) = &self.session {
            if s.state == OtaState::Activated {
                self.active = s.target_slot;
                self.active_hash = s.image_hash;
                self.session = None;
            }
        }
    }

    /// The running slot always verifies; the target slot verifies only once
    /// activated.
    pub fn atomicity_holds(&self) -> bool {
        if image_hash(self.active_image()) != self.active_hash {
            return false;
        }
        match &self.session {
            None => true,
            Some(s) => {
                let target_ok = image_hash(self.slot(s.target_slot)) == s.image_hash;
                s.target_slot != self.active && (target_ok == (s.state == OtaState::Activated))
            }
        }
    }
}

/// Host side of an update: serves fragments of one image.
#[derive(Debug, Clone)]
pub struct OtaImage {
    pub bytes: Vec<u8>,
    pub hash: ImageHash,
    pub chunk_size: usize,
}

impl OtaImage {
    pub fn new(bytes: Vec<u8>, chunk_size: usize) -> Self {
        let hash = image_hash(&bytes);
        Self {
            bytes,
            hash,
            chunk_size,
        }
    }

    pub fn fragment(&self, offset: usize) -> Frame {
        let end = (offset + FRAGMENT_SIZE)
            .min(self.bytes.len())
            // Fragments never straddle a chunk boundary.
            .min((offset / self.chunk_size + 1) * self.chunk_size);
        Frame {
            kind: FrameKind::OtaChunk,
            seq: offset as u32,
            payload: self.bytes[offset.min(end)..end].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelEvent {
    Delivered,
    Lost,
    /// The device lost power while the fragment was in flight.
    PowerLoss,
}

pub trait OtaChannel {
    fn carry(&mut self, frame: &Frame) -> ChannelEvent;
}

impl<F: FnMut(&Frame) -> ChannelEvent> OtaChannel for F {
    fn carry(&mut self, frame: &Frame) -> ChannelEvent {
        self(frame)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OtaReport {
    pub state: OtaState,
    pub fragments_sent: usize,
    pub resumptions: u32,
    /// Times the slot invariant was found broken after an event.
    pub atomicity_violations: u32,
}

/// Drives an update to completion over `channel`, resuming after every
/// power loss. Starts a session unless one is already persisted.
pub fn ota_transfer(
    device: &mut OtaDevice,
    image: &OtaImage,
    channel: &mut dyn OtaChannel,
    max_fragments: usize,
) -> Result<OtaReport, OtaError> {
    if device.state() == OtaState::Idle {
        device.begin(image.bytes.len(), image.chunk_size, image.hash)?;
    }
    let mut report = OtaReport {
        state: device.state(),
        fragments_sent: 0,
        resumptions: 0,
        atomicity_violations: 0,
    };
    while let Some(offset) = device.next_offset() {
        if report.fragments_sent >= max_fragments {
            return Err(OtaError::Stalled(max_fragments));
        }
        let frame = image.fragment(offset);
        report.fragments_sent += 1;
        match channel.carry(&frame) {
            ChannelEvent::Delivered => {
                device.receive(&frame)?;
            }
            ChannelEvent::Lost => {}
            ChannelEvent::PowerLoss => {
                device.reboot();
                report.resumptions += 1;
            }
        }
        if !device.atomicity_holds() {
            report.atomicity_violations += 1;
        }
    }
    report.state = device.state();
    Ok(report)
}
