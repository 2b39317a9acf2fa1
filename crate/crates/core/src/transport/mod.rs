//! Channel models: wired dock link, wireless link and powerline back-channel.

pub mod frame;
pub mod powerline;
pub mod wired;
pub mod wireless;

use rand::RngCore;
use thiserror::Error;

use crate::track::{CarState, TrackLayout};

pub use frame::{crc16, Frame, FrameError, FrameKind};
pub use powerline::{
    powerline_bandwidth, powerline_pack, powerline_unpack, PowerlineLink, PowerlineParams,
    PowerlineSlot,
};
pub use wired::{wired_available, WiredLink, WiredLinkParams};
pub use wireless::{WirelessLink, WirelessLinkParams};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("malformed frame: {0}")]
    Frame(#[from] FrameError),
    #[error("powerline: {0}")]
    Powerline(#[from] powerline::PowerlineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeliveryOutcome {
    Delivered,
    Lost,
    Unavailable,
}

/// Result of handing one frame to a channel. `start..end` is the time the
/// channel is occupied; the host sees a delivered frame at `end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SendReport {
    pub outcome: DeliveryOutcome,
    pub start: f64,
    pub end: f64,
}

impl SendReport {
    fn unavailable(now: f64) -> Self {
        Self {
            outcome: DeliveryOutcome::Unavailable,
            start: now,
            end: now,
        }
    }
}

/// What a channel needs to know about the world when a frame is offered.
#[derive(Debug, Clone, Copy)]
pub struct LinkContext<'a> {
    pub now: f64,
    pub car: &'a CarState,
    pub layout: &'a TrackLayout,
    /// Wireless association is up.
    pub associated: bool,
}

pub trait Link {
    /// Offers a frame to the channel. Malformed frames are rejected before
    /// any channel state changes.
    fn send_frame(
        &mut self,
        frame: &Frame,
        ctx: &LinkContext<'_>,
        rng: &mut dyn RngCore,
    ) -> Result<SendReport, TransportError>;
}

impl Link for PowerlineLink {
    fn send_frame(
        &mut self,
        frame: &Frame,
        ctx: &LinkContext<'_>,
        _rng: &mut dyn RngCore,
    ) -> Result<SendReport, TransportError> {
        frame.validate()?;
        if ctx.layout.gap_at(ctx.car.position).is_some() {
            return Ok(SendReport::unavailable(ctx.now));
        }
        self.enqueue(frame)?;
        Ok(SendReport {
            outcome: DeliveryOutcome::Delivered,
            start: ctx.now,
            end: self.drain_eta(ctx.now),
        })
    }
}
