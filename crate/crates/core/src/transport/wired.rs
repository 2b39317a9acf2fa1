//! Cable link available only while the car is parked at the dock.

use rand::RngCore;

use super::{DeliveryOutcome, Frame, Link, LinkContext, SendReport, TransportError};
use crate::track::{CarState, TrackLayout};

const DOCK_TOLERANCE: f64 = 1e-9;

/// True iff the car is stopped at the dock position.
pub fn wired_available(car: &CarState, layout: &TrackLayout) -> bool {
    let Some(dock) = layout.dock_position else {
        return false;
    };
    if !car.is_stopped() {
        return false;
    }
    let d = (car.position - dock).abs();
    d.min(layout.total_length() - d) <= DOCK_TOLERANCE
}

#[derive(Debug, Clone, PartialEq)]
pub struct WiredLinkParams {
    /// UART payload rate, bytes per second (115200 baud, 8N1).
    pub byte_rate: f64,
}

impl Default for WiredLinkParams {
    fn default() -> Self {
        Self {
            byte_rate: 11_520.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WiredLink {
    pub params: WiredLinkParams,
    busy_until: f64,
}

impl WiredLink {
    pub fn new(params: WiredLinkParams) -> Self {
        Self {
            params,
            busy_until: 0.0,
        }
    }

    pub fn busy_until(&self) -> f64 {
        self.busy_until
    }

    pub fn reset(&mut self) {
        self.busy_until = 0.0;
    }
}

impl Link for WiredLink {
    fn send_frame(
        &mut self,
        frame: &Frame,
        ctx: &LinkContext<'_>,
        _rng: &mut dyn RngCore,
    ) -> Result<SendReport, TransportError> {
        let len = frame.encode()?.len();
        if !wired_available(ctx.car, ctx.layout) {
            return Ok(SendReport::unavailable(ctx.now));
        }
        let start = ctx.now.max(self.busy_until);
        let end = start + len as f64 / self.params.byte_rate;
        self.busy_until = end;
        Ok(SendReport {
            outcome: DeliveryOutcome::Delivered,
            start,
            end,
        })
    }
}
