//! Wireless link with connection setup cost and independent per-frame loss.

use rand::{Rng, RngCore};

use super::{DeliveryOutcome, Frame, Link, LinkContext, SendReport, TransportError};

#[derive(Debug, Clone, PartialEq)]
pub struct WirelessLinkParams {
    /// Time from radio-on until association.
    pub connect_latency: f64,
    /// Extra amperes drawn on top of the idle-connected current while
    /// associating.
    pub connect_extra_current: f64,
    pub per_frame_airtime: f64,
    pub loss_rate: f64,
    /// Track stretches `[start, end)` without coverage.
    pub dead_zones: Vec<(f64, f64)>,
}

impl Default for WirelessLinkParams {
    fn default() -> Self {
        Self {
            connect_latency: 1.5,
            connect_extra_current: 0.05,
            per_frame_airtime: 0.002,
            loss_rate: 0.01,
            dead_zones: Vec::new(),
        }
    }
}

impl WirelessLinkParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return Err(format!(
                "loss_rate must lie in [0, 1], got {}",
                self.loss_rate
            ));
        }
        for (name, v) in [
            ("connect_latency", self.connect_latency),
            ("connect_extra_current", self.connect_extra_current),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(self.per_frame_airtime > 0.0 && self.per_frame_airtime.is_finite()) {
            return Err(format!(
                "per_frame_airtime must be > 0, got {}",
                self.per_frame_airtime
            ));
        }
        if let Some(&(a, b)) = self.dead_zones.iter().find(|(a, b)| !(a < b)) {
            return Err(format!("dead zone [{a}, {b}) is empty"));
        }
        Ok(())
    }

    pub fn available_at(&self, position: f64) -> bool {
        !self
            .dead_zones
            .iter()
            .any(|&(a, b)| position >= a && position < b)
    }
}

#[derive(Debug, Clone)]
pub struct WirelessLink {
    pub params: WirelessLinkParams,
    busy_until: f64,
}

impl WirelessLink {
    pub fn new(params: WirelessLinkParams) -> Self {
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

impl Link for WirelessLink {
    /// Loss is drawn once per frame from `rng`, only for frames that
    /// actually go on air.
    fn send_frame(
        &mut self,
        frame: &Frame,
        ctx: &LinkContext<'_>,
        rng: &mut dyn RngCore,
    ) -> Result<SendReport, TransportError> {
        frame.validate()?;
        if !ctx.associated || !self.params.available_at(ctx.car.position) {
            return Ok(SendReport {
                outcome: DeliveryOutcome::Unavailable,
                start: ctx.now,
                end: ctx.now,
            });
        }
        let start = ctx.now.max(self.busy_until);
        let end = start + self.params.per_frame_airtime;
        self.busy_until = end;
        let lost = self.params.loss_rate > 0.0 && rng.gen::<f64>() < self.params.loss_rate;
        Ok(SendReport {
            outcome: if lost {
                DeliveryOutcome::Lost
            } else {
                DeliveryOutcome::Delivered
            },
            start,
            end,
        })
    }
}
