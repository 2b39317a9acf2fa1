//! Transmission strategies, the energy-budget controller and OTA updates.
//!
//! A [`Scheduler`] turns the current world state into device actions once
//! per simulation tick. The four strategies differ in when a channel is
//! usable: parked at the dock, parked anywhere with the radio on, any
//! powered position over the rails, or anywhere over the air.

pub mod controller;
pub mod evaluate;
pub mod metrics;
pub mod ota;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::track::{CarState, TrackLayout};
use crate::transport::wired_available;

pub use controller::{controller_gate, EnergyBudget, GateDecision, GateView};
pub use evaluate::{evaluate_strategies, ComparisonRow};
pub use metrics::DeliveryMetrics;
pub use ota::{ota_transfer, OtaDevice, OtaSession, OtaState, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    /// Log to flash while driving, drain over a cable at the dock.
    SaveAndPrintLater,
    /// Log to flash, stop anywhere outside a gap and drain over the radio.
    StopAndRadio,
    /// Stream through the powerline back-channel whenever powered.
    PowerlineContinuous,
    /// Keep the radio associated and stream as records arrive.
    WirelessContinuous,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::SaveAndPrintLater,
        StrategyKind::StopAndRadio,
        StrategyKind::PowerlineContinuous,
        StrategyKind::WirelessContinuous,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::SaveAndPrintLater => "save_and_print_later",
            StrategyKind::StopAndRadio => "stop_and_radio",
            StrategyKind::PowerlineContinuous => "powerline_continuous",
            StrategyKind::WirelessContinuous => "wireless_continuous",
        }
    }

    pub fn uses_wireless(self) -> bool {
        matches!(
            self,
            StrategyKind::StopAndRadio | StrategyKind::WirelessContinuous
        )
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .chars()
            .filter(|c| *c != '_' && *c != '-')
            .collect::<String>()
            .to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|k| k.name().replace('_', "") == norm)
            .ok_or_else(|| {
                format!(
                    "unknown strategy '{s}' (expected one of {})",
                    Self::ALL.map(|k| k.name()).join(", ")
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeviceAction {
    StopAt(f64),
    Resume,
    StartTransmit,
    StopTransmit,
    RadioOn,
    RadioOff,
    Defer,
}

impl fmt::Display for DeviceAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceAction::StopAt(p) => write!(f, "StopAt({p:.6})"),
            DeviceAction::Resume => f.write_str("Resume"),
            DeviceAction::StartTransmit => f.write_str("StartTransmit"),
            DeviceAction::StopTransmit => f.write_str("StopTransmit"),
            DeviceAction::RadioOn => f.write_str("RadioOn"),
            DeviceAction::RadioOff => f.write_str("RadioOff"),
            DeviceAction::Defer => f.write_str("Defer"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("cannot stop at {0:.6} m: position lies inside an unpowered gap")]
    StopInGap(f64),
    #[error("strategy needs a dock position on the track")]
    NoDock,
}

/// Rejects stop positions inside a gap.
pub fn check_stop(layout: &TrackLayout, position: f64) -> Result<(), ScheduleError> {
    match layout.gap_at(position) {
        Some(_) => Err(ScheduleError::StopInGap(position)),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyConfig {
    pub kind: Option<StrategyKind>,
    /// Time between drains for the stop-based strategies.
    pub drain_interval: f64,
    /// Fixed cost of each stop on top of the drain time.
    pub stop_overhead: f64,
    /// Upper bound on one stop, in case the queue never drains.
    pub max_stop: f64,
    /// Gate wireless sends through the energy-budget controller.
    pub controller: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: None,
            drain_interval: 10.0,
            stop_overhead: 0.5,
            max_stop: 60.0,
            controller: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadioStatus {
    Off,
    Connecting,
    Connected,
}

/// Read-only view of the world the scheduler decides on.
#[derive(Debug, Clone, Copy)]
pub struct WorldView<'a> {
    pub now: f64,
    pub car: &'a CarState,
    pub layout: &'a TrackLayout,
    pub radio: RadioStatus,
    pub transmitting: bool,
    /// Flushed records still waiting for an ack.
    pub unacked: usize,
    /// Frames handed to a channel but not yet resolved.
    pub in_flight: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Driving { last_drain: f64 },
    Heading,
    Stopped { since: f64 },
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    kind: StrategyKind,
    cfg: StrategyConfig,
    phase: Phase,
}

impl Scheduler {
    pub fn new(kind: StrategyKind, cfg: &StrategyConfig, now: f64) -> Self {
        Self {
            kind,
            cfg: cfg.clone(),
            phase: Phase::Driving { last_drain: now },
        }
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    /// Forgets all progress, e.g. after a reboot.
    pub fn reset(&mut self, now: f64) {
        self.phase = Phase::Driving { last_drain: now };
    }

    pub fn schedule(&mut self, view: &WorldView<'_>) -> Result<Vec<DeviceAction>, ScheduleError> {
        use DeviceAction::*;
        let actions = match self.kind {
            StrategyKind::SaveAndPrintLater => self.save_and_print_later(view)?,
            StrategyKind::StopAndRadio => self.stop_and_radio(view)?,
            StrategyKind::PowerlineContinuous => {
                if self.resume_if_parked(view) {
                    vec![Resume]
                } else if !view.transmitting {
                    vec![StartTransmit]
                } else {
                    vec![Defer]
                }
            }
            StrategyKind::WirelessContinuous => {
                if self.resume_if_parked(view) {
                    vec![Resume]
                } else {
                    match (view.radio, view.transmitting) {
                        (RadioStatus::Off, _) => vec![RadioOn],
                        (RadioStatus::Connected, false) if view.unacked > 0 => {
                            vec![StartTransmit]
                        }
                        _ => vec![Defer],
                    }
                }
            }
        };
        Ok(actions)
    }

    fn resume_if_parked(&self, view: &WorldView<'_>) -> bool {
        matches!(self.phase, Phase::Driving { .. }) && view.car.is_stopped()
    }

    fn drained(view: &WorldView<'_>) -> bool {
        view.unacked == 0 && view.in_flight == 0
    }

    fn save_and_print_later(
        &mut self,
        view: &WorldView<'_>,
    ) -> Result<Vec<DeviceAction>, ScheduleError> {
        use DeviceAction::*;
        match self.phase {
            Phase::Driving { last_drain } => {
                if view.car.is_stopped() {
                    return Ok(vec![Resume]);
                }
                if view.now - last_drain < self.cfg.drain_interval {
                    return Ok(vec![Defer]);
                }
                let dock = view.layout.dock_position.ok_or(ScheduleError::NoDock)?;
                check_stop(view.layout, dock)?;
                self.phase = Phase::Heading;
                Ok(vec![StopAt(dock)])
            }
            Phase::Heading => {
                if wired_available(view.car, view.layout) {
                    self.phase = Phase::Stopped { since: view.now };
                }
                Ok(vec![Defer])
            }
            Phase::Stopped { since } => {
                let waited = view.now - since;
                if view.transmitting && (Self::drained(view) || waited >= self.cfg.max_stop) {
                    self.phase = Phase::Driving {
                        last_drain: view.now,
                    };
                    Ok(vec![StopTransmit, Resume])
                } else if !view.transmitting && waited >= self.cfg.stop_overhead {
                    Ok(vec![StartTransmit])
                } else {
                    Ok(vec![Defer])
                }
            }
        }
    }

    fn stop_and_radio(&mut self, view: &WorldView<'_>) -> Result<Vec<DeviceAction>, ScheduleError> {
        use DeviceAction::*;
        match self.phase {
            Phase::Driving { last_drain } => {
                if view.car.is_stopped() {
                    return Ok(vec![Resume]);
                }
                if view.now - last_drain < self.cfg.drain_interval
                    || view.layout.gap_at(view.car.position).is_some()
                {
                    return Ok(vec![Defer]);
                }
                let here = view.car.position;
                check_stop(view.layout, here)?;
                self.phase = Phase::Stopped { since: view.now };
                Ok(vec![StopAt(here)])
            }
            Phase::Heading => {
                self.phase = Phase::Stopped { since: view.now };
                Ok(vec![Defer])
            }
            Phase::Stopped { since } => {
                let waited = view.now - since;
                if waited >= self.cfg.max_stop || (view.transmitting && Self::drained(view)) {
                    self.phase = Phase::Driving {
                        last_drain: view.now,
                    };
                    let mut out = Vec::new();
                    if view.transmitting {
                        out.push(StopTransmit);
                    }
                    if view.radio != RadioStatus::Off {
                        out.push(RadioOff);
                    }
                    out.push(Resume);
                    return Ok(out);
                }
                match (view.radio, view.transmitting) {
                    (RadioStatus::Off, _) if waited >= self.cfg.stop_overhead => Ok(vec![RadioOn]),
                    (RadioStatus::Connected, false) => Ok(vec![StartTransmit]),
                    _ => Ok(vec![Defer]),
                }
            }
        }
    }
}
