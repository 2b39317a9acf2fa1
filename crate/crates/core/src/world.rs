//! Fixed-step simulation of the car, its supply capacitor and the logging
//! device.
//!
//! Each step of length `dt` moves the car, works out exactly which parts of
//! the step were unpowered and which were spent transmitting, and
//! integrates the capacitor piecewise over those intervals. Brownouts are
//! placed at the exact threshold crossing. A trace sample is taken at the
//! end of every step.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::energy::{EnergyError, PowerState, RadioMode, VoltageTrace};
use crate::log_store::{LogStore, StoreError, StoreStats};
use crate::scenario::{RequestMode, ScenarioSpec};
use crate::strategy::metrics::Collector;
use crate::strategy::{
    check_stop, controller_gate, DeliveryMetrics, DeviceAction, GateDecision, GateView,
    RadioStatus, ScheduleError, Scheduler, StrategyKind, WorldView,
};
use crate::track::{snap, CarState};
use crate::transport::powerline::DeliveredSlot;
use crate::transport::{
    DeliveryOutcome, Frame, FrameKind, Link, LinkContext, PowerlineLink, TransportError, WiredLink,
    WirelessLink,
};

/// Pieces of a step shorter than this are ignored by the integrator.
const MIN_PIECE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    GapEntered,
    GapExited,
    Brownout,
    Reboot,
    Stopped,
    Resumed,
    RadioOn,
    RadioConnected,
    RadioOff,
    TransmitStarted,
    TransmitStopped,
    RequestArrived,
    ReplySent,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::GapEntered => "gap_entered",
            EventKind::GapExited => "gap_exited",
            EventKind::Brownout => "brownout",
            EventKind::Reboot => "reboot",
            EventKind::Stopped => "stopped",
            EventKind::Resumed => "resumed",
            EventKind::RadioOn => "radio_on",
            EventKind::RadioConnected => "radio_connected",
            EventKind::RadioOff => "radio_off",
            EventKind::TransmitStarted => "transmit_started",
            EventKind::TransmitStopped => "transmit_stopped",
            EventKind::RequestArrived => "request_arrived",
            EventKind::ReplySent => "reply_sent",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub detail: String,
}

/// One wireless frame on air.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadioBurst {
    pub start: f64,
    pub end: f64,
    pub outcome: DeliveryOutcome,
    /// Set when the burst was cut short by a brownout.
    pub aborted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Radio {
    Off,
    Connecting { ready_at_step: u64 },
    Connected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Purpose {
    Log(u32),
    Reply(u32),
}

#[derive(Debug, Clone)]
struct TxJob {
    start: f64,
    end: f64,
    frame: Frame,
    outcome: DeliveryOutcome,
    purpose: Purpose,
    radio: bool,
}

#[derive(Debug, Clone)]
struct PendingReply {
    id: u32,
    remaining: u32,
    in_air: u32,
}

/// Device-side retransmission bookkeeping.
#[derive(Debug, Clone, Default)]
struct Sender {
    cursor: u32,
    confirmed: BTreeSet<u32>,
    in_flight: BTreeSet<u32>,
}

impl Sender {
    fn next(&mut self, store: &LogStore) -> Option<(u32, Vec<u8>)> {
        let pick = |after: u32, s: &Sender| {
            store
                .unacked()
                .find(|r| {
                    r.seq > after && !s.confirmed.contains(&r.seq) && !s.in_flight.contains(&r.seq)
                })
                .map(|r| (r.seq, r.payload.clone()))
        };
        let found = pick(self.cursor, self).or_else(|| {
            // Start another pass over whatever is still unconfirmed.
            if self.in_flight.is_empty() {
                pick(0, self)
            } else {
                None
            }
        });
        if let Some((seq, _)) = &found {
            self.cursor = *seq;
            self.in_flight.insert(*seq);
        }
        found
    }

    fn reset(&mut self) {
        *self = Sender::default();
    }
}

/// Deterministic payload for a record, so the collector side can check
/// content without a side channel.
pub fn payload_for(seq: u32, size: usize) -> Vec<u8> {
    let tag = seq.to_le_bytes();
    (0..size)
        .map(|i| tag[i % 4].wrapping_add((i / 4) as u8).wrapping_mul(0x9D))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub trace: VoltageTrace,
    pub events: Vec<Event>,
    pub metrics: DeliveryMetrics,
    pub slots: Vec<DeliveredSlot>,
    /// Every non-`Defer` action the scheduler issued, with its time.
    pub actions: Vec<(f64, DeviceAction)>,
    pub radio_bursts: Vec<RadioBurst>,
    pub collector: Collector,
    pub store_stats: StoreStats,
    pub store_conserved: bool,
    /// Seqs that made it to flash.
    pub flushed: Vec<u32>,
    /// Seqs still waiting in flash at the end.
    pub unacked: Vec<u32>,
    pub powerline_bandwidth: f64,
}

impl ScenarioOutcome {
    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

pub struct World {
    spec: ScenarioSpec,
    step: u64,
    car: CarState,
    cruise_speed: f64,
    stop_target: Option<f64>,
    in_gap: Option<usize>,

    online: bool,
    boot_until: f64,
    boot_at: f64,
    radio: Radio,
    transmitting: bool,
    store: LogStore,
    sender: Sender,
    scheduler: Option<Scheduler>,

    wired: WiredLink,
    wireless: WirelessLink,
    powerline: PowerlineLink,
    jobs: VecDeque<TxJob>,
    replies: VecDeque<PendingReply>,
    rng: ChaCha8Rng,
    collector: Collector,
    faults: VecDeque<f64>,

    trace: VoltageTrace,
    events: Vec<Event>,
    step_events: Vec<Event>,
    actions: Vec<(f64, DeviceAction)>,
    radio_bursts: Vec<RadioBurst>,
    flushed: Vec<u32>,
    latencies: Vec<f64>,
    metrics: DeliveryMetrics,
    min_cap: f64,
    logged: u64,
    request_ids: u32,
    backlog_quarters: [u64; 4],
}

impl World {
    pub fn new(spec: &ScenarioSpec) -> Result<Self, WorldError> {
        spec.validate().map_err(WorldError::Scenario)?;
        let e = &spec.energy;
        let clock = spec.device.clock;
        let mut store = LogStore::new(spec.device.ram_capacity, spec.device.flash_capacity)?;
        let mut flushed = Vec::new();
        for _ in 0..spec.workload.preload {
            let seq = store.high_water() + 1;
            store.append(
                0.0,
                spec.workload.severity,
                payload_for(seq, spec.workload.payload_size),
            )?;
            if store.ram().len() >= spec.device.ram_capacity {
                flushed.extend(store.ram().iter().map(|r| r.seq));
                store.flush();
            }
        }
        flushed.extend(store.ram().iter().map(|r| r.seq));
        store.flush();

        let radio = match spec.device.radio {
            RadioMode::Off => Radio::Off,
            _ => Radio::Connected,
        };
        let radio_mode = if radio == Radio::Off {
            RadioMode::Off
        } else {
            RadioMode::IdleConnected
        };
        Ok(Self {
            car: CarState {
                position: spec.car.start_position,
                speed: spec.car.speed,
                powered: true,
                capacitor_v: e.nominal_voltage,
                power_state: PowerState::new(clock, radio_mode),
                uptime: 0.0,
                reboot_count: 0,
            },
            cruise_speed: spec.car.speed,
            stop_target: None,
            in_gap: None,
            step: 0,
            online: true,
            boot_until: 0.0,
            boot_at: 0.0,
            radio,
            transmitting: false,
            store,
            sender: Sender::default(),
            scheduler: spec
                .strategy
                .kind
                .map(|k| Scheduler::new(k, &spec.strategy, 0.0)),
            wired: WiredLink::new(spec.wired.clone()),
            wireless: WirelessLink::new(spec.wireless.clone()),
            powerline: PowerlineLink::new(spec.powerline.clone()),
            jobs: VecDeque::new(),
            replies: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(spec.sim.seed.unwrap_or(0)),
            collector: Collector::new(),
            faults: spec.faults.brownouts.iter().copied().collect(),
            trace: VoltageTrace::new(spec.sim.dt),
            events: Vec::new(),
            step_events: Vec::new(),
            actions: Vec::new(),
            radio_bursts: Vec::new(),
            flushed,
            latencies: Vec::new(),
            metrics: DeliveryMetrics::default(),
            min_cap: e.nominal_voltage,
            logged: 0,
            request_ids: 0,
            backlog_quarters: [u64::MAX; 4],
            spec: spec.clone(),
        })
    }

    pub fn car(&self) -> &CarState {
        &self.car
    }

    pub fn store(&self) -> &LogStore {
        &self.store
    }

    pub fn now(&self) -> f64 {
        self.step as f64 * self.spec.sim.dt
    }

    fn emit(&mut self, time: f64, kind: EventKind, detail: impl Into<String>) {
        self.step_events.push(Event {
            time,
            kind,
            detail: detail.into(),
        });
    }

    fn radio_status(&self) -> RadioStatus {
        match self.radio {
            Radio::Off => RadioStatus::Off,
            Radio::Connecting { .. } => RadioStatus::Connecting,
            Radio::Connected => RadioStatus::Connected,
        }
    }

    fn strategy(&self) -> Option<StrategyKind> {
        self.scheduler.as_ref().map(Scheduler::kind)
    }

    pub fn run(mut self) -> Result<ScenarioOutcome, WorldError> {
        let steps = self.spec.steps();
        while self.step < steps {
            self.advance()?;
        }
        Ok(self.finish())
    }

    /// Runs one step of length `dt`.
    pub fn advance(&mut self) -> Result<(), WorldError> {
        let dt = self.spec.sim.dt;
        let t0 = self.step as f64 * dt;
        let t1 = (self.step + 1) as f64 * dt;
        let threshold = self.spec.energy.brownout_voltage();

        if !self.online && self.boot_until <= t0 + 1e-12 && self.car.capacitor_v > threshold {
            self.reboot(t0);
        }
        if let Radio::Connecting { ready_at_step } = self.radio {
            if self.step >= ready_at_step {
                self.radio = Radio::Connected;
                self.emit(t0, EventKind::RadioConnected, "");
            }
        }
        if self.online {
            self.run_scheduler(t0)?;
        }

        // Motion. Speed is constant until an optional stop inside the step.
        let p0 = self.car.position;
        let v = self.car.speed;
        let mut travel = v * dt;
        let mut stop_at = None;
        if let Some(target) = self.stop_target {
            let mut ahead = (target - p0).rem_euclid(self.spec.layout.total_length());
            if ahead > self.spec.layout.total_length() - 1e-9 {
                ahead = 0.0;
            }
            if ahead <= travel + 1e-12 {
                travel = ahead;
                stop_at = Some((target, if v > 0.0 { t0 + ahead / v } else { t0 }));
            }
        }
        self.pump(t0, t1, p0, v)?;

        let mut unpowered = Vec::new();
        let mut entries = Vec::new();
        let spans = self.spec.layout.gap_spans(p0, travel);
        let p1 = match stop_at {
            Some((target, _)) => target,
            None => self.spec.layout.wrap(snap(p0 + travel)),
        };
        let end_gap = self.spec.layout.gap_at(p1);
        for &(i, a, b) in &spans {
            let (ta, tb) = (t0 + a / v, t0 + b / v);
            unpowered.push((ta, tb));
            if self.in_gap != Some(i) {
                self.in_gap = Some(i);
                entries.push(ta);
                self.emit(ta, EventKind::GapEntered, format!("gap={i}"));
            }
            if b < travel - 1e-12 || end_gap != Some(i) {
                self.in_gap = None;
                self.emit(tb, EventKind::GapExited, format!("gap={i}"));
            }
        }
        if v == 0.0 && self.spec.layout.gap_at(p0).is_some() {
            unpowered.push((t0, t1));
        }

        self.arrive_requests(t0, t1, &entries, p0, v)?;
        self.integrate(t0, t1, &unpowered)?;
        for &(a, b) in &unpowered {
            self.powerline.observe_unpowered(a, b);
        }

        self.car.position = p1;
        if let Some((_, ts)) = stop_at {
            self.car.speed = 0.0;
            self.stop_target = None;
            self.emit(ts, EventKind::Stopped, format!("position={p1:.6}"));
        }
        self.car.powered = end_gap.is_none();
        if self.car.powered && self.spec.energy.recharge_rate.is_none() {
            // Power returned exactly at the step boundary.
            self.car.capacitor_v = self.spec.energy.nominal_voltage;
        }

        self.complete_jobs(t1)?;
        for frame in self.powerline.advance(t0, t1) {
            self.host_receive(&frame, t1);
        }
        self.produce_logs(t0, t1)?;
        self.sample(t1);

        self.step_events.sort_by(|a, b| a.time.total_cmp(&b.time));
        self.events.append(&mut self.step_events);
        self.step += 1;
        Ok(())
    }

    fn run_scheduler(&mut self, t0: f64) -> Result<(), WorldError> {
        let Some(mut scheduler) = self.scheduler.take() else {
            return Ok(());
        };
        let view = WorldView {
            now: t0,
            car: &self.car,
            layout: &self.spec.layout,
            radio: self.radio_status(),
            transmitting: self.transmitting,
            unacked: self.store.flash().len(),
            in_flight: self.sender.in_flight.len(),
        };
        let result = scheduler.schedule(&view);
        self.scheduler = Some(scheduler);
        for action in result? {
            self.apply(action, t0)?;
        }
        Ok(())
    }

    fn apply(&mut self, action: DeviceAction, now: f64) -> Result<(), WorldError> {
        if action != DeviceAction::Defer {
            self.actions.push((now, action));
        }
        match action {
            DeviceAction::StopAt(pos) => {
                check_stop(&self.spec.layout, pos)?;
                if self.car.speed > 0.0 {
                    self.stop_target = Some(self.spec.layout.wrap(pos));
                }
            }
            DeviceAction::Resume => {
                self.stop_target = None;
                if self.car.speed == 0.0 && self.cruise_speed > 0.0 {
                    self.car.speed = self.cruise_speed;
                    self.emit(now, EventKind::Resumed, "");
                }
            }
            DeviceAction::StartTransmit => {
                if !self.transmitting {
                    self.transmitting = true;
                    self.emit(now, EventKind::TransmitStarted, "");
                }
            }
            DeviceAction::StopTransmit => {
                if self.transmitting {
                    self.transmitting = false;
                    self.emit(now, EventKind::TransmitStopped, "");
                }
            }
            DeviceAction::RadioOn => {
                if self.radio == Radio::Off {
                    let steps =
                        (self.spec.wireless.connect_latency / self.spec.sim.dt).ceil() as u64;
                    self.radio = Radio::Connecting {
                        ready_at_step: self.step + steps,
                    };
                    self.emit(now, EventKind::RadioOn, "");
                }
            }
            DeviceAction::RadioOff => {
                if self.radio != Radio::Off {
                    self.radio = Radio::Off;
                    self.drop_radio_jobs(now);
                    self.emit(now, EventKind::RadioOff, "");
                }
            }
            DeviceAction::Defer => {}
        }
        Ok(())
    }

    /// Radio frames not yet finished are abandoned.
    fn drop_radio_jobs(&mut self, now: f64) {
        let mut kept = VecDeque::new();
        for job in self.jobs.drain(..) {
            if job.radio && job.end > now {
                if let Purpose::Log(seq) = job.purpose {
                    self.sender.in_flight.remove(&seq);
                }
                if let Purpose::Reply(id) = job.purpose {
                    if let Some(r) = self.replies.iter_mut().find(|r| r.id == id) {
                        r.in_air = r.in_air.saturating_sub(1);
                    }
                }
                if let Some(b) = self
                    .radio_bursts
                    .iter_mut()
                    .rev()
                    .find(|b| b.start == job.start && b.end == job.end)
                {
                    b.aborted = true;
                }
            } else {
                kept.push_back(job);
            }
        }
        self.jobs = kept;
    }

    fn gate_allows(&self, at: f64, t0: f64, p0: f64, v: f64) -> bool {
        if !self.spec.strategy.controller {
            return true;
        }
        let view = GateView {
            layout: &self.spec.layout,
            position: self.spec.layout.wrap(p0 + v * (at - t0)),
            speed: v,
            capacitor_v: self.car.capacitor_v,
            clock: self.spec.device.clock,
            params: &self.spec.energy,
        };
        controller_gate(&self.spec.budget, &view) == GateDecision::Allow
    }

    /// Hands frames to whichever channel the strategy uses.
    fn pump(&mut self, now: f64, t1: f64, p0: f64, v: f64) -> Result<(), WorldError> {
        if !self.online {
            return Ok(());
        }
        self.pump_radio(now, t1, p0, v)?;
        if !self.transmitting {
            return Ok(());
        }
        match self.strategy() {
            Some(StrategyKind::SaveAndPrintLater) => {
                while self.wired.busy_until() < t1 {
                    let Some((seq, payload)) = self.sender.next(&self.store) else {
                        break;
                    };
                    let frame =
                        Frame::new(FrameKind::Log, seq, payload).map_err(TransportError::from)?;
                    let ctx = LinkContext {
                        now,
                        car: &self.car,
                        layout: &self.spec.layout,
                        associated: false,
                    };
                    let report = self.wired.send_frame(&frame, &ctx, &mut self.rng)?;
                    if report.outcome == DeliveryOutcome::Unavailable {
                        self.sender.in_flight.remove(&seq);
                        break;
                    }
                    self.jobs.push_back(TxJob {
                        start: report.start,
                        end: report.end,
                        frame,
                        outcome: report.outcome,
                        purpose: Purpose::Log(seq),
                        radio: false,
                    });
                }
            }
            Some(StrategyKind::PowerlineContinuous) => {
                while self.powerline.queued_frames() < 2 {
                    let Some((seq, payload)) = self.sender.next(&self.store) else {
                        break;
                    };
                    let frame =
                        Frame::new(FrameKind::Log, seq, payload).map_err(TransportError::from)?;
                    let ctx = LinkContext {
                        now,
                        car: &self.car,
                        layout: &self.spec.layout,
                        associated: false,
                    };
                    let report = self.powerline.send_frame(&frame, &ctx, &mut self.rng)?;
                    if report.outcome == DeliveryOutcome::Unavailable {
                        self.sender.in_flight.remove(&seq);
                        break;
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn send_radio(
        &mut self,
        frame: Frame,
        purpose: Purpose,
        at: f64,
        t0: f64,
        p0: f64,
        v: f64,
    ) -> Result<bool, WorldError> {
        let mut car = self.car.clone();
        car.position = self.spec.layout.wrap(p0 + v * (at - t0));
        let ctx = LinkContext {
            now: at,
            car: &car,
            layout: &self.spec.layout,
            associated: self.radio == Radio::Connected,
        };
        let report = self.wireless.send_frame(&frame, &ctx, &mut self.rng)?;
        if report.outcome == DeliveryOutcome::Unavailable {
            return Ok(false);
        }
        self.radio_bursts.push(RadioBurst {
            start: report.start,
            end: report.end,
            outcome: report.outcome,
            aborted: false,
        });
        self.jobs.push_back(TxJob {
            start: report.start,
            end: report.end,
            frame,
            outcome: report.outcome,
            purpose,
            radio: true,
        });
        Ok(true)
    }

    /// Replies first, then log frames, back to back while the radio is free
    /// within this step.
    fn pump_radio(&mut self, now: f64, t1: f64, p0: f64, v: f64) -> Result<(), WorldError> {
        if !self.online || self.radio != Radio::Connected {
            return Ok(());
        }
        let t0 = self.step as f64 * self.spec.sim.dt;
        let airtime = self.spec.wireless.per_frame_airtime;
        let wireless_logs =
            self.transmitting && self.strategy().is_some_and(StrategyKind::uses_wireless);
        loop {
            let at = now.max(self.wireless.busy_until());
            if at >= t1 {
                break;
            }
            if let Some(idx) = self
                .replies
                .iter()
                .position(|r| r.in_air == 0 && r.remaining > 0)
            {
                if !self.gate_allows(at, t0, p0, v) {
                    break;
                }
                let (id, n) = (self.replies[idx].id, self.replies[idx].remaining);
                let mut sent = 0;
                for k in 0..n {
                    let frame = Frame::new(FrameKind::Reply, id, vec![k as u8; 8])
                        .map_err(TransportError::from)?;
                    if self.send_radio(frame, Purpose::Reply(id), at, t0, p0, v)? {
                        sent += 1;
                    }
                }
                self.replies[idx].in_air = sent;
                if sent == 0 {
                    break;
                }
                continue;
            }
            if !wireless_logs || !self.gate_allows(at, t0, p0, v) {
                break;
            }
            let Some((seq, payload)) = self.sender.next(&self.store) else {
                break;
            };
            let frame = Frame::new(FrameKind::Log, seq, payload).map_err(TransportError::from)?;
            if !self.send_radio(frame, Purpose::Log(seq), at, t0, p0, v)? {
                self.sender.in_flight.remove(&seq);
                break;
            }
            debug_assert!(self.wireless.busy_until() >= at + airtime - 1e-12);
        }
        Ok(())
    }

    fn arrive_requests(
        &mut self,
        t0: f64,
        t1: f64,
        gap_entries: &[f64],
        p0: f64,
        v: f64,
    ) -> Result<(), WorldError> {
        let mut arrivals: Vec<f64> = match &self.spec.requests.mode {
            RequestMode::None => Vec::new(),
            RequestMode::Times(times) => times
                .iter()
                .copied()
                .filter(|&t| t >= t0 && t < t1)
                .collect(),
            RequestMode::GapAligned => gap_entries.to_vec(),
        };
        if let Some(until) = self.spec.requests.until {
            arrivals.retain(|&t| t < until);
        }
        let per_frame = self.spec.wireless.per_frame_airtime;
        let fragments = ((self.spec.requests.reply_airtime / per_frame) - 1e-9)
            .ceil()
            .max(1.0) as u32;
        for at in arrivals {
            self.request_ids += 1;
            let id = self.request_ids;
            self.metrics.requests_issued += 1;
            self.emit(at, EventKind::RequestArrived, format!("request={id}"));
            self.replies.push_back(PendingReply {
                id,
                remaining: fragments,
                in_air: 0,
            });
            self.pump_radio(at, t1, p0, v)?;
        }
        Ok(())
    }

    fn current_at(&self, t: f64) -> Result<f64, WorldError> {
        let p = &self.spec.energy;
        let clock = self.spec.device.clock;
        if !self.online {
            return Ok(p.current(PowerState::new(clock, RadioMode::Off))?);
        }
        if self
            .jobs
            .iter()
            .any(|j| j.radio && j.start <= t && t < j.end)
        {
            return Ok(p.current(PowerState::new(clock, RadioMode::Transmitting))?);
        }
        Ok(match self.radio {
            Radio::Off => p.current(PowerState::new(clock, RadioMode::Off))?,
            Radio::Connecting { .. } => {
                p.current(PowerState::new(clock, RadioMode::IdleConnected))?
                    + self.spec.wireless.connect_extra_current
            }
            Radio::Connected => p.current(PowerState::new(clock, RadioMode::IdleConnected))?,
        })
    }

    fn integrate(&mut self, t0: f64, t1: f64, unpowered: &[(f64, f64)]) -> Result<(), WorldError> {
        let mut bps = vec![t0, t1];
        for &(a, b) in unpowered {
            bps.extend([a, b]);
        }
        for j in self.jobs.iter().filter(|j| j.radio) {
            bps.extend([j.start, j.end]);
        }
        let faults: Vec<f64> = self
            .faults
            .iter()
            .copied()
            .take_while(|&f| f <= t1)
            .collect();
        bps.extend(faults.iter().copied());
        bps.retain(|&t| t >= t0 && t <= t1);
        bps.sort_by(f64::total_cmp);
        bps.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

        let p = self.spec.energy.clone();
        let threshold = p.brownout_voltage();
        let mut v = self.car.capacitor_v;
        for w in bps.windows(2) {
            let (a, b) = (w[0], w[1]);
            self.inject_faults(a)?;
            if b - a < MIN_PIECE {
                continue;
            }
            let mid = 0.5 * (a + b);
            let dark = unpowered.iter().any(|&(s, e)| mid >= s && mid < e);
            if !dark {
                v = match p.recharge_rate {
                    None => p.nominal_voltage,
                    Some(rate) => (v + rate * (b - a)).min(p.nominal_voltage),
                };
                self.car.capacitor_v = v;
                continue;
            }
            let i = self.current_at(mid)?;
            let mut start = a;
            let end_v = v - i * (b - a) / p.capacitance;
            if self.online && end_v <= threshold && i > 0.0 {
                let tc = (a + (v - threshold).max(0.0) * p.capacitance / i).min(b);
                v = threshold;
                self.car.capacitor_v = v;
                self.brownout(tc, "gap")?;
                start = tc;
            }
            let i = self.current_at(mid.max(start))?;
            v = (v - i * (b - start) / p.capacitance).max(0.0);
            self.car.capacitor_v = v;
            self.min_cap = self.min_cap.min(v);
        }
        self.inject_faults(t1)?;
        self.car.capacitor_v = v;
        Ok(())
    }

    fn inject_faults(&mut self, upto: f64) -> Result<(), WorldError> {
        while let Some(&f) = self.faults.front() {
            if f > upto + 1e-12 {
                break;
            }
            self.faults.pop_front();
            if self.online {
                if self.spec.faults.torn_writes {
                    self.store.torn_write_next = true;
                    self.flush(f);
                }
                self.brownout(f, "injected")?;
            }
        }
        Ok(())
    }

    fn brownout(&mut self, t: f64, cause: &str) -> Result<(), WorldError> {
        let state = PowerState::new(self.spec.device.clock, self.car.power_state.radio);
        let drop = self.spec.energy.nominal_voltage - self.car.capacitor_v;
        self.emit(
            t,
            EventKind::Brownout,
            format!("cause={cause};state={};drop={drop:.6}", state.key()),
        );
        self.metrics.brownout_count += 1;
        self.car.reboot_count += 1;
        self.online = false;
        self.boot_until = t + self.spec.device.reboot_time;
        self.radio = Radio::Off;
        self.transmitting = false;
        for job in self.jobs.drain(..) {
            if job.radio && job.end > t {
                if let Some(b) = self
                    .radio_bursts
                    .iter_mut()
                    .rev()
                    .find(|b| b.start == job.start && b.end == job.end)
                {
                    b.aborted = true;
                }
            }
        }
        for r in &mut self.replies {
            r.in_air = 0;
        }
        self.sender.reset();
        self.store.on_brownout();
        self.powerline.reset();
        self.wireless.reset();
        self.wired.reset();
        Ok(())
    }

    fn reboot(&mut self, t: f64) {
        self.online = true;
        self.boot_at = t;
        self.emit(
            t,
            EventKind::Reboot,
            format!("count={}", self.car.reboot_count),
        );
        if let Some(s) = self.scheduler.as_mut() {
            s.reset(t);
        }
    }

    fn complete_jobs(&mut self, t1: f64) -> Result<(), WorldError> {
        while self.jobs.front().is_some_and(|j| j.end <= t1 + 1e-12) {
            let job = self.jobs.pop_front().expect("front exists");
            match job.purpose {
                Purpose::Log(seq) => {
                    if job.outcome == DeliveryOutcome::Delivered {
                        self.host_receive(&job.frame, job.end);
                    } else {
                        self.sender.in_flight.remove(&seq);
                    }
                }
                Purpose::Reply(id) => {
                    let Some(idx) = self.replies.iter().position(|r| r.id == id) else {
                        continue;
                    };
                    let r = &mut self.replies[idx];
                    r.in_air = r.in_air.saturating_sub(1);
                    if job.outcome == DeliveryOutcome::Delivered {
                        r.remaining = r.remaining.saturating_sub(1);
                    }
                    if r.in_air == 0 && r.remaining == 0 {
                        self.replies.remove(idx);
                        self.metrics.requests_answered += 1;
                        self.emit(job.end, EventKind::ReplySent, format!("request={id}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Host side: present the record and acknowledge it straight back.
    fn host_receive(&mut self, frame: &Frame, at: f64) {
        if frame.kind != FrameKind::Log {
            return;
        }
        self.collector.accept(frame.seq, &frame.payload);
        self.on_ack(frame.seq, at);
    }

    fn on_ack(&mut self, seq: u32, at: f64) {
        self.sender.in_flight.remove(&seq);
        if !self.online {
            return;
        }
        let Some(rec) = self.store.unacked().find(|r| r.seq == seq) else {
            return;
        };
        if self.sender.confirmed.insert(seq) {
            self.latencies.push(at - rec.timestamp);
            self.metrics.delivered_records += 1;
            self.metrics.delivered_bytes += rec.payload.len() as u64;
        }
        let mut through = None;
        for r in self.store.unacked() {
            if !self.sender.confirmed.contains(&r.seq) {
                break;
            }
            through = Some(r.seq);
        }
        if let Some(s) = through {
            if let Ok(trimmed) = self.store.ack_through_records(s) {
                for r in trimmed {
                    self.sender.confirmed.remove(&r.seq);
                }
            }
        }
    }

    fn flush(&mut self, _now: f64) {
        let pending: Vec<u32> = self.store.ram().iter().map(|r| r.seq).collect();
        let n = self.store.flush();
        self.flushed.extend(&pending[..n]);
    }

    fn produce_logs(&mut self, t0: f64, t1: f64) -> Result<(), WorldError> {
        if !self.online {
            return Ok(());
        }
        let w = self.spec.workload.clone();
        let horizon = w.until.unwrap_or(f64::INFINITY);
        if w.rate > 0.0 {
            let due = |t: f64| (w.rate * t.min(horizon) + 1e-9).floor() as u64;
            let target = due(t1);
            while self.logged < target {
                self.logged += 1;
                let due_at = self.logged as f64 / w.rate;
                if due_at < self.boot_at {
                    continue;
                }
                let at = due_at.clamp(t0, t1);
                let seq = self.store.high_water() + 1;
                self.store
                    .append(at, w.severity, payload_for(seq, w.payload_size))?;
            }
        }
        let fi = self.spec.device.flush_interval;
        let n0 = (t0 / fi + 1e-9).floor();
        let n1 = (t1 / fi + 1e-9).floor();
        if n1 > n0 {
            self.flush(t1);
        }
        Ok(())
    }

    fn sample(&mut self, t1: f64) {
        let e = &self.spec.energy;
        let supply = if self.car.powered {
            let slot = (t1 / self.spec.powerline.slot_time()).floor() as i64;
            let sign = if slot % 2 == 0 { 0.5 } else { -0.5 };
            e.nominal_voltage + sign * e.ripple_amplitude
        } else {
            0.0
        };
        self.trace.push(t1, supply, self.car.capacitor_v);

        let transmitting = self
            .jobs
            .iter()
            .any(|j| j.radio && j.start <= t1 && t1 < j.end);
        let radio = match (self.radio, transmitting) {
            (Radio::Off, _) => RadioMode::Off,
            (_, true) => RadioMode::Transmitting,
            _ => RadioMode::IdleConnected,
        };
        self.car.power_state = PowerState::new(self.spec.device.clock, radio);
        self.car.uptime = if self.online { t1 - self.boot_at } else { 0.0 };
        if self.radio != Radio::Off {
            self.metrics.radio_on_time += self.spec.sim.dt;
        }
        let ram_bytes: usize = self.store.ram().iter().map(|r| r.stored_size()).sum();
        let stored = (self.store.flash().used_bytes() + ram_bytes) as u64;
        self.metrics.bytes_stored_peak = self.metrics.bytes_stored_peak.max(stored);
        let q = ((4.0 * t1 / self.spec.sim.duration) as usize).min(3);
        self.backlog_quarters[q] = self.backlog_quarters[q].min(stored);
    }

    fn finish(mut self) -> ScenarioOutcome {
        let stats = self.store.stats();
        let m = &mut self.metrics;
        m.appended = stats.appended;
        m.duplicates = self.collector.duplicates;
        m.max_drop_observed = (self.spec.energy.nominal_voltage - self.min_cap).max(0.0);
        m.dropped_records = stats.dropped;
        m.evicted_records = stats.evicted;
        m.lost_volatile = stats.lost_volatile;
        m.unacked_at_end = self.store.flash().len() as u64;
        m.powerline_bits = self.powerline.bits_delivered();
        m.sim_time = self.spec.sim.duration;
        let slack = (crate::log_store::RECORD_OVERHEAD + self.spec.workload.payload_size) as u64;
        let [_, q1, _, q3] = self.backlog_quarters;
        m.backlog_growing = q3 != u64::MAX && q1 != u64::MAX && q3 > q1.saturating_add(slack);
        m.set_latencies(&self.latencies);
        ScenarioOutcome {
            trace: self.trace,
            events: self.events,
            metrics: self.metrics,
            slots: std::mem::take(&mut self.powerline.delivered),
            actions: self.actions,
            radio_bursts: self.radio_bursts,
            collector: self.collector,
            store_conserved: self.store.conserved(),
            store_stats: stats,
            flushed: self.flushed,
            unacked: self.store.unacked().map(|r| r.seq).collect(),
            powerline_bandwidth: self.spec.powerline.bandwidth(),
        }
    }
}

/// Runs a scenario from start to end.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioOutcome, WorldError> {
    World::new(spec)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::ClockTier;
    use crate::track::TrackLayout;

    fn spec(duration: f64) -> ScenarioSpec {
        let mut s = ScenarioSpec::new(duration);
        s.wireless.loss_rate = 0.0;
        s
    }

    #[test]
    fn trace_has_one_sample_per_step() {
        let out = run_scenario(&spec(0.001)).unwrap();
        assert_eq!(out.trace.len(), 2);
        assert!((out.trace.samples[1].time - 0.001).abs() < 1e-15);
    }

    #[test]
    fn idle_lap_drop_matches_calibration() {
        let mut s = spec(1.125);
        s.device.clock = ClockTier::C160;
        s.device.radio = RadioMode::IdleConnected;
        let out = run_scenario(&s).unwrap();
        assert!((out.metrics.max_drop_observed - 2.20).abs() < 1e-6);
        assert_eq!(out.count(EventKind::GapEntered), 2);
        assert_eq!(out.count(EventKind::GapExited), 2);
        assert_eq!(out.count(EventKind::Brownout), 0);
    }

    #[test]
    fn unpowered_time_per_crossing() {
        // Two gaps of 60 mm at 3 m/s: 40 ms unpowered per lane change.
        let out = run_scenario(&spec(1.125)).unwrap();
        let dark = out
            .trace
            .samples
            .iter()
            .filter(|s| s.supply_v == 0.0)
            .count() as f64
            * 0.0005;
        assert!((dark - 0.040).abs() <= 0.0005 + 1e-12);
    }

    #[test]
    fn gapless_track_never_drops() {
        let mut s = spec(2.0);
        s.layout = TrackLayout::gapless();
        let out = run_scenario(&s).unwrap();
        assert_eq!(out.metrics.max_drop_observed, 0.0);
        assert!(out.trace.samples.iter().all(|x| x.capacitor_v == 9.0));
    }

    #[test]
    fn burst_current_browns_out_and_reboots() {
        let mut s = spec(2.0);
        s.device.clock = ClockTier::C240;
        s.device.radio = RadioMode::IdleConnected;
        let out = run_scenario(&s).unwrap();
        assert!(out.count(EventKind::Brownout) >= 1);
        assert!(out.count(EventKind::Reboot) >= 1);
        // Crossing placed where the drop reaches 4 V: 16 ms into the gap.
        let entry = out
            .events
            .iter()
            .find(|e| e.kind == EventKind::GapEntered)
            .unwrap()
            .time;
        let b = out
            .events
            .iter()
            .find(|e| e.kind == EventKind::Brownout)
            .unwrap()
            .time;
        assert!((b - entry - 0.016).abs() < 1e-9);
    }

    #[test]
    fn injected_fault_clears_ram_only() {
        let mut s = spec(1.0);
        s.layout = TrackLayout::gapless();
        s.workload.rate = 100.0;
        s.device.flush_interval = 0.1;
        s.faults.brownouts = vec![0.425];
        let out = run_scenario(&s).unwrap();
        assert_eq!(out.count(EventKind::Brownout), 1);
        assert!(out.store_stats.lost_volatile > 0);
        assert!(out.store_conserved);
        let flushed: BTreeSet<u32> = out.flushed.iter().copied().collect();
        let still: BTreeSet<u32> = out.unacked.iter().copied().collect();
        assert_eq!(flushed, still);
    }

    #[test]
    fn stop_target_is_reached_exactly() {
        let mut s = spec(4.0);
        s.strategy.kind = Some(StrategyKind::SaveAndPrintLater);
        s.strategy.drain_interval = 1.0;
        s.workload.rate = 10.0;
        let out = run_scenario(&s).unwrap();
        let stop = out
            .events
            .iter()
            .find(|e| e.kind == EventKind::Stopped)
            .unwrap();
        assert_eq!(stop.detail, "position=0.100000");
        assert!(out.metrics.delivered_records > 0);
        assert!(out.count(EventKind::Resumed) >= 1);
    }

    #[test]
    fn payloads_are_seq_specific() {
        assert_ne!(payload_for(1, 8), payload_for(2, 8));
        assert_eq!(payload_for(7, 300).len(), 300);
    }
}
