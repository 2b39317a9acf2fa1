//! Scenario files: an INI-like `[section]` / `key = value` format.
//!
//! ```text
//! # one reference lap with the radio idle
//! [device]
//! clock = 160
//! radio = idle
//!
//! [sim]
//! duration = 1.125
//! ```
//!
//! Every rejection carries the 1-based line it refers to. Unknown sections
//! and keys are errors, as are duplicate keys (except `segment`).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::energy::{
    calibrate_currents, reference_drops, ClockTier, EnergyModelParams, PowerState, RadioMode,
};
use crate::log_store::Severity;
use crate::strategy::{EnergyBudget, StrategyConfig, StrategyKind};
use crate::track::{Segment, TrackLayout};
use crate::transport::{PowerlineParams, WiredLinkParams, WirelessLinkParams};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

impl ScenarioError {
    fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CarConfig {
    pub speed: f64,
    pub start_position: f64,
}

impl Default for CarConfig {
    fn default() -> Self {
        Self {
            speed: 3.0,
            start_position: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceConfig {
    pub clock: ClockTier,
    /// Radio state at t = 0; `IdleConnected` starts associated.
    pub radio: RadioMode,
    pub ram_capacity: usize,
    pub flash_capacity: usize,
    pub flush_interval: f64,
    /// Dead time between a brownout and the device running again.
    pub reboot_time: f64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            clock: ClockTier::C80,
            radio: RadioMode::Off,
            ram_capacity: 256,
            flash_capacity: 1 << 20,
            flush_interval: 0.05,
            reboot_time: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    /// Records per second.
    pub rate: f64,
    pub payload_size: usize,
    pub severity: Severity,
    /// Stop logging after this time.
    pub until: Option<f64>,
    /// Records already in flash at t = 0.
    pub preload: usize,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            rate: 0.0,
            payload_size: 32,
            severity: Severity::Info,
            until: None,
            preload: 0,
        }
    }
}

impl Workload {
    pub fn bytes_per_second(&self) -> f64 {
        self.rate * self.payload_size as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RequestMode {
    None,
    Times(Vec<f64>),
    /// One request at every gap entry.
    GapAligned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestConfig {
    pub mode: RequestMode,
    /// Total airtime of one reply.
    pub reply_airtime: f64,
    pub until: Option<f64>,
}

impl Default for RequestConfig {
    fn default() -> Self {
        Self {
            mode: RequestMode::None,
            reply_airtime: 0.020,
            until: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FaultConfig {
    /// Forced brownouts at these times.
    pub brownouts: Vec<f64>,
    /// Each forced brownout tears the flash write in progress.
    pub torn_writes: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    pub energy: EnergyModelParams,
    pub layout: TrackLayout,
    pub car: CarConfig,
    pub device: DeviceConfig,
    pub strategy: StrategyConfig,
    pub budget: EnergyBudget,
    pub wireless: WirelessLinkParams,
    pub wired: WiredLinkParams,
    pub powerline: PowerlineParams,
    pub workload: Workload,
    pub requests: RequestConfig,
    pub faults: FaultConfig,
    pub sim: SimConfig,
}

impl ScenarioSpec {
    /// Defaults for everything, on the reference track.
    pub fn new(duration: f64) -> Self {
        Self {
            name: "scenario".into(),
            energy: EnergyModelParams::default(),
            layout: TrackLayout::reference(),
            car: CarConfig::default(),
            device: DeviceConfig::default(),
            strategy: StrategyConfig::default(),
            budget: EnergyBudget::default(),
            wireless: WirelessLinkParams::default(),
            wired: WiredLinkParams::default(),
            powerline: PowerlineParams::default(),
            workload: Workload::default(),
            requests: RequestConfig::default(),
            faults: FaultConfig::default(),
            sim: SimConfig {
                dt: 0.0005,
                duration,
                seed: None,
            },
        }
    }

    pub fn steps(&self) -> u64 {
        (self.sim.duration / self.sim.dt).round() as u64
    }

    /// Whether any randomness can influence the run.
    pub fn needs_seed(&self) -> bool {
        let wireless_used = self.strategy.kind.is_some_and(StrategyKind::uses_wireless)
            || self.requests.mode != RequestMode::None;
        wireless_used && self.wireless.loss_rate > 0.0
    }

    /// Cross-field checks, independent of where the values came from.
    pub fn validate(&self) -> Result<(), String> {
        self.energy.validate().map_err(|e| e.to_string())?;
        self.wireless.validate()?;
        let s = &self.sim;
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            return Err(format!("dt must be > 0, got {}", s.dt));
        }
        if !(s.duration > 0.0 && s.duration.is_finite()) {
            return Err(format!("duration must be > 0, got {}", s.duration));
        }
        let steps = s.duration / s.dt;
        if (steps - steps.round()).abs() > 1e-6 {
            return Err(format!(
                "duration {} is not a multiple of dt {}",
                s.duration, s.dt
            ));
        }
        if self.needs_seed() && s.seed.is_none() {
            return Err("a seed is required when the wireless link is lossy".into());
        }
        if !(self.car.speed >= 0.0 && self.car.speed.is_finite()) {
            return Err(format!("speed must be >= 0, got {}", self.car.speed));
        }
        if !(self.car.start_position >= 0.0 && self.car.start_position < self.layout.total_length())
        {
            return Err(format!(
                "start_position {} is off the track",
                self.car.start_position
            ));
        }
        if self.layout.gap_at(self.car.start_position).is_some() {
            return Err("start_position lies inside a gap".into());
        }
        if self.budget.max_allowed_drop >= self.energy.brownout_drop {
            return Err(format!(
                "max_allowed_drop {} must stay below brownout_drop {}",
                self.budget.max_allowed_drop, self.energy.brownout_drop
            ));
        }
        if !(self.budget.lookahead >= 0.0) {
            return Err("lookahead must be >= 0".into());
        }
        let d = &self.device;
        if d.radio == RadioMode::Transmitting {
            return Err("initial radio state must be off or idle".into());
        }
        if !(d.flush_interval > 0.0) {
            return Err("flush_interval must be > 0".into());
        }
        if !(d.reboot_time >= 0.0) {
            return Err("reboot_time must be >= 0".into());
        }
        if d.ram_capacity == 0 {
            return Err("ram_capacity must be > 0".into());
        }
        let w = &self.workload;
        if !(w.rate >= 0.0 && w.rate.is_finite()) {
            return Err(format!("rate must be >= 0, got {}", w.rate));
        }
        if w.payload_size == 0 || w.payload_size > crate::log_store::MAX_PAYLOAD {
            return Err(format!(
                "payload_size must lie in 1..=255, got {}",
                w.payload_size
            ));
        }
        if !(self.requests.reply_airtime > 0.0) {
            return Err("reply_airtime must be > 0".into());
        }
        let st = &self.strategy;
        if !(st.drain_interval > 0.0 && st.stop_overhead >= 0.0 && st.max_stop > 0.0) {
            return Err("drain_interval and max_stop must be > 0, stop_overhead >= 0".into());
        }
        if st.kind == Some(StrategyKind::SaveAndPrintLater) && self.layout.dock_position.is_none() {
            return Err("save_and_print_later needs a dock".into());
        }
        let p = &self.powerline;
        if !(p.cycle_period > 0.0 && p.slots_per_cycle > 0 && (1..=16).contains(&p.bits_per_slot)) {
            return Err("powerline needs cycle_period > 0, slots > 0 and 1..=16 bits".into());
        }
        if !(self.wired.byte_rate > 0.0) {
            return Err("byte_rate must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Entry {
    line: usize,
    key: String,
    value: String,
}

#[derive(Debug, Default)]
struct Section {
    line: usize,
    entries: Vec<Entry>,
}

const SECTIONS: &[(&str, &[&str])] = &[
    ("scenario", &["name"]),
    (
        "energy",
        &[
            "capacitance",
            "nominal_voltage",
            "brownout_drop",
            "gap_duration",
            "burst_current",
            "ripple",
            "recharge_rate",
        ],
    ),
    ("track", &["layout", "segment", "dock"]),
    ("car", &["speed", "start_position"]),
    (
        "device",
        &[
            "clock",
            "radio",
            "ram_capacity",
            "flash_capacity",
            "flush_interval",
            "reboot_time",
        ],
    ),
    (
        "strategy",
        &[
            "kind",
            "drain_interval",
            "stop_overhead",
            "max_stop",
            "controller",
        ],
    ),
    ("budget", &["max_allowed_drop", "lookahead"]),
    (
        "wireless",
        &[
            "connect_latency",
            "connect_extra_current",
            "per_frame_airtime",
            "loss_rate",
            "dead_zone",
        ],
    ),
    ("wired", &["byte_rate"]),
    (
        "powerline",
        &["cycle_period", "slots_per_cycle", "bits_per_slot"],
    ),
    (
        "workload",
        &["rate", "payload_size", "severity", "until", "preload"],
    ),
    ("requests", &["mode", "times", "reply_airtime", "until"]),
    ("faults", &["brownouts", "torn_writes"]),
    ("sim", &["dt", "duration", "seed"]),
];

const REPEATABLE: &[&str] = &["segment", "dead_zone"];

fn key_allowed(section: &str, key: &str) -> bool {
    if section == "energy" && (key.starts_with("drop.") || key.starts_with("current.")) {
        return true;
    }
    SECTIONS
        .iter()
        .find(|(s, _)| *s == section)
        .is_some_and(|(_, keys)| keys.contains(&key))
}

fn split_sections(text: &str) -> Result<(BTreeMap<String, Section>, usize), ScenarioError> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| ScenarioError::new(line, "unterminated section header"))?
                .trim()
                .to_ascii_lowercase();
            if !SECTIONS.iter().any(|(s, _)| *s == name) {
                return Err(ScenarioError::new(
                    line,
                    format!("unknown section [{name}]"),
                ));
            }
            if sections.contains_key(&name) {
                return Err(ScenarioError::new(
                    line,
                    format!("duplicate section [{name}]"),
                ));
            }
            sections.insert(
                name.clone(),
                Section {
                    line,
                    entries: Vec::new(),
                },
            );
            current = Some(name);
            continue;
        }
        let Some(section) = current.as_ref() else {
            return Err(ScenarioError::new(line, "key outside of any section"));
        };
        let (key, value) = content.split_once('=').ok_or_else(|| {
            ScenarioError::new(line, format!("expected key = value, got '{content}'"))
        })?;
        let key = key.trim().to_ascii_lowercase();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(ScenarioError::new(line, "empty key"));
        }
        if !key_allowed(section, &key) {
            return Err(ScenarioError::new(
                line,
                format!("unknown key '{key}' in [{section}]"),
            ));
        }
        let sec = sections.get_mut(section).expect("section exists");
        if !REPEATABLE.contains(&key.as_str()) && sec.entries.iter().any(|e| e.key == key) {
            return Err(ScenarioError::new(line, format!("duplicate key '{key}'")));
        }
        sec.entries.push(Entry { line, key, value });
    }
    Ok((sections, last_line + 1))
}

fn parse_value<T: FromStr>(e: &Entry) -> Result<T, ScenarioError>
where
    T::Err: fmt::Display,
{
    e.value.parse::<T>().map_err(|err| {
        ScenarioError::new(e.line, format!("{}: bad value '{}': {err}", e.key, e.value))
    })
}

fn parse_f64(e: &Entry) -> Result<f64, ScenarioError> {
    let v: f64 = parse_value(e)?;
    if !v.is_finite() {
        return Err(ScenarioError::new(
            e.line,
            format!("{}: value must be finite", e.key),
        ));
    }
    Ok(v)
}

fn parse_bool(e: &Entry) -> Result<bool, ScenarioError> {
    match e.value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(ScenarioError::new(
            e.line,
            format!("{}: expected true or false", e.key),
        )),
    }
}

fn parse_list(e: &Entry) -> Result<Vec<f64>, ScenarioError> {
    let mut out = Vec::new();
    for part in e.value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let v: f64 = part
            .parse()
            .map_err(|_| ScenarioError::new(e.line, format!("{}: bad number '{part}'", e.key)))?;
        if !v.is_finite() || v < 0.0 {
            return Err(ScenarioError::new(
                e.line,
                format!("{}: times must be >= 0", e.key),
            ));
        }
        out.push(v);
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

fn optional_time(e: &Entry) -> Result<Option<f64>, ScenarioError> {
    if e.value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse_f64(e).map(Some)
    }
}

fn parse_segment(e: &Entry) -> Result<Segment, ScenarioError> {
    let parts: Vec<&str> = e.value.split_whitespace().collect();
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| ScenarioError::new(e.line, format!("segment: bad number '{s}'")))
    };
    match parts.as_slice() {
        ["straight", len] => Ok(Segment::straight(num(len)?)),
        ["curve", len] => Ok(Segment::curve(num(len)?)),
        ["lanechange", len, a, b, gap] => Ok(Segment::lane_change(
            num(len)?,
            [num(a)?, num(b)?],
            num(gap)?,
        )),
        _ => Err(ScenarioError::new(
            e.line,
            "segment: expected 'straight LEN', 'curve LEN' or 'lanechange LEN OFF1 OFF2 GAP'",
        )),
    }
}

/// Parses and validates a scenario.
pub fn parse_scenario(text: &str) -> Result<ScenarioSpec, ScenarioError> {
    parse_scenario_with_seed(text, None)
}

/// Like [`parse_scenario`], with `seed` replacing any seed in the file
/// before validation.
pub fn parse_scenario_with_seed(
    text: &str,
    seed: Option<u64>,
) -> Result<ScenarioSpec, ScenarioError> {
    let (sections, end_line) = split_sections(text)?;
    let sim_section = sections
        .get("sim")
        .ok_or_else(|| ScenarioError::new(end_line, "missing [sim] section"))?;
    let duration_entry = sim_section
        .entries
        .iter()
        .find(|e| e.key == "duration")
        .ok_or_else(|| ScenarioError::new(sim_section.line, "[sim] needs a duration"))?;
    let mut spec = ScenarioSpec::new(parse_f64(duration_entry)?);

    let empty = Section::default();
    let get = |name: &str| sections.get(name).unwrap_or(&empty);

    for e in &get("scenario").entries {
        spec.name = e.value.clone();
    }

    // Energy: scalar parameters first, then recalibrate with any drop
    // overrides, then apply direct current overrides.
    let energy = get("energy");
    let mut drops = reference_drops();
    let mut currents = Vec::new();
    for e in &energy.entries {
        let p = &mut spec.energy;
        match e.key.as_str() {
            "capacitance" => p.capacitance = parse_f64(e)?,
            "nominal_voltage" => p.nominal_voltage = parse_f64(e)?,
            "brownout_drop" => p.brownout_drop = parse_f64(e)?,
            "gap_duration" => p.gap_duration = parse_f64(e)?,
            "burst_current" => p.burst_current = parse_f64(e)?,
            "ripple" => p.ripple_amplitude = parse_f64(e)?,
            "recharge_rate" => p.recharge_rate = optional_time(e)?,
            key => {
                let (kind, state) = key.split_once('.').expect("prefix checked");
                let state: PowerState = state
                    .parse()
                    .map_err(|m: String| ScenarioError::new(e.line, m))?;
                let v = parse_f64(e)?;
                if kind == "drop" {
                    drops.insert(state, v);
                } else {
                    currents.push((e.line, state, v));
                }
            }
        }
    }
    spec.energy.current_table = calibrate_currents(&drops, &spec.energy)
        .map_err(|err| ScenarioError::new(energy.line.max(1), err.to_string()))?;
    for (line, state, v) in currents {
        if v < 0.0 {
            return Err(ScenarioError::new(line, "current must be >= 0"));
        }
        spec.energy.current_table.insert(state, v);
    }

    let track = get("track");
    let mut segments = Vec::new();
    let mut base = TrackLayout::reference();
    let mut dock: Option<Option<f64>> = None;
    for e in &track.entries {
        match e.key.as_str() {
            "layout" => {
                base = match e.value.as_str() {
                    "reference" => TrackLayout::reference(),
                    "gapless" => TrackLayout::gapless(),
                    other => {
                        return Err(ScenarioError::new(
                            e.line,
                            format!("layout: unknown '{other}' (expected reference or gapless)"),
                        ))
                    }
                }
            }
            "segment" => segments.push(parse_segment(e)?),
            "dock" => dock = Some(optional_time(e)?),
            _ => unreachable!("keys checked"),
        }
    }
    if !segments.is_empty() || dock.is_some() {
        let segs = if segments.is_empty() {
            base.segments.clone()
        } else {
            segments
        };
        let dock = dock.unwrap_or(base.dock_position);
        base = TrackLayout::new(segs, dock)
            .map_err(|err| ScenarioError::new(track.line, err.to_string()))?;
    }
    spec.layout = base;

    for e in &get("car").entries {
        match e.key.as_str() {
            "speed" => spec.car.speed = parse_f64(e)?,
            "start_position" => spec.car.start_position = parse_f64(e)?,
            _ => unreachable!(),
        }
    }

    for e in &get("device").entries {
        let d = &mut spec.device;
        match e.key.as_str() {
            "clock" => d.clock = parse_value(e)?,
            "radio" => d.radio = parse_value(e)?,
            "ram_capacity" => d.ram_capacity = parse_value(e)?,
            "flash_capacity" => d.flash_capacity = parse_value(e)?,
            "flush_interval" => d.flush_interval = parse_f64(e)?,
            "reboot_time" => d.reboot_time = parse_f64(e)?,
            _ => unreachable!(),
        }
    }

    for e in &get("strategy").entries {
        let s = &mut spec.strategy;
        match e.key.as_str() {
            "kind" => {
                s.kind = if e.value.eq_ignore_ascii_case("none") {
                    None
                } else {
                    Some(parse_value(e)?)
                }
            }
            "drain_interval" => s.drain_interval = parse_f64(e)?,
            "stop_overhead" => s.stop_overhead = parse_f64(e)?,
            "max_stop" => s.max_stop = parse_f64(e)?,
            "controller" => s.controller = parse_bool(e)?,
            _ => unreachable!(),
        }
    }

    for e in &get("budget").entries {
        match e.key.as_str() {
            "max_allowed_drop" => spec.budget.max_allowed_drop = parse_f64(e)?,
            "lookahead" => spec.budget.lookahead = parse_f64(e)?,
            _ => unreachable!(),
        }
    }

    for e in &get("wireless").entries {
        let w = &mut spec.wireless;
        match e.key.as_str() {
            "connect_latency" => w.connect_latency = parse_f64(e)?,
            "connect_extra_current" => w.connect_extra_current = parse_f64(e)?,
            "per_frame_airtime" => w.per_frame_airtime = parse_f64(e)?,
            "loss_rate" => w.loss_rate = parse_f64(e)?,
            "dead_zone" => {
                let v = parse_list(e)?;
                let [a, b] = v[..] else {
                    return Err(ScenarioError::new(e.line, "dead_zone: expected START, END"));
                };
                w.dead_zones.push((a, b));
            }
            _ => unreachable!(),
        }
    }

    for e in &get("wired").entries {
        spec.wired.byte_rate = parse_f64(e)?;
    }

    for e in &get("powerline").entries {
        let p = &mut spec.powerline;
        match e.key.as_str() {
            "cycle_period" => p.cycle_period = parse_f64(e)?,
            "slots_per_cycle" => p.slots_per_cycle = parse_value(e)?,
            "bits_per_slot" => p.bits_per_slot = parse_value(e)?,
            _ => unreachable!(),
        }
    }

    for e in &get("workload").entries {
        let w = &mut spec.workload;
        match e.key.as_str() {
            "rate" => w.rate = parse_f64(e)?,
            "payload_size" => w.payload_size = parse_value(e)?,
            "severity" => w.severity = parse_value(e)?,
            "until" => w.until = optional_time(e)?,
            "preload" => w.preload = parse_value(e)?,
            _ => unreachable!(),
        }
    }

    let mut times = None;
    let mut mode = None;
    for e in &get("requests").entries {
        let r = &mut spec.requests;
        match e.key.as_str() {
            "mode" => mode = Some(e),
            "times" => times = Some(parse_list(e)?),
            "reply_airtime" => r.reply_airtime = parse_f64(e)?,
            "until" => r.until = optional_time(e)?,
            _ => unreachable!(),
        }
    }
    spec.requests.mode = match (mode.map(|e| (e, e.value.to_ascii_lowercase())), times) {
        (None, None) => RequestMode::None,
        (None, Some(t)) => RequestMode::Times(t),
        (Some((e, m)), t) => match (m.as_str(), t) {
            ("none", None) => RequestMode::None,
            ("gap_aligned", None) => RequestMode::GapAligned,
            ("times", Some(t)) => RequestMode::Times(t),
            ("times", None) => {
                return Err(ScenarioError::new(
                    e.line,
                    "mode = times needs a times list",
                ))
            }
            (_, Some(_)) => {
                return Err(ScenarioError::new(
                    e.line,
                    "times only goes with mode = times",
                ))
            }
            (other, None) => {
                return Err(ScenarioError::new(
                    e.line,
                    format!("mode: unknown '{other}' (expected none, times or gap_aligned)"),
                ))
            }
        },
    };

    for e in &get("faults").entries {
        match e.key.as_str() {
            "brownouts" => spec.faults.brownouts = parse_list(e)?,
            "torn_writes" => spec.faults.torn_writes = parse_bool(e)?,
            _ => unreachable!(),
        }
    }

    for e in &sim_section.entries {
        match e.key.as_str() {
            "dt" => spec.sim.dt = parse_f64(e)?,
            "duration" => {}
            "seed" => spec.sim.seed = Some(parse_value(e)?),
            _ => unreachable!(),
        }
    }

    if seed.is_some() {
        spec.sim.seed = seed;
    }
    spec.validate()
        .map_err(|m| ScenarioError::new(sim_section.line, m))?;
    Ok(spec)
}
