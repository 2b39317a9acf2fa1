//! Capacitor-backed supply model.
//!
//! While the car sits on powered rails the capacitor is held at the nominal
//! voltage. Across an unpowered gap it discharges linearly under the constant
//! current drawn by the device in its current [`PowerState`]. Per-state
//! currents are calibrated from measured worst-case voltage drops over a gap
//! of known duration (`I = C * dV / T`).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error("no current configured for power state {0}")]
    UnknownState(PowerState),
    #[error("negative voltage drop {drop} V for {state}")]
    NegativeDrop { state: PowerState, drop: f64 },
    #[error("invalid energy parameter: {0}")]
    InvalidParam(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClockTier {
    C80,
    C160,
    C240,
}

impl ClockTier {
    pub const ALL: [ClockTier; 3] = [ClockTier::C80, ClockTier::C160, ClockTier::C240];

    pub fn mhz(self) -> u32 {
        match self {
            ClockTier::C80 => 80,
            ClockTier::C160 => 160,
            ClockTier::C240 => 240,
        }
    }
}

impl fmt::Display for ClockTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}", self.mhz())
    }
}

impl FromStr for ClockTier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().trim_start_matches('c') {
            "80" => Ok(ClockTier::C80),
            "160" => Ok(ClockTier::C160),
            "240" => Ok(ClockTier::C240),
            _ => Err(format!(
                "unknown clock tier '{s}' (expected 80, 160 or 240)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RadioMode {
    Off,
    IdleConnected,
    Transmitting,
}

impl RadioMode {
    pub const ALL: [RadioMode; 3] = [
        RadioMode::Off,
        RadioMode::IdleConnected,
        RadioMode::Transmitting,
    ];

    fn key(self) -> &'static str {
        match self {
            RadioMode::Off => "off",
            RadioMode::IdleConnected => "idle",
            RadioMode::Transmitting => "tx",
        }
    }
}

impl fmt::Display for RadioMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            RadioMode::Off => "Off",
            RadioMode::IdleConnected => "IdleConnected",
            RadioMode::Transmitting => "Transmitting",
        };
        f.write_str(name)
    }
}

impl FromStr for RadioMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "off" => Ok(RadioMode::Off),
            "idle" | "idleconnected" | "idle_connected" => Ok(RadioMode::IdleConnected),
            "tx" | "transmitting" | "sending" => Ok(RadioMode::Transmitting),
            _ => Err(format!(
                "unknown radio mode '{s}' (expected off, idle or tx)"
            )),
        }
    }
}

/// Operating point of the device: one clock tier and one radio mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PowerState {
    pub clock: ClockTier,
    pub radio: RadioMode,
}

impl PowerState {
    pub const fn new(clock: ClockTier, radio: RadioMode) -> Self {
        Self { clock, radio }
    }

    /// All nine clock/radio combinations in table order.
    pub fn all() -> impl Iterator<Item = PowerState> {
        ClockTier::ALL.into_iter().flat_map(|c| {
            RadioMode::ALL
                .into_iter()
                .map(move |r| PowerState::new(c, r))
        })
    }

    /// Radio use at 240 MHz never survived a gap on the reference hardware.
    pub fn is_infeasible(self) -> bool {
        self.clock == ClockTier::C240 && self.radio != RadioMode::Off
    }

    pub fn with_radio(self, radio: RadioMode) -> Self {
        Self { radio, ..self }
    }

    /// Short key used in scenario files, e.g. `c160.tx`.
    pub fn key(self) -> String {
        format!("c{}.{}", self.clock.mhz(), self.radio.key())
    }
}

impl fmt::Display for PowerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.clock, self.radio)
    }
}

impl FromStr for PowerState {
    type Err = String;

    /// Accepts `c80.off`, `80.tx`, `C160.IdleConnected`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (clock, radio) = s
            .split_once('.')
            .ok_or_else(|| format!("power state '{s}' must look like c80.off"))?;
        Ok(PowerState::new(clock.parse()?, radio.parse()?))
    }
}

/// Maximum observed capacitor drop per state on the reference track; states
/// that always browned out are absent.
pub fn reference_drops() -> BTreeMap<PowerState, f64> {
    use ClockTier::*;
    use RadioMode::*;
    BTreeMap::from([
        (PowerState::new(C80, Off), 1.62),
        (PowerState::new(C80, IdleConnected), 1.91),
        (PowerState::new(C80, Transmitting), 2.64),
        (PowerState::new(C160, Off), 2.11),
        (PowerState::new(C160, IdleConnected), 2.20),
        (PowerState::new(C160, Transmitting), 2.82),
        (PowerState::new(C240, Off), 2.49),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModelParams {
    /// Farads.
    pub capacitance: f64,
    pub nominal_voltage: f64,
    /// Drop below nominal at which the brownout detector resets the device.
    pub brownout_drop: f64,
    /// Duration of one unpowered gap used for calibration, seconds.
    pub gap_duration: f64,
    /// Current assigned to states without a measured drop.
    pub burst_current: f64,
    /// Peak-to-peak amplitude of the protocol ripple on the rail voltage.
    /// Only affects the reported supply trace.
    pub ripple_amplitude: f64,
    /// Volts per second while powered; `None` recharges instantly.
    pub recharge_rate: Option<f64>,
    pub current_table: BTreeMap<PowerState, f64>,
}

impl Default for EnergyModelParams {
    fn default() -> Self {
        let mut params = Self {
            capacitance: 1.0e-3,
            nominal_voltage: 9.0,
            brownout_drop: 4.0,
            gap_duration: 0.020,
            burst_current: 0.250,
            ripple_amplitude: 0.3,
            recharge_rate: None,
            current_table: BTreeMap::new(),
        };
        params.current_table =
            calibrate_currents(&reference_drops(), &params).expect("reference drops calibrate");
        params
    }
}

impl EnergyModelParams {
    pub fn validate(&self) -> Result<(), EnergyError> {
        let bad = |msg: String| Err(EnergyError::InvalidParam(msg));
        if !(self.capacitance > 0.0 && self.capacitance.is_finite()) {
            return bad(format!("capacitance must be > 0, got {}", self.capacitance));
        }
        if !(self.nominal_voltage > 0.0 && self.nominal_voltage.is_finite()) {
            return bad(format!(
                "nominal_voltage must be > 0, got {}",
                self.nominal_voltage
            ));
        }
        if !(self.brownout_drop > 0.0 && self.brownout_drop < self.nominal_voltage) {
            return bad(format!(
                "brownout_drop must lie in (0, {}), got {}",
                self.nominal_voltage, self.brownout_drop
            ));
        }
        if !(self.gap_duration > 0.0 && self.gap_duration.is_finite()) {
            return bad(format!(
                "gap_duration must be > 0, got {}",
                self.gap_duration
            ));
        }
        if !(self.burst_current >= 0.0 && self.burst_current.is_finite()) {
            return bad(format!(
                "burst_current must be >= 0, got {}",
                self.burst_current
            ));
        }
        if !(self.ripple_amplitude >= 0.0 && self.ripple_amplitude.is_finite()) {
            return bad(format!(
                "ripple_amplitude must be >= 0, got {}",
                self.ripple_amplitude
            ));
        }
        if let Some(rate) = self.recharge_rate {
            if !(rate > 0.0) {
                return bad(format!("recharge_rate must be > 0, got {rate}"));
            }
        }
        for state in PowerState::all() {
            match self.current_table.get(&state) {
                None => return Err(EnergyError::UnknownState(state)),
                Some(&i) if !(i >= 0.0 && i.is_finite()) => {
                    return bad(format!("current for {state} must be >= 0, got {i}"))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn current(&self, state: PowerState) -> Result<f64, EnergyError> {
        self.current_table
            .get(&state)
            .copied()
            .ok_or(EnergyError::UnknownState(state))
    }

    /// Voltage at which the brownout detector fires.
    pub fn brownout_voltage(&self) -> f64 {
        self.nominal_voltage - self.brownout_drop
    }
}

/// Linear discharge under a constant current, clamped at zero.
pub fn discharge_with_current(v0: f64, current: f64, dt: f64, capacitance: f64) -> f64 {
    (v0 - current * dt / capacitance).max(0.0)
}

/// Capacitor voltage after drawing `state`'s current for `dt` seconds.
pub fn discharge(
    v0: f64,
    state: PowerState,
    dt: f64,
    params: &EnergyModelParams,
) -> Result<f64, EnergyError> {
    let current = params.current(state)?;
    Ok(discharge_with_current(v0, current, dt, params.capacitance))
}

/// Converts measured gap drops into per-state currents. States missing from
/// `drops` get the burst current, which must push the drop past the
/// brownout threshold.
pub fn calibrate_currents(
    drops: &BTreeMap<PowerState, f64>,
    params: &EnergyModelParams,
) -> Result<BTreeMap<PowerState, f64>, EnergyError> {
    if !(params.gap_duration > 0.0) {
        return Err(EnergyError::InvalidParam(format!(
            "gap_duration must be > 0, got {}",
            params.gap_duration
        )));
    }
    let burst_drop = params.burst_current * params.gap_duration / params.capacitance;
    let mut table = BTreeMap::new();
    for state in PowerState::all() {
        let current = match drops.get(&state) {
            Some(&drop) if drop < 0.0 || drop.is_nan() => {
                return Err(EnergyError::NegativeDrop { state, drop })
            }
            Some(&drop) => params.capacitance * drop / params.gap_duration,
            None => {
                if burst_drop <= params.brownout_drop {
                    return Err(EnergyError::InvalidParam(format!(
                        "burst current {} A only drops {burst_drop:.3} V over the gap, \
                         not past the {} V brownout threshold",
                        params.burst_current, params.brownout_drop
                    )));
                }
                params.burst_current
            }
        };
        table.insert(state, current);
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    pub time: f64,
    pub supply_v: f64,
    pub capacitor_v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltageTrace {
    pub sample_period: f64,
    pub samples: Vec<TraceSample>,
}

impl VoltageTrace {
    pub fn new(sample_period: f64) -> Self {
        Self {
            sample_period,
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, time: f64, supply_v: f64, capacitor_v: f64) {
        self.samples.push(TraceSample {
            time,
            supply_v,
            capacitor_v,
        });
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Time of the first sample whose drop reaches the brownout threshold.
pub fn detect_brownout(trace: &VoltageTrace, params: &EnergyModelParams) -> Option<f64> {
    trace
        .samples
        .iter()
        .find(|s| params.nominal_voltage - s.capacitor_v >= params.brownout_drop)
        .map(|s| s.time)
}

/// Largest drop below `nominal` seen anywhere in the trace.
pub fn max_drop(trace: &VoltageTrace, nominal: f64) -> f64 {
    let min = trace
        .samples
        .iter()
        .map(|s| s.capacitor_v)
        .fold(f64::INFINITY, f64::min);
    if min.is_finite() {
        (nominal - min).max(0.0)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClockTier::*;
    use RadioMode::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn flat_trace(values: &[(f64, f64)]) -> VoltageTrace {
        let mut trace = VoltageTrace::new(0.0005);
        for &(t, v) in values {
            trace.push(t, 9.0, v);
        }
        trace
    }

    #[test]
    fn calibration_matches_hand_computed_currents() {
        // I = C * dV / T with C = 1 mF, T = 20 ms, i.e. I = dV / 20.
        let table = EnergyModelParams::default().current_table;
        let expected = [
            (PowerState::new(C80, Off), 0.081),
            (PowerState::new(C80, IdleConnected), 0.0955),
            (PowerState::new(C80, Transmitting), 0.132),
            (PowerState::new(C160, Off), 0.1055),
            (PowerState::new(C160, IdleConnected), 0.110),
            (PowerState::new(C160, Transmitting), 0.141),
            (PowerState::new(C240, Off), 0.1245),
            (PowerState::new(C240, IdleConnected), 0.250),
            (PowerState::new(C240, Transmitting), 0.250),
        ];
        for (state, amps) in expected {
            assert!(
                close(table[&state], amps, 1e-12),
                "{state}: {}",
                table[&state]
            );
        }
    }

    #[test]
    fn zero_drop_calibrates_to_zero_current() {
        let params = EnergyModelParams::default();
        let drops = BTreeMap::from([(PowerState::new(C80, Off), 0.0)]);
        let table = calibrate_currents(&drops, &params).unwrap();
        assert_eq!(table[&PowerState::new(C80, Off)], 0.0);
    }

    #[test]
    fn negative_drop_is_rejected() {
        let params = EnergyModelParams::default();
        let drops = BTreeMap::from([(PowerState::new(C80, Off), -0.1)]);
        assert!(matches!(
            calibrate_currents(&drops, &params),
            Err(EnergyError::NegativeDrop { .. })
        ));
    }

    #[test]
    fn weak_burst_current_is_rejected() {
        let params = EnergyModelParams {
            burst_current: 0.1,
            ..EnergyModelParams::default()
        };
        assert!(calibrate_currents(&reference_drops(), &params).is_err());
    }

    #[test]
    fn discharge_examples() {
        let params = EnergyModelParams::default();
        let v = discharge(9.0, PowerState::new(C80, Off), 0.020, &params).unwrap();
        assert!(close(v, 7.38, 1e-12));

        let mut zero = params.clone();
        zero.current_table.insert(PowerState::new(C80, Off), 0.0);
        assert_eq!(
            discharge(9.0, PowerState::new(C80, Off), 1.0, &zero).unwrap(),
            9.0
        );

        let v = discharge_with_current(9.0, 0.240, 0.020, 1.0e-3);
        assert!(close(v, 4.2, 1e-12));
        assert!(9.0 - v > params.brownout_drop);
    }

    #[test]
    fn discharge_clamps_at_zero() {
        assert_eq!(discharge_with_current(1.0, 1.0, 1.0, 1.0e-3), 0.0);
    }

    #[test]
    fn missing_state_is_a_configuration_error() {
        let mut params = EnergyModelParams::default();
        params.current_table.remove(&PowerState::new(C160, Off));
        assert_eq!(
            discharge(9.0, PowerState::new(C160, Off), 0.01, &params),
            Err(EnergyError::UnknownState(PowerState::new(C160, Off)))
        );
        assert!(params.validate().is_err());
    }

    #[test]
    fn validate_rejects_threshold_above_nominal() {
        let params = EnergyModelParams {
            brownout_drop: 9.0,
            ..EnergyModelParams::default()
        };
        assert!(params.validate().is_err());
        assert!(EnergyModelParams::default().validate().is_ok());
    }

    #[test]
    fn brownout_detection() {
        let params = EnergyModelParams::default();
        assert_eq!(
            detect_brownout(&flat_trace(&[(0.0, 9.0), (0.001, 9.0)]), &params),
            None
        );

        let dip = flat_trace(&[(0.030, 9.0), (0.0345, 5.2), (0.035, 4.9), (0.0355, 4.5)]);
        assert_eq!(detect_brownout(&dip, &params), Some(0.035));

        let shallow = flat_trace(&[(0.0, 9.0), (0.01, 5.5), (0.02, 9.0)]);
        assert_eq!(detect_brownout(&shallow, &params), None);
    }

    #[test]
    fn max_drop_examples() {
        assert_eq!(max_drop(&flat_trace(&[(0.0, 9.0), (0.1, 9.0)]), 9.0), 0.0);
        let dip = flat_trace(&[(0.0, 9.0), (0.1, 7.0), (0.2, 9.0)]);
        assert!(close(max_drop(&dip, 9.0), 2.0, 1e-12));
    }

    #[test]
    fn sending_to_idle_ratio() {
        let d = reference_drops();
        let ratio = d[&PowerState::new(C80, Transmitting)] / d[&PowerState::new(C80, Off)];
        assert!((ratio - 1.6).abs() / 1.6 < 0.05, "ratio {ratio}");
    }

    #[test]
    fn drops_increase_with_radio_use() {
        let d = reference_drops();
        for clock in [C80, C160] {
            let off = d[&PowerState::new(clock, Off)];
            let idle = d[&PowerState::new(clock, IdleConnected)];
            let tx = d[&PowerState::new(clock, Transmitting)];
            assert!(off <= idle && idle <= tx);
        }
    }

    #[test]
    fn power_state_keys_roundtrip() {
        for state in PowerState::all() {
            assert_eq!(state.key().parse::<PowerState>().unwrap(), state);
        }
        assert!(PowerState::new(C240, Transmitting).is_infeasible());
        assert!(!PowerState::new(C240, Off).is_infeasible());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn any_state() -> impl Strategy<Value = PowerState> {
            (0usize..9).prop_map(|i| PowerState::all().nth(i).unwrap())
        }

        proptest! {
            #[test]
            fn higher_current_never_ends_higher(
                v0 in 0.0f64..9.0, dt in 0.0f64..0.1, a in 0.0f64..0.5, b in 0.0f64..0.5
            ) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(
                    discharge_with_current(v0, hi, dt, 1e-3)
                        <= discharge_with_current(v0, lo, dt, 1e-3)
                );
            }

            #[test]
            fn discharge_is_additive(
                state in any_state(), a in 0.0f64..0.01, b in 0.0f64..0.01
            ) {
                let params = EnergyModelParams::default();
                let whole = discharge(9.0, state, a + b, &params).unwrap();
                let split = discharge(discharge(9.0, state, a, &params).unwrap(), state, b, &params)
                    .unwrap();
                prop_assume!(whole > 0.0);
                prop_assert!((whole - split).abs() <= 1e-12);
            }
        }
    }
}
