//! Energy-budget gate for radio transmissions.

use crate::energy::{ClockTier, EnergyModelParams, PowerState, RadioMode};
use crate::track::TrackLayout;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBudget {
    /// Largest capacitor drop a transmission may cause, in volts.
    pub max_allowed_drop: f64,
    /// How far ahead in time a gap blocks a send, in seconds.
    pub lookahead: f64,
}

impl Default for EnergyBudget {
    fn default() -> Self {
        Self {
            max_allowed_drop: 3.5,
            lookahead: 0.050,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Allow,
    Defer,
}

#[derive(Debug, Clone, Copy)]
pub struct GateView<'a> {
    pub layout: &'a TrackLayout,
    pub position: f64,
    pub speed: f64,
    pub capacitor_v: f64,
    pub clock: ClockTier,
    pub params: &'a EnergyModelParams,
}

/// Worst-case drop if a transmission started now: the deficit already on
/// the capacitor plus what transmitting would drain until power returns.
pub fn predicted_drop(view: &GateView<'_>) -> f64 {
    let p = view.params;
    let deficit = (p.nominal_voltage - view.capacitor_v).max(0.0);
    let unpowered = match view.layout.distance_to_gap_exit(view.position) {
        None => 0.0,
        Some(_) if view.speed <= 0.0 => f64::INFINITY,
        Some(d) => d / view.speed,
    };
    let tx = p
        .current(PowerState::new(view.clock, RadioMode::Transmitting))
        .unwrap_or(p.burst_current);
    deficit + tx * unpowered / p.capacitance
}

/// Defers a send when a gap falls inside the lookahead window or when the
/// predicted drop would exceed the budget.
pub fn controller_gate(budget: &EnergyBudget, view: &GateView<'_>) -> GateDecision {
    let ahead = view.speed.max(0.0) * budget.lookahead;
    if view.layout.gap_within(view.position, ahead) {
        return GateDecision::Defer;
    }
    if predicted_drop(view) > budget.max_allowed_drop {
        return GateDecision::Defer;
    }
    GateDecision::Allow
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view<'a>(
        layout: &'a TrackLayout,
        params: &'a EnergyModelParams,
        position: f64,
        capacitor_v: f64,
    ) -> GateView<'a> {
        GateView {
            layout,
            position,
            speed: 3.0,
            capacitor_v,
            clock: ClockTier::C160,
            params,
        }
    }

    #[test]
    fn defers_ten_ms_before_a_gap() {
        let layout = TrackLayout::reference();
        let params = EnergyModelParams::default();
        // 10 ms at 3 m/s before the first gap.
        let v = view(&layout, &params, 1.38 - 0.03, 9.0);
        assert_eq!(
            controller_gate(&EnergyBudget::default(), &v),
            GateDecision::Defer
        );
    }

    #[test]
    fn allows_on_open_track() {
        let layout = TrackLayout::reference();
        let params = EnergyModelParams::default();
        let v = view(&layout, &params, 0.5, 9.0);
        assert_eq!(
            controller_gate(&EnergyBudget::default(), &v),
            GateDecision::Allow
        );
    }

    #[test]
    fn defers_on_depleted_capacitor() {
        let layout = TrackLayout::reference();
        let params = EnergyModelParams::default();
        let v = view(&layout, &params, 0.5, 5.0);
        assert_eq!(
            controller_gate(&EnergyBudget::default(), &v),
            GateDecision::Defer
        );
    }

    #[test]
    fn prediction_inside_gap() {
        let layout = TrackLayout::reference();
        let params = EnergyModelParams::default();
        // 40 mm left at 3 m/s is 13.3 ms at 0.141 A on 1 mF.
        let v = view(&layout, &params, 1.40, 9.0);
        let expected = 0.141 * (0.04 / 3.0) / 1e-3;
        assert!((predicted_drop(&v) - expected).abs() < 1e-9);
        let parked = GateView { speed: 0.0, ..v };
        assert!(predicted_drop(&parked).is_infinite());
    }
}
