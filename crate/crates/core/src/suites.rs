//! Built-in scenarios and the per-state voltage-drop suite.

use rayon::prelude::*;

use crate::energy::{reference_drops, ClockTier, PowerState, RadioMode};
use crate::scenario::{parse_scenario, ScenarioError, ScenarioSpec};
use crate::world::{run_scenario, EventKind, WorldError};

pub const REFERENCE_WORKLOAD: &str = include_str!("../scenarios/reference_workload.scn");
pub const GAP_REQUESTS: &str = include_str!("../scenarios/gap_requests.scn");
pub const POWERLINE_SATURATION: &str = include_str!("../scenarios/powerline_saturation.scn");

/// Scenario text for one clock/radio cell, one lane-change crossing each.
pub fn drop_cell_text(state: PowerState) -> &'static str {
    use ClockTier::*;
    use RadioMode::*;
    match (state.clock, state.radio) {
        (C80, Off) => include_str!("../scenarios/table1/c80_off.scn"),
        (C80, IdleConnected) => include_str!("../scenarios/table1/c80_idle.scn"),
        (C80, Transmitting) => include_str!("../scenarios/table1/c80_tx.scn"),
        (C160, Off) => include_str!("../scenarios/table1/c160_off.scn"),
        (C160, IdleConnected) => include_str!("../scenarios/table1/c160_idle.scn"),
        (C160, Transmitting) => include_str!("../scenarios/table1/c160_tx.scn"),
        (C240, Off) => include_str!("../scenarios/table1/c240_off.scn"),
        (C240, IdleConnected) => include_str!("../scenarios/table1/c240_idle.scn"),
        (C240, Transmitting) => include_str!("../scenarios/table1/c240_tx.scn"),
    }
}

pub fn drop_cell_spec(state: PowerState) -> Result<ScenarioSpec, ScenarioError> {
    parse_scenario(drop_cell_text(state))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropCell {
    pub state: PowerState,
    /// Measured reference drop; `None` where the hardware always failed.
    pub expected: Option<f64>,
    pub measured: f64,
    pub brownouts: usize,
}

impl DropCell {
    /// Measured cells must land within `tolerance_pct` of the reference
    /// and not brown out; the others must brown out.
    pub fn passes(&self, tolerance_pct: f64) -> bool {
        match self.expected {
            Some(e) => {
                self.brownouts == 0 && (self.measured - e).abs() <= e * tolerance_pct / 100.0
            }
            None => self.brownouts >= 1,
        }
    }

    pub fn error_pct(&self) -> Option<f64> {
        self.expected.map(|e| 100.0 * (self.measured - e) / e)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error("{state}: {source}")]
    Scenario {
        state: PowerState,
        source: ScenarioError,
    },
    #[error("{state}: {source}")]
    Run {
        state: PowerState,
        source: WorldError,
    },
}

/// Simulates every clock/radio cell over one crossing.
pub fn run_drop_table() -> Result<Vec<DropCell>, SuiteError> {
    let reference = reference_drops();
    let states: Vec<PowerState> = PowerState::all().collect();
    states
        .par_iter()
        .map(|&state| {
            let spec =
                drop_cell_spec(state).map_err(|source| SuiteError::Scenario { state, source })?;
            let out = run_scenario(&spec).map_err(|source| SuiteError::Run { state, source })?;
            Ok(DropCell {
                state,
                expected: reference.get(&state).copied(),
                measured: out.metrics.max_drop_observed,
                brownouts: out.count(EventKind::Brownout),
            })
        })
        .collect()
}
