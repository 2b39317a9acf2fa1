//! Runs one workload under several strategies and tabulates the results.

use rayon::prelude::*;

use super::{DeliveryMetrics, StrategyKind};
use crate::scenario::ScenarioSpec;
use crate::world::{run_scenario, WorldError};

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub strategy: StrategyKind,
    pub metrics: DeliveryMetrics,
}

impl ComparisonRow {
    pub const CSV_HEADER: &'static str =
        "strategy,delivered,median_latency_s,brownouts,max_drop_v,radio_on_s,peak_storage_b";

    pub fn csv_line(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{:.6},{},{:.6},{:.6},{}",
            self.strategy,
            m.delivered_records,
            m.median_latency,
            m.brownout_count,
            m.max_drop_observed,
            m.radio_on_time,
            m.bytes_stored_peak
        )
    }
}

/// Same scenario, one run per strategy. Rows come back in the order of
/// `kinds` and do not depend on how many threads ran them.
pub fn evaluate_strategies(
    base: &ScenarioSpec,
    kinds: &[StrategyKind],
    controller: bool,
) -> Result<Vec<ComparisonRow>, WorldError> {
    kinds
        .par_iter()
        .map(|&kind| {
            let mut spec = base.clone();
            spec.strategy.kind = Some(kind);
            spec.strategy.controller = controller;
            run_scenario(&spec).map(|out| ComparisonRow {
                strategy: kind,
                metrics: out.metrics,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_shape() {
        let row = ComparisonRow {
            strategy: StrategyKind::StopAndRadio,
            metrics: DeliveryMetrics {
                delivered_records: 12,
                median_latency: 1.5,
                ..DeliveryMetrics::default()
            },
        };
        let line = row.csv_line();
        assert_eq!(line, "stop_and_radio,12,1.500000,0,0.000000,0.000000,0");
        assert_eq!(
            line.split(',').count(),
            ComparisonRow::CSV_HEADER.split(',').count()
        );
    }
}
