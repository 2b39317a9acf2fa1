//! Host-side collector and per-run delivery metrics.

use std::collections::BTreeMap;

/// Host endpoint that presents each log record once, whatever the number
/// of retransmissions.
#[derive(Debug, Clone, Default)]
pub struct Collector {
    seen: BTreeMap<u32, Vec<u8>>,
    pub duplicates: u64,
    /// Records whose retransmitted payload differed from the first copy.
    pub conflicts: u64,
}

impl Collector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns true if the record is presented for the first time.
    pub fn accept(&mut self, seq: u32, payload: &[u8]) -> bool {
        match self.seen.get(&seq) {
            Some(prev) => {
                self.duplicates += 1;
                if prev != payload {
                    self.conflicts += 1;
                }
                false
            }
            None => {
                self.seen.insert(seq, payload.to_vec());
                true
            }
        }
    }

    pub fn presented(&self) -> usize {
        self.seen.len()
    }

    pub fn contains(&self, seq: u32) -> bool {
        self.seen.contains_key(&seq)
    }

    pub fn payload(&self, seq: u32) -> Option<&[u8]> {
        self.seen.get(&seq).map(Vec::as_slice)
    }

    pub fn seqs(&self) -> impl Iterator<Item = u32> + '_ {
        self.seen.keys().copied()
    }
}

/// Nearest-rank percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn median(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeliveryMetrics {
    pub appended: u64,
    pub delivered_records: u64,
    pub delivered_bytes: u64,
    pub duplicates: u64,
    pub min_latency: f64,
    pub mean_latency: f64,
    pub median_latency: f64,
    pub p95_latency: f64,
    pub max_latency: f64,
    pub brownout_count: u64,
    pub max_drop_observed: f64,
    pub radio_on_time: f64,
    pub bytes_stored_peak: u64,
    pub dropped_records: u64,
    pub evicted_records: u64,
    pub lost_volatile: u64,
    pub unacked_at_end: u64,
    pub requests_issued: u64,
    pub requests_answered: u64,
    pub powerline_bits: u64,
    pub backlog_growing: bool,
    pub sim_time: f64,
}

impl DeliveryMetrics {
    /// Fills the latency fields from append-to-ack latencies.
    pub fn set_latencies(&mut self, latencies: &[f64]) {
        let mut sorted = latencies.to_vec();
        sorted.sort_by(f64::total_cmp);
        self.mean_latency = if sorted.is_empty() {
            0.0
        } else {
            sorted.iter().sum::<f64>() / sorted.len() as f64
        };
        self.min_latency = sorted.first().copied().unwrap_or(0.0);
        self.median_latency = median(&sorted);
        self.p95_latency = percentile(&sorted, 0.95);
        self.max_latency = sorted.last().copied().unwrap_or(0.0);
    }

    pub fn throughput_bits(&self) -> f64 {
        if self.sim_time > 0.0 {
            self.delivered_bytes as f64 * 8.0 / self.sim_time
        } else {
            0.0
        }
    }

    /// Rows as `(metric, value)` pairs; integer metrics carry no decimals.
    pub fn rows(&self) -> Vec<(&'static str, MetricValue)> {
        use MetricValue::{Float as F, Int as I};
        vec![
            ("appended", I(self.appended)),
            ("delivered_records", I(self.delivered_records)),
            ("delivered_bytes", I(self.delivered_bytes)),
            ("duplicates", I(self.duplicates)),
            ("min_latency_s", F(self.min_latency)),
            ("mean_latency_s", F(self.mean_latency)),
            ("median_latency_s", F(self.median_latency)),
            ("p95_latency_s", F(self.p95_latency)),
            ("max_latency_s", F(self.max_latency)),
            ("brownouts", I(self.brownout_count)),
            ("max_drop_v", F(self.max_drop_observed)),
            ("radio_on_s", F(self.radio_on_time)),
            ("peak_storage_b", I(self.bytes_stored_peak)),
            ("dropped_records", I(self.dropped_records)),
            ("evicted_records", I(self.evicted_records)),
            ("lost_volatile", I(self.lost_volatile)),
            ("unacked_at_end", I(self.unacked_at_end)),
            ("requests_issued", I(self.requests_issued)),
            ("requests_answered", I(self.requests_answered)),
            ("powerline_bits", I(self.powerline_bits)),
            ("backlog_growing", I(self.backlog_growing as u64)),
            ("sim_time_s", F(self.sim_time)),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricValue {
    Int(u64),
    Float(f64),
}

impl std::fmt::Display for MetricValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricValue::Int(v) => write!(f, "{v}"),
            MetricValue::Float(v) => write!(f, "{v:.6}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collector_dedups() {
        let mut c = Collector::new();
        assert!(c.accept(1, b"a"));
        assert!(!c.accept(1, b"a"));
        assert!(!c.accept(1, b"b"));
        assert!(c.accept(2, b"c"));
        assert_eq!(c.presented(), 2);
        assert_eq!(c.duplicates, 2);
        assert_eq!(c.conflicts, 1);
    }

    #[test]
    fn latency_summary() {
        let mut m = DeliveryMetrics::default();
        m.set_latencies(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(m.median_latency, 2.5);
        assert_eq!(m.mean_latency, 2.5);
        assert_eq!(m.max_latency, 4.0);
        assert_eq!(m.p95_latency, 4.0);
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 95.0);
        assert_eq!(percentile(&[], 0.5), 0.0);
    }

    #[test]
    fn metric_formatting() {
        assert_eq!(MetricValue::Int(3).to_string(), "3");
        assert_eq!(MetricValue::Float(1.5).to_string(), "1.500000");
    }
}
