//! CSV output for traces, events, metrics and powerline slots.
//!
//! Floats are written with six decimals and a '.' separator; counts are
//! plain integers. Files are replaced atomically.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use crate::energy::VoltageTrace;
use crate::strategy::DeliveryMetrics;
use crate::transport::powerline::DeliveredSlot;
use crate::world::{Event, ScenarioOutcome};

pub fn trace_csv(trace: &VoltageTrace) -> String {
    let mut out = String::from("time_s,supply_v,cap_v\n");
    for s in &trace.samples {
        let _ = writeln!(out, "{:.6},{:.6},{:.6}", s.time, s.supply_v, s.capacitor_v);
    }
    out
}

pub fn events_csv(events: &[Event]) -> String {
    let mut out = String::from("time_s,event,detail\n");
    for e in events {
        let _ = writeln!(
            out,
            "{:.6},{},{}",
            e.time,
            e.kind,
            e.detail.replace(',', ";")
        );
    }
    out
}

pub fn metrics_csv(metrics: &DeliveryMetrics) -> String {
    let mut out = String::from("metric,value\n");
    for (name, value) in metrics.rows() {
        let _ = writeln!(out, "{name},{value}");
    }
    out
}

pub fn slots_csv(slots: &[DeliveredSlot]) -> String {
    let mut out = String::from("cycle,slot,value\n");
    for d in slots {
        let _ = writeln!(
            out,
            "{},{},{}",
            d.slot.cycle_index, d.slot.slot_index, d.slot.payload
        );
    }
    out
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Writes trace.csv, events.csv and metrics.csv, plus slots.csv when the
/// powerline carried anything.
pub fn write_outputs(dir: &Path, outcome: &ScenarioOutcome) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = vec![
        ("trace.csv", trace_csv(&outcome.trace)),
        ("events.csv", events_csv(&outcome.events)),
        ("metrics.csv", metrics_csv(&outcome.metrics)),
    ];
    if !outcome.slots.is_empty() {
        files.push(("slots.csv", slots_csv(&outcome.slots)));
    }
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        write_atomic(&path, &body)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::EventKind;

    #[test]
    fn trace_format() {
        let mut t = VoltageTrace::new(0.0005);
        t.push(0.0005, 9.15, 9.0);
        assert_eq!(
            trace_csv(&t),
            "time_s,supply_v,cap_v\n0.000500,9.150000,9.000000\n"
        );
    }

    #[test]
    fn event_details_cannot_add_columns() {
        let e = Event {
            time: 1.0,
            kind: EventKind::Brownout,
            detail: "a,b".into(),
        };
        assert_eq!(
            events_csv(&[e]),
            "time_s,event,detail\n1.000000,brownout,a;b\n"
        );
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_atomic(&p, "one").unwrap();
        write_atomic(&p, "two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
