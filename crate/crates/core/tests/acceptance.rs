//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use powergap::energy::{ClockTier, PowerState, RadioMode};
use powergap::report::{events_csv, metrics_csv, slots_csv, trace_csv};
use powergap::scenario::{parse_scenario, ScenarioSpec};
use powergap::strategy::ota::{
    image_hash, ota_transfer, ChannelEvent, OtaDevice, OtaImage, OtaState, Slot,
};
use powergap::strategy::StrategyKind;
use powergap::suites::{drop_cell_spec, run_drop_table, GAP_REQUESTS, POWERLINE_SATURATION};
use powergap::track::TrackLayout;
use powergap::transport::powerline_bandwidth;
use powergap::world::{payload_for, run_scenario, EventKind};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Reference drops, typed in from the measurement table.
const TABLE: [(ClockTier, RadioMode, f64); 7] = [
    (ClockTier::C80, RadioMode::Off, 1.62),
    (ClockTier::C80, RadioMode::IdleConnected, 1.91),
    (ClockTier::C80, RadioMode::Transmitting, 2.64),
    (ClockTier::C160, RadioMode::Off, 2.11),
    (ClockTier::C160, RadioMode::IdleConnected, 2.20),
    (ClockTier::C160, RadioMode::Transmitting, 2.82),
    (ClockTier::C240, RadioMode::Off, 2.49),
];

fn drop_table() -> Verdict {
    let started = Instant::now();
    let cells = run_drop_table().map_err(|e| e.to_string())?;
    let elapsed = started.elapsed().as_secs_f64();
    let mut worst: f64 = 0.0;
    for (clock, radio, expected) in TABLE {
        let state = PowerState::new(clock, radio);
        // Calibration oracle: I = C * dV / T with C = 1 mF, T = 20 ms.
        let oracle = 1.0e-3 * expected / 0.020;
        let spec = drop_cell_spec(state).map_err(|e| e.to_string())?;
        let current = spec.energy.current(state).map_err(|e| e.to_string())?;
        if (current - oracle).abs() > 1e-12 {
            return Err(format!(
                "{state}: calibrated {current} A, oracle {oracle} A"
            ));
        }
        let cell = cells
            .iter()
            .find(|c| c.state == state)
            .ok_or("missing cell")?;
        if cell.brownouts != 0 {
            return Err(format!("{state}: unexpected brownout"));
        }
        let err = (cell.measured - expected).abs() / expected;
        worst = worst.max(err);
        if err > 0.01 {
            return Err(format!(
                "{state}: measured {:.4} V vs {expected} V",
                cell.measured
            ));
        }
    }
    check(
        elapsed < 5.0,
        format!(
            "7 cells within 1% (worst {:.4}%), {elapsed:.2} s",
            worst * 100.0
        ),
    )
}

fn sending_ratio() -> Verdict {
    let cells = run_drop_table().map_err(|e| e.to_string())?;
    let get = |r| {
        cells
            .iter()
            .find(|c| c.state == PowerState::new(ClockTier::C80, r))
            .map(|c| c.measured)
            .unwrap_or(f64::NAN)
    };
    let ratio = get(RadioMode::Transmitting) / get(RadioMode::Off);
    check((1.55..=1.70).contains(&ratio), format!("ratio {ratio:.4}"))
}

fn brownout_cells() -> Verdict {
    let states = [
        PowerState::new(ClockTier::C240, RadioMode::IdleConnected),
        PowerState::new(ClockTier::C240, RadioMode::Transmitting),
    ];
    let mut failures = Vec::new();
    for state in states {
        let base = drop_cell_spec(state).map_err(|e| e.to_string())?;
        let threshold_drop = base.energy.burst_current * 0.020 / base.energy.capacitance;
        if threshold_drop <= base.energy.brownout_drop {
            return Err(format!(
                "burst drop {threshold_drop} V does not exceed the threshold"
            ));
        }
        let ok = (0..100u64)
            .into_par_iter()
            .filter(|&run| {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + run);
                let mut spec = base.clone();
                spec.car.start_position = (rng.gen_range(0..800) as f64) * 0.0015;
                spec.sim.seed = Some(run);
                let Ok(out) = run_scenario(&spec) else {
                    return false;
                };
                let entries: Vec<f64> = out
                    .events
                    .iter()
                    .filter(|e| e.kind == EventKind::GapEntered && e.detail == "gap=0")
                    .map(|e| e.time)
                    .collect();
                !entries.is_empty()
                    && entries.iter().all(|&t| {
                        out.events.iter().any(|e| {
                            e.kind == EventKind::Brownout && e.time >= t && e.time < t + 0.2
                        })
                    })
            })
            .count();
        if ok != 100 {
            failures.push(format!("{state}: {ok}/100"));
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "both n/a cells: 100/100 runs brown out on every crossing".into()
        } else {
            failures.join(", ")
        },
    )
}

fn powerline_capacity() -> Verdict {
    // 8 slots of 13 bits every 75 ms.
    let oracle = 8.0 * 13.0 / 0.075;
    let computed = powerline_bandwidth(0.075, 8, 13);
    if (computed - 1386.67).abs() > 0.005 || (computed - oracle).abs() > 1e-9 {
        return Err(format!("computed {computed:.4} bit/s"));
    }
    let spec = parse_scenario(POWERLINE_SATURATION).map_err(|e| e.to_string())?;
    let out = run_scenario(&spec).map_err(|e| e.to_string())?;
    let measured = out.metrics.powerline_bits as f64 / spec.sim.duration;
    check(
        (measured - computed).abs() <= 13.0,
        format!("computed {computed:.2} bit/s, measured {measured:.2} bit/s over 10 s"),
    )
}

fn random_fault_spec(run: u64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(run);
    let mut spec = ScenarioSpec::new(4.0);
    spec.layout = if rng.gen_bool(0.5) {
        TrackLayout::reference()
    } else {
        TrackLayout::gapless()
    };
    spec.strategy.kind = Some(StrategyKind::ALL[rng.gen_range(0..4)]);
    spec.strategy.drain_interval = 1.0;
    spec.strategy.stop_overhead = 0.2;
    spec.wireless.connect_latency = 0.3;
    spec.wireless.loss_rate = rng.gen_range(0.0..0.5);
    spec.device.clock = if rng.gen_bool(0.5) {
        ClockTier::C80
    } else {
        ClockTier::C160
    };
    spec.device.flush_interval = [0.05, 0.1, 0.25][rng.gen_range(0..3)];
    spec.workload.rate = rng.gen_range(5.0..40.0);
    spec.workload.payload_size = rng.gen_range(4..80);
    spec.workload.until = Some(2.5);
    let n = rng.gen_range(1..=4);
    let mut faults: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..3.0)).collect();
    faults.sort_by(f64::total_cmp);
    spec.faults.brownouts = faults;
    spec.faults.torn_writes = rng.gen_bool(0.5);
    spec.sim.seed = Some(run);
    spec
}

fn durability() -> Verdict {
    let started = Instant::now();
    let results: Vec<(Option<String>, usize, u64)> = (0..1000u64)
        .into_par_iter()
        .map(|run| {
            let spec = random_fault_spec(run);
            let out = match run_scenario(&spec) {
                Ok(o) => o,
                Err(e) => return (Some(format!("run {run}: {e}")), 0, 0),
            };
            let problem = durability_problem(run, &spec, &out);
            (problem, out.collector.presented(), out.collector.duplicates)
        })
        .collect();
    let elapsed = started.elapsed().as_secs_f64();
    let presented: usize = results.iter().map(|r| r.1).sum();
    let duplicates: u64 = results.iter().map(|r| r.2).sum();
    let problems: Vec<&String> = results.iter().filter_map(|r| r.0.as_ref()).collect();
    if let Some(p) = problems.first() {
        return Err(format!("{} failing runs, first: {p}", problems.len()));
    }
    check(
        elapsed < 30.0 && presented > 0,
        format!(
            "1000 runs: {presented} records presented once each ({duplicates} duplicates dropped), \
             none lost or corrupted, {elapsed:.2} s"
        ),
    )
}

fn durability_problem(
    run: u64,
    spec: &ScenarioSpec,
    out: &powergap::world::ScenarioOutcome,
) -> Option<String> {
    {
        let flushed: BTreeSet<u32> = out.flushed.iter().copied().collect();
        let unacked: BTreeSet<u32> = out.unacked.iter().copied().collect();
        let presented: BTreeSet<u32> = out.collector.seqs().collect();
        if let Some(lost) = flushed
            .iter()
            .find(|s| !presented.contains(s) && !unacked.contains(s))
        {
            return Some(format!("run {run}: flushed record {lost} lost"));
        }
        if let Some(bad) = presented.iter().find(|&&s| {
            out.collector.payload(s) != Some(&payload_for(s, spec.workload.payload_size)[..])
        }) {
            return Some(format!("run {run}: record {bad} corrupted"));
        }
        if !presented.is_subset(&flushed) {
            return Some(format!(
                "run {run}: presented a record that was never flushed"
            ));
        }
        if out.collector.conflicts != 0 || !out.store_conserved {
            return Some(format!(
                "run {run}: conflicting copies or broken accounting"
            ));
        }
        if out.count(EventKind::Brownout) == 0 {
            return Some(format!("run {run}: no brownout injected"));
        }
        None
    }
}

fn ota_atomicity() -> Verdict {
    let old: Vec<u8> = (0..50_000u32).map(|i| (i * 7 % 251) as u8).collect();
    let new: Vec<u8> = (0..65_536u32).map(|i| (i * 13 % 253) as u8).collect();
    let old_hash = image_hash(&old);
    let image = OtaImage::new(new, 1024);
    if image.bytes.len() / image.chunk_size != 64 {
        return Err("image is not 64 chunks".into());
    }
    let problems: Vec<String> = (0..200u64)
        .into_par_iter()
        .filter_map(|run| {
            let mut rng = ChaCha8Rng::seed_from_u64(run);
            let faults: BTreeSet<usize> = (0..rng.gen_range(1..=3))
                .map(|_| rng.gen_range(0..500))
                .collect();
            let loss = rng.gen_range(0.0..0.2);
            let mut dev = OtaDevice::new(old.clone());
            let mut sent = 0usize;
            let mut channel = |_: &powergap::transport::Frame| {
                sent += 1;
                if faults.contains(&(sent - 1)) {
                    ChannelEvent::PowerLoss
                } else if rng.gen_bool(loss) {
                    ChannelEvent::Lost
                } else {
                    ChannelEvent::Delivered
                }
            };
            let report = match ota_transfer(&mut dev, &image, &mut channel, 100_000) {
                Ok(r) => r,
                Err(e) => return Some(format!("schedule {run}: {e}")),
            };
            if report.atomicity_violations != 0 {
                return Some(format!("schedule {run}: slot invariant broken"));
            }
            if image_hash(dev.active_image()) != old_hash || dev.active_slot() != Slot::A {
                return Some(format!(
                    "schedule {run}: active image changed before reboot"
                ));
            }
            if report.state != OtaState::Activated
                || report.resumptions as usize != faults.len()
                || report.resumptions > 3
            {
                return Some(format!(
                    "schedule {run}: state {:?} after {} resumptions",
                    report.state, report.resumptions
                ));
            }
            dev.reboot();
            if dev.active_image() != &image.bytes[..] {
                return Some(format!(
                    "schedule {run}: new image not running after reboot"
                ));
            }
            None
        })
        .collect();
    check(
        problems.is_empty(),
        problems.first().cloned().unwrap_or_else(|| {
            "200 schedules: active image intact until verified, done within 3 resumptions".into()
        }),
    )
}

fn controller_efficacy() -> Verdict {
    let base = parse_scenario(GAP_REQUESTS).map_err(|e| e.to_string())?;
    let laps = base.sim.duration * base.car.speed / base.layout.total_length();
    if laps < 100.0 - 1e-9 {
        return Err(format!("only {laps} laps"));
    }
    let mut off = base.clone();
    off.strategy.controller = false;
    let mut on = base;
    on.strategy.controller = true;
    let (a, b) = rayon::join(|| run_scenario(&off), || run_scenario(&on));
    let (a, b) = (a.map_err(|e| e.to_string())?, b.map_err(|e| e.to_string())?);
    let off_brownouts = a.count(EventKind::Brownout);
    let on_brownouts = b.count(EventKind::Brownout);
    let m = &b.metrics;
    check(
        off_brownouts >= 1
            && on_brownouts == 0
            && m.requests_issued > 0
            && m.requests_answered == m.requests_issued,
        format!(
            "off: {off_brownouts} brownouts; on: {on_brownouts} brownouts, {}/{} requests answered",
            m.requests_answered, m.requests_issued
        ),
    )
}

fn determinism() -> Verdict {
    let mut specs = vec![parse_scenario(GAP_REQUESTS).map_err(|e| e.to_string())?];
    specs.push(random_fault_spec(7));
    let mut pl = parse_scenario(POWERLINE_SATURATION).map_err(|e| e.to_string())?;
    pl.layout = TrackLayout::reference();
    specs.push(pl);
    for spec in &specs {
        let render = || {
            run_scenario(spec).map(|o| {
                [
                    trace_csv(&o.trace),
                    events_csv(&o.events),
                    metrics_csv(&o.metrics),
                    slots_csv(&o.slots),
                ]
            })
        };
        let (a, b) = rayon::join(render, render);
        if a.map_err(|e| e.to_string())? != b.map_err(|e| e.to_string())? {
            return Err(format!("{}: outputs differ between runs", spec.name));
        }
    }
    Ok(format!(
        "{} scenarios re-run with identical outputs",
        specs.len()
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 per-state drop table", drop_table),
        ("2 sending/off drop ratio", sending_ratio),
        ("3 brownout cells", brownout_cells),
        ("4 powerline capacity", powerline_capacity),
        ("5 durability under brownouts", durability),
        ("6 OTA atomicity", ota_atomicity),
        ("7 controller efficacy", controller_efficacy),
        ("8 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
