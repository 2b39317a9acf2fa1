use powergap::scenario::{parse_scenario, ScenarioSpec};
use powergap::strategy::{DeviceAction, StrategyKind};
use powergap::suites::{GAP_REQUESTS, REFERENCE_WORKLOAD};
use powergap::track::TrackLayout;
use powergap::transport::DeliveryOutcome;
use powergap::world::{run_scenario, EventKind, ScenarioOutcome};

fn reference(kind: StrategyKind) -> ScenarioSpec {
    let mut spec = parse_scenario(REFERENCE_WORKLOAD).unwrap();
    spec.strategy.kind = Some(kind);
    spec
}

fn run(spec: &ScenarioSpec) -> ScenarioOutcome {
    run_scenario(spec).unwrap()
}

fn first_time(out: &ScenarioOutcome, kind: EventKind) -> Option<f64> {
    out.events.iter().find(|e| e.kind == kind).map(|e| e.time)
}

#[test]
fn stop_and_radio_drain_transcript() {
    let out = run(&reference(StrategyKind::StopAndRadio));
    let actions: Vec<DeviceAction> = out
        .actions
        .iter()
        .map(|(_, a)| *a)
        .filter(|a| *a != DeviceAction::Defer)
        .collect();
    let stop = actions
        .iter()
        .position(|a| matches!(a, DeviceAction::StopAt(_)))
        .expect("a drain stop");
    let off = stop
        + actions[stop..]
            .iter()
            .position(|a| *a == DeviceAction::RadioOff)
            .expect("radio switched off after draining");
    let cycle = &actions[stop..=off];
    assert!(cycle.len() >= 4, "{cycle:?}");
    assert_eq!(cycle[1], DeviceAction::RadioOn);
    assert_eq!(cycle[2], DeviceAction::StartTransmit);
    assert!(
        cycle[3..cycle.len() - 1]
            .iter()
            .all(|a| matches!(a, DeviceAction::StartTransmit | DeviceAction::StopTransmit)),
        "{cycle:?}"
    );
    if let DeviceAction::StopAt(pos) = cycle[0] {
        assert!(TrackLayout::reference().gap_at(pos).is_none());
    }
    assert_eq!(out.count(EventKind::Brownout), 0);
    assert!(out.metrics.delivered_records > 0);
}

#[test]
fn wireless_with_empty_queue_stays_idle() {
    let mut spec = reference(StrategyKind::WirelessContinuous);
    spec.workload.rate = 0.0;
    let out = run(&spec);
    assert!(out.radio_bursts.is_empty());
    assert_eq!(out.count(EventKind::TransmitStarted), 0);
    assert_eq!(out.count(EventKind::RadioConnected), 1);
    assert_eq!(out.count(EventKind::RadioOff), 0);
    assert!(!out
        .actions
        .iter()
        .any(|(_, a)| *a == DeviceAction::StartTransmit));
}

#[test]
fn save_and_print_later_waits_for_the_dock() {
    let mut spec = reference(StrategyKind::SaveAndPrintLater);
    spec.workload.until = Some(1.0);
    let out = run(&spec);
    let docked = first_time(&out, EventKind::Stopped).expect("car docks");
    assert!(out.radio_bursts.is_empty());
    assert!(out.slots.is_empty());
    assert_eq!(
        out.metrics.delivered_records, out.metrics.appended,
        "all records reach the host at the dock"
    );
    // Every record was produced before t = 1 s and none can leave before docking.
    assert!(docked > 1.0);
    assert!(out.metrics.min_latency >= docked - 1.0);
}

#[test]
fn wireless_latency_beats_save_and_print_later() {
    let wired = run(&reference(StrategyKind::SaveAndPrintLater)).metrics;
    let wireless = run(&reference(StrategyKind::WirelessContinuous)).metrics;
    assert!(wired.delivered_records > 0 && wireless.delivered_records > 0);
    assert!(
        wireless.median_latency < wired.median_latency,
        "{} vs {}",
        wireless.median_latency,
        wired.median_latency
    );
}

#[test]
fn powerline_flags_backlog_above_capacity() {
    // 10 records/s of 20 bytes is 1600 bit/s of payload alone.
    let mut spec = reference(StrategyKind::PowerlineContinuous);
    spec.workload.rate = 10.0;
    spec.workload.payload_size = 20;
    assert!(spec.workload.bytes_per_second() * 8.0 >= 1600.0);
    let out = run(&spec);
    assert!(out.metrics.backlog_growing);
    assert!(out.metrics.delivered_records > 0);
    assert!(out.unacked.len() > 100);

    spec.workload.rate = 1.0;
    let light = run(&spec);
    assert!(!light.metrics.backlog_growing);
}

#[test]
fn at_least_once_under_heavy_loss() {
    for loss in [0.1, 0.3, 0.5] {
        let mut spec = reference(StrategyKind::WirelessContinuous);
        spec.wireless.loss_rate = loss;
        spec.workload.until = Some(40.0);
        let out = run(&spec);
        assert!(!out.flushed.is_empty());
        for seq in &out.flushed {
            assert!(
                out.collector.contains(*seq),
                "loss {loss}: seq {seq} never acked"
            );
        }
        assert!(out.unacked.is_empty(), "loss {loss}: {:?}", out.unacked);
        assert_eq!(out.collector.conflicts, 0);
        let lost = out
            .radio_bursts
            .iter()
            .filter(|b| b.outcome == DeliveryOutcome::Lost)
            .count();
        assert!(lost > 0, "loss {loss}: the link never dropped a frame");
    }
}

#[test]
fn ranking_is_stable_under_doubled_payloads() {
    let ranking = |scale: usize| {
        let mut rows: Vec<(StrategyKind, f64, bool)> = StrategyKind::ALL
            .iter()
            .map(|&kind| {
                let mut spec = reference(kind);
                spec.workload.payload_size *= scale;
                let m = run(&spec).metrics;
                (kind, m.median_latency, m.backlog_growing)
            })
            .collect();
        rows.sort_by(|a, b| a.1.total_cmp(&b.1));
        rows
    };
    let single = ranking(1);
    let double = ranking(2);
    let saturated: Vec<StrategyKind> = single
        .iter()
        .chain(&double)
        .filter(|r| r.2)
        .map(|r| r.0)
        .collect();
    let order = |rows: &[(StrategyKind, f64, bool)]| -> Vec<StrategyKind> {
        rows.iter()
            .map(|r| r.0)
            .filter(|k| !saturated.contains(k))
            .collect()
    };
    assert!(order(&single).len() >= 3);
    assert_eq!(order(&single), order(&double));
}

#[test]
fn every_radio_burst_costs_one_frame_airtime() {
    let mut spec = parse_scenario(GAP_REQUESTS).unwrap();
    spec.sim.duration = 20.0;
    spec.requests.until = Some(19.0);
    for controller in [false, true] {
        spec.strategy.controller = controller;
        let out = run(&spec);
        assert!(!out.radio_bursts.is_empty());
        let airtime = spec.wireless.per_frame_airtime;
        for b in out.radio_bursts.iter().filter(|b| !b.aborted) {
            assert!(
                (b.end - b.start - airtime).abs() < 1e-9,
                "burst {:?} is not one frame long",
                b
            );
        }
    }
}

#[test]
fn budget_keeps_transmissions_out_of_gaps() {
    let layout = TrackLayout::reference();
    let mut specs = vec![parse_scenario(GAP_REQUESTS).unwrap()];
    let mut busy = reference(StrategyKind::WirelessContinuous);
    busy.energy = specs[0].energy.clone();
    busy.workload.rate = 20.0;
    specs.push(busy);
    for mut spec in specs {
        spec.strategy.controller = true;
        assert!(spec.budget.max_allowed_drop < spec.energy.brownout_drop);
        let out = run(&spec);
        assert_eq!(out.count(EventKind::Brownout), 0, "{}", spec.name);
        // Bursts may run into a gap only if the budget allows it, but none
        // may start strictly inside one.
        let speed = spec.car.speed;
        let start = spec.car.start_position;
        for b in &out.radio_bursts {
            let pos = layout.wrap(start + speed * b.start);
            let inside = layout
                .gaps()
                .iter()
                .any(|g| g.start + 1e-9 < pos && pos < g.end - 1e-9);
            assert!(!inside, "{}: burst at {:.4} s", spec.name, b.start);
        }
    }
}
