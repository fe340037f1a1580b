use edgeprov_core::delay::{self, BITS_PER_BYTE};
use edgeprov_core::domain::{DeviceId, Request, RequestId, ServiceId, UserId};
use edgeprov_core::queueing::{queue_step, stability_check, DEFAULT_STABILITY_EPS};
use edgeprov_core::sim::{self, BackgroundLoad, Metrics, Policy, SimConfig, Simulator};

fn cfg(policy: Policy, rate: f64, slots: u64, seed: u64) -> SimConfig {
    SimConfig {
        policy,
        arrival_rate: rate,
        slots,
        seed,
        ..SimConfig::default()
    }
}

fn request(id: u64, slot: u64, service: u32) -> Request {
    Request {
        id: RequestId(id),
        user: UserId(0),
        data_size: 3.0e6,
        service: ServiceId(service),
        timeout: 10,
        needs_read: true,
        needs_write: true,
        arrival_slot: slot,
    }
}

fn script(slots: usize, requests: Vec<Request>) -> Vec<Vec<Request>> {
    let mut batches = vec![Vec::new(); slots];
    for r in requests {
        batches[r.arrival_slot as usize].push(r);
    }
    batches
}

#[test]
fn single_request_matches_closed_form() {
    let config = SimConfig::default();
    let r = request(0, 0, 0);
    let m = Simulator::new(config.clone())
        .unwrap()
        .run_with(&script(10, vec![r.clone()]))
        .unwrap();
    assert_eq!(m.completed.len(), 1);
    let done = &m.completed[0];
    assert_eq!(done.devices, vec![DeviceId(0)]);

    let ed1 = &config.devices[0];
    let rate = delay::link_rate(&config.channel, 0, &[0]).unwrap();
    let transmission =
        delay::transmission_delay(r.data_size * (1.0 + config.response_fraction) * BITS_PER_BYTE, rate).unwrap();
    // the service asks for both cores of ED1
    let processing = delay::local_processing_delay(r.data_size, ed1.per_core_rate * 2.0).unwrap();
    let storage = delay::storage_delay(r.data_size, 1, 1, ed1.write_speed as f64, ed1.read_speed as f64).unwrap();
    let expected = transmission + storage + processing;
    assert_eq!(done.delay.waiting, 0.0);
    assert!(((done.delay.total() - expected) / expected).abs() <= 1e-12);
    assert!((m.summary.avg_latency_s - expected).abs() <= 1e-12 * expected);
}

#[test]
fn runs_are_deterministic() {
    for policy in Policy::ALL {
        let a = sim::run(cfg(policy, 1.5, 500, 11)).unwrap();
        let b = sim::run(cfg(policy, 1.5, 500, 11)).unwrap();
        assert_eq!(a, b, "{}", policy.as_str());
    }
}

fn replay(m: &Metrics) {
    let mut q = 0.0;
    for s in &m.slots {
        q = queue_step(q, s.arrivals as f64, s.services as f64).unwrap();
        assert_eq!(q, s.queue, "slot {}", s.slot);
    }
}

#[test]
fn queue_trace_replays_exactly() {
    for policy in Policy::ALL {
        let m = sim::run(cfg(policy, 2.5, 800, 3)).unwrap();
        replay(&m);
        let s = &m.summary;
        assert_eq!(s.completed + s.dropped + s.pending, s.arrivals);
    }
}

#[test]
fn virtual_queues_telescope() {
    let m = sim::run(cfg(Policy::Lrr, 2.0, 1000, 5)).unwrap();
    let n = m.slots[0].z.len();
    for k in 0..n {
        let mut sum_y = 0.0;
        for s in &m.slots {
            sum_y += s.y[k];
            assert!(s.z[k] >= sum_y - 1e-9 * (1.0 + sum_y.abs()));
        }
    }
}

#[test]
fn y0_stays_within_bounds() {
    let m = sim::run(cfg(Policy::Lrr, 4.0, 500, 2)).unwrap();
    assert!(m.slots.iter().all(|s| (0.0..=1.0).contains(&s.y0)));
    assert!(m.summary.avg_y0 > 0.0);
}

#[test]
fn sub_capacity_load_is_stable() {
    let base = SimConfig::default();
    let capacity = sim::measure_capacity(&base, Policy::Lrr, 1000).unwrap();
    let m = sim::run(cfg(Policy::Lrr, 0.5 * capacity, 10_000, 1)).unwrap();
    assert!(stability_check(&m.queue_series(), DEFAULT_STABILITY_EPS));
}

#[test]
fn every_slot_counts_busy_slots_and_matches_lrr_decisions() {
    let lrr = sim::run(cfg(Policy::Lrr, 1.5, 1000, 8)).unwrap();
    let every = sim::run(cfg(Policy::EverySlot, 1.5, 1000, 8)).unwrap();
    let mut busy = 0;
    let mut waiting_before = 0;
    for s in &every.slots {
        if s.arrivals > 0 || waiting_before > 0 {
            busy += 1;
        }
        waiting_before = s.waiting;
    }
    assert_eq!(every.summary.reallocations, busy);
    assert_eq!(lrr.completed, every.completed);
    assert_eq!(lrr.queue_series(), every.queue_series());
    assert!(lrr.summary.reallocations < every.summary.reallocations);
}

#[test]
fn lyapunov_only_equals_lrr_without_background() {
    let lrr = sim::run(cfg(Policy::Lrr, 2.0, 800, 4)).unwrap();
    let only = sim::run(cfg(Policy::LyapunovOnly, 2.0, 800, 4)).unwrap();
    assert_eq!(lrr.completed, only.completed);
    assert_eq!(lrr.queue_series(), only.queue_series());
    assert_eq!(lrr.y0_series(), only.y0_series());
    assert_eq!(only.summary.refreshes, 0);
}

#[test]
fn lyapunov_only_overcommits_under_background_load() {
    // ED1's CPU is taken by something the supervisor did not place
    let background = vec![BackgroundLoad {
        device: 0,
        start: 1,
        end: 12,
        processing: 5_000_000_000,
        storage: 0,
        memory: 0,
        networking: 0,
    }];
    let arrivals = script(20, vec![request(0, 3, 1), request(1, 4, 1)]);
    let run = |policy| {
        let config = SimConfig {
            policy,
            background: background.clone(),
            ..SimConfig::default()
        };
        Simulator::new(config).unwrap().run_with(&arrivals).unwrap()
    };
    let lrr = run(Policy::Lrr);
    let only = run(Policy::LyapunovOnly);
    assert_eq!(lrr.summary.overcommit_attempts, 0);
    assert!(only.summary.overcommit_attempts > 0);
    assert!(lrr.completed.iter().all(|c| c.devices != vec![DeviceId(0)]));
    // the stale view keeps pointing at ED1 until the requests time out
    assert_eq!(lrr.summary.completed, 2);
    assert!(only.summary.completed < lrr.summary.completed);
}

#[test]
fn greedy_prefers_most_processing_and_ignores_v() {
    let arrivals = script(5, vec![request(0, 0, 1)]);
    let greedy = |v| {
        let config = SimConfig {
            policy: Policy::GreedyMatch,
            v,
            ..SimConfig::default()
        };
        Simulator::new(config).unwrap().run_with(&arrivals).unwrap()
    };
    assert_eq!(greedy(0.0).completed[0].devices, vec![DeviceId(1)]);

    let a = sim::run(SimConfig { v: 0.0, ..cfg(Policy::GreedyMatch, 2.0, 500, 6) }).unwrap();
    let b = sim::run(SimConfig { v: 100.0, ..cfg(Policy::GreedyMatch, 2.0, 500, 6) }).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_service_is_a_configuration_error() {
    let arrivals = script(2, vec![request(0, 0, 42)]);
    assert!(Simulator::new(SimConfig::default()).unwrap().run_with(&arrivals).is_err());
}

#[test]
fn requests_past_their_timeout_are_dropped() {
    // analyze fits on no single device and the node is busy with it already
    let mut reqs = vec![request(0, 0, 2)];
    for i in 1..6 {
        let mut r = request(i, 0, 2);
        r.timeout = 1;
        reqs.push(r);
    }
    let m = Simulator::new(SimConfig::default())
        .unwrap()
        .run_with(&script(10, reqs))
        .unwrap();
    assert!(m.summary.dropped >= 1);
    assert_eq!(m.summary.completed + m.summary.dropped + m.summary.pending, 6);
}
