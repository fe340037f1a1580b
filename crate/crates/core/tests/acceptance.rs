//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line each and exits non-zero if any fails.

use std::time::{Duration, Instant};

use edgeprov_core::allocator::{
    enumerate_candidates, evaluate_scheme, select_scheme, AllocatorConfig, QueueView, RequestContext, ResourceState,
};
use edgeprov_core::delay::{self, ChannelSpec, DelayBreakdown, UserRadio};
use edgeprov_core::domain::{
    Container, ContainerId, CpuInfo, DeviceId, EdgeDevice, EdgeNode, NodeId, Request, RequestId, ResourceKind,
    ResourceVector, Service, ServiceId, UserId,
};
use edgeprov_core::queueing::{queue_step, stability_check, virtual_queue_step, DEFAULT_STABILITY_EPS};
use edgeprov_core::realloc::{self, LoadParams, LoadSemantics};
use edgeprov_core::resource_repr::{
    from_xml, to_xml, CpuDescriptor, MemoryDescriptor, NetworkDescriptor, ReprError, ResourceDescriptor,
    StorageDescriptor,
};
use edgeprov_core::sim::{self, Metrics, Policy, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).min(items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    })
}

fn run(cfg: SimConfig) -> Metrics {
    sim::run(cfg).expect("simulation failed")
}

fn lrr_capacity(base: &SimConfig) -> f64 {
    sim::measure_capacity(base, Policy::Lrr, 2000).unwrap()
}

fn rel_close(got: f64, want: f64) -> bool {
    if want == 0.0 {
        got == 0.0
    } else {
        ((got - want) / want).abs() <= 1e-12
    }
}

/// Spearman correlation with average ranks for ties.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let base = SimConfig::default();
    let rate = 0.7 * lrr_capacity(&base);
    let seeds: Vec<u64> = (0..5).collect();
    let results = par_map(&seeds, |&seed| {
        let m = run(SimConfig {
            seed,
            slots: 10_000,
            arrival_rate: rate,
            ..base.clone()
        });
        let q = m.queue_series();
        let stable = stability_check(&q, DEFAULT_STABILITY_EPS);
        let tail_max = q[q.len() - 1000..].iter().copied().fold(0.0, f64::max);
        (stable, tail_max)
    });
    let elapsed = started.elapsed();
    let stable = results.iter().all(|r| r.0);
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    outcome(
        stable && worst <= 20.0 && elapsed < Duration::from_secs(30),
        format!(
            "lambda={rate:.3}/slot, stable on all seeds: {stable}, max Q in final 1000 slots: {worst}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let base = SimConfig::default();
    let rate = 0.7 * lrr_capacity(&base);
    let vs = [0.0, 1.0, 10.0, 50.0, 100.0];
    let runs: Vec<(f64, u64)> = vs.iter().flat_map(|&v| (0..10).map(move |s| (v, s))).collect();
    let results = par_map(&runs, |&(v, seed)| {
        let m = run(SimConfig {
            v,
            seed,
            slots: 5000,
            arrival_rate: rate,
            ..base.clone()
        });
        (m.summary.avg_queue, m.summary.avg_y0)
    });
    let mean = |i: usize, pick: fn(&(f64, f64)) -> f64| results[i * 10..(i + 1) * 10].iter().map(pick).sum::<f64>() / 10.0;
    let queue: Vec<f64> = (0..vs.len()).map(|i| mean(i, |r| r.0)).collect();
    let y0: Vec<f64> = (0..vs.len()).map(|i| mean(i, |r| r.1)).collect();
    let q_monotone = queue.windows(2).all(|w| w[1] >= w[0]);
    let y_monotone = y0.windows(2).all(|w| w[1] <= w[0]);
    let rho_q = spearman(&vs, &queue);
    let rho_y = spearman(&vs, &y0);
    let elapsed = started.elapsed();
    outcome(
        q_monotone && y_monotone && rho_q >= 0.9 && -rho_y >= 0.9 && elapsed < Duration::from_secs(120),
        format!(
            "avg_queue {queue:.3?} (rho {rho_q:.3}), avg_y0 {y0:.4?} (rho {rho_y:.3}), {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_3() -> Outcome {
    let base = SimConfig::default();
    let cap = lrr_capacity(&base);
    let mut traces: Vec<(f64, u64, u64)> = Vec::new();
    for load in [0.3, 0.7, 1.2] {
        for seed in 0..5 {
            traces.push((load * cap, seed, 2000));
        }
    }
    traces.push((0.02, 0, 1000));
    let results = par_map(&traces, |&(rate, seed, slots)| {
        let cfg = SimConfig {
            seed,
            slots,
            arrival_rate: rate,
            ..base.clone()
        };
        let lrr = run(SimConfig {
            policy: Policy::Lrr,
            ..cfg.clone()
        });
        let every = run(SimConfig {
            policy: Policy::EverySlot,
            ..cfg
        });
        (lrr.summary.arrivals, lrr.summary.reallocations, every.summary.reallocations)
    });
    let mut bad = Vec::new();
    for (i, &(arrivals, lrr, every)) in results.iter().enumerate() {
        let ok = if arrivals >= 100 { lrr < every } else { lrr <= every };
        if !ok {
            bad.push(format!("trace {i}: {lrr} vs {every} with {arrivals} requests"));
        }
    }
    let total_lrr: u64 = results.iter().map(|r| r.1).sum();
    let total_every: u64 = results.iter().map(|r| r.2).sum();
    outcome(
        bad.is_empty(),
        format!(
            "{} paired traces, reallocations lrr={total_lrr} every-slot={total_every}{}",
            results.len(),
            if bad.is_empty() { String::new() } else { format!(", violations: {bad:?}") }
        ),
    )
}

fn random_device(rng: &mut ChaCha8Rng, id: u32) -> EdgeDevice {
    let cores = rng.random_range(1..=4);
    let mut d = EdgeDevice::new(
        DeviceId(id),
        format!("ED{id}"),
        CpuInfo {
            family: "rand".into(),
            architecture: "x86_64".into(),
            cores,
            frequency_hz: rng.random_range(1_000u64..=3_000) * 1_000_000,
        },
        rng.random_range(1u64..=64) << 30,
        rng.random_range(1u64..=8) << 29,
        rng.random_range(100u64..=1000) * 1_000_000,
        rng.random_range(50u64..=500) * 1_000_000,
        rng.random_range(50u64..=500) * 1_000_000,
        rng.random_range(0.5e6..4.0e6) * f64::from(cores),
    )
    .unwrap();
    let used = ResourceVector::from_fn(|k| {
        let cap = d.capacity.get(k);
        let grain = if k == ResourceKind::Processing { d.processing_grain() } else { 1 };
        rng.random_range(0..=cap / grain / 2) * grain
    });
    if !used.is_zero() {
        d.create_container(Container {
            id: ContainerId(u64::from(id)),
            service: ServiceId(99),
            request: None,
            consumption: used,
            share: 1.0,
            created_at: 0,
        })
        .unwrap();
    }
    d
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    let mut mismatches = 0;
    let mut max_candidates = 0;
    while checked < 200 {
        let n = rng.random_range(1..=3);
        let devices: Vec<EdgeDevice> = (0..n).map(|i| random_device(&mut rng, i)).collect();
        let state = ResourceState::from_devices(&devices, 0).unwrap();
        let service = Service::new(
            ServiceId(0),
            "svc",
            ResourceVector::new(
                rng.random_range(1u64..=6) * 500_000_000,
                rng.random_range(0u64..=4) << 30,
                rng.random_range(1u64..=6) << 28,
                rng.random_range(0u64..=200) * 1_000_000,
            ),
        );
        let request = Request {
            id: RequestId(checked),
            user: UserId(0),
            data_size: rng.random_range(1.0e5..1.0e7),
            service: ServiceId(0),
            timeout: 1000,
            needs_read: rng.random_bool(0.5),
            needs_write: rng.random_bool(0.5),
            arrival_slot: 0,
        };
        let limit = rng.random_range(1..=8);
        let candidates = enumerate_candidates(&request, &service, &state, limit);
        if candidates.is_empty() {
            continue;
        }
        max_candidates = max_candidates.max(candidates.len());
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let p_avg: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let view = QueueView {
            backlog: rng.random_range(0.0..50.0),
            arrivals: f64::from(rng.random_range(0u32..5)),
            z: &z,
            p_avg: &p_avg,
        };
        let cfg = AllocatorConfig {
            v: rng.random_range(0.0..100.0),
            c: 0.0,
            candidate_limit: limit,
            slot_length: 1.0,
        };
        let ctx = RequestContext {
            request: &request,
            service: &service,
            transmission: rng.random_range(0.0..1.0),
            waited: 0.0,
        };
        let evals: Vec<_> = candidates
            .iter()
            .map(|s| evaluate_scheme(s, &ctx, &state, &cfg, &view).unwrap())
            .collect();
        let mut exhaustive = f64::INFINITY;
        for e in &evals {
            if e.objective < exhaustive {
                exhaustive = e.objective;
            }
        }
        let chosen = select_scheme(evals, 0.0).unwrap();
        if chosen.objective.to_bits() != exhaustive.to_bits() {
            mismatches += 1;
        }
        checked += 1;
    }
    outcome(
        mismatches == 0 && max_candidates <= 8,
        format!("{checked} instances, {mismatches} mismatches, at most {max_candidates} candidates"),
    )
}

fn criterion_5() -> Outcome {
    let channel = |own: f64, others: &[f64], bandwidth: f64| ChannelSpec {
        bandwidth,
        noise_variance: 1.0,
        users: std::iter::once(own)
            .chain(others.iter().copied())
            .map(|p| UserRadio { tx_power: p, gain: 1.0 })
            .collect(),
    };
    let rate_example = delay::link_rate(&channel(3.0, &[1.0], 10.0), 0, &[1]).unwrap();
    let checks: Vec<(&str, f64, f64)> = vec![
        ("processing 10/2", delay::local_processing_delay(10.0, 2.0).unwrap(), 5.0),
        ("processing zero work", delay::local_processing_delay(0.0, 2.0).unwrap(), 0.0),
        ("processing 2.5 GHz", delay::local_processing_delay(2.5e9, 2.5e9).unwrap(), 1.0),
        ("storage read+write", delay::storage_delay(100.0, 1, 1, 50.0, 100.0).unwrap(), 3.0),
        ("storage no io", delay::storage_delay(100.0, 0, 0, 50.0, 100.0).unwrap(), 0.0),
        ("storage read only", delay::storage_delay(100.0, 0, 1, 50.0, 25.0).unwrap(), 4.0),
        ("link snr 1", delay::link_rate(&channel(1.0, &[], 1.0), 0, &[]).unwrap(), 1.0),
        ("link silent", delay::link_rate(&channel(0.0, &[], 1.0), 0, &[]).unwrap(), 0.0),
        ("link with interferer", rate_example, 13.219280948873624),
        ("transmission 8/2", delay::transmission_delay(8.0, 2.0).unwrap(), 4.0),
        ("transmission empty", delay::transmission_delay(0.0, 2.0).unwrap(), 0.0),
        ("transmission 1e6 bits", delay::transmission_delay(1.0e6, rate_example).unwrap(), 75647.079736603),
        (
            "edge total",
            delay::edge_total_delay(&DelayBreakdown::new(1.0, 2.0, 3.0, 4.0).unwrap()).unwrap(),
            10.0,
        ),
    ];
    let failed: Vec<_> = checks
        .iter()
        .filter(|(_, got, want)| !rel_close(*got, *want))
        .map(|(name, got, want)| format!("{name}: {got} != {want}"))
        .collect();
    let errors_ok = delay::local_processing_delay(1.0, 0.0).is_err()
        && delay::transmission_delay(1.0, 0.0).is_err()
        && delay::storage_delay(1.0, 2, 0, 1.0, 1.0).is_err();
    outcome(
        failed.is_empty() && errors_ok,
        format!("{} closed-form examples, domain errors raised: {errors_ok}{}", checks.len(), if failed.is_empty() { String::new() } else { format!(", failed: {failed:?}") }),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut wrong = 0;
    for _ in 0..100_000 {
        let q = rng.random_range(0.0..1.0e6);
        let a = rng.random_range(0.0..1.0e3);
        let b = rng.random_range(0.0..1.0e3);
        let next = queue_step(q, a, b).unwrap();
        if next.to_bits() != (q - b + a).max(0.0).to_bits() || next < 0.0 {
            wrong += 1;
        }
    }
    let mut telescoping_broken = 0;
    for _ in 0..100 {
        let z0 = rng.random_range(0.0..10.0);
        let mut z = z0;
        let mut sum_y = 0.0;
        for _ in 0..rng.random_range(1..500) {
            let y = rng.random_range(-2.0..2.0);
            z = virtual_queue_step(z, y).unwrap();
            sum_y += y;
            if z < 0.0 || z - z0 < sum_y - 1e-9 * (1.0 + sum_y.abs()) {
                telescoping_broken += 1;
                break;
            }
        }
    }
    outcome(
        wrong == 0 && telescoping_broken == 0,
        format!("100000 queue steps, {wrong} wrong; 100 virtual traces, {telescoping_broken} telescoping violations"),
    )
}

fn random_descriptor(rng: &mut ChaCha8Rng, i: u32) -> ResourceDescriptor {
    let names = ["Intel Xeon", "ARM Cortex-A72", "AMD <EPYC> & co", "RISC-V \"U74\""];
    let mem = rng.random_range(0..u64::MAX / 2);
    let sto = rng.random_range(0..u64::MAX / 2);
    let net = rng.random_range(0..u64::MAX / 2);
    ResourceDescriptor {
        device: DeviceId(i),
        cpu: CpuDescriptor {
            family: names[rng.random_range(0..names.len())].into(),
            architecture: ["x86_64", "aarch64", "riscv64"][rng.random_range(0..3)].into(),
            cores: rng.random_range(1..=256),
            frequency_hz: rng.random_range(1..=5_000_000_000),
            usage: rng.random_range(0u64..=1_000_000) as f64 / 1e6,
        },
        memory: MemoryDescriptor {
            total: mem,
            available: rng.random_range(0..=mem),
        },
        storage: StorageDescriptor {
            total: sto,
            available: rng.random_range(0..=sto),
            read_speed: rng.random_range(1..u64::MAX / 2),
            write_speed: rng.random_range(1..u64::MAX / 2),
        },
        network: NetworkDescriptor {
            capacity: net,
            available: rng.random_range(0..=net),
        },
        taken_at: rng.random_range(0..u64::MAX / 2),
    }
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut broken = 0;
    for i in 0..1000 {
        let d = random_descriptor(&mut rng, i);
        if from_xml(&to_xml(&d)).as_ref() != Ok(&d) {
            broken += 1;
        }
    }
    let d = random_descriptor(&mut rng, 0);
    let xml = to_xml(&d);
    let start = xml.find("  <cpu>").unwrap();
    let end = xml.find("</cpu>\n").unwrap() + "</cpu>\n".len();
    let missing = from_xml(&format!("{}{}", &xml[..start], &xml[end..]));
    let mut over = d.clone();
    over.memory.available = over.memory.total + 1;
    let unchecked = to_xml(&over);
    let malformed = from_xml(&xml.replace("</memory>", "</memroy>"));
    let cases = [
        matches!(missing, Err(ReprError::MissingElement(_))),
        matches!(from_xml(&unchecked), Err(ReprError::Validation(_))),
        matches!(malformed, Err(ReprError::Parse { offset, .. }) if offset > 0),
    ];
    let malformed_ok = cases.iter().all(|&c| c);
    outcome(
        broken == 0 && malformed_ok,
        format!("1000 round trips, {broken} broken; malformed cases missing/invalid/unparsable: {cases:?}"),
    )
}

fn brute_force_fires(device: &EdgeDevice, params: &LoadParams) -> bool {
    let k = device.containers.len() as f64;
    ResourceKind::ALL.iter().any(|&kind| {
        let cap = device.capacity.get(kind) as f64;
        if cap <= 0.0 {
            return false;
        }
        let used: u64 = device.containers.iter().map(|c| c.consumption.get(kind)).sum();
        let residual = cap - used as f64;
        let current = match params.semantics {
            LoadSemantics::PaperVerbatim => residual,
            LoadSemantics::Consumed => cap - residual,
        };
        current > cap * params.rate_norm + params.rate_th * (1.0 - params.rate_norm) * k * cap
    })
}

fn criterion_8() -> Outcome {
    let exact = realloc::normal_load(10.0, 0.8).unwrap() == 8.0
        && realloc::normal_load(10.0, 0.0).unwrap() == 0.0
        && realloc::normal_load(10.0, 1.0).unwrap() == 10.0
        && realloc::normal_load(10.0, 1.5).is_err()
        && realloc::threshold(0.5, 0.8, 2, 10.0) == 2.0
        && realloc::threshold(0.5, 0.8, 0, 10.0) == 0.0
        && realloc::threshold(0.5, 1.0, 3, 10.0) == 0.0
        && realloc::should_reallocate(11.0, 8.0, 2.0)
        && !realloc::should_reallocate(10.0, 8.0, 2.0)
        && !realloc::should_reallocate(11.0, 8.0, 1e300);

    let mut workload_ok = true;
    let mut d = random_device(&mut ChaCha8Rng::seed_from_u64(80), 0);
    d.containers.clear();
    for kind in ResourceKind::ALL {
        workload_ok &= realloc::workload(&d, kind) == d.capacity.get(kind) as f64;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatched = 0;
    for n in 0..100 {
        let count = rng.random_range(1..=6);
        let mut devices: Vec<EdgeDevice> = (0..count).map(|i| random_device(&mut rng, i)).collect();
        for d in &mut devices {
            for extra in 0..rng.random_range(0..3u64) {
                let residual = d.residual().unwrap();
                let grain = d.processing_grain();
                let amounts = ResourceVector::from_fn(|k| {
                    let g = if k == ResourceKind::Processing { grain } else { 1 };
                    rng.random_range(0..=residual.get(k) / g) * g
                });
                d.create_container(Container {
                    id: ContainerId(1000 + extra),
                    service: ServiceId(0),
                    request: None,
                    consumption: amounts,
                    share: 1.0,
                    created_at: 0,
                })
                .unwrap();
            }
        }
        let node = EdgeNode::new(NodeId(n), devices).unwrap();
        let params = LoadParams {
            rate_norm: rng.random_range(0.0..=1.0),
            rate_th: rng.random_range(0.0..=1.0),
            semantics: if rng.random_bool(0.5) { LoadSemantics::Consumed } else { LoadSemantics::PaperVerbatim },
        };
        let fired = realloc::scan(&node, &params).unwrap();
        let oracle: Vec<DeviceId> = node
            .devices
            .iter()
            .filter(|d| brute_force_fires(d, &params))
            .map(|d| d.id)
            .collect();
        if fired != oracle {
            mismatched += 1;
        }
    }
    outcome(
        exact && workload_ok && mismatched == 0,
        format!("unit examples exact: {}, scan vs brute force on 100 nodes: {mismatched} mismatches", exact && workload_ok),
    )
}

fn criterion_9() -> Outcome {
    let base = SimConfig::default();
    let rate = 1.2 * lrr_capacity(&base);
    let seeds: Vec<u64> = (0..10).collect();
    let results = par_map(&seeds, |&seed| {
        let cfg = SimConfig {
            seed,
            slots: 3000,
            arrival_rate: rate,
            ..base.clone()
        };
        let lrr = run(SimConfig {
            policy: Policy::Lrr,
            ..cfg.clone()
        });
        let greedy = run(SimConfig {
            policy: Policy::GreedyMatch,
            ..cfg
        });
        (
            lrr.summary.avg_latency_s,
            greedy.summary.avg_latency_s,
            lrr.summary.avg_queue,
            greedy.summary.avg_queue,
        )
    });
    let n = results.len() as f64;
    let mean = |f: fn(&(f64, f64, f64, f64)) -> f64| results.iter().map(f).sum::<f64>() / n;
    let (lat_lrr, lat_greedy) = (mean(|r| r.0), mean(|r| r.1));
    let (q_lrr, q_greedy) = (mean(|r| r.2), mean(|r| r.3));
    let lat_exceptions = results.iter().filter(|r| r.0 > r.1).count();
    let q_exceptions = results.iter().filter(|r| r.2 > r.3).count();
    outcome(
        lat_lrr <= lat_greedy && q_lrr <= q_greedy && lat_exceptions <= 1 && q_exceptions <= 1,
        format!(
            "latency lrr {lat_lrr:.3}s vs greedy {lat_greedy:.3}s ({lat_exceptions} seed exceptions), \
             queue lrr {q_lrr:.3} vs greedy {q_greedy:.3} ({q_exceptions} seed exceptions)"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("queue stability", criterion_1),
        ("V tradeoff", criterion_2),
        ("reallocation frequency", criterion_3),
        ("allocator oracle", criterion_4),
        ("delay closed forms", criterion_5),
        ("queue update fuzz", criterion_6),
        ("XML codec", criterion_7),
        ("threshold policy", criterion_8),
        ("LRR vs greedy-match at 120% load", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        println!("{} criterion {} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
