//! Discrete-time simulation of one edge node.
//!
//! Every slot runs, in order:
//!
//! 1. background consumption changes, then the refresh step of the policy
//! 2. admission: queued requests first (FIFO), then this slot's arrivals
//! 3. completion of requests whose last service slot is this one
//! 4. timeout drops among requests still waiting
//! 5. queue update with `a` = arrivals and `b` = completions + drops, and the
//!    virtual queues with the penalties observed after admission

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::allocator::{
    self, AllocationScheme, AllocatorConfig, Decision, Evaluation, Placement, QueueView, RequestContext,
    ResourceState,
};
use crate::delay::{self, ChannelSpec, DelayBreakdown, UserRadio, BITS_PER_BYTE};
use crate::domain::{
    Container, ContainerId, CpuInfo, DeviceId, EdgeDevice, EdgeNode, NodeId, Request, RequestId, ResourceKind,
    ResourceVector, Service, ServiceId, UserId,
};
use crate::error::{Error, Result};
use crate::queueing::{self, PenaltyBounds, QueueState, VirtualQueueState};
use crate::realloc::{self, LoadParams, LoadSemantics};
use crate::resource_repr::{self, Registry};

const GIB: u64 = 1 << 30;
const MB: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Threshold-triggered refresh, drift-plus-penalty placement.
    #[default]
    Lrr,
    /// Same placement and trigger, but the supervisor only ever knows the
    /// static capacities minus its own placements.
    LyapunovOnly,
    /// Refresh every device and recompute in every busy slot.
    EverySlot,
    /// Whole request to the device with most residual processing.
    GreedyMatch,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Lrr, Policy::LyapunovOnly, Policy::EverySlot, Policy::GreedyMatch];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Lrr => "lrr",
            Policy::LyapunovOnly => "lyapunov-only",
            Policy::EverySlot => "every-slot",
            Policy::GreedyMatch => "greedy-match",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown policy `{s}` (lrr, lyapunov-only, every-slot, greedy-match)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceSpec {
    pub name: String,
    pub family: String,
    pub architecture: String,
    pub cores: u32,
    pub frequency_hz: u64,
    /// bytes
    pub memory: u64,
    /// bytes
    pub storage: u64,
    /// bits/s
    pub networking: u64,
    /// bytes/s
    pub read_speed: u64,
    /// bytes/s
    pub write_speed: u64,
    /// bytes/s processed by one core
    pub per_core_rate: f64,
}

impl Default for DeviceSpec {
    fn default() -> Self {
        Self {
            name: "ED".into(),
            family: "Intel Core".into(),
            architecture: "x86_64".into(),
            cores: 2,
            frequency_hz: 2_500_000_000,
            memory: 2 * GIB,
            storage: 20 * GIB,
            networking: 1_000 * MB,
            read_speed: 200 * MB,
            write_speed: 100 * MB,
            per_core_rate: 1_000_000.0,
        }
    }
}

impl DeviceSpec {
    pub fn build(&self, id: DeviceId) -> Result<EdgeDevice> {
        EdgeDevice::new(
            id,
            self.name.clone(),
            CpuInfo {
                family: self.family.clone(),
                architecture: self.architecture.clone(),
                cores: self.cores,
                frequency_hz: self.frequency_hz,
            },
            self.storage,
            self.memory,
            self.networking,
            self.write_speed,
            self.read_speed,
            self.per_core_rate * f64::from(self.cores),
        )
    }
}

/// The three devices of the reference testbed.
pub fn table2_devices() -> Vec<DeviceSpec> {
    vec![
        DeviceSpec {
            name: "ED1".into(),
            cores: 2,
            memory: 2 * GIB,
            storage: 20 * GIB,
            read_speed: 150 * MB,
            write_speed: 80 * MB,
            ..DeviceSpec::default()
        },
        DeviceSpec {
            name: "ED2".into(),
            cores: 4,
            memory: 2 * GIB,
            storage: 30 * GIB,
            read_speed: 500 * MB,
            write_speed: 300 * MB,
            ..DeviceSpec::default()
        },
        DeviceSpec {
            name: "ED3".into(),
            cores: 2,
            memory: 4 * GIB,
            storage: 20 * GIB,
            read_speed: 200 * MB,
            write_speed: 100 * MB,
            ..DeviceSpec::default()
        },
    ]
}

/// Named device presets.
pub fn presets() -> Vec<(&'static str, Vec<DeviceSpec>)> {
    vec![("table2", table2_devices())]
}

pub fn preset(name: &str) -> Option<Vec<DeviceSpec>> {
    presets().into_iter().find(|(n, _)| *n == name).map(|(_, d)| d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceSpec {
    pub name: String,
    /// Hz
    pub processing: u64,
    /// bytes
    pub storage: u64,
    /// bytes
    pub memory: u64,
    /// bits/s
    pub networking: u64,
    /// Relative frequency among arrivals.
    pub weight: f64,
}

impl Default for ServiceSpec {
    fn default() -> Self {
        Self {
            name: "service".into(),
            processing: 2_500_000_000,
            storage: GIB,
            memory: GIB / 2,
            networking: 20 * MB,
            weight: 1.0,
        }
    }
}

impl ServiceSpec {
    pub fn build(&self, id: ServiceId) -> Result<Service> {
        let svc = Service::new(
            id,
            self.name.clone(),
            ResourceVector::new(self.processing, self.storage, self.memory, self.networking),
        );
        svc.validate()?;
        Ok(svc)
    }
}

pub fn default_services() -> Vec<ServiceSpec> {
    vec![
        ServiceSpec {
            name: "detect".into(),
            processing: 5_000_000_000,
            storage: GIB,
            memory: GIB / 2,
            networking: 50 * MB,
            weight: 1.0,
        },
        ServiceSpec {
            name: "recognize".into(),
            processing: 2_500_000_000,
            storage: 2 * GIB,
            memory: GIB,
            networking: 20 * MB,
            weight: 1.0,
        },
        ServiceSpec {
            name: "analyze".into(),
            processing: 7_500_000_000,
            storage: 4 * GIB,
            memory: 5 * GIB / 2,
            networking: 100 * MB,
            weight: 0.25,
        },
    ]
}

/// Distributions of request attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    /// bytes, uniform in `[data_size_min, data_size_max]`
    pub data_size_min: f64,
    pub data_size_max: f64,
    /// slots, uniform in `[timeout_min, timeout_max]`
    pub timeout_min: u32,
    pub timeout_max: u32,
    pub read_probability: f64,
    pub write_probability: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            data_size_min: 2.0e6,
            data_size_max: 4.0e6,
            timeout_min: 10,
            timeout_max: 20,
            read_probability: 0.5,
            write_probability: 0.5,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("workload: {m}")));
        if !(self.data_size_min > 0.0 && self.data_size_min <= self.data_size_max && self.data_size_max.is_finite()) {
            return bad("need 0 < data_size_min <= data_size_max");
        }
        if self.timeout_min == 0 || self.timeout_min > self.timeout_max {
            return bad("need 0 < timeout_min <= timeout_max");
        }
        for (name, p) in [("read_probability", self.read_probability), ("write_probability", self.write_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("workload: {name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn mean_timeout(&self) -> f64 {
        (f64::from(self.timeout_min) + f64::from(self.timeout_max)) / 2.0
    }
}

/// Eight users at increasing distance from the node.
pub fn default_channel() -> ChannelSpec {
    ChannelSpec {
        bandwidth: 20.0e6,
        noise_variance: 1.0e-9,
        users: (0..8)
            .map(|i| UserRadio {
                tx_power: 0.2,
                gain: 2.0e-3 / (1.0 + 0.25 * f64::from(i)),
            })
            .collect(),
    }
}

/// Consumption not caused by the supervisor, present on `device` during slots
/// `start..end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundLoad {
    /// Index into the device list.
    pub device: usize,
    pub start: u64,
    pub end: u64,
    #[serde(default)]
    pub processing: u64,
    #[serde(default)]
    pub storage: u64,
    #[serde(default)]
    pub memory: u64,
    #[serde(default)]
    pub networking: u64,
}

impl BackgroundLoad {
    fn amounts(&self) -> ResourceVector {
        ResourceVector::new(self.processing, self.storage, self.memory, self.networking)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub slots: u64,
    pub seed: u64,
    /// requests per slot
    pub arrival_rate: f64,
    pub v: f64,
    pub rate_norm: f64,
    pub rate_th: f64,
    /// seconds
    pub slot_length: f64,
    pub devices: Vec<DeviceSpec>,
    pub services: Vec<ServiceSpec>,
    pub workload: WorkloadSpec,
    pub channel: ChannelSpec,
    pub policy: Policy,
    pub candidate_limit: usize,
    pub c: f64,
    /// Size of the returned result relative to the uploaded data.
    pub response_fraction: f64,
    pub load_semantics: LoadSemantics,
    /// Resource loss budget of every device, mean allocated fraction.
    pub p_avg: f64,
    /// Backlog bound for the tail violation rate; the mean timeout when unset.
    pub tail_bound: Option<f64>,
    pub max_age: u64,
    pub background: Vec<BackgroundLoad>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            slots: 1000,
            seed: 0,
            arrival_rate: 1.0,
            v: 10.0,
            rate_norm: 0.8,
            rate_th: 0.5,
            slot_length: 1.0,
            devices: table2_devices(),
            services: default_services(),
            workload: WorkloadSpec::default(),
            channel: default_channel(),
            policy: Policy::Lrr,
            candidate_limit: 8,
            c: 0.0,
            response_fraction: 0.05,
            load_semantics: LoadSemantics::Consumed,
            p_avg: 0.5,
            tail_bound: None,
            max_age: resource_repr::DEFAULT_MAX_AGE,
            background: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.slots == 0 {
            return bad("slots must be at least 1".into());
        }
        if !(self.arrival_rate.is_finite() && self.arrival_rate >= 0.0) {
            return bad(format!("arrival_rate must be non-negative, got {}", self.arrival_rate));
        }
        if !(self.v.is_finite() && self.v >= 0.0) {
            return bad(format!("v must be non-negative, got {}", self.v));
        }
        if !(self.c.is_finite() && self.c >= 0.0) {
            return bad(format!("c must be non-negative, got {}", self.c));
        }
        if !(self.slot_length.is_finite() && self.slot_length > 0.0) {
            return bad("slot_length must be positive".into());
        }
        if !(self.p_avg.is_finite() && self.p_avg >= 0.0) {
            return bad("p_avg must be non-negative".into());
        }
        if !(self.response_fraction.is_finite() && self.response_fraction >= 0.0) {
            return bad("response_fraction must be non-negative".into());
        }
        if self.candidate_limit == 0 {
            return bad("candidate_limit must be at least 1".into());
        }
        if self.devices.is_empty() {
            return bad("at least one device required".into());
        }
        if self.services.is_empty() {
            return bad("at least one service required".into());
        }
        if self.services.iter().any(|s| !(s.weight.is_finite() && s.weight >= 0.0))
            || self.services.iter().all(|s| s.weight == 0.0)
        {
            return bad("service weights must be non-negative with a positive total".into());
        }
        if self.channel.users.is_empty() {
            return bad("channel needs at least one user".into());
        }
        if let Some(b) = self.tail_bound {
            if !(b.is_finite() && b >= 0.0) {
                return bad("tail_bound must be non-negative".into());
            }
        }
        for bg in &self.background {
            if bg.device >= self.devices.len() {
                return bad(format!("background load on unknown device index {}", bg.device));
            }
        }
        self.load_params().validate()?;
        self.channel.validate()?;
        self.workload.validate()?;
        self.build_devices()?;
        self.build_services()?;
        Ok(())
    }

    pub fn load_params(&self) -> LoadParams {
        LoadParams {
            rate_norm: self.rate_norm,
            rate_th: self.rate_th,
            semantics: self.load_semantics,
        }
    }

    pub fn allocator_config(&self) -> AllocatorConfig {
        AllocatorConfig {
            v: self.v,
            c: self.c,
            candidate_limit: self.candidate_limit,
            slot_length: self.slot_length,
        }
    }

    pub fn build_devices(&self) -> Result<Vec<EdgeDevice>> {
        self.devices
            .iter()
            .enumerate()
            .map(|(i, d)| d.build(DeviceId(i as u32)))
            .collect()
    }

    pub fn build_services(&self) -> Result<Vec<Service>> {
        self.services
            .iter()
            .enumerate()
            .map(|(i, s)| s.build(ServiceId(i as u32)))
            .collect()
    }

    pub fn tail_bound(&self) -> f64 {
        self.tail_bound.unwrap_or_else(|| self.workload.mean_timeout())
    }
}

/// Poisson arrival counts with mean `rate` per slot; attributes drawn from
/// `workload`. Request ids are sequential from 0.
pub fn generate_arrivals(
    rate: f64,
    seed: u64,
    slots: u64,
    workload: &WorkloadSpec,
    service_weights: &[f64],
    users: usize,
) -> Result<Vec<Vec<Request>>> {
    if !(rate.is_finite() && rate >= 0.0) {
        return Err(Error::Config(format!("arrival rate must be non-negative, got {rate}")));
    }
    workload.validate()?;
    let total_weight: f64 = service_weights.iter().sum();
    if users == 0 || service_weights.is_empty() || total_weight <= 0.0 {
        return Err(Error::Config("arrivals need users and a positive service weight".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = if rate > 0.0 {
        Some(Poisson::new(rate).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut next_id = 0u64;
    let mut out = Vec::with_capacity(slots as usize);
    for slot in 0..slots {
        let n = counts.as_ref().map_or(0, |p| p.sample(&mut rng) as u64);
        let mut batch = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let mut pick = rng.random::<f64>() * total_weight;
            let mut service = service_weights.len() - 1;
            for (i, w) in service_weights.iter().enumerate() {
                if pick < *w {
                    service = i;
                    break;
                }
                pick -= w;
            }
            batch.push(Request {
                id: RequestId(next_id),
                user: UserId(rng.random_range(0..users) as u32),
                data_size: rng.random_range(workload.data_size_min..=workload.data_size_max),
                service: ServiceId(service as u32),
                timeout: rng.random_range(workload.timeout_min..=workload.timeout_max),
                needs_read: rng.random_bool(workload.read_probability),
                needs_write: rng.random_bool(workload.write_probability),
                arrival_slot: slot,
            });
            next_id += 1;
        }
        out.push(batch);
    }
    Ok(out)
}

/// One row of the per-slot trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotRecord {
    pub slot: u64,
    /// Backlog at the start of the slot plus this slot's arrivals.
    pub backlog_before: f64,
    /// Backlog after the queue update.
    pub queue: f64,
    pub arrivals: u64,
    /// Completions plus drops.
    pub services: u64,
    pub completed: u64,
    pub dropped: u64,
    /// Requests still waiting for resources at the end of the slot.
    pub waiting: u64,
    pub y0: f64,
    pub reallocation: bool,
    pub refreshed: u64,
    /// `[device][kind]`, allocated fraction.
    pub utilization: Vec<[f64; 4]>,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletedRequest {
    pub id: RequestId,
    pub arrival_slot: u64,
    pub start_slot: u64,
    pub finish_slot: u64,
    pub devices: Vec<DeviceId>,
    pub delay: DelayBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub arrivals: u64,
    pub completed: u64,
    pub dropped: u64,
    /// Requests still queued or in service at the end of the run.
    pub pending: u64,
    pub avg_latency_s: f64,
    pub avg_queue: f64,
    pub max_queue: f64,
    pub tail_violation: f64,
    pub reallocations: u64,
    pub refreshes: u64,
    pub avg_y0: f64,
    pub split_placements: u64,
    pub overcommit_attempts: u64,
    /// `[device][kind]`, time-averaged allocated fraction.
    pub utilization: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub slots: Vec<SlotRecord>,
    pub completed: Vec<CompletedRequest>,
    pub summary: Summary,
}

impl Metrics {
    pub fn queue_series(&self) -> Vec<f64> {
        self.slots.iter().map(|s| s.queue).collect()
    }

    pub fn y0_series(&self) -> Vec<f64> {
        self.slots.iter().map(|s| s.y0).collect()
    }
}

#[derive(Debug)]
struct Waiting {
    request: Request,
    transmission: f64,
}

#[derive(Debug)]
struct Running {
    request: Request,
    start_slot: u64,
    finish_slot: u64,
    containers: Vec<(DeviceId, ContainerId)>,
    placements: Vec<Placement>,
    delay: DelayBreakdown,
}

/// State of one simulation run.
pub struct Simulator {
    cfg: SimConfig,
    node: EdgeNode,
    services: Vec<Service>,
    beta: ResourceState,
    queue: QueueState,
    z: VirtualQueueState,
    p_avg: Vec<f64>,
    bounds: PenaltyBounds,
    total_capacity: ResourceVector,
    waiting: VecDeque<Waiting>,
    running: Vec<Running>,
    background: Vec<Option<(DeviceId, ContainerId)>>,
    next_container: u64,
    metrics: Metrics,
}

fn utilization_of(device: &EdgeDevice) -> [f64; 4] {
    let used = device.consumption();
    ResourceKind::ALL.map(|k| used.fraction_of(&device.capacity, k))
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let devices = cfg.build_devices()?;
        let services = cfg.build_services()?;
        let mut node = EdgeNode::new(NodeId(0), devices)?;
        node.registry = Registry::with_max_age(cfg.max_age);
        for d in &node.devices {
            node.registry.register(d, 0)?;
        }
        let beta = match cfg.policy {
            Policy::LyapunovOnly => ResourceState::from_capacities(&node.devices),
            _ => ResourceState::from_registry(&node.registry, &node.devices)?,
        };
        let n = node.devices.len();
        Ok(Self {
            bounds: PenaltyBounds { min: 0.0, max: 1.0 },
            total_capacity: node.devices.iter().map(|d| &d.capacity).sum(),
            p_avg: vec![cfg.p_avg; n],
            queue: QueueState::new(0.0)?,
            z: VirtualQueueState::new(n),
            background: vec![None; cfg.background.len()],
            waiting: VecDeque::new(),
            running: Vec::new(),
            next_container: 0,
            metrics: Metrics {
                slots: Vec::with_capacity(cfg.slots as usize),
                completed: Vec::new(),
                summary: Summary {
                    arrivals: 0,
                    completed: 0,
                    dropped: 0,
                    pending: 0,
                    avg_latency_s: 0.0,
                    avg_queue: 0.0,
                    max_queue: 0.0,
                    tail_violation: 0.0,
                    reallocations: 0,
                    refreshes: 0,
                    avg_y0: 0.0,
                    split_placements: 0,
                    overcommit_attempts: 0,
                    utilization: vec![[0.0; 4]; n],
                },
            },
            beta,
            node,
            services,
            cfg,
        })
    }

    fn service(&self, id: ServiceId) -> Result<&Service> {
        self.services
            .get(id.0 as usize)
            .filter(|s| s.id == id)
            .ok_or(Error::UnknownService(id))
    }

    fn invariant(slot: u64, what: impl Into<String>) -> Error {
        Error::Invariant { slot, what: what.into() }
    }

    /// Starts and stops background consumption scheduled for `slot`. A load
    /// that does not fit when it is due is skipped.
    fn apply_background(&mut self, slot: u64) -> Result<()> {
        for (i, bg) in self.cfg.background.iter().enumerate() {
            if bg.end == slot {
                if let Some((device, id)) = self.background[i].take() {
                    self.node.device_mut(device)?.destroy_container(id)?;
                }
            }
            if bg.start == slot && bg.end > slot {
                let device = DeviceId(bg.device as u32);
                let dev = self.node.device_mut(device)?;
                if dev.can_host(&bg.amounts()) {
                    let id = ContainerId(self.next_container);
                    self.next_container += 1;
                    dev.create_container(Container {
                        id,
                        service: ServiceId(u32::MAX),
                        request: None,
                        consumption: bg.amounts(),
                        share: 1.0,
                        created_at: slot,
                    })?;
                    self.background[i] = Some((device, id));
                }
            }
        }
        Ok(())
    }

    fn refresh(&mut self, devices: &[DeviceId], slot: u64) -> Result<()> {
        for &id in devices {
            let idx = self.node.device_index(id).ok_or(Error::UnknownDevice(id))?;
            let desc = resource_repr::supervisor_query(&mut self.node.registry, &self.node.devices[idx], slot)?;
            self.beta.refresh_from(&desc)?;
        }
        self.metrics.summary.refreshes += devices.len() as u64;
        Ok(())
    }

    /// Refresh step; returns (reallocation event, devices refreshed).
    fn refresh_step(&mut self, slot: u64, busy: bool) -> Result<(bool, u64)> {
        match self.cfg.policy {
            Policy::Lrr | Policy::LyapunovOnly => {
                let fired = realloc::scan(&self.node, &self.cfg.load_params())?;
                let refreshed = if self.cfg.policy == Policy::Lrr && !fired.is_empty() {
                    self.refresh(&fired, slot)?;
                    fired.len() as u64
                } else {
                    0
                };
                Ok((busy && !fired.is_empty(), refreshed))
            }
            Policy::EverySlot | Policy::GreedyMatch => {
                if !busy {
                    return Ok((false, 0));
                }
                let all: Vec<DeviceId> = self.node.devices.iter().map(|d| d.id).collect();
                self.refresh(&all, slot)?;
                Ok((true, all.len() as u64))
            }
        }
    }

    fn transmission(&self, request: &Request, active_users: &[usize]) -> Result<f64> {
        let rate = delay::link_rate(&self.cfg.channel, request.user.0 as usize, active_users)?;
        let bits = request.data_size * (1.0 + self.cfg.response_fraction) * BITS_PER_BYTE;
        Ok(delay::transmission_delay(bits, rate)?)
    }

    fn greedy_decision(
        &self,
        ctx: &RequestContext<'_>,
        cfg: &AllocatorConfig,
        view: &QueueView<'_>,
    ) -> Result<Option<Evaluation>> {
        let best = self
            .beta
            .devices
            .iter()
            .filter(|d| allocator::scale_amounts(&ctx.service.amounts, 1.0, d.processing_grain()).fits_within(&d.residual))
            .min_by(|a, b| b.residual.processing.cmp(&a.residual.processing).then(a.id.cmp(&b.id)));
        let Some(dev) = best else { return Ok(None) };
        let scheme = AllocationScheme {
            request: ctx.request.id,
            placements: vec![Placement {
                device: dev.id,
                share: 1.0,
                amounts: allocator::scale_amounts(&ctx.service.amounts, 1.0, dev.processing_grain()),
            }],
        };
        allocator::evaluate_scheme(&scheme, ctx, &self.beta, cfg, view).map(Some)
    }

    /// Tries to start `entry`; gives it back when it stays queued.
    fn admit(&mut self, entry: Waiting, slot: u64, arrivals: f64) -> Result<Option<Waiting>> {
        let service = self.service(entry.request.service)?.clone();
        let cfg = self.cfg.allocator_config();
        let ctx = RequestContext {
            request: &entry.request,
            service: &service,
            transmission: entry.transmission,
            waited: (slot - entry.request.arrival_slot) as f64 * self.cfg.slot_length,
        };
        let view = QueueView {
            backlog: self.queue.backlog(),
            arrivals,
            z: self.z.values(),
            p_avg: &self.p_avg,
        };
        let eval = match self.cfg.policy {
            Policy::GreedyMatch => self.greedy_decision(&ctx, &cfg, &view)?,
            _ => match allocator::lrr_handle_request(&ctx, &self.beta, &cfg, &view)? {
                Decision::Direct(e) | Decision::Scheduled(e) => Some(e),
                Decision::Deferred => None,
            },
        };
        let Some(eval) = eval else { return Ok(Some(entry)) };

        let containers =
            match allocator::instantiate(&eval.scheme, &service, &mut self.node, slot, &mut self.next_container) {
                Ok(c) => c,
                Err(Error::WouldExceedCapacity { .. }) => {
                    self.metrics.summary.overcommit_attempts += 1;
                    return Ok(Some(entry));
                }
                Err(e) => return Err(e),
            };
        self.beta.reserve(&eval.scheme)?;
        if eval.scheme.placements.len() > 1 {
            self.metrics.summary.split_placements += 1;
        }
        self.running.push(Running {
            start_slot: slot,
            finish_slot: slot + eval.holding_slots - 1,
            containers,
            placements: eval.scheme.placements,
            delay: eval.delay,
            request: entry.request,
        });
        Ok(None)
    }

    fn step(&mut self, slot: u64, batch: &[Request]) -> Result<()> {
        let arrivals = batch.len() as u64;
        let backlog_before = self.queue.backlog() + arrivals as f64;
        self.apply_background(slot)?;
        let busy = !self.waiting.is_empty() || arrivals > 0;
        let (reallocation, refreshed) = self.refresh_step(slot, busy)?;

        let mut active: Vec<usize> = batch.iter().map(|r| r.user.0 as usize).collect();
        active.sort_unstable();
        active.dedup();
        let mut fresh = Vec::with_capacity(batch.len());
        for r in batch {
            self.service(r.service)?;
            fresh.push(Waiting {
                transmission: self.transmission(r, &active)?,
                request: r.clone(),
            });
        }

        let mut still_waiting = VecDeque::with_capacity(self.waiting.len() + fresh.len());
        let queued: Vec<Waiting> = self.waiting.drain(..).chain(fresh).collect();
        for entry in queued {
            if let Some(back) = self.admit(entry, slot, arrivals as f64)? {
                still_waiting.push_back(back);
            }
        }
        self.waiting = still_waiting;

        // penalties while this slot's containers are held
        let mut utilization = Vec::with_capacity(self.node.devices.len());
        let mut y = Vec::with_capacity(self.node.devices.len());
        let mut used = ResourceVector::ZERO;
        for (d, p_avg) in self.node.devices.iter().zip(&self.p_avg) {
            if !d.validate_capacity() {
                return Err(Self::invariant(slot, format!("capacity exceeded on device {}", d.id)));
            }
            let consumption = d.consumption();
            let loss = consumption.mean_fraction_of(&d.capacity);
            used = used + consumption;
            y.push(queueing::penalty(loss, *p_avg));
            utilization.push(utilization_of(d));
        }
        let y0 = used.mean_fraction_of(&self.total_capacity);
        if !self.bounds.contains(y0) {
            return Err(Self::invariant(slot, format!("y0 = {y0} outside its bounds")));
        }

        let mut completed = 0u64;
        let mut i = 0;
        while i < self.running.len() {
            if self.running[i].finish_slot != slot {
                i += 1;
                continue;
            }
            let run = self.running.swap_remove(i);
            allocator::complete_subtasks(&run.containers, &mut self.node)?;
            for p in &run.placements {
                self.beta.release(p.device, &p.amounts)?;
            }
            self.metrics.completed.push(CompletedRequest {
                id: run.request.id,
                arrival_slot: run.request.arrival_slot,
                start_slot: run.start_slot,
                finish_slot: run.finish_slot,
                devices: run.placements.iter().map(|p| p.device).collect(),
                delay: run.delay,
            });
            completed += 1;
        }

        let before = self.waiting.len();
        self.waiting
            .retain(|w| slot + 1 - w.request.arrival_slot < u64::from(w.request.timeout));
        let dropped = (before - self.waiting.len()) as u64;

        let services = completed + dropped;
        let q = self.queue.step(arrivals as f64, services as f64)?;
        self.z.step(&y)?;
        let in_system = (self.waiting.len() + self.running.len()) as f64;
        if q != in_system {
            return Err(Self::invariant(slot, format!("queue {q} but {in_system} requests held")));
        }

        let s = &mut self.metrics.summary;
        s.arrivals += arrivals;
        s.completed += completed;
        s.dropped += dropped;
        if reallocation {
            s.reallocations += 1;
        }
        self.metrics.slots.push(SlotRecord {
            slot,
            backlog_before,
            queue: q,
            arrivals,
            services,
            completed,
            dropped,
            waiting: self.waiting.len() as u64,
            y0,
            reallocation,
            refreshed,
            utilization,
            z: self.z.values().to_vec(),
            y,
        });
        Ok(())
    }

    pub fn run(self) -> Result<Metrics> {
        let weights: Vec<f64> = self.cfg.services.iter().map(|s| s.weight).collect();
        let arrivals = generate_arrivals(
            self.cfg.arrival_rate,
            self.cfg.seed,
            self.cfg.slots,
            &self.cfg.workload,
            &weights,
            self.cfg.channel.users.len(),
        )?;
        self.run_with(&arrivals)
    }

    /// Runs one slot per batch of `arrivals`, ignoring the configured arrival
    /// process and slot count.
    pub fn run_with(mut self, arrivals: &[Vec<Request>]) -> Result<Metrics> {
        if arrivals.is_empty() {
            return Err(Error::Config("at least one slot required".into()));
        }
        for (slot, batch) in arrivals.iter().enumerate() {
            for r in batch {
                r.validate()?;
                if r.arrival_slot != slot as u64 {
                    return Err(Error::Config(format!("request {} listed in slot {slot}", r.id)));
                }
            }
            self.step(slot as u64, batch)?;
        }
        self.finish()
    }

    fn finish(mut self) -> Result<Metrics> {
        let m = &mut self.metrics;
        let s = &mut m.summary;
        s.pending = (self.waiting.len() + self.running.len()) as u64;
        if s.completed + s.dropped + s.pending != s.arrivals {
            return Err(Self::invariant(m.slots.len() as u64, "completed + dropped + pending != arrivals"));
        }
        let n = m.slots.len() as f64;
        if !m.completed.is_empty() {
            s.avg_latency_s = m.completed.iter().map(|c| c.delay.total()).sum::<f64>() / m.completed.len() as f64;
        }
        let queue: Vec<f64> = m.slots.iter().map(|r| r.queue).collect();
        s.avg_queue = queueing::time_average(&queue)?;
        s.max_queue = queue.iter().copied().fold(0.0, f64::max);
        let backlog: Vec<f64> = m.slots.iter().map(|r| r.backlog_before).collect();
        s.tail_violation = queueing::tail_violation_rate(&backlog, self.cfg.tail_bound());
        s.avg_y0 = m.slots.iter().map(|r| r.y0).sum::<f64>() / n;
        for (d, avg) in s.utilization.iter_mut().enumerate() {
            for k in 0..4 {
                avg[k] = m.slots.iter().map(|r| r.utilization[d][k]).sum::<f64>() / n;
            }
        }
        Ok(self.metrics)
    }
}

pub fn run(cfg: SimConfig) -> Result<Metrics> {
    Simulator::new(cfg)?.run()
}

/// Completions per slot of `policy` when the node is kept saturated.
pub fn measure_capacity(base: &SimConfig, policy: Policy, slots: u64) -> Result<f64> {
    let cfg = SimConfig {
        policy,
        slots,
        arrival_rate: 10.0,
        ..base.clone()
    };
    let m = run(cfg)?;
    Ok(m.summary.completed as f64 / slots as f64)
}
