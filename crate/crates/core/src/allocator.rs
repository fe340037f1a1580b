//! Request placement by drift-plus-penalty minimisation.
//!
//! A request goes straight to the first device that can hold it whole. When no
//! device can, candidate schemes that split the request over several devices
//! are enumerated, scored with
//!
//! ```text
//! V·y0 + Q·(a - b) + Σ_k Z_k·y_k
//! ```
//!
//! and the best one is used unless keeping the request queued scores lower.

use std::cmp::Ordering;

use crate::delay::{self, DelayBreakdown};
use crate::domain::{
    Container, ContainerId, DeviceId, EdgeDevice, EdgeNode, Request, RequestId, ResourceKind,
    ResourceVector, Service,
};
use crate::error::{Error, Result};
use crate::queueing::{dpp_objective, SlotOutcome};
use crate::resource_repr::Registry;

/// Tolerance on the sum of shares of a scheme.
pub const SHARE_SUM_TOLERANCE: f64 = 1e-12;

/// The supervisor's view of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub id: DeviceId,
    pub capacity: ResourceVector,
    pub residual: ResourceVector,
    /// Slot of the snapshot this view was last synchronised with.
    pub snapshot_slot: u64,
    /// bytes/s with the whole CPU
    pub compute_rate: f64,
    pub read_speed: u64,
    pub write_speed: u64,
}

impl DeviceState {
    fn from_device(device: &EdgeDevice, residual: ResourceVector, slot: u64) -> Self {
        Self {
            id: device.id,
            capacity: device.capacity,
            residual,
            snapshot_slot: slot,
            compute_rate: device.compute_rate,
            read_speed: device.read_speed,
            write_speed: device.write_speed,
        }
    }

    /// Allocated fraction of capacity, averaged over resource kinds.
    pub fn loss(&self) -> f64 {
        let used = ResourceVector::from_fn(|k| self.capacity.get(k).saturating_sub(self.residual.get(k)));
        used.mean_fraction_of(&self.capacity)
    }

    pub fn processing_grain(&self) -> u64 {
        crate::domain::processing_grain(self.capacity.processing)
    }
}

/// Residual resources of every device as known to the supervisor (β).
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceState {
    pub devices: Vec<DeviceState>,
}

impl ResourceState {
    /// Ground truth read straight from the devices.
    pub fn from_devices(devices: &[EdgeDevice], slot: u64) -> Result<Self> {
        let devices = devices
            .iter()
            .map(|d| Ok(DeviceState::from_device(d, d.residual()?, slot)))
            .collect::<Result<_>>()?;
        Ok(Self { devices })
    }

    /// Static capacities only, as if every device were idle.
    pub fn from_capacities(devices: &[EdgeDevice]) -> Self {
        Self {
            devices: devices
                .iter()
                .map(|d| DeviceState::from_device(d, d.capacity, 0))
                .collect(),
        }
    }

    /// State derived from the latest descriptors in `registry`; static
    /// properties the descriptors do not carry come from `devices`.
    pub fn from_registry(registry: &Registry, devices: &[EdgeDevice]) -> Result<Self> {
        let devices = devices
            .iter()
            .map(|d| {
                let desc = registry
                    .get(d.id)
                    .ok_or(crate::resource_repr::ReprError::UnknownDevice(d.id))?;
                let mut state = DeviceState::from_device(d, desc.residual(), desc.taken_at);
                state.read_speed = desc.storage.read_speed;
                state.write_speed = desc.storage.write_speed;
                Ok(state)
            })
            .collect::<Result<_>>()?;
        Ok(Self { devices })
    }

    /// Overwrites one device's view with a fresh descriptor.
    pub fn refresh_from(&mut self, descriptor: &crate::resource_repr::ResourceDescriptor) -> Result<()> {
        let state = self.device_mut(descriptor.device)?;
        state.residual = descriptor.residual();
        state.read_speed = descriptor.storage.read_speed;
        state.write_speed = descriptor.storage.write_speed;
        state.snapshot_slot = descriptor.taken_at;
        Ok(())
    }

    /// Capacity of the whole node.
    pub fn total_capacity(&self) -> ResourceVector {
        self.devices.iter().map(|d| &d.capacity).sum()
    }

    pub fn validate(&self) -> bool {
        self.devices.iter().all(|d| d.residual.fits_within(&d.capacity))
    }

    pub fn device(&self, id: DeviceId) -> Option<&DeviceState> {
        self.devices.iter().find(|d| d.id == id)
    }

    fn device_mut(&mut self, id: DeviceId) -> Result<&mut DeviceState> {
        self.devices
            .iter_mut()
            .find(|d| d.id == id)
            .ok_or(Error::UnknownDevice(id))
    }

    fn index_of(&self, id: DeviceId) -> Result<usize> {
        self.devices
            .iter()
            .position(|d| d.id == id)
            .ok_or(Error::UnknownDevice(id))
    }

    /// Books the amounts of `scheme` against the residuals.
    pub fn reserve(&mut self, scheme: &AllocationScheme) -> Result<()> {
        for p in &scheme.placements {
            let state = self.device_mut(p.device)?;
            state.residual = state.residual.checked_sub(&p.amounts)?;
        }
        Ok(())
    }

    /// Returns released amounts, never beyond capacity.
    pub fn release(&mut self, device: DeviceId, amounts: &ResourceVector) -> Result<()> {
        let state = self.device_mut(device)?;
        let restored = state.residual.checked_add(amounts).unwrap_or(state.capacity);
        state.residual = ResourceVector::from_fn(|k| restored.get(k).min(state.capacity.get(k)));
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub device: DeviceId,
    /// Fraction of the request processed on this device, in (0, 1].
    pub share: f64,
    pub amounts: ResourceVector,
}

/// Where the subtasks of one request run (α).
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationScheme {
    pub request: RequestId,
    pub placements: Vec<Placement>,
}

impl AllocationScheme {
    pub fn first_device(&self) -> Option<DeviceId> {
        self.placements.first().map(|p| p.device)
    }

    /// Shares sum to one, amounts follow the shares, and everything fits the
    /// residuals of `state`.
    pub fn validate(&self, service: &Service, state: &ResourceState) -> Result<()> {
        if self.placements.is_empty() {
            return Err(Error::InvalidScheme("no placements".into()));
        }
        let mut sum = 0.0;
        for (i, p) in self.placements.iter().enumerate() {
            if !(p.share > 0.0 && p.share <= 1.0) {
                return Err(Error::InvalidScheme(format!("share {} outside (0, 1]", p.share)));
            }
            if self.placements[..i].iter().any(|o| o.device == p.device) {
                return Err(Error::InvalidScheme(format!("device {} used twice", p.device)));
            }
            let dev = state.device(p.device).ok_or(Error::UnknownDevice(p.device))?;
            if p.amounts != scale_amounts(&service.amounts, p.share, dev.processing_grain()) {
                return Err(Error::InvalidScheme(format!(
                    "amounts on device {} do not match share {}",
                    p.device, p.share
                )));
            }
            if !p.amounts.fits_within(&dev.residual) {
                return Err(Error::InvalidScheme(format!("placement exceeds residual of device {}", p.device)));
            }
            sum += p.share;
        }
        if (sum - 1.0).abs() > SHARE_SUM_TOLERANCE {
            return Err(Error::InvalidScheme(format!("shares sum to {sum}")));
        }
        Ok(())
    }
}

/// `amounts * share`, rounded to the nearest unit; processing is rounded to the
/// device's processing grain and never drops to zero for a positive request.
pub fn scale_amounts(amounts: &ResourceVector, share: f64, grain: u64) -> ResourceVector {
    ResourceVector::from_fn(|kind| {
        let full = amounts.get(kind);
        if full == 0 {
            return 0;
        }
        let exact = full as f64 * share;
        match kind {
            ResourceKind::Processing => {
                let grains = (exact / grain as f64).round().max(1.0) as u64;
                grains * grain
            }
            _ => (exact.round() as u64).max(1),
        }
    })
}

/// Candidate schemes: every device that can hold the whole request, then
/// splits over the `m` devices with the most residual processing
/// (`m = 2..=min(limit, n)`), shares proportional to residual processing.
/// Placements inside a scheme are ordered by device id.
pub fn enumerate_candidates(
    request: &Request,
    service: &Service,
    state: &ResourceState,
    limit: usize,
) -> Vec<AllocationScheme> {
    let mut out: Vec<AllocationScheme> = Vec::new();
    let mut by_id: Vec<&DeviceState> = state.devices.iter().collect();
    by_id.sort_by_key(|d| d.id);

    for dev in &by_id {
        let amounts = scale_amounts(&service.amounts, 1.0, dev.processing_grain());
        if amounts.fits_within(&dev.residual) {
            out.push(AllocationScheme {
                request: request.id,
                placements: vec![Placement {
                    device: dev.id,
                    share: 1.0,
                    amounts,
                }],
            });
        }
    }

    let mut by_processing: Vec<&DeviceState> =
        by_id.iter().copied().filter(|d| d.residual.processing > 0).collect();
    by_processing.sort_by(|a, b| b.residual.processing.cmp(&a.residual.processing).then(a.id.cmp(&b.id)));

    let max_m = limit.min(by_processing.len());
    for m in 2..=max_m {
        let mut chosen: Vec<&DeviceState> = by_processing[..m].to_vec();
        chosen.sort_by_key(|d| d.id);
        let shares = proportional_shares(&chosen.iter().map(|d| d.residual.processing).collect::<Vec<_>>());
        let placements: Vec<Placement> = chosen
            .iter()
            .zip(&shares)
            .map(|(d, &share)| Placement {
                device: d.id,
                share,
                amounts: scale_amounts(&service.amounts, share, d.processing_grain()),
            })
            .collect();
        let feasible = placements.iter().zip(&chosen).all(|(p, d)| p.amounts.fits_within(&d.residual));
        let scheme = AllocationScheme {
            request: request.id,
            placements,
        };
        if feasible && !out.contains(&scheme) {
            out.push(scheme);
        }
    }
    out
}

/// Shares proportional to `weights`; equal shares when all weights are equal.
/// The last share absorbs rounding so the sum is one.
fn proportional_shares(weights: &[u64]) -> Vec<f64> {
    let n = weights.len();
    if weights.windows(2).all(|w| w[0] == w[1]) {
        return vec![1.0 / n as f64; n];
    }
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    let mut shares: Vec<f64> = weights.iter().map(|&w| w as f64 / total).collect();
    let head: f64 = shares[..n - 1].iter().sum();
    shares[n - 1] = 1.0 - head;
    shares
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocatorConfig {
    pub v: f64,
    /// Allowed distance from the per-slot minimum when selecting.
    pub c: f64,
    pub candidate_limit: usize,
    /// seconds
    pub slot_length: f64,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self {
            v: 10.0,
            c: 0.0,
            candidate_limit: 8,
            slot_length: 1.0,
        }
    }
}

/// Queue state the objective is evaluated against.
#[derive(Debug, Clone, Copy)]
pub struct QueueView<'a> {
    pub backlog: f64,
    pub arrivals: f64,
    /// Virtual queue per device, in [`ResourceState`] order.
    pub z: &'a [f64],
    pub p_avg: &'a [f64],
}

/// A request together with the parts of its delay already known.
#[derive(Debug, Clone, Copy)]
pub struct RequestContext<'a> {
    pub request: &'a Request,
    pub service: &'a Service,
    /// Upload plus response transfer, seconds.
    pub transmission: f64,
    /// Time spent queued so far, seconds.
    pub waited: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scheme: AllocationScheme,
    pub outcome: SlotOutcome,
    pub delay: DelayBreakdown,
    pub objective: f64,
    /// Seconds until the slowest subtask finishes.
    pub service_time: f64,
    /// Slots the containers stay allocated.
    pub holding_slots: u64,
}

/// Slots needed to run `service_time` seconds; at least one.
pub fn holding_slots(service_time: f64, slot_length: f64) -> u64 {
    ((service_time / slot_length).ceil() as u64).max(1)
}

/// Predicted processing and storage delay of each placement.
fn subtask_delays(scheme: &AllocationScheme, ctx: &RequestContext<'_>, state: &ResourceState) -> Result<Vec<(f64, f64)>> {
    let req = ctx.request;
    scheme
        .placements
        .iter()
        .map(|p| {
            let dev = state.device(p.device).ok_or(Error::UnknownDevice(p.device))?;
            let data = p.share * req.data_size;
            let processing = if p.amounts.processing == 0 {
                0.0
            } else {
                let fraction = p.amounts.processing as f64 / dev.capacity.processing as f64;
                delay::local_processing_delay(data, dev.compute_rate * fraction)?
            };
            let storage = delay::storage_delay(
                data,
                u8::from(req.needs_write),
                u8::from(req.needs_read),
                dev.write_speed as f64,
                dev.read_speed as f64,
            )?;
            Ok((processing, storage))
        })
        .collect()
}

/// Scores one scheme against the current queues.
pub fn evaluate_scheme(
    scheme: &AllocationScheme,
    ctx: &RequestContext<'_>,
    state: &ResourceState,
    cfg: &AllocatorConfig,
    queues: &QueueView<'_>,
) -> Result<Evaluation> {
    scheme.validate(ctx.service, state)?;
    check_dims(state, queues)?;

    let subtasks = subtask_delays(scheme, ctx, state)?;
    let (processing, storage) = subtasks
        .iter()
        .copied()
        .fold((0.0, 0.0), |best, cur| if cur.0 + cur.1 > best.0 + best.1 { cur } else { best });
    let service_time = processing + storage;
    let holding = holding_slots(service_time, cfg.slot_length);
    let delay = DelayBreakdown::new(ctx.transmission, storage, processing, ctx.waited)?;

    let mut added = vec![0.0; state.devices.len()];
    for p in &scheme.placements {
        let i = state.index_of(p.device)?;
        added[i] += p.amounts.mean_fraction_of(&state.devices[i].capacity);
    }
    let y0 = scheme
        .placements
        .iter()
        .map(|p| &p.amounts)
        .sum::<ResourceVector>()
        .mean_fraction_of(&state.total_capacity());
    let y: Vec<f64> = state
        .devices
        .iter()
        .zip(&added)
        .zip(queues.p_avg)
        .map(|((d, add), p_avg)| crate::queueing::penalty(d.loss() + add, *p_avg))
        .collect();
    let services = 1.0 / holding as f64;
    let objective = dpp_objective(
        cfg.v,
        y0,
        &[queues.backlog],
        &[queues.arrivals],
        &[services],
        queues.z,
        &y,
    )?;
    Ok(Evaluation {
        scheme: scheme.clone(),
        outcome: SlotOutcome {
            arrivals: queues.arrivals,
            services,
            y0,
            y,
        },
        delay,
        objective,
        service_time,
        holding_slots: holding,
    })
}

fn check_dims(state: &ResourceState, queues: &QueueView<'_>) -> Result<()> {
    let n = state.devices.len();
    if queues.z.len() != n || queues.p_avg.len() != n {
        return Err(Error::InvalidScheme(format!(
            "queue view has {} virtual queues and {} budgets for {n} devices",
            queues.z.len(),
            queues.p_avg.len()
        )));
    }
    Ok(())
}

/// Objective of leaving the request queued for this slot: nothing served,
/// nothing consumed.
pub fn idle_objective(state: &ResourceState, cfg: &AllocatorConfig, queues: &QueueView<'_>) -> Result<f64> {
    check_dims(state, queues)?;
    let y: Vec<f64> = state
        .devices
        .iter()
        .zip(queues.p_avg)
        .map(|(d, p_avg)| crate::queueing::penalty(d.loss(), *p_avg))
        .collect();
    Ok(dpp_objective(cfg.v, 0.0, &[queues.backlog], &[queues.arrivals], &[0.0], queues.z, &y)?)
}

fn tie_break(a: &Evaluation, b: &Evaluation) -> Ordering {
    a.scheme
        .placements
        .len()
        .cmp(&b.scheme.placements.len())
        .then(a.objective.total_cmp(&b.objective))
        .then(a.scheme.first_device().cmp(&b.scheme.first_device()))
}

/// Picks among the schemes within `c` of the minimum objective: fewest
/// placements first, then lowest objective, then lowest first device id.
/// With `c = 0` this is the exact minimiser.
pub fn select_scheme(candidates: Vec<Evaluation>, c: f64) -> Result<Evaluation> {
    let min = candidates
        .iter()
        .map(|e| e.objective)
        .min_by(f64::total_cmp)
        .ok_or(Error::NoScheme)?;
    candidates
        .into_iter()
        .filter(|e| e.objective <= min + c.max(0.0))
        .min_by(tie_break)
        .ok_or(Error::NoScheme)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    /// A device had room for the whole request.
    Direct(Evaluation),
    /// Chosen by objective minimisation.
    Scheduled(Evaluation),
    /// Stays queued.
    Deferred,
}

impl Decision {
    pub fn evaluation(&self) -> Option<&Evaluation> {
        match self {
            Decision::Direct(e) | Decision::Scheduled(e) => Some(e),
            Decision::Deferred => None,
        }
    }
}

fn within_timeout(eval: &Evaluation, ctx: &RequestContext<'_>, slot_length: f64) -> bool {
    eval.delay.total() <= f64::from(ctx.request.timeout) * slot_length
}

/// One pass of the allocation procedure for one request.
pub fn lrr_handle_request(
    ctx: &RequestContext<'_>,
    state: &ResourceState,
    cfg: &AllocatorConfig,
    queues: &QueueView<'_>,
) -> Result<Decision> {
    if ctx.service.id != ctx.request.service {
        return Err(Error::UnknownService(ctx.request.service));
    }
    let candidates = enumerate_candidates(ctx.request, ctx.service, state, cfg.candidate_limit.max(1));

    // whole-request placements on a device with free resources, first device id wins
    for scheme in candidates.iter().filter(|s| s.placements.len() == 1) {
        let eval = evaluate_scheme(scheme, ctx, state, cfg, queues)?;
        if within_timeout(&eval, ctx, cfg.slot_length) {
            return Ok(Decision::Direct(eval));
        }
    }

    let mut viable = Vec::new();
    for scheme in candidates.iter().filter(|s| s.placements.len() > 1) {
        let eval = evaluate_scheme(scheme, ctx, state, cfg, queues)?;
        if within_timeout(&eval, ctx, cfg.slot_length) {
            viable.push(eval);
        }
    }
    if viable.is_empty() {
        return Ok(Decision::Deferred);
    }
    let best = select_scheme(viable, cfg.c)?;
    if best.objective <= idle_objective(state, cfg, queues)? {
        Ok(Decision::Scheduled(best))
    } else {
        Ok(Decision::Deferred)
    }
}

/// Creates one container per placement. Either every container is created or
/// none is.
pub fn instantiate(
    scheme: &AllocationScheme,
    service: &Service,
    node: &mut EdgeNode,
    slot: u64,
    next_id: &mut u64,
) -> Result<Vec<(DeviceId, ContainerId)>> {
    for p in &scheme.placements {
        let dev = node.device(p.device)?;
        if !dev.can_host(&p.amounts) {
            return Err(Error::WouldExceedCapacity {
                device: p.device,
                requested: p.amounts,
            });
        }
    }
    let mut created = Vec::with_capacity(scheme.placements.len());
    for p in &scheme.placements {
        let id = ContainerId(*next_id);
        *next_id += 1;
        node.device_mut(p.device)?.create_container(Container {
            id,
            service: service.id,
            request: Some(scheme.request),
            consumption: p.amounts,
            share: p.share,
            created_at: slot,
        })?;
        created.push((p.device, id));
    }
    Ok(created)
}

/// Destroys the containers of a finished request.
pub fn complete_subtasks(containers: &[(DeviceId, ContainerId)], node: &mut EdgeNode) -> Result<Vec<Container>> {
    containers
        .iter()
        .map(|&(device, id)| node.device_mut(device)?.destroy_container(id))
        .collect()
}
