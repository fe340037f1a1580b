//! Queue dynamics and the drift-plus-penalty objective.
//!
//! The actual queue `Q` counts requests held by a node. Each device `k` has a
//! virtual queue `Z_k` driven by its penalty `y_k = p_k - p_avg_k`; keeping
//! every `Z_k` stable keeps the time-average resource loss of the device under
//! its budget.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QueueError {
    #[error("{name} must be non-negative, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("dimension mismatch: {what} ({left} vs {right})")]
    Dimension {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("empty series")]
    Empty,
}

fn non_negative(name: &'static str, value: f64) -> Result<f64, QueueError> {
    if value >= 0.0 {
        Ok(value)
    } else {
        Err(QueueError::Negative { name, value })
    }
}

/// `max(Q - b + a, 0)`
pub fn queue_step(backlog: f64, arrivals: f64, services: f64) -> Result<f64, QueueError> {
    let q = non_negative("backlog", backlog)?;
    let a = non_negative("arrivals", arrivals)?;
    let b = non_negative("services", services)?;
    Ok((q - b + a).max(0.0))
}

/// `max(Z + y, 0)`
pub fn virtual_queue_step(z: f64, y: f64) -> Result<f64, QueueError> {
    Ok((non_negative("virtual backlog", z)? + y).max(0.0))
}

/// `p - p_avg`; negative when the device stays under its budget.
pub fn penalty(loss: f64, budget: f64) -> f64 {
    loss - budget
}

/// `L = (ΣQ² + ΣZ²) / 2`
pub fn lyapunov(qs: &[f64], zs: &[f64]) -> f64 {
    0.5 * (qs.iter().map(|q| q * q).sum::<f64>() + zs.iter().map(|z| z * z).sum::<f64>())
}

/// The per-slot quantity minimised over allocation schemes:
/// `V·y0 + Σ Q_i (a_i - b_i) + Σ Z_k y_k`.
pub fn dpp_objective(
    v: f64,
    y0: f64,
    qs: &[f64],
    arrivals: &[f64],
    services: &[f64],
    zs: &[f64],
    ys: &[f64],
) -> Result<f64, QueueError> {
    dims("arrivals", qs.len(), arrivals.len())?;
    dims("services", qs.len(), services.len())?;
    dims("penalties", zs.len(), ys.len())?;
    let queue_term: f64 = qs
        .iter()
        .zip(arrivals.iter().zip(services))
        .map(|(q, (a, b))| q * (a - b))
        .sum();
    let virtual_term: f64 = zs.iter().zip(ys).map(|(z, y)| z * y).sum();
    Ok(v * y0 + queue_term + virtual_term)
}

fn dims(what: &'static str, left: usize, right: usize) -> Result<(), QueueError> {
    if left == right {
        Ok(())
    } else {
        Err(QueueError::Dimension { what, left, right })
    }
}

pub fn time_average(series: &[f64]) -> Result<f64, QueueError> {
    if series.is_empty() {
        return Err(QueueError::Empty);
    }
    Ok(series.iter().sum::<f64>() / series.len() as f64)
}

/// Fraction of slots whose pre-service backlog exceeded `bound`.
pub fn tail_violation_rate(backlog: &[f64], bound: f64) -> f64 {
    if backlog.is_empty() {
        return 0.0;
    }
    backlog.iter().filter(|&&q| q > bound).count() as f64 / backlog.len() as f64
}

pub const DEFAULT_STABILITY_EPS: f64 = 1e-3;

/// Rate stability diagnostic for `Z(t)/t → 0`: the mean of the final quarter
/// of the series, divided by the run length, must not exceed `eps`.
pub fn stability_check(series: &[f64], eps: f64) -> bool {
    let n = series.len();
    if n < 2 {
        return true;
    }
    let tail = &series[n - (n / 4).max(1)..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    mean / n as f64 <= eps
}

/// Actual queue of one node together with its arrival history.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueState {
    backlog: f64,
    history: Vec<f64>,
    slot: u64,
}

impl QueueState {
    /// The initial backlog is recorded as the first history entry.
    pub fn new(initial: f64) -> Result<Self, QueueError> {
        let q = non_negative("initial backlog", initial)?;
        Ok(Self {
            backlog: q,
            history: vec![q],
            slot: 0,
        })
    }

    pub fn backlog(&self) -> f64 {
        self.backlog
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn step(&mut self, arrivals: f64, services: f64) -> Result<f64, QueueError> {
        self.backlog = queue_step(self.backlog, arrivals, services)?;
        self.history.push(arrivals);
        self.slot += 1;
        Ok(self.backlog)
    }
}

/// One virtual queue per device.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualQueueState {
    z: Vec<f64>,
    slot: u64,
}

impl VirtualQueueState {
    pub fn new(devices: usize) -> Self {
        Self {
            z: vec![0.0; devices],
            slot: 0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.z
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn step(&mut self, ys: &[f64]) -> Result<(), QueueError> {
        dims("penalties", self.z.len(), ys.len())?;
        for (z, &y) in self.z.iter_mut().zip(ys) {
            *z = virtual_queue_step(*z, y)?;
        }
        self.slot += 1;
        Ok(())
    }
}

/// Per-device resource loss budget and the penalty weight `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyConfig {
    pub p_avg: Vec<f64>,
    pub v: f64,
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<(), QueueError> {
        non_negative("V", self.v)?;
        for &p in &self.p_avg {
            non_negative("p_avg", p)?;
        }
        Ok(())
    }
}

/// What one slot (or one candidate decision) produces.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SlotOutcome {
    pub arrivals: f64,
    pub services: f64,
    pub y0: f64,
    pub y: Vec<f64>,
}

/// Configured range of the scalar penalty `y0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyBounds {
    pub min: f64,
    pub max: f64,
}

impl PenaltyBounds {
    pub fn contains(&self, y0: f64) -> bool {
        y0 >= self.min && y0 <= self.max
    }
}
