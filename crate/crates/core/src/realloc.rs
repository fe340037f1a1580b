//! Workload-threshold trigger deciding when the supervisor refreshes device
//! snapshots and recomputes allocations.
//!
//! For device `j` and resource kind `~`:
//!
//! * workload `L = r~ - Σ Ξ~` (capacity minus container consumption)
//! * normal load `L_norm = L_max * rate_norm`
//! * threshold `L_th = rate_th * (1 - rate_norm) * K * L_max`, `K` = containers on the device
//!
//! and a refresh fires when `L_curr > L_norm + L_th`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DeviceId, EdgeDevice, EdgeNode, ResourceKind};

#[derive(Debug, Error, PartialEq)]
pub enum LoadError {
    #[error("{name} must lie in [0, 1], got {value}")]
    RateOutOfRange { name: &'static str, value: f64 },
}

/// What `L_curr` means when compared against the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoadSemantics {
    /// `L_curr` is the workload value itself, i.e. the residual.
    PaperVerbatim,
    /// `L_curr` is the consumed amount, capacity minus workload.
    #[default]
    Consumed,
}

impl LoadSemantics {
    pub fn as_str(self) -> &'static str {
        match self {
            LoadSemantics::PaperVerbatim => "paper-verbatim",
            LoadSemantics::Consumed => "consumed",
        }
    }
}

impl std::str::FromStr for LoadSemantics {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper-verbatim" => Ok(LoadSemantics::PaperVerbatim),
            "consumed" => Ok(LoadSemantics::Consumed),
            other => Err(format!("unknown load semantics `{other}` (paper-verbatim, consumed)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadParams {
    pub rate_norm: f64,
    pub rate_th: f64,
    pub semantics: LoadSemantics,
}

impl Default for LoadParams {
    fn default() -> Self {
        Self {
            rate_norm: 0.8,
            rate_th: 0.5,
            semantics: LoadSemantics::Consumed,
        }
    }
}

fn unit_rate(name: &'static str, value: f64) -> Result<f64, LoadError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(LoadError::RateOutOfRange { name, value })
    }
}

impl LoadParams {
    pub fn validate(&self) -> Result<(), LoadError> {
        unit_rate("rate_norm", self.rate_norm)?;
        unit_rate("rate_th", self.rate_th)?;
        Ok(())
    }
}

/// Capacity of `kind` minus what containers consume of it.
pub fn workload(device: &EdgeDevice, kind: ResourceKind) -> f64 {
    let cap = device.capacity.get(kind);
    let used = device.consumption().get(kind);
    cap as f64 - used as f64
}

/// `L_max * rate_norm`
pub fn normal_load(max_load: f64, rate_norm: f64) -> Result<f64, LoadError> {
    Ok(max_load * unit_rate("rate_norm", rate_norm)?)
}

/// `rate_th * (1 - rate_norm) * K * L_max`, evaluated as
/// `rate_th * K * (L_max - L_max * rate_norm)` so that decimal rates such as
/// 0.8 do not pick up the rounding of `1 - 0.8`.
pub fn threshold(rate_th: f64, rate_norm: f64, containers: usize, max_load: f64) -> f64 {
    rate_th * containers as f64 * (max_load - max_load * rate_norm)
}

pub fn should_reallocate(current: f64, normal: f64, threshold: f64) -> bool {
    current > normal + threshold
}

/// `L_curr` under the chosen semantics. The maximum load is the capacity.
pub fn current_load(device: &EdgeDevice, kind: ResourceKind, semantics: LoadSemantics) -> f64 {
    match semantics {
        LoadSemantics::PaperVerbatim => workload(device, kind),
        LoadSemantics::Consumed => device.capacity.get(kind) as f64 - workload(device, kind),
    }
}

/// Whether any resource kind of `device` crosses its trigger.
pub fn device_fires(device: &EdgeDevice, params: &LoadParams) -> Result<bool, LoadError> {
    let k = device.container_count();
    for kind in ResourceKind::ALL {
        let max_load = device.capacity.get(kind) as f64;
        if max_load <= 0.0 {
            continue;
        }
        let normal = normal_load(max_load, params.rate_norm)?;
        let th = threshold(unit_rate("rate_th", params.rate_th)?, params.rate_norm, k, max_load);
        if should_reallocate(current_load(device, kind, params.semantics), normal, th) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Devices whose snapshot must be refreshed this cycle, in node order.
pub fn scan(node: &EdgeNode, params: &LoadParams) -> Result<Vec<DeviceId>, LoadError> {
    params.validate()?;
    let mut fired = Vec::new();
    for device in &node.devices {
        if device_fires(device, params)? {
            fired.push(device.id);
        }
    }
    Ok(fired)
}
