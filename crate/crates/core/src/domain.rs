//! Data model for the edge network: resources, services, containers, devices,
//! nodes, user association and requests.
//!
//! Resource amounts are integers so that container create/destroy cycles never
//! drift: processing in cycles/s, storage and memory in bytes, networking in
//! bits/s.

use std::fmt;
use std::ops::{Add, Index};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resource_repr::Registry;

/// The four resource kinds a device exposes. Iteration order is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    Processing,
    Storage,
    Memory,
    Networking,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 4] = [
        ResourceKind::Processing,
        ResourceKind::Storage,
        ResourceKind::Memory,
        ResourceKind::Networking,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ResourceKind::Processing => "processing",
            ResourceKind::Storage => "storage",
            ResourceKind::Memory => "memory",
            ResourceKind::Networking => "networking",
        }
    }

    /// Single-letter tag used in column names (`P`, `S`, `M`, `N`).
    pub fn short(self) -> char {
        match self {
            ResourceKind::Processing => 'P',
            ResourceKind::Storage => 'S',
            ResourceKind::Memory => 'M',
            ResourceKind::Networking => 'N',
        }
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Amounts of each resource kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ResourceVector {
    /// cycles/s
    pub processing: u64,
    /// bytes
    pub storage: u64,
    /// bytes
    pub memory: u64,
    /// bits/s
    pub networking: u64,
}

impl ResourceVector {
    pub const ZERO: ResourceVector = ResourceVector::new(0, 0, 0, 0);

    pub const fn new(processing: u64, storage: u64, memory: u64, networking: u64) -> Self {
        Self {
            processing,
            storage,
            memory,
            networking,
        }
    }

    pub fn get(&self, kind: ResourceKind) -> u64 {
        match kind {
            ResourceKind::Processing => self.processing,
            ResourceKind::Storage => self.storage,
            ResourceKind::Memory => self.memory,
            ResourceKind::Networking => self.networking,
        }
    }

    pub fn set(&mut self, kind: ResourceKind, value: u64) {
        match kind {
            ResourceKind::Processing => self.processing = value,
            ResourceKind::Storage => self.storage = value,
            ResourceKind::Memory => self.memory = value,
            ResourceKind::Networking => self.networking = value,
        }
    }

    pub fn from_fn(mut f: impl FnMut(ResourceKind) -> u64) -> Self {
        let mut v = Self::ZERO;
        for kind in ResourceKind::ALL {
            v.set(kind, f(kind));
        }
        v
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    pub fn checked_add(&self, other: &Self) -> Option<Self> {
        Some(Self {
            processing: self.processing.checked_add(other.processing)?,
            storage: self.storage.checked_add(other.storage)?,
            memory: self.memory.checked_add(other.memory)?,
            networking: self.networking.checked_add(other.networking)?,
        })
    }

    /// Component-wise subtraction. A negative component is an error, never a clamp.
    pub fn checked_sub(&self, other: &Self) -> Result<Self> {
        let mut out = Self::ZERO;
        for kind in ResourceKind::ALL {
            let (a, b) = (self.get(kind), other.get(kind));
            let diff = a
                .checked_sub(b)
                .ok_or(Error::NegativeResource { kind, minuend: a, subtrahend: b })?;
            out.set(kind, diff);
        }
        Ok(out)
    }

    /// `self <= other` in every component.
    pub fn fits_within(&self, other: &Self) -> bool {
        ResourceKind::ALL.iter().all(|&k| self.get(k) <= other.get(k))
    }

    /// Fraction `self / capacity` for one kind; 0 when the capacity is 0.
    pub fn fraction_of(&self, capacity: &Self, kind: ResourceKind) -> f64 {
        let cap = capacity.get(kind);
        if cap == 0 {
            0.0
        } else {
            self.get(kind) as f64 / cap as f64
        }
    }

    /// Mean over the four kinds of `self / capacity`.
    pub fn mean_fraction_of(&self, capacity: &Self) -> f64 {
        ResourceKind::ALL
            .iter()
            .map(|&k| self.fraction_of(capacity, k))
            .sum::<f64>()
            / ResourceKind::ALL.len() as f64
    }
}

impl Add for ResourceVector {
    type Output = ResourceVector;

    /// Panics on overflow, which no physical capacity reaches.
    fn add(self, rhs: Self) -> Self {
        self.checked_add(&rhs).expect("resource vector overflow")
    }
}

impl<'a> std::iter::Sum<&'a ResourceVector> for ResourceVector {
    fn sum<I: Iterator<Item = &'a ResourceVector>>(iter: I) -> Self {
        iter.fold(ResourceVector::ZERO, |acc, v| acc + *v)
    }
}

impl Index<ResourceKind> for ResourceVector {
    type Output = u64;

    fn index(&self, kind: ResourceKind) -> &u64 {
        match kind {
            ResourceKind::Processing => &self.processing,
            ResourceKind::Storage => &self.storage,
            ResourceKind::Memory => &self.memory,
            ResourceKind::Networking => &self.networking,
        }
    }
}

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident, $inner:ty) => {
        $(#[$doc])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_type!(DeviceId, u32);
id_type!(NodeId, u32);
id_type!(ServiceId, u32);
id_type!(ContainerId, u64);
id_type!(RequestId, u64);
id_type!(UserId, u32);

/// A service type and the resources one full instance of it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Service {
    pub id: ServiceId,
    pub name: String,
    pub required: [bool; 4],
    pub amounts: ResourceVector,
}

impl Service {
    /// Builds a service whose requirement indicators follow from `amounts`.
    pub fn new(id: ServiceId, name: impl Into<String>, amounts: ResourceVector) -> Self {
        let required = ResourceKind::ALL.map(|k| amounts.get(k) > 0);
        Self {
            id,
            name: name.into(),
            required,
            amounts,
        }
    }

    pub fn requires(&self, kind: ResourceKind) -> bool {
        self.required[kind as usize]
    }

    /// A positive amount needs its requirement indicator set.
    pub fn validate(&self) -> Result<()> {
        for kind in ResourceKind::ALL {
            let amount = self.amounts.get(kind);
            if amount > 0 && !self.requires(kind) {
                return Err(Error::Config(format!(
                    "service {}: {kind} amount {amount} without its requirement indicator",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// A running container and what it holds on its device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Container {
    pub id: ContainerId,
    pub service: ServiceId,
    /// `None` for load that did not come from this supervisor.
    pub request: Option<RequestId>,
    pub consumption: ResourceVector,
    /// Fraction of the request processed by this container, in (0, 1].
    pub share: f64,
    pub created_at: u64,
}

/// Static CPU properties a device reports about itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpuInfo {
    pub family: String,
    pub architecture: String,
    pub cores: u32,
    pub frequency_hz: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDevice {
    pub id: DeviceId,
    pub name: String,
    pub cpu: CpuInfo,
    pub capacity: ResourceVector,
    /// bytes/s
    pub write_speed: u64,
    /// bytes/s
    pub read_speed: u64,
    /// bytes/s processed with the whole CPU allocated
    pub compute_rate: f64,
    pub containers: Vec<Container>,
}

impl EdgeDevice {
    /// Processing capacity is `cores * frequency_hz`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: DeviceId,
        name: impl Into<String>,
        cpu: CpuInfo,
        storage: u64,
        memory: u64,
        networking: u64,
        write_speed: u64,
        read_speed: u64,
        compute_rate: f64,
    ) -> Result<Self> {
        let processing = u64::from(cpu.cores)
            .checked_mul(cpu.frequency_hz)
            .ok_or_else(|| Error::Config(format!("device {id}: processing capacity overflows")))?;
        let device = Self {
            id,
            name: name.into(),
            capacity: ResourceVector::new(processing, storage, memory, networking),
            cpu,
            write_speed,
            read_speed,
            compute_rate,
            containers: Vec::new(),
        };
        device.validate_static()?;
        Ok(device)
    }

    fn validate_static(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("device {}: {what}", self.id)));
        if self.cpu.cores == 0 {
            return bad("at least one core required");
        }
        if self.write_speed == 0 || self.read_speed == 0 {
            return bad("storage speeds must be positive");
        }
        if !(self.compute_rate.is_finite() && self.compute_rate > 0.0) {
            return bad("compute rate must be positive");
        }
        Ok(())
    }

    /// Sum of all container consumptions.
    pub fn consumption(&self) -> ResourceVector {
        self.containers.iter().map(|c| &c.consumption).sum()
    }

    /// Capacity constraint: consumption never exceeds capacity in any kind.
    pub fn validate_capacity(&self) -> bool {
        self.containers
            .iter()
            .map(|c| &c.consumption)
            .try_fold(ResourceVector::ZERO, |acc, c| acc.checked_add(c))
            .is_some_and(|total| total.fits_within(&self.capacity))
    }

    pub fn residual(&self) -> Result<ResourceVector> {
        self.capacity
            .checked_sub(&self.consumption())
            .map_err(|_| Error::CapacityViolated(self.id))
    }

    pub fn can_host(&self, amounts: &ResourceVector) -> bool {
        self.residual().is_ok_and(|r| amounts.fits_within(&r))
    }

    /// Instantiates a container, refusing anything that would break the capacity constraint.
    pub fn create_container(&mut self, container: Container) -> Result<()> {
        if !(container.share > 0.0 && container.share <= 1.0) {
            return Err(Error::InvalidShare(container.share));
        }
        if self.containers.iter().any(|c| c.id == container.id) {
            return Err(Error::DuplicateContainer(container.id));
        }
        if !self.can_host(&container.consumption) {
            return Err(Error::WouldExceedCapacity {
                device: self.id,
                requested: container.consumption,
            });
        }
        self.containers.push(container);
        Ok(())
    }

    pub fn destroy_container(&mut self, id: ContainerId) -> Result<Container> {
        let pos = self
            .containers
            .iter()
            .position(|c| c.id == id)
            .ok_or(Error::UnknownContainer { device: self.id, container: id })?;
        Ok(self.containers.remove(pos))
    }

    pub fn container_count(&self) -> usize {
        self.containers.len()
    }

    /// Allocated fraction of capacity for one kind.
    pub fn utilization(&self, kind: ResourceKind) -> f64 {
        self.consumption().fraction_of(&self.capacity, kind)
    }

    pub fn processing_grain(&self) -> u64 {
        processing_grain(self.capacity.processing)
    }
}

/// Processing is placed in multiples of one millionth of a device's processing
/// capacity, so CPU usage is exactly representable with six decimals. Devices
/// whose capacity is not a multiple of 10^6 cycles/s fall back to a grain of 1.
pub fn processing_grain(capacity: u64) -> u64 {
    if capacity >= 1_000_000 && capacity.is_multiple_of(1_000_000) {
        capacity / 1_000_000
    } else {
        1
    }
}

/// A supervised set of devices.
#[derive(Debug, Clone)]
pub struct EdgeNode {
    pub id: NodeId,
    pub devices: Vec<EdgeDevice>,
    pub registry: Registry,
}

impl EdgeNode {
    pub fn new(id: NodeId, devices: Vec<EdgeDevice>) -> Result<Self> {
        for (i, d) in devices.iter().enumerate() {
            if devices[..i].iter().any(|o| o.id == d.id) {
                return Err(Error::Config(format!("node {id}: duplicate device id {}", d.id)));
            }
        }
        Ok(Self {
            id,
            devices,
            registry: Registry::default(),
        })
    }

    pub fn device(&self, id: DeviceId) -> Result<&EdgeDevice> {
        self.devices
            .iter()
            .find(|d| d.id == id)
            .ok_or(Error::UnknownDevice(id))
    }

    pub fn device_mut(&mut self, id: DeviceId) -> Result<&mut EdgeDevice> {
        self.devices
            .iter_mut()
            .find(|d| d.id == id)
            .ok_or(Error::UnknownDevice(id))
    }

    pub fn device_index(&self, id: DeviceId) -> Option<usize> {
        self.devices.iter().position(|d| d.id == id)
    }
}

/// Binary user→node association where each user belongs to exactly one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssociationMatrix {
    nodes: usize,
    assigned: Vec<usize>,
}

impl AssociationMatrix {
    pub fn users(&self) -> usize {
        self.assigned.len()
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// `x[u][i]`
    pub fn x(&self, user: usize, node: usize) -> u8 {
        u8::from(self.assigned.get(user) == Some(&node))
    }

    pub fn node_of(&self, user: usize) -> Option<usize> {
        self.assigned.get(user).copied()
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        (0..self.users())
            .map(|u| (0..self.nodes).map(|i| self.x(u, i)).collect())
            .collect()
    }

    /// Every row sums to exactly one.
    pub fn is_valid(&self) -> bool {
        self.rows().iter().all(|row| row.iter().map(|&x| u32::from(x)).sum::<u32>() == 1)
    }
}

/// Static round-robin association: user `u` goes to node `u mod nodes`.
pub fn associate(users: usize, nodes: usize) -> Result<AssociationMatrix> {
    if nodes == 0 {
        return Err(Error::Config("association needs at least one node".into()));
    }
    Ok(AssociationMatrix {
        nodes,
        assigned: (0..users).map(|u| u % nodes).collect(),
    })
}

/// One unit of work submitted by a user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub user: UserId,
    /// bytes
    pub data_size: f64,
    pub service: ServiceId,
    /// slots the user is willing to wait
    pub timeout: u32,
    pub needs_read: bool,
    pub needs_write: bool,
    pub arrival_slot: u64,
}

impl Request {
    pub fn validate(&self) -> Result<()> {
        if !(self.data_size.is_finite() && self.data_size > 0.0) {
            return Err(Error::Config(format!("request {}: data size must be positive", self.id)));
        }
        if self.timeout == 0 {
            return Err(Error::Config(format!("request {}: timeout must be positive", self.id)));
        }
        Ok(())
    }
}
