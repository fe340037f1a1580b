use thiserror::Error;

use crate::domain::{ContainerId, DeviceId, ResourceKind, ResourceVector, ServiceId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("negative {kind}: {minuend} - {subtrahend}")]
    NegativeResource {
        kind: ResourceKind,
        minuend: u64,
        subtrahend: u64,
    },

    #[error("capacity constraint violated on device {0}")]
    CapacityViolated(DeviceId),

    #[error("device {device} cannot host {requested:?}")]
    WouldExceedCapacity {
        device: DeviceId,
        requested: ResourceVector,
    },

    #[error("share {0} outside (0, 1]")]
    InvalidShare(f64),

    #[error("container {0} already exists")]
    DuplicateContainer(ContainerId),

    #[error("container {container} not present on device {device}")]
    UnknownContainer {
        device: DeviceId,
        container: ContainerId,
    },

    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),

    #[error("unknown service {0}")]
    UnknownService(ServiceId),

    #[error("invalid allocation scheme: {0}")]
    InvalidScheme(String),

    #[error("no candidate scheme to select from")]
    NoScheme,

    #[error("simulation invariant broken at slot {slot}: {what}")]
    Invariant { slot: u64, what: String },

    #[error(transparent)]
    Delay(#[from] crate::delay::DelayError),

    #[error(transparent)]
    Queue(#[from] crate::queueing::QueueError),

    #[error(transparent)]
    Repr(#[from] crate::resource_repr::ReprError),

    #[error(transparent)]
    Load(#[from] crate::realloc::LoadError),
}
