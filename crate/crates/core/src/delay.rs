//! Closed-form delay models for local and edge processing.
//!
//! Data sizes are in bytes and link rates in bits/s; the byte→bit factor of 8
//! is applied only where a payload meets a link rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BITS_PER_BYTE: f64 = 8.0;

#[derive(Debug, Error, PartialEq)]
pub enum DelayError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{name} must be non-negative, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("{name} must be 0 or 1, got {value}")]
    NotBinary { name: &'static str, value: u8 },
    #[error("unknown user {0}")]
    UnknownUser(usize),
}

fn positive(name: &'static str, value: f64) -> Result<f64, DelayError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(DelayError::NonPositive { name, value })
    }
}

fn non_negative(name: &'static str, value: f64) -> Result<f64, DelayError> {
    if value >= 0.0 && !value.is_nan() {
        Ok(value)
    } else {
        Err(DelayError::Negative { name, value })
    }
}

fn binary(name: &'static str, value: u8) -> Result<f64, DelayError> {
    match value {
        0 | 1 => Ok(f64::from(value)),
        _ => Err(DelayError::NotBinary { name, value }),
    }
}

/// Time to process `data` bytes at `rate` bytes/s.
pub fn local_processing_delay(data: f64, rate: f64) -> Result<f64, DelayError> {
    let rate = positive("compute rate", rate)?;
    Ok(non_negative("data size", data)? / rate)
}

/// `D * (idx_w / s_w + idx_r / s_r)`.
pub fn storage_delay(
    data: f64,
    write_idx: u8,
    read_idx: u8,
    write_speed: f64,
    read_speed: f64,
) -> Result<f64, DelayError> {
    let w = binary("write index", write_idx)?;
    let r = binary("read index", read_idx)?;
    let sw = positive("write speed", write_speed)?;
    let sr = positive("read speed", read_speed)?;
    Ok(non_negative("data size", data)? * (w / sw + r / sr))
}

/// Local execution on the user's own device: processing plus storage, with no
/// transmission and no queueing.
pub fn local_total_delay(
    data: f64,
    rate: f64,
    write_idx: u8,
    read_idx: u8,
    write_speed: f64,
    read_speed: f64,
) -> Result<f64, DelayError> {
    Ok(local_processing_delay(data, rate)?
        + storage_delay(data, write_idx, read_idx, write_speed, read_speed)?)
}

/// Radio parameters of one user towards its node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserRadio {
    /// watts
    pub tx_power: f64,
    /// amplitude gain `h`; the received power is `P |h|^2`
    pub gain: f64,
}

impl UserRadio {
    pub fn received_power(&self) -> f64 {
        self.tx_power * self.gain * self.gain
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    /// hertz
    pub bandwidth: f64,
    /// watts
    pub noise_variance: f64,
    pub users: Vec<UserRadio>,
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<(), DelayError> {
        positive("bandwidth", self.bandwidth)?;
        positive("noise variance", self.noise_variance)?;
        for u in &self.users {
            non_negative("transmit power", u.tx_power)?;
            non_negative("channel gain", u.gain)?;
        }
        Ok(())
    }

    fn radio(&self, user: usize) -> Result<&UserRadio, DelayError> {
        self.users.get(user).ok_or(DelayError::UnknownUser(user))
    }
}

/// Shannon rate of `user` with every user in `interferers` (other than itself)
/// transmitting concurrently. bits/s.
pub fn link_rate(spec: &ChannelSpec, user: usize, interferers: &[usize]) -> Result<f64, DelayError> {
    let own = spec.radio(user)?.received_power();
    let mut interference = 0.0;
    for &v in interferers.iter().filter(|&&v| v != user) {
        interference += spec.radio(v)?.received_power();
    }
    let sinr = own / (spec.noise_variance + interference);
    Ok(spec.bandwidth * (1.0 + sinr).log2())
}

/// `payload` bits over a link of `rate` bits/s.
pub fn transmission_delay(payload_bits: f64, rate: f64) -> Result<f64, DelayError> {
    let rate = positive("link rate", rate)?;
    Ok(non_negative("payload", payload_bits)? / rate)
}

/// Components of the end-to-end delay of one request served at the edge, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DelayBreakdown {
    pub transmission: f64,
    pub storage: f64,
    pub processing: f64,
    pub waiting: f64,
}

impl DelayBreakdown {
    pub fn new(transmission: f64, storage: f64, processing: f64, waiting: f64) -> Result<Self, DelayError> {
        let parts = Self {
            transmission,
            storage,
            processing,
            waiting,
        };
        parts.validate()?;
        Ok(parts)
    }

    pub fn validate(&self) -> Result<(), DelayError> {
        non_negative("transmission delay", self.transmission)?;
        non_negative("storage delay", self.storage)?;
        non_negative("processing delay", self.processing)?;
        non_negative("waiting delay", self.waiting)?;
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.transmission + self.storage + self.processing + self.waiting
    }
}

/// Sum of the four edge delay components.
pub fn edge_total_delay(parts: &DelayBreakdown) -> Result<f64, DelayError> {
    parts.validate()?;
    Ok(parts.total())
}
