//! Resource representation: devices describe their CPU, memory, storage and
//! network in an XML document; the supervisor keeps the latest document of
//! every device in a [`Registry`] and derives its resource state from it.
//!
//! Document layout (UTF-8, element order fixed):
//!
//! ```xml
//! <?xml version="1.0" encoding="UTF-8"?>
//! <resources device="1" slot="42">
//!   <cpu>
//!     <family>Intel Xeon</family>
//!     <architecture>x86_64</architecture>
//!     <cores>2</cores>
//!     <frequency_hz>2500000000</frequency_hz>
//!     <usage>0.25</usage>
//!   </cpu>
//!   <memory>
//!     <total_bytes>2147483648</total_bytes>
//!     <available_bytes>1073741824</available_bytes>
//!   </memory>
//!   <storage>
//!     <total_bytes>21474836480</total_bytes>
//!     <available_bytes>21474836480</available_bytes>
//!     <read_bps>500000000</read_bps>
//!     <write_bps>300000000</write_bps>
//!   </storage>
//!   <network>
//!     <capacity_bps>1000000000</capacity_bps>
//!     <available_bps>1000000000</available_bps>
//!   </network>
//! </resources>
//! ```
//!
//! Counts and byte amounts are plain integers. `usage` is a decimal with at
//! most six fractional digits and no trailing zeros (`0`, `0.25`, `1`).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use quick_xml::events::Event;
use quick_xml::Reader;
use thiserror::Error;

use crate::domain::{processing_grain, DeviceId, EdgeDevice, ResourceVector};

const PPM: u64 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum ReprError {
    #[error("malformed XML at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("missing required element `{0}`")]
    MissingElement(String),
    #[error("missing required attribute `{0}`")]
    MissingAttribute(String),
    #[error("invalid value for `{field}`: {value:?}")]
    InvalidValue { field: String, value: String },
    #[error("descriptor violates invariant: {0}")]
    Validation(String),
    #[error("device {0} is not registered")]
    UnknownDevice(DeviceId),
    #[error("snapshot of device {device} at slot {slot} is older than the registered one ({current})")]
    OutOfOrder {
        device: DeviceId,
        slot: u64,
        current: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpuDescriptor {
    pub family: String,
    pub architecture: String,
    pub cores: u32,
    pub frequency_hz: u64,
    /// Allocated fraction of the processing capacity, in [0, 1].
    pub usage: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryDescriptor {
    pub total: u64,
    pub available: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorageDescriptor {
    pub total: u64,
    pub available: u64,
    /// bytes/s
    pub read_speed: u64,
    /// bytes/s
    pub write_speed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkDescriptor {
    /// bits/s
    pub capacity: u64,
    /// bits/s
    pub available: u64,
}

/// What one device reports about itself at one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceDescriptor {
    pub device: DeviceId,
    pub cpu: CpuDescriptor,
    pub memory: MemoryDescriptor,
    pub storage: StorageDescriptor,
    pub network: NetworkDescriptor,
    pub taken_at: u64,
}

impl ResourceDescriptor {
    pub fn validate(&self) -> Result<(), ReprError> {
        let fail = |msg: String| Err(ReprError::Validation(msg));
        if self.cpu.cores == 0 {
            return fail("cpu cores must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.cpu.usage) {
            return fail(format!("cpu usage {} outside [0, 1]", self.cpu.usage));
        }
        if self.memory.available > self.memory.total {
            return fail(format!(
                "memory available {} exceeds total {}",
                self.memory.available, self.memory.total
            ));
        }
        if self.storage.available > self.storage.total {
            return fail(format!(
                "storage available {} exceeds total {}",
                self.storage.available, self.storage.total
            ));
        }
        if self.network.available > self.network.capacity {
            return fail(format!(
                "network available {} exceeds capacity {}",
                self.network.available, self.network.capacity
            ));
        }
        Ok(())
    }

    pub fn processing_capacity(&self) -> u64 {
        u64::from(self.cpu.cores) * self.cpu.frequency_hz
    }

    pub fn capacity(&self) -> ResourceVector {
        ResourceVector::new(
            self.processing_capacity(),
            self.storage.total,
            self.memory.total,
            self.network.capacity,
        )
    }

    /// Residual resources as reported. Processing is recovered exactly from the
    /// usage figure because placements are made in whole processing grains.
    pub fn residual(&self) -> ResourceVector {
        let cap = self.processing_capacity();
        let ppm = usage_to_ppm(self.cpu.usage);
        let used = if cap.is_multiple_of(PPM) {
            ppm * processing_grain(cap)
        } else {
            ((u128::from(cap) * u128::from(ppm) + u128::from(PPM / 2)) / u128::from(PPM)) as u64
        };
        ResourceVector::new(
            cap.saturating_sub(used),
            self.storage.available,
            self.memory.available,
            self.network.available,
        )
    }
}

fn usage_to_ppm(usage: f64) -> u64 {
    (usage * PPM as f64).round() as u64
}

fn format_usage(usage: f64) -> String {
    let ppm = usage_to_ppm(usage);
    let (whole, frac) = (ppm / PPM, ppm % PPM);
    if frac == 0 {
        return whole.to_string();
    }
    let digits = format!("{frac:06}");
    format!("{whole}.{}", digits.trim_end_matches('0'))
}

/// Simulated probe: reads the device model instead of the operating system.
pub fn snapshot(device: &EdgeDevice, slot: u64) -> ResourceDescriptor {
    let cap = device.capacity;
    let used = device.consumption();
    let usage_ppm = if cap.processing == 0 {
        0
    } else {
        let num = u128::from(used.processing.min(cap.processing)) * u128::from(PPM)
            + u128::from(cap.processing / 2);
        (num / u128::from(cap.processing)) as u64
    };
    let avail = |total: u64, taken: u64| total.saturating_sub(taken);
    ResourceDescriptor {
        device: device.id,
        cpu: CpuDescriptor {
            family: device.cpu.family.clone(),
            architecture: device.cpu.architecture.clone(),
            cores: device.cpu.cores,
            frequency_hz: device.cpu.frequency_hz,
            usage: usage_ppm as f64 / PPM as f64,
        },
        memory: MemoryDescriptor {
            total: cap.memory,
            available: avail(cap.memory, used.memory),
        },
        storage: StorageDescriptor {
            total: cap.storage,
            available: avail(cap.storage, used.storage),
            read_speed: device.read_speed,
            write_speed: device.write_speed,
        },
        network: NetworkDescriptor {
            capacity: cap.networking,
            available: avail(cap.networking, used.networking),
        },
        taken_at: slot,
    }
}

fn escape(text: &str) -> std::borrow::Cow<'_, str> {
    quick_xml::escape::escape(text)
}

pub fn to_xml(d: &ResourceDescriptor) -> String {
    let mut out = String::with_capacity(640);
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(out, "<resources device=\"{}\" slot=\"{}\">", d.device.0, d.taken_at);
    out.push_str("  <cpu>\n");
    let _ = writeln!(out, "    <family>{}</family>", escape(&d.cpu.family));
    let _ = writeln!(out, "    <architecture>{}</architecture>", escape(&d.cpu.architecture));
    let _ = writeln!(out, "    <cores>{}</cores>", d.cpu.cores);
    let _ = writeln!(out, "    <frequency_hz>{}</frequency_hz>", d.cpu.frequency_hz);
    let _ = writeln!(out, "    <usage>{}</usage>", format_usage(d.cpu.usage));
    out.push_str("  </cpu>\n  <memory>\n");
    let _ = writeln!(out, "    <total_bytes>{}</total_bytes>", d.memory.total);
    let _ = writeln!(out, "    <available_bytes>{}</available_bytes>", d.memory.available);
    out.push_str("  </memory>\n  <storage>\n");
    let _ = writeln!(out, "    <total_bytes>{}</total_bytes>", d.storage.total);
    let _ = writeln!(out, "    <available_bytes>{}</available_bytes>", d.storage.available);
    let _ = writeln!(out, "    <read_bps>{}</read_bps>", d.storage.read_speed);
    let _ = writeln!(out, "    <write_bps>{}</write_bps>", d.storage.write_speed);
    out.push_str("  </storage>\n  <network>\n");
    let _ = writeln!(out, "    <capacity_bps>{}</capacity_bps>", d.network.capacity);
    let _ = writeln!(out, "    <available_bps>{}</available_bps>", d.network.available);
    out.push_str("  </network>\n</resources>\n");
    out
}

/// Minimal element tree; only what the schema needs.
#[derive(Debug, Default)]
struct Element {
    name: String,
    attributes: Vec<(String, String)>,
    text: String,
    children: Vec<Element>,
}

impl Element {
    fn child(&self, name: &str) -> Option<&Element> {
        self.children.iter().find(|c| c.name == name)
    }

    fn required(&self, name: &str) -> Result<&Element, ReprError> {
        self.child(name)
            .ok_or_else(|| ReprError::MissingElement(format!("{}/{name}", self.name)))
    }

    fn attribute(&self, name: &str) -> Result<&str, ReprError> {
        self.attributes
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| ReprError::MissingAttribute(format!("{}@{name}", self.name)))
    }

    fn text_of(&self, name: &str) -> Result<&str, ReprError> {
        Ok(self.required(name)?.text.as_str())
    }

    fn int_of<T: std::str::FromStr>(&self, name: &str) -> Result<T, ReprError> {
        let raw = self.text_of(name)?;
        parse_int(&format!("{}/{name}", self.name), raw.trim())
    }
}

fn parse_int<T: std::str::FromStr>(field: &str, raw: &str) -> Result<T, ReprError> {
    let digits_only = !raw.is_empty() && raw.bytes().all(|b| b.is_ascii_digit());
    digits_only
        .then(|| raw.parse().ok())
        .flatten()
        .ok_or_else(|| ReprError::InvalidValue {
            field: field.to_string(),
            value: raw.to_string(),
        })
}

fn parse_error(reader: &Reader<&[u8]>, message: impl ToString) -> ReprError {
    ReprError::Parse {
        offset: reader.error_position(),
        message: message.to_string(),
    }
}

fn parse_tree(text: &str) -> Result<Element, ReprError> {
    let mut reader = Reader::from_str(text);
    reader.config_mut().check_end_names = true;
    let mut stack: Vec<Element> = Vec::new();
    let mut root: Option<Element> = None;

    let open = |e: &quick_xml::events::BytesStart<'_>, reader: &Reader<&[u8]>| -> Result<Element, ReprError> {
        let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
        let mut attributes = Vec::new();
        for attr in e.attributes() {
            let attr = attr.map_err(|err| parse_error(reader, err))?;
            let key = String::from_utf8_lossy(attr.key.as_ref()).into_owned();
            let value = attr
                .unescape_value()
                .map_err(|err| parse_error(reader, err))?
                .into_owned();
            attributes.push((key, value));
        }
        Ok(Element {
            name,
            attributes,
            ..Element::default()
        })
    };

    loop {
        let event = reader.read_event().map_err(|err| parse_error(&reader, err))?;
        match event {
            Event::Start(e) => {
                if root.is_some() {
                    return Err(parse_error(&reader, "content after the root element"));
                }
                stack.push(open(&e, &reader)?);
            }
            Event::Empty(e) => {
                let el = open(&e, &reader)?;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(el),
                    None if root.is_none() => root = Some(el),
                    None => return Err(parse_error(&reader, "content after the root element")),
                }
            }
            Event::End(_) => {
                let el = stack
                    .pop()
                    .ok_or_else(|| parse_error(&reader, "unexpected closing tag"))?;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(el),
                    None => root = Some(el),
                }
            }
            Event::Text(t) => {
                let s = t.unescape().map_err(|err| parse_error(&reader, err))?;
                match stack.last_mut() {
                    Some(el) => el.text.push_str(&s),
                    None if s.trim().is_empty() => {}
                    None => return Err(parse_error(&reader, "text outside the root element")),
                }
            }
            Event::CData(t) => {
                if let Some(el) = stack.last_mut() {
                    el.text.push_str(&String::from_utf8_lossy(&t));
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if !stack.is_empty() {
        return Err(ReprError::Parse {
            offset: reader.buffer_position(),
            message: format!("unclosed element `{}`", stack[stack.len() - 1].name),
        });
    }
    root.ok_or(ReprError::Parse {
        offset: reader.buffer_position(),
        message: "no root element".into(),
    })
}

/// Parses and validates a descriptor. Unknown elements are ignored.
pub fn from_xml(text: &str) -> Result<ResourceDescriptor, ReprError> {
    let root = parse_tree(text)?;
    if root.name != "resources" {
        return Err(ReprError::MissingElement("resources".into()));
    }
    let device = DeviceId(parse_int("resources@device", root.attribute("device")?)?);
    let taken_at = parse_int("resources@slot", root.attribute("slot")?)?;

    let cpu = root.required("cpu")?;
    let usage_raw = cpu.text_of("usage")?.trim();
    let usage: f64 = usage_raw
        .parse()
        .ok()
        .filter(|u: &f64| u.is_finite() && usage_raw.bytes().all(|b| b.is_ascii_digit() || b == b'.'))
        .ok_or_else(|| ReprError::InvalidValue {
            field: "cpu/usage".into(),
            value: usage_raw.to_string(),
        })?;
    let memory = root.required("memory")?;
    let storage = root.required("storage")?;
    let network = root.required("network")?;

    let descriptor = ResourceDescriptor {
        device,
        cpu: CpuDescriptor {
            family: cpu.text_of("family")?.to_string(),
            architecture: cpu.text_of("architecture")?.to_string(),
            cores: cpu.int_of("cores")?,
            frequency_hz: cpu.int_of("frequency_hz")?,
            usage,
        },
        memory: MemoryDescriptor {
            total: memory.int_of("total_bytes")?,
            available: memory.int_of("available_bytes")?,
        },
        storage: StorageDescriptor {
            total: storage.int_of("total_bytes")?,
            available: storage.int_of("available_bytes")?,
            read_speed: storage.int_of("read_bps")?,
            write_speed: storage.int_of("write_bps")?,
        },
        network: NetworkDescriptor {
            capacity: network.int_of("capacity_bps")?,
            available: network.int_of("available_bps")?,
        },
        taken_at,
    };
    descriptor.validate()?;
    Ok(descriptor)
}

pub const DEFAULT_MAX_AGE: u64 = 1;

/// Latest descriptor per device, as known to the supervisor.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    entries: BTreeMap<DeviceId, ResourceDescriptor>,
    /// Descriptors older than this many slots count as stale.
    pub max_age: u64,
}

impl Default for Registry {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
            max_age: DEFAULT_MAX_AGE,
        }
    }
}

impl Registry {
    pub fn with_max_age(max_age: u64) -> Self {
        Self {
            max_age,
            ..Self::default()
        }
    }

    pub fn get(&self, device: DeviceId) -> Option<&ResourceDescriptor> {
        self.entries.get(&device)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ResourceDescriptor> {
        self.entries.values()
    }

    /// Stores a descriptor; a snapshot never replaces a newer one.
    pub fn insert(&mut self, descriptor: ResourceDescriptor) -> Result<(), ReprError> {
        if let Some(current) = self.entries.get(&descriptor.device) {
            if descriptor.taken_at < current.taken_at {
                return Err(ReprError::OutOfOrder {
                    device: descriptor.device,
                    slot: descriptor.taken_at,
                    current: current.taken_at,
                });
            }
        }
        self.entries.insert(descriptor.device, descriptor);
        Ok(())
    }

    /// First exposure of a device to the supervisor.
    pub fn register(&mut self, device: &EdgeDevice, slot: u64) -> Result<&ResourceDescriptor, ReprError> {
        let descriptor = from_xml(&to_xml(&snapshot(device, slot)))?;
        self.insert(descriptor)?;
        Ok(&self.entries[&device.id])
    }

    pub fn age(&self, device: DeviceId, slot: u64) -> Option<u64> {
        self.get(device).map(|d| slot.saturating_sub(d.taken_at))
    }

    pub fn is_stale(&self, device: DeviceId, slot: u64) -> bool {
        self.age(device, slot).is_none_or(|age| age > self.max_age)
    }
}

/// The supervisor asks a registered device for its resources. The exchange goes
/// through the XML codec in both directions.
pub fn supervisor_query(
    registry: &mut Registry,
    device: &EdgeDevice,
    slot: u64,
) -> Result<ResourceDescriptor, ReprError> {
    if registry.get(device.id).is_none() {
        return Err(ReprError::UnknownDevice(device.id));
    }
    let document = to_xml(&snapshot(device, slot));
    let descriptor = from_xml(&document)?;
    registry.insert(descriptor.clone())?;
    Ok(descriptor)
}
