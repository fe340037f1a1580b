//! Experiment files.
//!
//! An experiment is a TOML file whose top level holds any [`SimConfig`]
//! field, plus three keys of its own:
//!
//! ```toml
//! seeds = [0, 1, 2]
//! out = "results"
//! devices = "table2"
//!
//! [sweep]
//! v = [0, 50, 100]
//! "workload.timeout_max" = [10, 20]
//! ```
//!
//! Sweep axes name a scalar field, dotted for nested ones, and are expanded
//! as a cross product in the order written.

use std::fmt;
use std::path::{Path, PathBuf};

use edgeprov_core::sim::{self, BackgroundLoad, SimConfig};
use serde::Deserialize;
use toml::{Table, Value};

pub const MAX_RUNS: usize = 10_000;
pub const DEFAULT_OUT: &str = "edgeprov-out";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("unknown key `{key}`{}", hint(.suggestion))]
    UnknownKey { key: String, suggestion: Option<String> },
    #[error("invalid value at `{path}`: {message}")]
    Type { path: String, message: String },
    #[error("unknown device preset `{name}`{}", hint(.suggestion))]
    UnknownPreset { name: String, suggestion: Option<String> },
    #[error("sweep axis `{axis}`: {message}")]
    Sweep { axis: String, message: String },
    #[error("sweep expands to {runs} runs, more than the cap of {cap}")]
    TooManyRuns { runs: usize, cap: usize },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn hint(suggestion: &Option<String>) -> String {
    match suggestion {
        Some(s) => format!(", did you mean `{s}`?"),
        None => String::new(),
    }
}

/// One swept parameter and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub name: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub base: SimConfig,
    pub sweep: Vec<SweepAxis>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

/// A single point of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub index: usize,
    /// Axis values in axis order.
    pub params: Vec<(String, Value)>,
    pub seed: u64,
    pub config: SimConfig,
}

impl fmt::Display for RunPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run {} (", self.index)?;
        for (name, value) in &self.params {
            write!(f, "{name}={}, ", format_value(value))?;
        }
        write!(f, "seed={})", self.seed)
    }
}

/// Plain text for a scalar, the way it appears in CSV output.
pub fn format_value(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(x) => x.to_string(),
        Value::Boolean(b) => b.to_string(),
        other => other.to_string(),
    }
}

impl ExperimentSpec {
    pub fn from_config(base: SimConfig) -> Self {
        Self {
            seeds: vec![base.seed],
            base,
            sweep: Vec::new(),
            out: PathBuf::from(DEFAULT_OUT),
        }
    }

    pub fn run_count(&self) -> usize {
        self.sweep
            .iter()
            .fold(self.seeds.len(), |n, axis| n.saturating_mul(axis.values.len()))
    }

    /// Fix `name` in the base config and drop any sweep over it.
    pub fn set(&mut self, name: &str, value: Value) -> Result<(), ConfigError> {
        self.sweep.retain(|a| a.name != name);
        self.base = with_value(&self.base, name, value)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("`seeds` is empty".into()));
        }
        self.base.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let schema = schema();
        for axis in &self.sweep {
            check_axis(axis, &schema)?;
        }
        let runs = self.run_count();
        if runs > MAX_RUNS {
            return Err(ConfigError::TooManyRuns { runs, cap: MAX_RUNS });
        }
        Ok(())
    }

    /// Every run, sweep points outermost in axis order and seeds innermost.
    pub fn plans(&self) -> Result<Vec<RunPlan>, ConfigError> {
        self.validate()?;
        let mut points: Vec<Vec<(String, Value)>> = vec![Vec::new()];
        for axis in &self.sweep {
            points = points
                .into_iter()
                .flat_map(|p| {
                    axis.values.iter().map(move |v| {
                        let mut p = p.clone();
                        p.push((axis.name.clone(), v.clone()));
                        p
                    })
                })
                .collect();
        }
        let mut plans = Vec::with_capacity(self.run_count());
        for params in points {
            let mut config = self.base.clone();
            for (name, value) in &params {
                config = with_value(&config, name, value.clone())?;
            }
            for &seed in &self.seeds {
                let mut config = config.clone();
                config.seed = seed;
                let index = plans.len();
                let plan = RunPlan {
                    index,
                    params: params.clone(),
                    seed,
                    config,
                };
                plan.config
                    .validate()
                    .map_err(|e| ConfigError::Invalid(format!("{plan}: {e}")))?;
                plans.push(plan);
            }
        }
        Ok(plans)
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentSpec, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentSpec, ConfigError> {
    let mut table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;

    let seeds = match table.remove("seeds") {
        None => None,
        Some(v) => Some(decode::<Vec<u64>>(v, "seeds")?),
    };
    let out = match table.remove("out") {
        None => PathBuf::from(DEFAULT_OUT),
        Some(v) => PathBuf::from(decode::<String>(v, "out")?),
    };
    let sweep = match table.remove("sweep") {
        None => Vec::new(),
        Some(Value::Table(axes)) => axes
            .into_iter()
            .map(|(name, values)| match values {
                Value::Array(values) => Ok(SweepAxis { name, values }),
                _ => Err(ConfigError::Sweep {
                    axis: name,
                    message: "expected a list of values".into(),
                }),
            })
            .collect::<Result<_, _>>()?,
        Some(_) => {
            return Err(ConfigError::Type {
                path: "sweep".into(),
                message: "expected a table of axis = [values]".into(),
            })
        }
    };
    if let Some(Value::String(name)) = table.get("devices") {
        let devices = sim::preset(name).ok_or_else(|| ConfigError::UnknownPreset {
            name: name.clone(),
            suggestion: nearest(name, sim::presets().iter().map(|(n, _)| *n)),
        })?;
        table.insert("devices".into(), to_value(&devices));
    }

    let base = deserialize_config(Value::Table(table))?;
    let spec = ExperimentSpec {
        seeds: seeds.unwrap_or_else(|| vec![base.seed]),
        base,
        sweep,
        out,
    };
    spec.validate()?;
    Ok(spec)
}

fn decode<T: for<'de> Deserialize<'de>>(value: Value, path: &str) -> Result<T, ConfigError> {
    T::deserialize(value).map_err(|e| ConfigError::Type {
        path: path.into(),
        message: e.to_string(),
    })
}

fn deserialize_config(value: Value) -> Result<SimConfig, ConfigError> {
    let mut unknown = Vec::new();
    let mut record = |path: serde_ignored::Path<'_>| unknown.push(segments(&path));
    let de = serde_ignored::Deserializer::new(value, &mut record);
    let result: Result<SimConfig, _> = serde_path_to_error::deserialize(de);
    if let Some(path) = unknown.into_iter().next() {
        return Err(unknown_key(&path));
    }
    result.map_err(|e| ConfigError::Type {
        path: e.path().to_string(),
        message: e.into_inner().message().to_string(),
    })
}

#[derive(Debug, Clone)]
enum Segment {
    Key(String),
    Index(usize),
}

fn segments(path: &serde_ignored::Path<'_>) -> Vec<Segment> {
    use serde_ignored::Path as P;
    let mut out = Vec::new();
    let mut cur = path;
    loop {
        cur = match cur {
            P::Root => break,
            P::Map { parent, key } => {
                out.push(Segment::Key(key.clone()));
                parent
            }
            P::Seq { parent, index } => {
                out.push(Segment::Index(*index));
                parent
            }
            P::Some { parent } | P::NewtypeStruct { parent } | P::NewtypeVariant { parent } => parent,
        };
    }
    out.reverse();
    out
}

fn unknown_key(path: &[Segment]) -> ConfigError {
    let key = path
        .iter()
        .map(|s| match s {
            Segment::Key(k) => k.clone(),
            Segment::Index(i) => i.to_string(),
        })
        .collect::<Vec<_>>()
        .join(".");
    let Some((Segment::Key(last), parents)) = path.split_last() else {
        return ConfigError::UnknownKey { key, suggestion: None };
    };
    let mut node = &schema();
    for seg in parents {
        let next = match (seg, node) {
            (Segment::Key(k), Value::Table(t)) => t.get(k),
            // any element of a list has the same shape as the first
            (Segment::Index(_), Value::Array(a)) => a.first(),
            _ => None,
        };
        match next {
            Some(n) => node = n,
            None => return ConfigError::UnknownKey { key, suggestion: None },
        }
    }
    let suggestion = match node {
        Value::Table(t) => nearest(last, t.keys().map(String::as_str)),
        _ => None,
    };
    ConfigError::UnknownKey { key, suggestion }
}

/// Every field name an experiment file may use, shaped like a config.
fn schema() -> Value {
    let mut value = to_value(&SimConfig::default());
    let Value::Table(t) = &mut value else { unreachable!() };
    t.insert("tail_bound".into(), Value::Float(0.0));
    let sample = BackgroundLoad {
        device: 0,
        start: 0,
        end: 0,
        processing: 0,
        storage: 0,
        memory: 0,
        networking: 0,
    };
    t.insert("background".into(), Value::Array(vec![to_value(&sample)]));
    for key in ["seeds", "out", "sweep"] {
        t.insert(key.into(), Value::Boolean(true));
    }
    value
}

fn nearest<'a>(word: &str, candidates: impl Iterator<Item = &'a str>) -> Option<String> {
    candidates
        .map(|c| (strsim::damerau_levenshtein(word, c), c))
        .filter(|&(d, c)| d <= 3.max(c.len() / 3))
        .min()
        .map(|(_, c)| c.to_string())
}

fn to_value<T: serde::Serialize>(x: &T) -> Value {
    Value::try_from(x).expect("configuration types serialize to TOML")
}

fn check_axis(axis: &SweepAxis, schema: &Value) -> Result<(), ConfigError> {
    let err = |message: String| ConfigError::Sweep {
        axis: axis.name.clone(),
        message,
    };
    if matches!(axis.name.as_str(), "seed" | "seeds") {
        return Err(err("list seeds in the top-level `seeds` key".into()));
    }
    if axis.values.is_empty() {
        return Err(err("no values".into()));
    }
    let mut node = schema;
    let parts: Vec<&str> = axis.name.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let Value::Table(t) = node else {
            return Err(err("not a field".into()));
        };
        match t.get(*part) {
            Some(n) if depth > 0 || !matches!(*part, "out" | "sweep") => node = n,
            _ => {
                let names = scalar_paths(schema);
                let suggestion = nearest(&axis.name, names.iter().map(String::as_str));
                return Err(err(format!("not a configuration field{}", hint(&suggestion))));
            }
        }
    }
    if matches!(node, Value::Table(_) | Value::Array(_)) {
        return Err(err("only scalar fields can be swept".into()));
    }
    if let Some(v) = axis.values.iter().find(|v| matches!(v, Value::Table(_) | Value::Array(_))) {
        return Err(err(format!("value {v} is not a scalar")));
    }
    Ok(())
}

fn scalar_paths(schema: &Value) -> Vec<String> {
    fn walk(prefix: &str, node: &Value, out: &mut Vec<String>) {
        match node {
            Value::Table(t) => {
                for (k, v) in t {
                    let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&path, v, out);
                }
            }
            Value::Array(_) => {}
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk("", schema, &mut out);
    out
}

/// `config` with the dotted field `name` replaced by `value`.
pub fn with_value(config: &SimConfig, name: &str, value: Value) -> Result<SimConfig, ConfigError> {
    let mut root = to_value(config);
    let mut node = &mut root;
    let parts: Vec<&str> = name.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    for part in parents {
        node = match node {
            Value::Table(t) => t.get_mut(*part),
            _ => None,
        }
        .ok_or_else(|| ConfigError::Sweep {
            axis: name.into(),
            message: "not a field".into(),
        })?;
    }
    let Value::Table(t) = node else {
        return Err(ConfigError::Sweep {
            axis: name.into(),
            message: "not a field".into(),
        });
    };
    t.insert((*last).into(), value);
    deserialize_config(root)
}
