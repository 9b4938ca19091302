//! Run configuration: JSON text, dotted-path overrides, validation.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "name": "spurious",
//!   "scenario": { "kind": "spurious-feature", ... },
//!   "train": { "outer_iters": 200, ... },
//!   "seeds": [0, 1, 2],
//!   "val_fraction": 0.2,
//!   "protocol": "unseen",
//!   "jobs": 1
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::ScenarioSpec;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Which domains are held out for testing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Train on the source domains, test on the generated unseen domain.
    #[default]
    Unseen,
    /// Every generated domain (sources and unseen) is held out in turn and
    /// the rest are the sources.
    LeaveOneDomainOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    pub scenario: ScenarioSpec,
    pub train: TrainConfig,
    /// Each seed drives both data generation and training.
    pub seeds: Vec<u64>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub protocol: Protocol,
    /// Worker threads for independent runs.
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_name() -> String {
    "run".into()
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_jobs() -> usize {
    1
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(
                "schema_version",
                format!("{} is not supported (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::invalid("name", "must be a non-empty path component"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds", "need at least one seed"));
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::invalid(format!("seeds[{i}]"), format!("seed {s} is repeated")));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("val_fraction", format!("{} is outside (0, 1)", self.val_fraction)));
        }
        if self.jobs == 0 {
            return Err(Error::invalid("jobs", "must be at least 1"));
        }
        if self.scenario.sources() < 2 {
            return Err(Error::invalid("scenario.source_params", "need at least 2 source domains"));
        }
        self.scenario.validate()?;
        self.train.validate()
    }

    /// Relative output directory of one run.
    pub fn run_dir(seed: u64, held_out: &str) -> String {
        format!("seed-{seed}/{held_out}")
    }
}

/// Parses a `key=value` override. The value is read as JSON when it parses
/// and as a bare string otherwise.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid("override", format!("`{spec}` is not key=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::invalid("override", format!("`{key}` has an empty path segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

/// Sets `path` inside `root`, creating intermediate objects. Numeric
/// segments index into existing arrays.
pub fn apply_override(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let dotted = path.join(".");
    let mut cur = root;
    for (i, seg) in path.iter().enumerate() {
        let last = i + 1 == path.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(seg.clone(), value);
                    return Ok(());
                }
                map.entry(seg.clone()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| Error::invalid(dotted.clone(), format!("`{seg}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::invalid(dotted.clone(), format!("index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(Error::invalid(
                    dotted.clone(),
                    format!("`{}` is not an object", path[..i].join(".")),
                ))
            }
        };
    }
    Ok(())
}

/// Parses config text, applies overrides in order, and validates.
pub fn parse_config(text: &str, origin: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| Error::Config {
        origin: origin.to_string(),
        message: e.to_string(),
    })?;
    for o in overrides {
        let (path, v) = parse_override(o)?;
        apply_override(&mut value, &path, v)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(&value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Config {
            origin: origin.to_string(),
            message: if path == "." { inner.to_string() } else { format!("{path}: {inner}") },
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        origin: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config(&text, &path.display().to_string(), overrides)
}
