//! Flat JSON configuration mapped onto the library's parameter structs.
//!
//! Keys are the field names of `ModelParams`, `TrainConfig` (with the loss
//! weights lifted to the top level), plus `fd_`-prefixed `FdGrid` and
//! `TransitionOptions` fields and `out`.

use std::path::{Path, PathBuf};

use abh_core::economy::ModelParams;
use abh_core::error::{AbhError, Result};
use abh_core::fd_oracle::{FdGrid, TransitionOptions};
use abh_core::losses::LossWeights;
use abh_core::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelParams,
    pub train: TrainConfig,
    pub fd_grid: FdGrid,
    pub fd: TransitionOptions,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelParams::default(),
            train: TrainConfig::default(),
            fd_grid: FdGrid::default(),
            fd: TransitionOptions::default(),
            out: PathBuf::from("out"),
        }
    }
}

/// Where a configuration value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    File,
    Flag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
    pub source: Source,
}

impl std::fmt::Display for Override {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let src = match self.source {
            Source::File => "config file",
            Source::Flag => "command line",
        };
        write!(f, "override {} = {} ({src})", self.key, self.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Section {
    Model,
    Train,
    Weights,
    Grid,
    Fd,
    Out,
}

fn object_of<T: Serialize>(x: &T) -> Map<String, Value> {
    match serde_json::to_value(x) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("parameter structs serialise to objects"),
    }
}

struct Defaults {
    model: Map<String, Value>,
    train: Map<String, Value>,
    weights: Map<String, Value>,
    grid: Map<String, Value>,
    fd: Map<String, Value>,
}

impl Defaults {
    fn new() -> Self {
        let mut train = object_of(&TrainConfig::default());
        train.remove("weights");
        Defaults {
            model: object_of(&ModelParams::default()),
            train,
            weights: object_of(&LossWeights::default()),
            grid: object_of(&FdGrid::default()),
            fd: object_of(&TransitionOptions::default()),
        }
    }

    /// Section owning `key` and the field name inside it.
    fn locate<'k>(&self, key: &'k str) -> Option<(Section, &'k str)> {
        if key == "out" {
            return Some((Section::Out, key));
        }
        if let Some(rest) = key.strip_prefix("fd_") {
            if self.grid.contains_key(rest) {
                return Some((Section::Grid, rest));
            }
            if self.fd.contains_key(rest) {
                return Some((Section::Fd, rest));
            }
        }
        [
            (Section::Model, &self.model),
            (Section::Train, &self.train),
            (Section::Weights, &self.weights),
        ]
        .into_iter()
        .find(|(_, m)| m.contains_key(key))
        .map(|(s, _)| (s, key))
    }

    fn section_mut(&mut self, s: Section) -> &mut Map<String, Value> {
        match s {
            Section::Model => &mut self.model,
            Section::Train => &mut self.train,
            Section::Weights => &mut self.weights,
            Section::Grid => &mut self.grid,
            Section::Fd => &mut self.fd,
            Section::Out => unreachable!("out is not a struct field"),
        }
    }

    fn section(&self, s: Section) -> &Map<String, Value> {
        match s {
            Section::Model => &self.model,
            Section::Train => &self.train,
            Section::Weights => &self.weights,
            Section::Grid => &self.grid,
            Section::Fd => &self.fd,
            Section::Out => unreachable!("out is not a struct field"),
        }
    }
}

fn decode<T: DeserializeOwned>(m: &Map<String, Value>) -> std::result::Result<T, serde_json::Error> {
    serde_json::from_value(Value::Object(m.clone()))
}

/// Checks that `value` has the right type for `field` in isolation.
fn type_check(defaults: &Defaults, section: Section, field: &str, value: &Value) -> std::result::Result<(), String> {
    if section == Section::Out {
        return match value {
            Value::String(_) => Ok(()),
            other => Err(format!("expected a path string, found {other}")),
        };
    }
    let mut m = defaults.section(section).clone();
    m.insert(field.to_string(), value.clone());
    let res = match section {
        Section::Model => decode::<ModelParams>(&m).map(drop),
        Section::Train => decode::<TrainConfig>(&m).map(drop),
        Section::Weights => decode::<LossWeights>(&m).map(drop),
        Section::Grid => decode::<FdGrid>(&m).map(drop),
        Section::Fd => decode::<TransitionOptions>(&m).map(drop),
        Section::Out => unreachable!(),
    };
    res.map_err(|e| e.to_string())
}

/// Builds a validated configuration from an optional JSON object and
/// command-line overrides, which win over the file. Every problem is
/// reported in a single error.
pub fn build(file: Option<&Value>, flags: &[(&str, Value)]) -> Result<(RunConfig, Vec<Override>)> {
    let mut defaults = Defaults::new();
    let base = Defaults::new();
    let mut problems = Vec::new();
    let mut overrides = Vec::new();
    let mut out = PathBuf::from("out");

    let mut entries: Vec<(String, Value, Source)> = Vec::new();
    match file {
        None => {}
        Some(Value::Object(m)) => entries.extend(m.iter().map(|(k, v)| (k.clone(), v.clone(), Source::File))),
        Some(other) => problems.push(format!("configuration must be a JSON object, found {other}")),
    }
    entries.extend(flags.iter().map(|(k, v)| (k.to_string(), v.clone(), Source::Flag)));

    for (key, value, source) in entries {
        let Some((section, field)) = base.locate(&key) else {
            problems.push(format!("unknown key `{key}`"));
            continue;
        };
        if let Err(e) = type_check(&base, section, field, &value) {
            problems.push(format!("`{key}`: {e}"));
            continue;
        }
        if section == Section::Out {
            out = PathBuf::from(value.as_str().unwrap_or_default());
        } else {
            defaults.section_mut(section).insert(field.to_string(), value.clone());
        }
        overrides.push(Override { key, value, source });
    }
    if !problems.is_empty() {
        return Err(AbhError::Config(problems.join("; ")));
    }

    let decoded = (|| -> std::result::Result<RunConfig, serde_json::Error> {
        let mut train = defaults.train.clone();
        train.insert("weights".into(), Value::Object(defaults.weights.clone()));
        Ok(RunConfig {
            model: decode(&defaults.model)?,
            train: decode(&train)?,
            fd_grid: decode(&defaults.grid)?,
            fd: decode(&defaults.fd)?,
            out,
        })
    })()
    .map_err(|e| AbhError::Config(e.to_string()))?;

    let mut v = decoded.model.violations();
    v.extend(decoded.train.violations());
    v.extend(decoded.fd_grid.violations());
    v.extend(decoded.fd.violations());
    if !v.is_empty() {
        return Err(AbhError::Config(v.join("; ")));
    }
    Ok((decoded, overrides))
}

/// Reads a JSON configuration file. An empty file means all defaults.
pub fn read_file(path: &Path) -> Result<Option<Value>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(AbhError::Config(format!("configuration file {} does not exist", path.display())))
        }
        Err(e) => return Err(e.into()),
    };
    if text.trim().is_empty() {
        return Ok(None);
    }
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| AbhError::Config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    /// Canonical JSON used for hashing and the manifest.
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("configuration serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_means_defaults() {
        let (cfg, ov) = build(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(ov.is_empty());
    }

    #[test]
    fn keys_reach_every_section() {
        let file = json!({"gamma": 3.0, "adam_lr": 0.01, "w_mass": 2.0, "fd_n_a": 51, "fd_tol": 1e-4, "out": "x"});
        let (cfg, ov) = build(Some(&file), &[]).unwrap();
        assert_eq!(cfg.model.gamma, 3.0);
        assert_eq!(cfg.train.adam_lr, 0.01);
        assert_eq!(cfg.train.weights.w_mass, 2.0);
        assert_eq!(cfg.fd_grid.n_a, 51);
        assert_eq!(cfg.fd.tol, 1e-4);
        assert_eq!(cfg.out, PathBuf::from("x"));
        assert_eq!(ov.len(), 6);
    }

    #[test]
    fn problems_are_reported_together() {
        let file = json!({"bogus": 1, "gamma": "two", "seed": -3});
        let msg = build(Some(&file), &[]).unwrap_err().to_string();
        assert!(msg.contains("bogus") && msg.contains("gamma") && msg.contains("seed"), "{msg}");
    }
}
