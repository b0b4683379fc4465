//! Run configuration: a TOML file layered over the built-in defaults, then
//! command-line overrides, resolved into a [`TrainerConfig`] plus run settings.

use std::fs;
use std::path::{Path, PathBuf};

use priorzero::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

/// Name of the section holding settings that are not part of the trainer.
pub const RUN_SECTION: &str = "run";

/// Output directory used when neither the file, the flag nor the environment
/// names one.
pub const DEFAULT_OUT_DIR: &str = "runs/priorzero";

/// Settings of the `[run]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub out_dir: String,
    /// Root seeds to train in turn; the trainer seed alone when empty.
    pub seeds: Vec<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_dir: DEFAULT_OUT_DIR.to_string(),
            seeds: Vec::new(),
        }
    }
}

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run: RunSection,
    pub trainer: TrainerConfig,
}

impl RunConfig {
    /// The seeds to train: `run.seeds`, or the trainer seed when empty.
    pub fn seeds(&self) -> Vec<u64> {
        if self.run.seeds.is_empty() {
            vec![self.trainer.seed]
        } else {
            self.run.seeds.clone()
        }
    }

    /// Every effective value, defaults included, as a TOML document that
    /// resolves back to `self`.
    pub fn to_toml(&self) -> Result<String, CliError> {
        let mut table = to_table(&self.trainer)?;
        table.insert(RUN_SECTION.into(), Value::Table(to_table(&self.run)?));
        toml::to_string(&table).map_err(|e| CliError::Invalid(e.to_string()))
    }
}

fn to_table<S: Serialize>(value: &S) -> Result<Table, CliError> {
    match Value::try_from(value) {
        Ok(Value::Table(t)) => Ok(t),
        Ok(_) => Err(CliError::Invalid("configuration must serialize to a table".into())),
        Err(e) => Err(CliError::Invalid(e.to_string())),
    }
}

/// Incrementally built configuration document.
#[derive(Debug, Clone)]
pub struct ConfigBuilder {
    doc: Table,
}

impl ConfigBuilder {
    /// Built-in defaults.
    pub fn defaults() -> Result<Self, CliError> {
        Self::from_trainer(&TrainerConfig::default())
    }

    /// Starts from an existing trainer configuration, e.g. one stored with a
    /// checkpoint.
    pub fn from_trainer(cfg: &TrainerConfig) -> Result<Self, CliError> {
        let mut doc = to_table(cfg)?;
        doc.insert(RUN_SECTION.into(), Value::Table(to_table(&RunSection::default())?));
        Ok(Self { doc })
    }

    /// Reads a trainer configuration stored as JSON next to a checkpoint.
    pub fn from_checkpoint(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("config.json");
        let text = fs::read_to_string(&path).map_err(|_| CliError::MissingFile { path: path.clone() })?;
        let cfg: TrainerConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Parse { path, message: e.to_string() })?;
        Self::from_trainer(&cfg)
    }

    /// Layers a TOML file over the current document. Tables merge key by key;
    /// any other value replaces the current one.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|_| CliError::MissingFile { path: path.to_path_buf() })?;
        let file: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        merge(&mut self.doc, file);
        Ok(())
    }

    /// Applies a `dotted.path=value` override. The value is read as a TOML
    /// value when it parses as one and as a bare string otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Override(format!("{assignment:?} is not of the form key=value")))?;
        let keys: Vec<&str> = path.trim().split('.').map(str::trim).collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(CliError::Override(format!("empty key in {path:?}")));
        }
        let value = parse_value(raw.trim());
        let (last, parents) = keys.split_last().expect("split yields at least one key");
        let mut table = &mut self.doc;
        for key in parents {
            let entry = table
                .entry(key.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            table = match entry {
                Value::Table(t) => t,
                _ => return Err(CliError::Override(format!("{key:?} in {path:?} is not a section"))),
            };
        }
        let value = match (table.get(*last), value) {
            (Some(Value::Float(_)), Value::Integer(i)) => Value::Float(i as f64),
            (_, v) => v,
        };
        table.insert(last.to_string(), value);
        Ok(())
    }

    /// Validates the document and splits it into run settings and the
    /// trainer configuration. Unknown keys are errors.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut doc = self.doc.clone();
        let run = match doc.remove(RUN_SECTION) {
            Some(v) => v
                .try_into::<RunSection>()
                .map_err(|e| CliError::Invalid(format!("[{RUN_SECTION}]: {e}")))?,
            None => RunSection::default(),
        };
        let trainer: TrainerConfig = Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Invalid(e.to_string()))?;
        trainer.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        Ok(RunConfig { run, trainer })
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(base: &mut Table, over: Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (Some(Value::Float(_)), Value::Integer(i)) => {
                base.insert(key, Value::Float(i as f64));
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Output directory: `PRIORZERO_OUT` wins over `--out`, which wins over the
/// configured `run.out_dir`.
pub fn output_dir(env_value: Option<String>, flag: Option<PathBuf>, run: &RunSection) -> PathBuf {
    env_value
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .or(flag)
        .unwrap_or_else(|| PathBuf::from(&run.out_dir))
}
