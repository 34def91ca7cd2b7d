//! Run configuration: a TOML file layered over defaults, with dotted-key overrides.
//!
//! Resolution order is built-in defaults, then the encoder preset named by
//! `encoder.preset`, then the file, then overrides. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::EncoderConfig;
use crate::dfa::DfaConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::sam::SamConfig;
use crate::synth::GenerateConfig;
use crate::trainer::TrainerConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Name of the resolved config written to a run directory.
pub const ECHO_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub test_root: PathBuf,
    /// Decode all frames up front instead of per clip.
    pub preload: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: "data/train".into(),
            test_root: "data/test".into(),
            preload: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub version: u32,
    pub dataset: DatasetConfig,
    pub generate: GenerateConfig,
    pub sam: SamConfig,
    pub encoder: EncoderConfig,
    pub dfa: DfaConfig,
    pub losses: LossConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            generate: GenerateConfig::default(),
            sam: SamConfig::default(),
            encoder: EncoderConfig::default(),
            dfa: DfaConfig::default(),
            losses: LossConfig::default(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Config {
    /// Defaults with the encoder taken from a named preset.
    pub fn with_preset(name: &str) -> Result<Self> {
        let encoder = EncoderConfig::preset(name)
            .ok_or_else(|| Error::config("encoder.preset", format!("unknown preset {name:?} (expected toy or vit_b16)")))?;
        Ok(Self {
            encoder,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.version),
            ));
        }
        self.generate.validate()?;
        self.sam.validate()?;
        self.encoder.validate()?;
        self.dfa.validate()?;
        self.losses.validate()?;
        self.trainer.validate()?;
        self.eval.validate()?;
        let patch_pixels = self.encoder.patch_size * self.encoder.patch_size;
        if self.losses.theta() > patch_pixels {
            log::warn!(
                "losses.theta = {} exceeds the {patch_pixels} pixels of a patch; no patch will be labelled fake",
                self.losses.theta
            );
        }
        Ok(())
    }

    /// Parses TOML text and applies `overrides` (dotted key, TOML value literal).
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.to_string().trim_end().to_string()))?;
        for (key, raw) in overrides {
            set_dotted(&mut user, key, parse_value(raw))?;
        }
        let preset = match user.get("encoder").and_then(|e| e.get("preset")) {
            Some(toml::Value::String(name)) => name.clone(),
            Some(other) => {
                return Err(Error::config(
                    "encoder.preset",
                    format!("expected a string, found {}", other.type_str()),
                ))
            }
            None => EncoderConfig::default().preset,
        };
        let base = toml::Value::try_from(Self::with_preset(&preset)?).expect("config serializes");
        let toml::Value::Table(mut merged) = base else {
            unreachable!("config serializes to a table")
        };
        merge(&mut merged, user);
        let config: Self = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
            let key = e.path().to_string();
            Error::config(if key == "." { "<root>".into() } else { key }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (or starts from an empty file) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Writes the fully resolved config into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_toml_string()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// A TOML literal, or the raw text as a string when it is not one.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed key"));
    }
    let mut cur = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(parts[..=i].join("."), "is not a section"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Splits `--section.key value` and `--section.key=value` pairs out of an argument list,
/// returning the remaining arguments and the overrides.
pub fn extract_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(arg) = it.next() {
        let dotted = arg
            .strip_prefix("--")
            .filter(|k| k.split('=').next().is_some_and(|k| k.contains('.')));
        match dotted {
            Some(spec) => match spec.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it.next().unwrap_or_default();
                    overrides.push((spec.to_string(), v));
                }
            },
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}
