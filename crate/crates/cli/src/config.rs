//! Run configuration files.
//!
//! A config file is TOML (`.toml`) or JSON (anything else). Top-level keys
//! are [`StarConfig`] fields plus the optional run keys `data`, `out` and
//! `mechanism`. Values are layered: built-in defaults, then the dataset's
//! category counts, then the file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use star_core::training::StarConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Clustering,
    Centroid,
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mechanism::Clustering => "clustering",
            Mechanism::Centroid => "centroid",
        })
    }
}

/// Parsed config file: run-level keys plus a partial [`StarConfig`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfigFile {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mechanism: Option<Mechanism>,
    /// StarConfig fields present in the file.
    pub overrides: Map<String, Value>,
}

const RUN_KEYS: [&str; 3] = ["data", "out", "mechanism"];

impl RunConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let is_toml = path.extension().is_some_and(|e| e == "toml");
        Self::parse(&text, is_toml).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    pub fn parse(text: &str, is_toml: bool) -> CliResult<Self> {
        let value: Value = if is_toml {
            toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?
        } else {
            serde_json::from_str(text).map_err(|e| CliError::config(e.to_string()))?
        };
        let Value::Object(mut map) = value else {
            return Err(CliError::config("top level must be a table/object"));
        };
        let mut file = RunConfigFile::default();
        for key in RUN_KEYS {
            let Some(v) = map.remove(key) else { continue };
            match key {
                "data" | "out" => {
                    let s = v
                        .as_str()
                        .ok_or_else(|| CliError::config(format!("field `{key}` must be a path string")))?;
                    let p = Some(PathBuf::from(s));
                    if key == "data" {
                        file.data = p;
                    } else {
                        file.out = p;
                    }
                }
                _ => {
                    file.mechanism = Some(
                        serde_json::from_value(v)
                            .map_err(|e| CliError::config(format!("field `mechanism`: {e}")))?,
                    );
                }
            }
        }
        file.overrides = map;
        // Surface unknown or mistyped fields now rather than at train time.
        resolve(StarConfig::default(), &file.overrides, &Map::new())?;
        Ok(file)
    }
}

/// Layers `file` and then `flags` over `base`, then validates.
pub fn resolve(base: StarConfig, file: &Map<String, Value>, flags: &Map<String, Value>) -> CliResult<StarConfig> {
    let mut value = serde_json::to_value(base).expect("config serializes");
    let obj = value.as_object_mut().expect("config is an object");
    for layer in [file, flags] {
        for (k, v) in layer {
            obj.insert(k.clone(), v.clone());
        }
    }
    let config: StarConfig = serde_json::from_value(value).map_err(|e| CliError::config(e.to_string()))?;
    config.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(config)
}
