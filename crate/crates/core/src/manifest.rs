//! Run manifests: what was run, on which data, producing which files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, program name excluded.
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    /// Effective configuration (training runs only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<toml::Table>,
    /// Role (e.g. `train`) to content hash.
    pub dataset_hashes: BTreeMap<String, String>,
    /// Role (e.g. `checkpoint`) to path.
    pub outputs: BTreeMap<String, String>,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>) -> Self {
        Self {
            command: command.into(),
            argv,
            version: env!("CARGO_PKG_VERSION").into(),
            ..Self::default()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
