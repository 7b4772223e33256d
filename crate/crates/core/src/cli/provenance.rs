use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{CliError, Context};

/// File name used when the output is a directory.
pub const PROVENANCE_FILE: &str = "provenance.json";

/// What produced an artifact: command, arguments, seeds and tool version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unix_time: Option<u64>,
}

impl Provenance {
    pub fn new(ctx: &Context, command: &str, seeds: &[(&str, u64)]) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: ctx.argv.clone(),
            seeds: seeds.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            unix_time: ctx
                .timestamps
                .then(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())),
        }
    }

    /// Writes the record next to `artifact`: inside it for a directory,
    /// otherwise as `<artifact>.provenance.json`.
    pub fn write_for(&self, artifact: &Path) -> Result<(), CliError> {
        let path = if artifact.is_dir() {
            artifact.join(PROVENANCE_FILE)
        } else {
            let mut name = artifact.file_name().unwrap_or_default().to_os_string();
            name.push(".provenance.json");
            artifact.with_file_name(name)
        };
        super::commands::write_json(&path, self)
    }
}
