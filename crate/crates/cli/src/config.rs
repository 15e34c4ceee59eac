//! Run manifests: an optional TOML file with command-line overrides on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thor_core::backend::BackendConfig;
use thor_core::{ChainConfig, DecodingParams, Mode, VotingConfig};
use toml::{Table, Value};

/// Everything `thor run` needs, after merging file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: PathBuf,
    pub mode: Mode,
    pub out: PathBuf,
    /// Defaults to the backend's `max_in_flight`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    pub backend: BackendConfig,
    #[serde(default)]
    pub voting: VotingSection,
    #[serde(default)]
    pub decoding: DecodingParams,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VotingSection {
    pub k: Option<u32>,
    pub min_cluster: Option<u32>,
}

impl VotingSection {
    /// Unset `min_cluster` means a strict majority of `k`.
    pub fn resolve(self) -> Result<VotingConfig, String> {
        let k = self.k.unwrap_or(VotingConfig::DEFAULT_K);
        match self.min_cluster {
            None => VotingConfig::with_k(k),
            Some(m) => VotingConfig::new(k, m),
        }
        .map_err(|e| e.to_string())
    }
}

impl RunConfig {
    pub fn chain_config(&self) -> Result<ChainConfig, String> {
        let config = ChainConfig {
            voting: self.voting.resolve()?,
            decoding: self.decoding.clone(),
        };
        config.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }

    /// Files the run reads or writes must not alias each other.
    pub fn check_paths(&self, config_file: Option<&Path>) -> Result<(), String> {
        let mut seen: Vec<(&str, PathBuf)> = Vec::new();
        let mut named = vec![
            ("--data", self.data.as_path()),
            ("--out", self.out.as_path()),
        ];
        if let Some(script) = &self.backend.mock_script {
            named.push(("--mock-script", script.as_path()));
        }
        if let Some(file) = config_file {
            named.push(("--config", file));
        }
        for (flag, path) in named {
            let abs =
                std::path::absolute(path).map_err(|e| format!("{flag} {}: {e}", path.display()))?;
            if let Some((other, _)) = seen.iter().find(|(_, p)| *p == abs) {
                return Err(format!(
                    "{flag} and {other} both point at {}",
                    path.display()
                ));
            }
            seen.push((flag, abs));
        }
        Ok(())
    }
}

/// Sets `section.key` (or top-level `key` when `section` is empty) if `value`
/// is present, replacing whatever the file said.
pub fn overlay(table: &mut Table, section: &str, key: &str, value: Option<Value>) {
    let Some(value) = value else { return };
    let target = if section.is_empty() {
        table
    } else {
        match table
            .entry(section)
            .or_insert_with(|| Value::Table(Table::new()))
        {
            Value::Table(t) => t,
            other => {
                *other = Value::Table(Table::new());
                other.as_table_mut().expect("just replaced")
            }
        }
    };
    target.insert(key.to_string(), value);
}

pub fn parse_table(text: &str) -> Result<Table, String> {
    text.parse::<Table>().map_err(|e| e.to_string())
}

pub fn from_table(table: Table) -> Result<RunConfig, String> {
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| e.message().to_string())
}
