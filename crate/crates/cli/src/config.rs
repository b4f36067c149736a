//! Settings resolution (flags > config file > defaults) and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Merges a TOML config file (or the `config` table of a manifest) with flag overrides.
pub fn resolve<F: Serialize, S: DeserializeOwned>(file: Option<&Path>, command: &str, flags: &F) -> Result<S, CliError> {
    let mut table = match file {
        Some(path) => load_table(path, command)?,
        None => toml::Table::new(),
    };
    let overrides = toml::Table::try_from(flags).map_err(|e| CliError::Usage(format!("bad flag value: {e}")))?;
    for (k, v) in overrides {
        table.insert(k, v);
    }
    toml::Value::Table(table).try_into::<S>().map_err(|e| CliError::Usage(format!("{command}: {}", e.message())))
}

fn load_table(path: &Path, command: &str) -> Result<toml::Table, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Validation(format!("{}: {}", path.display(), e.message())))?;
    // a manifest carries its settings under `config`
    if let Some(toml::Value::String(cmd)) = table.get("command") {
        if cmd != command {
            return Err(CliError::Usage(format!(
                "{} is a manifest of `{cmd}`, not `{command}`",
                path.display()
            )));
        }
        return match table.remove("config") {
            Some(toml::Value::Table(t)) => Ok(t),
            _ => Err(CliError::Validation(format!("{}: manifest without a config table", path.display()))),
        };
    }
    Ok(table)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digests(paths: &[PathBuf]) -> Result<BTreeMap<String, String>, CliError> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

#[derive(Serialize)]
struct Manifest<'a, S: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a S,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

/// Writes the manifest of a finished run. Thread count is left out: it does not affect outputs.
pub fn write_manifest<S: Serialize>(
    path: &Path,
    command: &str,
    settings: &S,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<(), CliError> {
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config: settings,
        inputs: digests(inputs)?,
        outputs: digests(outputs)?,
    };
    let text = toml::to_string(&manifest).map_err(|e| CliError::Internal(format!("manifest: {e}")))?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
