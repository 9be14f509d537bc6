//! Effective-config resolution, run manifests and atomic output writes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mitosis_core::checkpoint::sha256_hex;
use mitosis_core::Error as CoreError;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    CoreError::Config(msg.into()).into()
}

pub fn data_error(msg: impl Into<String>) -> anyhow::Error {
    CoreError::InvalidArgument(msg.into()).into()
}

/// Overlay `patch` onto `base`. Objects merge key by key; anything else
/// replaces. Keys unknown to `base` are rejected so typos surface.
pub fn merge(base: &mut Value, patch: &Value, path: &str) -> std::result::Result<(), CoreError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(CoreError::Config(format!("unknown config key `{here}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Defaults overlaid with the optional JSON config file.
pub fn resolve<C: Serialize + DeserializeOwned>(defaults: &C, file: Option<&Path>) -> Result<C> {
    let Some(file) = file else {
        return Ok(serde_json::from_value(serde_json::to_value(defaults)?)?);
    };
    let text = fs::read_to_string(file)
        .map_err(|e| config_error(format!("cannot read config file {}: {e}", file.display())))?;
    let patch: Value = serde_json::from_str(&text)
        .map_err(|e| config_error(format!("config file {} is not valid JSON: {e}", file.display())))?;
    let mut value = serde_json::to_value(defaults)?;
    merge(&mut value, &patch, "").map_err(|e| anyhow::Error::new(e).context(format!("in {}", file.display())))?;
    serde_json::from_value(value).map_err(|e| config_error(format!("config file {}: {e}", file.display())))
}

/// Effective configuration and input checksums of one command run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub seed: u64,
    pub config: Value,
    /// Input path as given to the command mapped to its SHA-256.
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Both checkpoint files of a model directory.
    pub fn add_checkpoint(&mut self, dir: &Path) -> Result<()> {
        self.add_input(&dir.join(mitosis_core::checkpoint::PARAMS_FILE))?;
        self.add_input(&dir.join(mitosis_core::checkpoint::MANIFEST_FILE))
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        write_atomic(&out.join("run_manifest.json"), serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Write through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
