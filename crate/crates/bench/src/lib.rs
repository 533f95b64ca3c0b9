//! Bench configurations shipped with the repository.

use std::path::{Path, PathBuf};

use fluid_core::bench::BenchConfig;
use fluid_core::{Error, Result};

pub const CONFIG_NAMES: [&str; 2] = ["topk8", "full"];

pub fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

/// Loads `configs/<name>.json`.
pub fn load_config(name: &str) -> Result<BenchConfig> {
    let path = config_dir().join(format!("{name}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: BenchConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}
