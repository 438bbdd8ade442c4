use std::fs;
use std::path::Path;

use crate::error::ConfigError;
use crate::multitrace::RunConfig;

/// Reads a TOML run configuration. Missing keys take their defaults;
/// unknown keys are rejected.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
