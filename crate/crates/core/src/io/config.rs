//! Training configuration files. `.toml` files are parsed as TOML, anything
//! else as JSON; omitted fields keep their defaults.

use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub fn parse_config(text: &str, toml_syntax: bool) -> Result<TrainConfig> {
    let cfg: TrainConfig = if toml_syntax {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
    } else {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_toml = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    parse_config(&text, is_toml)
}
