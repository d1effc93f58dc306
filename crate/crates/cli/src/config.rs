//! TOML run configurations, the seed override and config echoes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use gridflow_model::train::TrainConfig;
use gridflow_model::ModelConfig;

pub const SEED_ENV: &str = "GRIDFLOW_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRun {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Parses `path`, or returns defaults when no file is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context(SEED_ENV),
    }
}

/// Flag, then environment, then the configured value.
pub fn resolve_seed(flag: Option<u64>, configured: u64) -> Result<u64> {
    Ok(flag.or(env_seed()?).unwrap_or(configured))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).context("serializing config echo")?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `dir/stem.suffix` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<TrainRun>("[train]\nepochz = 3\n").unwrap_err();
        assert!(err.to_string().contains("epochz"));
        let ok: TrainRun = toml::from_str("[train]\nepochs = 3\n[model]\nheads = 2\n").unwrap();
        assert_eq!((ok.train.epochs, ok.model.heads), (3, 2));
        assert_eq!(ok.train.lr, TrainConfig::default().lr);
    }

    #[test]
    fn echo_round_trips() {
        let run = TrainRun::default();
        let text = toml::to_string_pretty(&run).unwrap();
        assert_eq!(toml::from_str::<TrainRun>(&text).unwrap(), run);
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(sibling(Path::new("a/b/model.json"), "history.csv"), PathBuf::from("a/b/model.history.csv"));
        assert_eq!(sibling(Path::new("model"), "config.toml"), PathBuf::from("model.config.toml"));
    }
}
