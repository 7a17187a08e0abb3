use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crackseg::train::TrainConfig;
use crackseg::unet::UNetConfig;

use crate::{CliError, CliResult};

/// Training configuration file. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    /// Directory of input images.
    pub images: PathBuf,
    /// Directory of class-index masks named like the images.
    pub masks: PathBuf,
    /// Output directory for `model.cseg`, `trainlog.csv`, `summary.json`.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: UNetConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl CliConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
            .map_err(|m| CliError::config(format!("{}: {m}", path.display())))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: CliConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                e.inner().to_string()
            } else {
                format!("at `{path}`: {}", e.inner())
            }
        })?;
        for p in [&mut cfg.images, &mut cfg.masks] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = cfg.out.as_mut() {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }
}

pub fn documented_defaults() -> String {
    let cfg = CliConfig {
        images: "images".into(),
        masks: "masks".into(),
        out: Some("run".into()),
        model: UNetConfig::default(),
        train: TrainConfig::default(),
    };
    serde_json::to_string_pretty(&cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = CliConfig::parse(
            r#"{"images":"i","masks":"m","train":{"leanring_rate":0.1}}"#,
            Path::new("."),
        )
        .unwrap_err();
        assert!(err.contains("leanring_rate") && err.contains("train"), "{err}");
        let err = CliConfig::parse(r#"{"images":"i","masks":"m","extra":1}"#, Path::new(".")).unwrap_err();
        assert!(err.contains("extra"));
    }

    #[test]
    fn defaults_round_trip_and_paths_resolve() {
        let text = documented_defaults();
        let cfg = CliConfig::parse(&text, Path::new("/base")).unwrap();
        assert_eq!(cfg.images, Path::new("/base/images"));
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.model, UNetConfig::default());
        assert!(CliConfig::parse(r#"{"masks":"m"}"#, Path::new(".")).unwrap_err().contains("images"));
    }
}
