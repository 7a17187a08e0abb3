//! Interchange manifest for externally produced masks.
//!
//! ```json
//! {
//!   "source": "segment-anything",
//!   "checkpoint": "sam_vit_h_4b8939.pth",
//!   "images": [
//!     {"id": "img001", "masks": [
//!       {"path": "img001/0.png", "score": 0.97, "class_hint": "crack-candidate",
//!        "bbox": [12, 40, 100, 18]}
//!     ]}
//!   ],
//!   "errors": [{"id": "img002", "message": "unreadable image"}]
//! }
//! ```
//! Mask paths are relative to the manifest. Masks are 8-bit PNGs where any
//! nonzero value marks the masked region. `checkpoint`, `class_hint`,
//! `bbox` and `errors` are optional; any other key is rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crackseg::data::{load_binary_mask, LabelMask, BACKGROUND, CRACK};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub images: Vec<ManifestImage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<ManifestError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub id: String,
    pub masks: Vec<ManifestMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMask {
    pub path: PathBuf,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_hint: Option<String>,
    /// `[x, y, width, height]` in pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestError {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub message: String,
}

impl Manifest {
    /// Strict parse; errors carry the JSON path of the offending field.
    pub fn parse(text: &str) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let m: Manifest = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                e.inner().to_string()
            } else {
                format!("at `{path}`: {}", e.inner())
            }
        })?;
        for (i, img) in m.images.iter().enumerate() {
            for (j, mask) in img.masks.iter().enumerate() {
                if !mask.score.is_finite() {
                    return Err(format!("at `images[{i}].masks[{j}].score`: score must be finite"));
                }
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::ingestion(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|m| CliError::ingestion(format!("manifest {}: {m}", path.display())))
    }

    pub fn image(&self, id: &str) -> Option<&ManifestImage> {
        self.images.iter().find(|i| i.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectRule {
    /// The single mask with the highest score (first on ties).
    HighestScore,
    /// Every mask of the image.
    Union,
}

impl FromStr for SelectRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "highest-score" => Ok(Self::HighestScore),
            "union" => Ok(Self::Union),
            other => Err(format!("unknown select rule `{other}` (expected highest-score or union)")),
        }
    }
}

impl fmt::Display for SelectRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectRule::HighestScore => "highest-score",
            SelectRule::Union => "union",
        })
    }
}

/// Reduce an image's masks to one class map: selected pixels become Crack,
/// the rest Background.
pub fn select_class_map(
    image: &ManifestImage,
    base: &Path,
    rule: SelectRule,
    width: usize,
    height: usize,
) -> CliResult<LabelMask> {
    let chosen: Vec<&ManifestMask> = match rule {
        SelectRule::HighestScore => image
            .masks
            .iter()
            .fold(None::<&ManifestMask>, |best, m| match best {
                Some(b) if b.score >= m.score => Some(b),
                _ => Some(m),
            })
            .into_iter()
            .collect(),
        SelectRule::Union => image.masks.iter().collect(),
    };
    let mut out = LabelMask::filled(width, height, BACKGROUND);
    for m in chosen {
        let path = base.join(&m.path);
        let (w, h, fg) = load_binary_mask(&path).map_err(CliError::from)?;
        if (w, h) != (width, height) {
            return Err(CliError::ingestion(format!(
                "external mask {} is {w}×{h}, truth for `{}` is {width}×{height}",
                path.display(),
                image.id
            )));
        }
        for (c, f) in out.classes.iter_mut().zip(fg) {
            if f {
                *c = CRACK;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{
        "source": "segment-anything",
        "checkpoint": "vit_h",
        "images": [
            {"id": "a", "masks": [
                {"path": "a/0.png", "score": 0.9, "class_hint": "crack-candidate", "bbox": [1, 2, 3, 4]},
                {"path": "a/1.png", "score": 0.95}
            ]},
            {"id": "b", "masks": []}
        ],
        "errors": [{"id": "c", "message": "unreadable"}]
    }"#;

    #[test]
    fn parses_full_manifest() {
        let m = Manifest::parse(GOOD).unwrap();
        assert_eq!(m.images.len(), 2);
        assert_eq!(m.images[0].masks[0].bbox, Some([1.0, 2.0, 3.0, 4.0]));
        assert_eq!(m.errors[0].id.as_deref(), Some("c"));
        let again = Manifest::parse(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn errors_cite_field_paths() {
        let missing = r#"{"source":"s","images":[{"id":"a","masks":[{"score":0.5}]}]}"#;
        let err = Manifest::parse(missing).unwrap_err();
        assert!(err.contains("images[0].masks[0]") && err.contains("`path`"), "{err}");
        let wrong_type = r#"{"source":"s","images":[{"id":"a","masks":[{"path":"p","score":"high"}]}]}"#;
        let err = Manifest::parse(wrong_type).unwrap_err();
        assert!(err.contains("images[0].masks[0].score"), "{err}");
        let unknown = r#"{"source":"s","images":[],"colour":1}"#;
        assert!(Manifest::parse(unknown).unwrap_err().contains("colour"));
        assert!(Manifest::parse(r#"{"images":[]}"#).unwrap_err().contains("source"));
    }

    #[test]
    fn select_rules() {
        assert_eq!("union".parse::<SelectRule>().unwrap(), SelectRule::Union);
        assert!("all".parse::<SelectRule>().is_err());
    }
}
