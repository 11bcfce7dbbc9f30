//! On-disk JSON formats. Every document is written with sorted keys and a
//! trailing newline; floats use shortest round-trip formatting, so
//! save -> load reproduces values exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::evaluation::{Condition, GroundTruthBox, ImageInfo};
use crate::fusion::FusedDetection;
use crate::geometry::{validate_detection, BBox, Detection, Modality};
use crate::language::{Description, MSCoTScores};
use crate::pairing::PairedDetection;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    pub path_rgb: String,
    pub path_thermal: String,
    pub condition: Condition,
}

impl ManifestEntry {
    pub fn image_info(&self) -> ImageInfo {
        ImageInfo {
            image_id: self.image_id.clone(),
            condition: self.condition,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    image_id: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
    #[serde(default = "default_class")]
    class_label: String,
}

fn default_class() -> String {
    "person".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetectionFile {
    schema_version: String,
    modality: Modality,
    entries: Vec<RawEntry>,
    #[serde(default)]
    image_manifest: Vec<ManifestEntry>,
}

/// Detections of one modality plus the image manifest, as loaded from a
/// detection file.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFile {
    pub modality: Modality,
    pub detections: Vec<Detection>,
    pub manifest: Vec<ManifestEntry>,
}

fn schema(path: &Path, message: impl Into<String>) -> PipelineError {
    PipelineError::Schema {
        path: path.to_owned(),
        message: message.into(),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let raw = fs::read(path).map_err(|source| PipelineError::Io {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_slice(&raw).map_err(|e| schema(path, e.to_string()))
}

/// Canonical JSON text: keys sorted at every level, pretty-printed.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json's Map is a BTreeMap here, so the round trip sorts keys
    let v = serde_json::to_value(value).expect("in-memory value serializes");
    let mut s = serde_json::to_string_pretty(&v).expect("JSON value serializes");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| PipelineError::Io {
            path: parent.to_owned(),
            source,
        })?;
    }
    fs::write(path, to_canonical_json(value)).map_err(|source| PipelineError::Io {
        path: path.to_owned(),
        source,
    })
}

fn check_version(path: &Path, v: &str) -> Result<(), PipelineError> {
    if v == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(schema(path, format!("unsupported schema_version {v:?}")))
    }
}

pub fn load_detections(path: &Path) -> Result<DetectionFile, PipelineError> {
    let raw: RawDetectionFile = read_json(path)?;
    check_version(path, &raw.schema_version)?;
    let known: std::collections::HashSet<&str> = raw
        .image_manifest
        .iter()
        .map(|m| m.image_id.as_str())
        .collect();

    let mut detections = Vec::with_capacity(raw.entries.len());
    for (index, e) in raw.entries.iter().enumerate() {
        if let Some(v) = validate_detection(e.bbox, e.score).first() {
            let field = match v {
                crate::geometry::Violation::ScoreOutOfRange => "score",
                _ => "box",
            };
            return Err(PipelineError::Entry {
                path: path.to_owned(),
                index,
                field,
                message: v.to_string(),
            });
        }
        if !known.contains(e.image_id.as_str()) {
            return Err(PipelineError::Entry {
                path: path.to_owned(),
                index,
                field: "image_id",
                message: format!("{:?} not in image_manifest", e.image_id),
            });
        }
        let bbox = BBox::try_from(e.bbox).expect("validated above");
        detections.push(
            Detection::new(
                bbox,
                e.score,
                raw.modality,
                e.class_label.clone(),
                e.image_id.clone(),
            )
            .expect("validated above"),
        );
    }
    Ok(DetectionFile {
        modality: raw.modality,
        detections,
        manifest: raw.image_manifest,
    })
}

pub fn save_detections(path: &Path, file: &DetectionFile) -> Result<(), PipelineError> {
    let raw = RawDetectionFile {
        schema_version: SCHEMA_VERSION.into(),
        modality: file.modality,
        entries: file
            .detections
            .iter()
            .map(|d| RawEntry {
                image_id: d.image_id.clone(),
                bbox: d.bbox.to_array(),
                score: d.score,
                class_label: d.class_label.clone(),
            })
            .collect(),
        image_manifest: file.manifest.clone(),
    };
    write_json(path, &raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusedOutput {
    pub schema_version: String,
    pub detections: Vec<FusedDetection>,
}

pub fn save_fused(path: &Path, dets: &[FusedDetection]) -> Result<(), PipelineError> {
    write_json(
        path,
        &FusedOutput {
            schema_version: SCHEMA_VERSION.into(),
            detections: dets.to_vec(),
        },
    )
}

pub fn load_fused(path: &Path) -> Result<Vec<FusedDetection>, PipelineError> {
    let out: FusedOutput = read_json(path)?;
    check_version(path, &out.schema_version)?;
    for (index, d) in out.detections.iter().enumerate() {
        if !(0.0..=1.0).contains(&d.score) {
            return Err(PipelineError::Entry {
                path: path.to_owned(),
                index,
                field: "score",
                message: "score out of range".into(),
            });
        }
    }
    Ok(out.detections)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthFile {
    pub schema_version: String,
    pub annotations: Vec<GroundTruthBox>,
    /// Images without annotations still count towards FPPI; list them here.
    #[serde(default)]
    pub images: Vec<ImageInfo>,
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruthFile, PipelineError> {
    let gt: GroundTruthFile = read_json(path)?;
    check_version(path, &gt.schema_version)?;
    Ok(gt)
}

/// Language-branch results for one image: pairs, descriptions, scores, and
/// per-pair failures that forced a vision-only fallback.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageLanguage {
    pub image_id: String,
    pub pairs: Vec<PairedDetection>,
    pub descriptions_rgb: Vec<Description>,
    pub descriptions_thermal: Vec<Description>,
    pub scores: Vec<Option<MSCoTScores>>,
    pub failures: Vec<PairFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub pair_index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageFile {
    pub schema_version: String,
    pub images: Vec<ImageLanguage>,
}

pub fn save_language(path: &Path, images: &[ImageLanguage]) -> Result<(), PipelineError> {
    write_json(
        path,
        &LanguageFile {
            schema_version: SCHEMA_VERSION.into(),
            images: images.to_vec(),
        },
    )
}

pub fn load_language(path: &Path) -> Result<Vec<ImageLanguage>, PipelineError> {
    let f: LanguageFile = read_json(path)?;
    check_version(path, &f.schema_version)?;
    Ok(f.images)
}

pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    read_json(path)
}

pub fn resolve(root: &Path, rel: &str) -> PathBuf {
    root.join(rel)
}
