//! Open-world supervision: teacher detections, vocabulary alignment, and the
//! merged set of ground-truth and distilled labels.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::Instance;
use crate::geometry::{iou, nms, BoxCCWH};

/// Target name that marks an alignment entry as unknown.
pub const UNKNOWN_NAME: &str = "__unknown__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    Gt,
    Distilled,
    Pseudo,
}

/// Known class channel or the unknown class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelCategory {
    Known(usize),
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisionLabel {
    pub bbox: BoxCCWH,
    pub category: LabelCategory,
    /// Supervision confidence; 1 for ground truth.
    pub confidence: f64,
    pub source: Source,
}

impl SupervisionLabel {
    pub fn ground_truth(bbox: BoxCCWH, class: usize) -> Self {
        SupervisionLabel {
            bbox,
            category: LabelCategory::Known(class),
            confidence: 1.0,
            source: Source::Gt,
        }
    }

    pub fn distilled(bbox: BoxCCWH, confidence: f64) -> Self {
        SupervisionLabel {
            bbox,
            category: LabelCategory::Unknown,
            confidence,
            source: Source::Distilled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherDetection {
    #[serde(rename = "box_ccwh")]
    pub bbox: BoxCCWH,
    #[serde(rename = "category")]
    pub teacher_category: String,
    pub score: f64,
}

/// Maps teacher vocabulary names onto the dataset vocabulary. Names without
/// an entry, and entries targeting [`UNKNOWN_NAME`], align to unknown.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMap {
    pub map: BTreeMap<String, String>,
}

impl AlignmentMap {
    /// Every name maps to itself.
    pub fn identity<'a>(names: impl IntoIterator<Item = &'a str>) -> Self {
        AlignmentMap {
            map: names.into_iter().map(|n| (n.to_string(), n.to_string())).collect(),
        }
    }

    /// Aligned dataset name, or `None` for unknown.
    pub fn align(&self, teacher_name: &str) -> Option<&str> {
        match self.map.get(teacher_name) {
            Some(t) if t != UNKNOWN_NAME => Some(t.as_str()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// Fraction of instances the teacher reports.
    pub recall: f64,
    /// Standard deviation of the per-coordinate box jitter.
    pub box_sigma: f64,
    /// Beta distribution parameters of the reported scores.
    pub score_alpha: f64,
    pub score_beta: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            recall: 0.9,
            box_sigma: 0.01,
            score_alpha: 5.0,
            score_beta: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisionConfig {
    /// IoU threshold of the category-agnostic NMS over teacher detections.
    pub nms_iou: f64,
    /// Drop teacher detections overlapping a ground-truth box above this IoU.
    pub gt_overlap_iou: Option<f64>,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        SupervisionConfig {
            nms_iou: 0.5,
            gt_overlap_iou: Some(0.7),
        }
    }
}

const MIN_SCORE: f64 = 1e-6;
const MIN_EXTENT: f64 = 1e-3;

/// Simulated teacher over fully annotated instances: reports each instance
/// with probability `recall`, jitters its box, and draws a Beta score.
pub fn teacher_oracle(instances: &[Instance], cfg: &TeacherConfig, seed: u64) -> Vec<TeacherDetection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = Beta::new(cfg.score_alpha, cfg.score_beta).expect("positive beta parameters");
    let jitter = Normal::new(0.0, cfg.box_sigma.max(0.0)).expect("finite sigma");
    let mut out = Vec::new();
    for inst in instances {
        let keep: f64 = rng.gen();
        let noise: [f64; 4] = std::array::from_fn(|_| jitter.sample(&mut rng));
        let score: f64 = beta.sample(&mut rng);
        if keep >= cfg.recall {
            continue;
        }
        let b = inst.bbox;
        let bbox = BoxCCWH::new(
            (b.cx + noise[0]).clamp(0.0, 1.0),
            (b.cy + noise[1]).clamp(0.0, 1.0),
            (b.w + noise[2]).clamp(MIN_EXTENT, 1.0),
            (b.h + noise[3]).clamp(MIN_EXTENT, 1.0),
        )
        .expect("clamped box is valid");
        out.push(TeacherDetection {
            bbox,
            teacher_category: inst.category.clone(),
            score: score.clamp(MIN_SCORE, 1.0),
        });
    }
    out
}

/// Merges ground truth with distilled teacher knowledge.
///
/// Teacher detections go through category-agnostic NMS, are aligned to the
/// dataset vocabulary, and are dropped when they align to a known category
/// (or, optionally, overlap a ground-truth box). Survivors become unknown
/// labels carrying the teacher score as confidence. Ground truth passes
/// through unchanged and comes first.
pub fn build_supervision(
    gt: &[SupervisionLabel],
    teacher: &[TeacherDetection],
    map: &AlignmentMap,
    known: &BTreeSet<String>,
    cfg: &SupervisionConfig,
) -> Vec<SupervisionLabel> {
    let mut out = gt.to_vec();
    let scored: Vec<(BoxCCWH, f64)> = teacher.iter().map(|d| (d.bbox, d.score)).collect();
    for k in nms(&scored, cfg.nms_iou) {
        let det = &teacher[k];
        if let Some(name) = map.align(&det.teacher_category) {
            if known.contains(name) {
                continue;
            }
        }
        if let Some(thr) = cfg.gt_overlap_iou {
            if gt.iter().any(|g| iou(&g.bbox, &det.bbox) > thr) {
                continue;
            }
        }
        out.push(SupervisionLabel::distilled(det.bbox, det.score));
    }
    out
}

#[derive(Debug, Error)]
pub enum TeacherFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("teacher file: missing or invalid top-level \"scenes\" array")]
    Header,
    #[error("scene {scene}: detection {index}: field \"{field}\": {reason}")]
    Record {
        scene: String,
        index: usize,
        field: &'static str,
        reason: String,
    },
    #[error("scene #{index}: {reason}")]
    Scene { index: usize, reason: String },
}

/// Per-scene teacher detections.
pub type TeacherDetections = BTreeMap<String, Vec<TeacherDetection>>;

pub fn parse_teacher_json(text: &str) -> Result<TeacherDetections, TeacherFileError> {
    let root: Value = serde_json::from_str(text)?;
    let scenes = root.get("scenes").and_then(Value::as_array).ok_or(TeacherFileError::Header)?;
    let mut out = TeacherDetections::new();
    for (si, scene) in scenes.iter().enumerate() {
        let id = scene.get("scene_id").and_then(Value::as_str).ok_or_else(|| TeacherFileError::Scene {
            index: si,
            reason: "missing string field \"scene_id\"".into(),
        })?;
        let dets = scene.get("detections").and_then(Value::as_array).ok_or_else(|| TeacherFileError::Scene {
            index: si,
            reason: format!("scene {id}: missing array field \"detections\""),
        })?;
        let err = |index: usize, field: &'static str, reason: String| TeacherFileError::Record {
            scene: id.to_string(),
            index,
            field,
            reason,
        };
        let entry = out.entry(id.to_string()).or_default();
        for (di, d) in dets.iter().enumerate() {
            let coords: Vec<f64> = d
                .get("box_ccwh")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(Value::as_f64).collect())
                .ok_or_else(|| err(di, "box_ccwh", "missing or not an array".into()))?;
            if coords.len() != 4 {
                return Err(err(di, "box_ccwh", "expected four numbers".into()));
            }
            let bbox = BoxCCWH::new(coords[0], coords[1], coords[2], coords[3]).map_err(|e| err(di, "box_ccwh", e.to_string()))?;
            let category = d
                .get("category")
                .and_then(Value::as_str)
                .ok_or_else(|| err(di, "category", "missing or not a string".into()))?;
            let score = d.get("score").and_then(Value::as_f64).ok_or_else(|| err(di, "score", "missing or not a number".into()))?;
            if !(score > 0.0 && score <= 1.0) {
                return Err(err(di, "score", format!("{score} outside (0, 1]")));
            }
            entry.push(TeacherDetection {
                bbox,
                teacher_category: category.to_string(),
                score,
            });
        }
    }
    Ok(out)
}

pub fn teacher_from_file(path: &Path) -> Result<TeacherDetections, TeacherFileError> {
    parse_teacher_json(&std::fs::read_to_string(path)?)
}

#[derive(Serialize)]
struct SceneRecord<'a> {
    scene_id: &'a str,
    detections: &'a [TeacherDetection],
}

/// Serializes detections in the teacher-file schema. Extra top-level keys
/// (such as provenance) are merged into the object.
pub fn teacher_to_json(dets: &TeacherDetections, extra: &BTreeMap<String, Value>) -> String {
    let scenes: Vec<SceneRecord<'_>> = dets
        .iter()
        .map(|(id, d)| SceneRecord {
            scene_id: id,
            detections: d,
        })
        .collect();
    let mut root = serde_json::Map::new();
    for (k, v) in extra {
        root.insert(k.clone(), v.clone());
    }
    root.insert("scenes".into(), serde_json::to_value(scenes).expect("serializable"));
    serde_json::to_string_pretty(&Value::Object(root)).expect("serializable")
}
