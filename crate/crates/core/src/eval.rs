//! Inference compositing and open-world detection metrics.
//!
//! All metrics match detections to ground truth at a fixed IoU threshold with
//! greedy one-to-one matching in descending score order. Known categories and
//! the unknown category never match each other.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{Instance, SceneAnnotation, TaskSplit};
use crate::geometry::{iou, nms, BoxCCWH};
use crate::model::{Detector, Prediction};
use crate::supervision::UNKNOWN_NAME;
use crate::tensor::Result as TensorResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene_id: String,
    /// Known category name or [`UNKNOWN_NAME`].
    pub category: String,
    pub score: f64,
    #[serde(rename = "box_ccwh")]
    pub bbox: BoxCCWH,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Detections with score at or below this value are dropped.
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_threshold: 0.05,
            nms_iou: 0.5,
        }
    }
}

/// Index and value of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, v[0]);
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Turns one scene's query predictions into labeled detections. `known`
/// names the known channels in order; the last channel is the unknown
/// category. Output is sorted by descending score (query index on ties).
pub fn compose_inference(scene_id: &str, preds: &[Prediction], known: &[String], cfg: &InferenceConfig) -> Vec<Detection> {
    let mut by_channel: BTreeMap<usize, Vec<(usize, BoxCCWH, f64)>> = BTreeMap::new();
    for (q, p) in preds.iter().enumerate() {
        let (ch, s) = argmax(&p.cls);
        if s > cfg.score_threshold {
            by_channel.entry(ch).or_default().push((q, p.bbox, s));
        }
    }
    let mut kept = Vec::new();
    for (ch, items) in by_channel {
        let scored: Vec<(BoxCCWH, f64)> = items.iter().map(|&(_, b, s)| (b, s)).collect();
        for k in nms(&scored, cfg.nms_iou) {
            let (q, b, s) = items[k];
            let category = if ch < known.len() { known[ch].clone() } else { UNKNOWN_NAME.to_string() };
            kept.push((q, Detection {
                scene_id: scene_id.to_string(),
                category,
                score: s,
                bbox: b,
            }));
        }
    }
    kept.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    kept.into_iter().map(|(_, d)| d).collect()
}

/// Runs the detector over `scenes` and composes detections.
pub fn detect_scenes(model: &Detector, scenes: &[&SceneAnnotation], known: &[String], cfg: &InferenceConfig) -> TensorResult<Vec<Detection>> {
    let mut out = Vec::new();
    for s in scenes {
        let preds = model.predict_image(&s.image)?;
        out.extend(compose_inference(&s.scene_id, &preds, known, cfg));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

/// Ground-truth box of one category in one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GtBox<'a> {
    pub scene_id: &'a str,
    pub bbox: BoxCCWH,
}

/// Outcome of matching one category's detections against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// True-positive flag per detection, in ranked order.
    pub ranked_tp: Vec<bool>,
    pub num_gt: usize,
}

impl MatchOutcome {
    pub fn true_positives(&self) -> usize {
        self.ranked_tp.iter().filter(|&&t| t).count()
    }

    pub fn false_positives(&self) -> usize {
        self.ranked_tp.len() - self.true_positives()
    }
}

/// Greedy matching: detections in descending score order (input order on
/// ties) each take the unmatched ground truth of their scene with the highest
/// IoU at or above `iou_thr` (lowest index on ties).
pub fn match_detections(dets: &[(&str, BoxCCWH, f64)], gts: &[GtBox<'_>], iou_thr: f64) -> MatchOutcome {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].2.total_cmp(&dets[a].2).then(a.cmp(&b)));
    let mut by_scene: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_scene.entry(g.scene_id).or_default().push(i);
    }
    let mut taken = vec![false; gts.len()];
    let ranked_tp = order
        .iter()
        .map(|&d| {
            let (scene, b, _) = dets[d];
            let mut best: Option<(usize, f64)> = None;
            for &g in by_scene.get(scene).map(Vec::as_slice).unwrap_or(&[]) {
                if taken[g] {
                    continue;
                }
                let o = iou(&b, &gts[g].bbox);
                if o >= iou_thr && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    MatchOutcome {
        ranked_tp,
        num_gt: gts.len(),
    }
}

/// `(recall, precision)` after each ranked detection.
pub fn pr_curve(m: &MatchOutcome) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    m.ranked_tp
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += hit as usize;
            let recall = if m.num_gt == 0 { 0.0 } else { tp as f64 / m.num_gt as f64 };
            (recall, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Area under the interpolated precision-recall curve, `None` without
/// ground truth.
pub fn ap_from_matches(m: &MatchOutcome, interp: Interpolation) -> Option<f64> {
    if m.num_gt == 0 {
        return None;
    }
    let n = m.ranked_tp.len();
    let mut cum_tp = Vec::with_capacity(n);
    let mut tp = 0usize;
    for &hit in &m.ranked_tp {
        tp += hit as usize;
        cum_tp.push(tp);
    }
    let precision: Vec<f64> = cum_tp.iter().enumerate().map(|(i, &t)| t as f64 / (i + 1) as f64).collect();
    // precision envelope: best precision at this rank or any later one
    let mut envelope = precision.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    Some(match interp {
        Interpolation::AllPoint => {
            let mut sum = 0.0;
            for i in 0..n {
                if m.ranked_tp[i] {
                    sum += envelope[i];
                }
            }
            sum / m.num_gt as f64
        }
        Interpolation::ElevenPoint => {
            let mut sum = 0.0;
            for k in 0..=10usize {
                // first rank whose recall reaches k/10
                let p = (0..n).find(|&i| cum_tp[i] * 10 >= k * m.num_gt).map_or(0.0, |i| envelope[i]);
                sum += p;
            }
            sum / 11.0
        }
    })
}

/// AP of one category.
pub fn average_precision(dets: &[(&str, BoxCCWH, f64)], gts: &[GtBox<'_>], iou_thr: f64, interp: Interpolation) -> Option<f64> {
    ap_from_matches(&match_detections(dets, gts, iou_thr), interp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnknownMetrics {
    pub u_recall: Option<f64>,
    pub precision: Option<f64>,
    pub ap: Option<f64>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub num_gt: usize,
}

/// Recall, precision and AP of unknown-labeled detections against unknown
/// ground truth.
pub fn unknown_metrics(dets: &[(&str, BoxCCWH, f64)], gts: &[GtBox<'_>], iou_thr: f64, interp: Interpolation) -> UnknownMetrics {
    let m = match_detections(dets, gts, iou_thr);
    let tp = m.true_positives();
    let fp = m.false_positives();
    UnknownMetrics {
        u_recall: (m.num_gt > 0).then(|| tp as f64 / m.num_gt as f64),
        precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
        ap: ap_from_matches(&m, interp),
        true_positives: tp,
        false_positives: fp,
        num_gt: m.num_gt,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    pub inference: InferenceConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            interpolation: Interpolation::AllPoint,
            inference: InferenceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: String,
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: String,
    pub seed: Option<u64>,
    /// 1-based task number.
    pub task: usize,
    pub config: EvalConfig,
    pub categories: Vec<CategoryAp>,
    pub map_previous: Option<f64>,
    pub map_current: Option<f64>,
    pub map_both: Option<f64>,
    pub unknown: UnknownMetrics,
    pub known_gt: usize,
    pub unknown_gt: usize,
}

fn mean_ap(cats: &[CategoryAp], names: &[String]) -> Option<f64> {
    let names: BTreeSet<&str> = names.iter().map(String::as_str).collect();
    let aps: Vec<f64> = cats.iter().filter(|c| names.contains(c.category.as_str())).filter_map(|c| c.ap).collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Scores detections of task `task` (0-based) against full scene annotations.
/// Instances of categories outside the task's known set are unknown ground
/// truth.
pub fn evaluate(
    dets: &[Detection],
    scenes: &[(&str, &[Instance])],
    split: &TaskSplit,
    task: usize,
    cfg: &EvalConfig,
    header: (&str, Option<u64>),
) -> MetricsReport {
    let known = split.known(task);
    let known_set: BTreeSet<&str> = known.iter().map(String::as_str).collect();
    let mut gt_by_cat: BTreeMap<&str, Vec<GtBox<'_>>> = BTreeMap::new();
    let mut unknown_gt = Vec::new();
    for &(sid, insts) in scenes {
        for inst in insts {
            let g = GtBox { scene_id: sid, bbox: inst.bbox };
            if known_set.contains(inst.category.as_str()) {
                gt_by_cat.entry(inst.category.as_str()).or_default().push(g);
            } else {
                unknown_gt.push(g);
            }
        }
    }
    let mut det_by_cat: BTreeMap<&str, Vec<(&str, BoxCCWH, f64)>> = BTreeMap::new();
    for d in dets {
        det_by_cat.entry(d.category.as_str()).or_default().push((d.scene_id.as_str(), d.bbox, d.score));
    }
    let categories: Vec<CategoryAp> = known
        .iter()
        .map(|c| {
            let g = gt_by_cat.get(c.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            let d = det_by_cat.get(c.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            CategoryAp {
                category: c.clone(),
                ap: average_precision(d, g, cfg.iou_threshold, cfg.interpolation),
                num_gt: g.len(),
                num_detections: d.len(),
            }
        })
        .collect();
    let unk_dets = det_by_cat.get(UNKNOWN_NAME).map(Vec::as_slice).unwrap_or(&[]);
    let unknown = unknown_metrics(unk_dets, &unknown_gt, cfg.iou_threshold, cfg.interpolation);
    MetricsReport {
        version: header.0.to_string(),
        seed: header.1,
        task: task + 1,
        config: *cfg,
        map_previous: mean_ap(&categories, split.previous(task)),
        map_current: mean_ap(&categories, split.current(task)),
        map_both: mean_ap(&categories, known),
        known_gt: gt_by_cat.values().map(Vec::len).sum(),
        unknown_gt: unknown.num_gt,
        categories,
        unknown,
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// Aligned text table, one row per report.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let header = ["Task", "U-Recall", "Prev mAP", "Curr mAP", "Both mAP", "Unk Prec", "Unk AP"];
    let rows: Vec<[String; 7]> = reports
        .iter()
        .map(|r| {
            [
                r.task.to_string(),
                pct(r.unknown.u_recall),
                pct(r.map_previous),
                pct(r.map_current),
                pct(r.map_both),
                pct(r.unknown.precision),
                pct(r.unknown.ap),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..7).map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0)).collect();
    let line = |cells: &[&str]| -> String {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(&header);
    out += &line(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect::<Vec<_>>());
    for r in &rows {
        out += &line(&r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}
