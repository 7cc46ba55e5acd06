//! Detection losses: focal terms, box regression, and the confidence-weighted
//! distillation family.
//!
//! Per-scene losses are split in two phases. [`LossTargets`] is built from
//! prediction *values* (matching, pseudo-label choice, normalizers), then
//! [`scene_loss`] evaluates the differentiable terms against those fixed
//! targets. Normalizers and the box-score target of the pseudo term are
//! therefore constants on the tape.
//!
//! Soft-target focal loss uses the quality-focal form
//! `|t - p|^gamma * BCE(p, t)`. The `alpha` balance applies only to hard
//! (0/1) targets.

use serde::{Deserialize, Serialize};

use crate::geometry::{giou_var, BoxCCWH};
use crate::matching::Assignment;
use crate::model::{Prediction, PredictionVars};
use crate::supervision::{LabelCategory, Source, SupervisionLabel};
use crate::tensor::{Result as TensorResult, Tape, Tensor, Var};

pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.25, gamma: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal: FocalParams,
    /// L1 weight inside the known-object regression loss.
    pub l1_weight: f64,
    /// GIoU weight inside the known-object regression loss.
    pub giou_weight: f64,
    /// Apply the same L1/GIoU weights inside the distilled regression term.
    pub weighted_kd_regression: bool,
    /// Confidence-weighted losses for distilled labels. When off, distilled
    /// labels go through the known-object losses with the unknown channel as
    /// their class.
    pub down_weight: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal: FocalParams::default(),
            l1_weight: 5.0,
            giou_weight: 2.0,
            weighted_kd_regression: false,
            down_weight: true,
        }
    }
}

/// The seven loss components and their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_bs: f64,
    pub l_cls: f64,
    pub l_r_kd: f64,
    pub l_bs_kd: f64,
    pub l_cls_kd: f64,
    pub l_cls_p: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 8] = ["l_r", "l_bs", "l_cls", "l_r_kd", "l_bs_kd", "l_cls_kd", "l_cls_p", "total"];

    pub fn components(&self) -> [f64; 7] {
        [self.l_r, self.l_bs, self.l_cls, self.l_r_kd, self.l_bs_kd, self.l_cls_kd, self.l_cls_p]
    }

    pub fn values(&self) -> [f64; 8] {
        let c = self.components();
        [c[0], c[1], c[2], c[3], c[4], c[5], c[6], self.total]
    }

    /// Component-wise sum, recomputing the total in the fixed order.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_r += other.l_r;
        self.l_bs += other.l_bs;
        self.l_cls += other.l_cls;
        self.l_r_kd += other.l_r_kd;
        self.l_bs_kd += other.l_bs_kd;
        self.l_cls_kd += other.l_cls_kd;
        self.l_cls_p += other.l_cls_p;
        self.total = self.components().iter().sum();
    }
}

/// Hard-target sigmoid focal loss.
pub fn focal_hard(p: f64, positive: bool, fp: FocalParams) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        -fp.alpha * (1.0 - p).powf(fp.gamma) * p.ln()
    } else {
        -(1.0 - fp.alpha) * p.powf(fp.gamma) * (1.0 - p).ln()
    }
}

/// Soft-target focal loss, `|t - p|^gamma * BCE(p, t)`.
pub fn focal_soft(p: f64, t: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (t - p).abs().powf(gamma) * (-t * p.ln() - (1.0 - t) * (1.0 - p).ln())
}

/// Elementwise hard focal loss against a constant 0/1 target tensor.
pub fn focal_hard_var<'t>(p: Var<'t>, target: &Tensor, fp: FocalParams) -> TensorResult<Var<'t>> {
    let tape = p.tape();
    let y = tape.constant(target.clone());
    let not_y = tape.constant(Tensor::new(target.shape().to_vec(), target.data().iter().map(|v| 1.0 - v).collect())?);
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let q = p.rsub_scalar(1.0);
    let pos = q.pow(fp.gamma).mul(p.log())?.scale(-fp.alpha);
    let neg = p.pow(fp.gamma).mul(q.log())?.scale(-(1.0 - fp.alpha));
    pos.mul(y)?.add(neg.mul(not_y)?)
}

/// Elementwise soft focal loss; `t` is treated as given (callers pass
/// constants or detached values).
pub fn focal_soft_var<'t>(p: Var<'t>, t: Var<'t>, gamma: f64) -> TensorResult<Var<'t>> {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let modulator = t.sub(p)?.abs().pow(gamma);
    let ce = t.mul(p.log())?.add(t.rsub_scalar(1.0).mul(p.rsub_scalar(1.0).log())?)?.neg();
    modulator.mul(ce)
}

/// Per-row L1 distance and GIoU between `[n, 4]` box tensors.
pub fn regression_terms<'t>(pred: Var<'t>, target: Var<'t>) -> TensorResult<(Var<'t>, Var<'t>)> {
    let l1 = pred.sub(target)?.abs().sum_last();
    let g = giou_var(pred, target)?;
    Ok((l1, g))
}

/// Confidence-weighted distilled regression:
/// `(1/n) * sum_i S_i * (w1 * L1_i + wg * (1 - GIoU_i))`.
pub fn loss_r_kd<'t>(pred: Var<'t>, target: Var<'t>, confidence: &[f64], l1_weight: f64, giou_weight: f64) -> TensorResult<Var<'t>> {
    let tape = pred.tape();
    let n = confidence.len();
    let (l1, g) = regression_terms(pred, target)?;
    let per = l1.scale(l1_weight).add(g.rsub_scalar(1.0).scale(giou_weight))?;
    let s = tape.constant(Tensor::from_vec(confidence.to_vec()));
    Ok(per.mul(s)?.sum().scale(1.0 / n as f64))
}

/// `sum_i focal_soft(p_i, t_i) / normalizer`, the shared shape of the box
/// score, class and pseudo distillation terms.
pub fn soft_focal_normalized<'t>(p: Var<'t>, t: Var<'t>, normalizer: f64, gamma: f64) -> TensorResult<Var<'t>> {
    Ok(focal_soft_var(p, t, gamma)?.sum().scale(1.0 / normalizer))
}

/// A matched known-object (or, with down-weighting off, distilled) target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardTarget {
    pub query: usize,
    pub target: BoxCCWH,
    pub channel: usize,
}

/// A matched distilled target with its teacher confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftTarget {
    pub query: usize,
    pub target: BoxCCWH,
    pub confidence: f64,
}

/// Everything the loss needs besides the differentiable predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets {
    pub num_queries: usize,
    pub num_channels: usize,
    pub hard: Vec<HardTarget>,
    pub soft: Vec<SoftTarget>,
    pub pseudo: Vec<usize>,
    /// Box scores of the pseudo queries, used as class targets.
    pub pseudo_targets: Vec<f64>,
    pub bs_kd_norm: f64,
    pub cls_kd_norm: f64,
    pub cls_p_norm: f64,
}

impl LossTargets {
    /// Routes matched labels into loss targets and freezes normalizers from
    /// the current prediction values.
    pub fn build(
        preds: &[Prediction],
        labels: &[SupervisionLabel],
        assignment: &Assignment,
        pseudo: &[usize],
        cfg: &LossConfig,
    ) -> Self {
        let num_channels = preds.first().map_or(1, |p| p.cls.len());
        let unknown = num_channels - 1;
        let mut hard = Vec::new();
        let mut soft = Vec::new();
        for &(q, l) in &assignment.pairs {
            let label = &labels[l];
            let channel = match label.category {
                LabelCategory::Known(c) => c,
                LabelCategory::Unknown => unknown,
            };
            match label.source {
                Source::Distilled | Source::Pseudo if cfg.down_weight => soft.push(SoftTarget {
                    query: q,
                    target: label.bbox,
                    confidence: label.confidence,
                }),
                _ => hard.push(HardTarget {
                    query: q,
                    target: label.bbox,
                    channel,
                }),
            }
        }
        let bs_kd_norm = soft.iter().map(|s| preds[s.query].bs.abs()).sum();
        let cls_kd_norm = soft.iter().map(|s| preds[s.query].cls[unknown].abs()).sum();
        let cls_p_norm = pseudo.iter().map(|&q| preds[q].cls.iter().map(|c| c.abs()).sum::<f64>()).sum();
        LossTargets {
            num_queries: preds.len(),
            num_channels,
            hard,
            soft,
            pseudo: pseudo.to_vec(),
            pseudo_targets: pseudo.iter().map(|&q| preds[q].bs).collect(),
            bs_kd_norm,
            cls_kd_norm,
            cls_p_norm,
        }
    }
}

/// Result of [`scene_loss`].
#[derive(Debug, Clone, Copy)]
pub struct SceneLoss<'t> {
    pub total: Var<'t>,
    /// The seven terms in [`LossBreakdown::COLUMNS`] order.
    pub components: [Var<'t>; 7],
    pub breakdown: LossBreakdown,
    /// Distillation terms skipped because their normalizer was zero.
    pub zero_denominators: u32,
}

fn boxes_tensor(boxes: impl Iterator<Item = BoxCCWH>) -> Tensor {
    let data: Vec<f64> = boxes.flat_map(|b| b.to_array()).collect();
    let n = data.len() / 4;
    Tensor::new([n, 4], data).expect("non-empty box list")
}

/// Known-object losses `(l_r, l_bs, l_cls)`.
///
/// Matched hard targets get box-score target 1 and a one-hot class target.
/// Queries not matched to anything and not selected as pseudo labels are
/// negatives for both scores. Queries matched to distilled labels or chosen
/// as pseudo labels keep negative targets on the known channels only; their
/// box score and unknown channel belong to the distillation terms.
pub fn loss_known<'t>(preds: &PredictionVars<'t>, targets: &LossTargets, cfg: &LossConfig) -> TensorResult<(Var<'t>, Var<'t>, Var<'t>)> {
    let tape = preds.boxes.tape();
    let (m, ch) = (targets.num_queries, targets.num_channels);
    let unknown = ch - 1;
    let n_pos = targets.hard.len();
    let norm = (n_pos.max(1)) as f64;

    let l_r = if n_pos == 0 {
        tape.scalar(0.0)
    } else {
        let rows: Vec<usize> = targets.hard.iter().map(|h| h.query).collect();
        let pred = preds.boxes.gather_rows(&rows)?;
        let tgt = tape.constant(boxes_tensor(targets.hard.iter().map(|h| h.target)));
        let (l1, g) = regression_terms(pred, tgt)?;
        l1.scale(cfg.l1_weight).add(g.rsub_scalar(1.0).scale(cfg.giou_weight))?.mean()
    };

    let mut bs_target = vec![0.0; m];
    let mut bs_mask = vec![1.0; m];
    let mut cls_target = vec![0.0; m * ch];
    let mut cls_mask = vec![1.0; m * ch];
    for h in &targets.hard {
        bs_target[h.query] = 1.0;
        cls_target[h.query * ch + h.channel] = 1.0;
    }
    for q in targets.soft.iter().map(|s| s.query).chain(targets.pseudo.iter().copied()) {
        bs_mask[q] = 0.0;
        cls_mask[q * ch + unknown] = 0.0;
    }
    let bs_t = Tensor::new([m], bs_target)?;
    let bs_w = tape.constant(Tensor::new([m], bs_mask)?);
    let l_bs = focal_hard_var(preds.box_scores, &bs_t, cfg.focal)?.mul(bs_w)?.sum().scale(1.0 / norm);
    let cls_t = Tensor::new([m, ch], cls_target)?;
    let cls_w = tape.constant(Tensor::new([m, ch], cls_mask)?);
    let l_cls = focal_hard_var(preds.cls, &cls_t, cfg.focal)?.mul(cls_w)?.sum().scale(1.0 / norm);
    Ok((l_r, l_bs, l_cls))
}

/// Full per-scene loss: the sum of the seven components.
pub fn scene_loss<'t>(preds: &PredictionVars<'t>, targets: &LossTargets, cfg: &LossConfig) -> TensorResult<SceneLoss<'t>> {
    let tape: &'t Tape = preds.boxes.tape();
    let gamma = cfg.focal.gamma;
    let unknown = targets.num_channels - 1;
    let mut zero_denominators = 0;

    let (l_r, l_bs, l_cls) = loss_known(preds, targets, cfg)?;

    let (l_r_kd, l_bs_kd, l_cls_kd) = if targets.soft.is_empty() {
        (tape.scalar(0.0), tape.scalar(0.0), tape.scalar(0.0))
    } else {
        let rows: Vec<usize> = targets.soft.iter().map(|s| s.query).collect();
        let conf: Vec<f64> = targets.soft.iter().map(|s| s.confidence).collect();
        let pred = preds.boxes.gather_rows(&rows)?;
        let tgt = tape.constant(boxes_tensor(targets.soft.iter().map(|s| s.target)));
        let (w1, wg) = if cfg.weighted_kd_regression {
            (cfg.l1_weight, cfg.giou_weight)
        } else {
            (1.0, 1.0)
        };
        let l_r_kd = loss_r_kd(pred, tgt, &conf, w1, wg)?;
        let s = tape.constant(Tensor::from_vec(conf));
        let l_bs_kd = if targets.bs_kd_norm > 0.0 {
            soft_focal_normalized(preds.box_scores.gather_rows(&rows)?, s, targets.bs_kd_norm, gamma)?
        } else {
            zero_denominators += 1;
            tape.scalar(0.0)
        };
        let l_cls_kd = if targets.cls_kd_norm > 0.0 {
            let unk = preds.cls.gather_rows(&rows)?.slice(1, unknown, unknown + 1)?.reshape([rows.len()])?;
            soft_focal_normalized(unk, s, targets.cls_kd_norm, gamma)?
        } else {
            zero_denominators += 1;
            tape.scalar(0.0)
        };
        (l_r_kd, l_bs_kd, l_cls_kd)
    };

    let l_cls_p = if targets.pseudo.is_empty() {
        tape.scalar(0.0)
    } else if targets.cls_p_norm > 0.0 {
        let n = targets.pseudo.len();
        let unk = preds.cls.gather_rows(&targets.pseudo)?.slice(1, unknown, unknown + 1)?.reshape([n])?;
        let t = tape.constant(Tensor::from_vec(targets.pseudo_targets.clone()));
        soft_focal_normalized(unk, t, targets.cls_p_norm, gamma)?
    } else {
        zero_denominators += 1;
        tape.scalar(0.0)
    };

    let parts = [l_r, l_bs, l_cls, l_r_kd, l_bs_kd, l_cls_kd, l_cls_p];
    let mut total = parts[0];
    for p in &parts[1..] {
        total = total.add(*p)?;
    }
    let v: Vec<f64> = parts.iter().map(|p| p.item()).collect();
    let breakdown = LossBreakdown {
        l_r: v[0],
        l_bs: v[1],
        l_cls: v[2],
        l_r_kd: v[3],
        l_bs_kd: v[4],
        l_cls_kd: v[5],
        l_cls_p: v[6],
        total: total.item(),
    };
    Ok(SceneLoss {
        total,
        components: parts,
        breakdown,
        zero_denominators,
    })
}
