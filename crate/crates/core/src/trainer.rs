//! Training loop, incremental class learning and exemplar replay.
//!
//! Each iteration processes a batch of scenes. Per scene, the supervision set
//! is matched to the predictions, pseudo labels are picked among unmatched
//! queries, and the scene loss is back-propagated on its own tape. Gradients
//! are averaged over the batch, clipped by global norm, and applied with
//! AdamW.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{derive_seed, Instance};
use crate::losses::{scene_loss, LossBreakdown, LossConfig, LossTargets};
use crate::matching::{hungarian, select_pseudo, CostMatrix, MatchWeights, MatchingError};
use crate::model::{Detector, ModelError};
use crate::nn::Params;
use crate::supervision::{build_supervision, AlignmentMap, Source, SupervisionConfig, SupervisionLabel, TeacherDetection};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub finetune_lr_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Pseudo labels per scene.
    pub top_k: usize,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
    /// Use teacher detections as distilled labels.
    pub distill: bool,
    /// Keep distilled labels during the exemplar fine-tune.
    pub distill_during_finetune: bool,
    /// Exemplar scenes per known category.
    pub exemplars_per_category: usize,
    pub loss: LossConfig,
    pub matching: MatchWeights,
    pub supervision: SupervisionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            finetune_epochs: 20,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            finetune_lr_factor: 0.1,
            batch_size: 4,
            seed: 0,
            top_k: 5,
            clip_norm: 0.1,
            distill: true,
            distill_during_finetune: false,
            exemplars_per_category: 50,
            loss: LossConfig::default(),
            matching: MatchWeights::default(),
            supervision: SupervisionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.finetune_lr_factor > 0.0) {
            return bad("finetune_lr_factor must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite {what} at iteration {iteration} (scenes {scenes:?})")]
    NonFinite {
        what: &'static str,
        iteration: usize,
        scenes: Vec<String>,
        /// Parameters before the offending step.
        last_good: Box<Params>,
        breakdown: LossBreakdown,
    },
}

/// One training scene with its fixed supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainScene {
    pub scene_id: String,
    /// `[N_s, patch_dim]` image patches.
    pub patches: Tensor,
    /// Ground truth first, then distilled labels.
    pub labels: Vec<SupervisionLabel>,
}

impl TrainScene {
    /// Ground truth of `instances` restricted to `known` (channel = position
    /// in `known`), merged with the teacher's detections.
    pub fn build(
        scene_id: &str,
        patches: Tensor,
        instances: &[Instance],
        known: &[String],
        teacher: &[TeacherDetection],
        map: &AlignmentMap,
        cfg: &SupervisionConfig,
    ) -> Self {
        let gt: Vec<SupervisionLabel> = instances
            .iter()
            .filter_map(|i| known.iter().position(|k| *k == i.category).map(|c| SupervisionLabel::ground_truth(i.bbox, c)))
            .collect();
        let known_set: BTreeSet<String> = known.iter().cloned().collect();
        TrainScene {
            scene_id: scene_id.to_string(),
            patches,
            labels: build_supervision(&gt, teacher, map, &known_set, cfg),
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub epoch: usize,
    pub losses: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    pub num_distilled: usize,
    pub num_pseudo: usize,
    pub zero_denominators: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "iteration,epoch,l_r,l_bs,l_cls,l_r_kd,l_bs_kd,l_cls_kd,l_cls_p,total,grad_norm,clipped,num_distilled,num_pseudo";

    /// CSV with a comment line carrying version and seed.
    pub fn to_csv(&self, version: &str, seed: u64) -> String {
        let mut out = format!("# skdf {version} seed={seed}\n{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.iteration, r.epoch);
            for v in r.losses.values() {
                let _ = write!(out, ",{v:e}");
            }
            let _ = writeln!(out, ",{:e},{},{},{}", r.grad_norm, r.clipped as u8, r.num_distilled, r.num_pseudo);
        }
        out
    }

    pub fn extend(&mut self, other: TrainLog) {
        let offset = self.rows.last().map_or(0, |r| r.iteration + 1);
        self.rows.extend(other.rows.into_iter().map(|mut r| {
            r.iteration += offset;
            r
        }));
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, cfg: &TrainConfig) -> Self {
        AdamW {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let n = p.numel();
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
    }
}

/// Global L2 norm over all gradients.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales gradients to norm `max_norm` when larger; returns the original
/// norm and whether clipping happened.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> (f64, bool) {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        return (norm, true);
    }
    (norm, false)
}

/// Per-scene outcome of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct SceneStep {
    pub breakdown: LossBreakdown,
    pub grads: BTreeMap<String, Tensor>,
    pub num_distilled: usize,
    pub num_pseudo: usize,
    pub zero_denominators: u32,
}

/// Loss and parameter gradients of one scene, scaled by `weight`.
pub fn scene_step(model: &Detector, scene: &TrainScene, cfg: &TrainConfig, distill: bool, weight: f64) -> Result<SceneStep, TrainError> {
    let m = model.config.num_queries;
    let mut labels: Vec<SupervisionLabel> = scene
        .labels
        .iter()
        .filter(|l| distill || l.source != Source::Distilled)
        .copied()
        .collect();
    // more labels than queries: keep ground truth, then the most confident
    if labels.len() > m {
        labels.sort_by(|a, b| (b.source == Source::Gt).cmp(&(a.source == Source::Gt)).then(b.confidence.total_cmp(&a.confidence)));
        labels.truncate(m);
    }
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let x = tape.constant(scene.patches.clone());
    let preds = model.forward(&p, x)?;
    let values = preds.values();
    let costs = CostMatrix::build(&labels, &values, cfg.matching)?;
    let assignment = hungarian(&costs)?;
    let bs: Vec<f64> = values.iter().map(|v| v.bs).collect();
    let pseudo = select_pseudo(&bs, &assignment, cfg.top_k);
    let targets = LossTargets::build(&values, &labels, &assignment, &pseudo, &cfg.loss);
    let sl = scene_loss(&preds, &targets, &cfg.loss)?;
    let grads = tape.backward(sl.total.scale(weight))?;
    Ok(SceneStep {
        breakdown: sl.breakdown,
        grads: p.gradients(&grads),
        num_distilled: labels.iter().filter(|l| l.source == Source::Distilled).count(),
        num_pseudo: pseudo.len(),
        zero_denominators: sl.zero_denominators,
    })
}

/// One optimization phase: learning rate, epochs, and whether distilled
/// labels are used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub lr: f64,
    pub epochs: usize,
    pub distill: bool,
    /// Mixed into the shuffling seed so phases draw different orders.
    pub stream: u64,
}

/// Trains `model` in place over `scenes`.
pub fn train_phase(model: &mut Detector, scenes: &[TrainScene], cfg: &TrainConfig, phase: Phase) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if scenes.is_empty() {
        return Ok(log);
    }
    let mut opt = AdamW::new(phase.lr, cfg);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut iteration = 0;
    for epoch in 0..phase.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, phase.stream), epoch as u64));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let weight = 1.0 / batch.len() as f64;
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut row = LogRow {
                iteration,
                epoch,
                losses: LossBreakdown::default(),
                grad_norm: 0.0,
                clipped: false,
                num_distilled: 0,
                num_pseudo: 0,
                zero_denominators: 0,
            };
            for &s in batch {
                let step = scene_step(model, &scenes[s], cfg, phase.distill, weight)?;
                let mut scaled = step.breakdown;
                for v in [
                    &mut scaled.l_r,
                    &mut scaled.l_bs,
                    &mut scaled.l_cls,
                    &mut scaled.l_r_kd,
                    &mut scaled.l_bs_kd,
                    &mut scaled.l_cls_kd,
                    &mut scaled.l_cls_p,
                ] {
                    *v *= weight;
                }
                row.losses.accumulate(&scaled);
                row.num_distilled += step.num_distilled;
                row.num_pseudo += step.num_pseudo;
                row.zero_denominators += step.zero_denominators;
                for (name, g) in step.grads {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(name, g);
                        }
                    }
                }
            }
            let ids = || batch.iter().map(|&s| scenes[s].scene_id.clone()).collect();
            if !row.losses.total.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "loss",
                    iteration,
                    scenes: ids(),
                    last_good: Box::new(model.params.clone()),
                    breakdown: row.losses,
                });
            }
            let (norm, clipped) = clip_grad_norm(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "gradient",
                    iteration,
                    scenes: ids(),
                    last_good: Box::new(model.params.clone()),
                    breakdown: row.losses,
                });
            }
            row.grad_norm = norm;
            row.clipped = clipped;
            opt.step(&mut model.params, &grads);
            log.rows.push(row);
            iteration += 1;
        }
    }
    Ok(log)
}

/// First-task training at the base learning rate.
pub fn train_task(model: &mut Detector, scenes: &[TrainScene], cfg: &TrainConfig) -> Result<TrainLog, TrainError> {
    train_phase(
        model,
        scenes,
        cfg,
        Phase {
            lr: cfg.lr,
            epochs: cfg.epochs,
            distill: cfg.distill,
            stream: 0,
        },
    )
}

/// Scenes kept per known category for replay.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExemplarStore {
    pub per_category: BTreeMap<String, Vec<String>>,
}

impl ExemplarStore {
    /// Distinct stored scenes, sorted.
    pub fn scene_ids(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.per_category.values().flatten().collect();
        set.into_iter().cloned().collect()
    }

    /// Known categories without any stored scene.
    pub fn missing(&self, known: &[String]) -> Vec<String> {
        known
            .iter()
            .filter(|k| self.per_category.get(*k).is_none_or(Vec::is_empty))
            .cloned()
            .collect()
    }
}

/// For each known category, the `budget` scenes with the most instances of
/// it (earlier scenes first on ties).
pub fn select_exemplars(scenes: &[(&str, &[Instance])], known: &[String], budget: usize) -> ExemplarStore {
    let mut store = ExemplarStore::default();
    if budget == 0 {
        return store;
    }
    for k in known {
        let mut counted: Vec<(usize, usize)> = scenes
            .iter()
            .enumerate()
            .map(|(i, (_, insts))| (i, insts.iter().filter(|x| x.category == *k).count()))
            .filter(|&(_, c)| c > 0)
            .collect();
        counted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        counted.truncate(budget);
        if counted.is_empty() {
            log::warn!("no exemplar scene contains category {k:?}");
        }
        store.per_category.insert(k.clone(), counted.into_iter().map(|(i, _)| scenes[i].0.to_string()).collect());
    }
    store
}

/// Logs of the two increment phases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IncrementLog {
    pub new_task: TrainLog,
    pub finetune: TrainLog,
}

fn increment_stream(new_known: usize) -> u64 {
    1 + new_known as u64 * 2
}

/// Grows the classifier to `new_known` categories and trains on the new
/// task's scenes at the base learning rate.
pub fn train_new_task(model: &mut Detector, new_known: usize, scenes: &[TrainScene], cfg: &TrainConfig) -> Result<TrainLog, TrainError> {
    model.expand_classes(new_known, derive_seed(cfg.seed, new_known as u64))?;
    train_phase(
        model,
        scenes,
        cfg,
        Phase {
            lr: cfg.lr,
            epochs: cfg.epochs,
            distill: cfg.distill,
            stream: increment_stream(new_known),
        },
    )
}

/// Fine-tunes on exemplar scenes at the reduced learning rate.
pub fn replay_finetune(model: &mut Detector, exemplars: &[TrainScene], cfg: &TrainConfig) -> Result<TrainLog, TrainError> {
    train_phase(
        model,
        exemplars,
        cfg,
        Phase {
            lr: cfg.lr * cfg.finetune_lr_factor,
            epochs: cfg.finetune_epochs,
            distill: cfg.distill && cfg.distill_during_finetune,
            stream: increment_stream(model.config.num_known) + 1,
        },
    )
}

/// Grows the classifier to `new_known` categories, trains on the new task,
/// then fine-tunes on the exemplar scenes at the reduced learning rate.
/// Passing no exemplar scenes skips the fine-tune.
pub fn increment_task(
    model: &mut Detector,
    new_known: usize,
    scenes: &[TrainScene],
    exemplars: &[TrainScene],
    cfg: &TrainConfig,
) -> Result<IncrementLog, TrainError> {
    let new_task = train_new_task(model, new_known, scenes, cfg)?;
    let finetune = replay_finetune(model, exemplars, cfg)?;
    Ok(IncrementLog { new_task, finetune })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxCCWH;
    use crate::model::{patchify, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 8,
            num_queries: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            ffn_dim: 8,
            num_known: 2,
            ..Default::default()
        }
    }

    fn scene(id: &str, labels: Vec<SupervisionLabel>) -> TrainScene {
        let img = Tensor::new([16, 16, 3], (0..768).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        TrainScene {
            scene_id: id.into(),
            patches: patchify(&img, 8).unwrap(),
            labels,
        }
    }

    fn labels() -> Vec<SupervisionLabel> {
        vec![
            SupervisionLabel::ground_truth(BoxCCWH::new(0.3, 0.3, 0.2, 0.2).unwrap(), 1),
            SupervisionLabel::distilled(BoxCCWH::new(0.7, 0.7, 0.2, 0.3).unwrap(), 0.8),
        ]
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let mut m = Detector::new(tiny(), 1).unwrap();
        let before = m.params.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let log = train_task(&mut m, &[scene("a", labels())], &cfg).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(m.params.to_map(), before.to_map());
    }

    #[test]
    fn training_is_deterministic_and_totals_add_up() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let scenes = vec![scene("a", labels()), scene("b", labels()[..1].to_vec()), scene("c", vec![])];
        let run = || {
            let mut m = Detector::new(tiny(), 3).unwrap();
            let log = train_task(&mut m, &scenes, &cfg).unwrap();
            (m.params.to_map(), log)
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
        assert_eq!(l1.rows.len(), 6);
        for r in &l1.rows {
            let sum: f64 = r.losses.components().iter().sum();
            assert!((sum - r.losses.total).abs() <= 1e-12);
        }
        assert_eq!(l1.to_csv("v0", 0), l2.to_csv("v0", 0));
    }

    #[test]
    fn closed_set_mode_has_only_known_terms() {
        let cfg = TrainConfig {
            epochs: 1,
            top_k: 0,
            distill: false,
            ..Default::default()
        };
        let mut m = Detector::new(tiny(), 2).unwrap();
        let log = train_task(&mut m, &[scene("a", labels())], &cfg).unwrap();
        let r = log.rows[0];
        assert_eq!((r.num_distilled, r.num_pseudo), (0, 0));
        assert_eq!([r.losses.l_r_kd, r.losses.l_bs_kd, r.losses.l_cls_kd, r.losses.l_cls_p], [0.0; 4]);
        assert!(r.losses.l_r > 0.0);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = Params::new();
        p.insert("w", Tensor::from_vec(vec![1.0, -2.0]));
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(0.1, &cfg);
        let g = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![3.0, -0.5]))]);
        opt.step(&mut p, &g);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn clipping() {
        let mut g = BTreeMap::from([("a".to_string(), Tensor::from_vec(vec![3.0, 4.0]))]);
        assert_eq!(clip_grad_norm(&mut g, 10.0), (5.0, false));
        assert_eq!(clip_grad_norm(&mut g, 0.5), (5.0, true));
        assert!((grad_norm(&g) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exemplar_selection_by_hand() {
        let b = BoxCCWH::new(0.5, 0.5, 0.1, 0.1).unwrap();
        let i = |c: &str| Instance { category: c.into(), bbox: b };
        let s: Vec<(String, Vec<Instance>)> = vec![
            ("s0".into(), vec![i("a")]),
            ("s1".into(), vec![i("a"), i("a"), i("b")]),
            ("s2".into(), vec![i("b")]),
            ("s3".into(), vec![i("a"), i("b"), i("b")]),
            ("s4".into(), vec![i("c")]),
        ];
        let view: Vec<(&str, &[Instance])> = s.iter().map(|(id, v)| (id.as_str(), v.as_slice())).collect();
        let known = vec!["a".to_string(), "b".to_string(), "d".to_string()];
        let store = select_exemplars(&view, &known, 2);
        assert_eq!(store.per_category["a"], vec!["s1", "s0"]);
        assert_eq!(store.per_category["b"], vec!["s3", "s1"]);
        assert!(store.per_category["d"].is_empty());
        assert_eq!(store.missing(&known), vec!["d"]);
        assert_eq!(store.scene_ids(), vec!["s0", "s1", "s3"]);
        assert!(select_exemplars(&view, &known, 0).per_category.is_empty());
        let three = select_exemplars(&view, &known[..2], 50);
        assert!(three.scene_ids().len() <= 100);
    }

    #[test]
    fn increment_preserves_old_channels() {
        let mut m = Detector::new(tiny(), 4).unwrap();
        let [w, b] = m.cls_head_params().map(String::from);
        let (w0, b0) = (m.params.get(&w).unwrap().clone(), m.params.get(&b).unwrap().clone());
        let cfg = TrainConfig {
            epochs: 0,
            finetune_epochs: 0,
            ..Default::default()
        };
        increment_task(&mut m, 4, &[], &[], &cfg).unwrap();
        let (w1, b1) = (m.params.get(&w).unwrap(), m.params.get(&b).unwrap());
        assert_eq!(w1.shape(), &[8, 5]);
        for r in 0..8 {
            assert_eq!(w1.data()[r * 5..r * 5 + 2], w0.data()[r * 3..r * 3 + 2]);
            assert_eq!(w1.data()[r * 5 + 4], w0.data()[r * 3 + 2]);
        }
        assert_eq!(b1.data()[..2], b0.data()[..2]);
    }
}
