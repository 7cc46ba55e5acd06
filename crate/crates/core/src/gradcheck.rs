//! Central finite differences for checking tape gradients, and the suites
//! that apply them to the primitives, every loss term and a small detector.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::BoxCCWH;
use crate::losses::{scene_loss, LossBreakdown, LossConfig, LossTargets};
use crate::matching::{hungarian, select_pseudo, CostMatrix, MatchWeights};
use crate::model::{patchify, Detector, ModelConfig, PredictionVars};
use crate::supervision::SupervisionLabel;
use crate::tensor::{Result, Tape, Tensor, Var};

/// Errors count as relative to at least this magnitude. Central differences
/// at `h = 1e-5` carry roughly `1e-9` of rounding noise, so smaller
/// gradients cannot be resolved to a relative `1e-4`.
pub const REL_FLOOR: f64 = 1e-4;

/// `(f(h) - f(-h)) / 2h`, where `f(d)` evaluates the function with one
/// coordinate shifted by `d`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// One checked coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl CoordCheck {
    pub fn new(label: impl Into<String>, analytic: f64, numeric: f64) -> Self {
        CoordCheck {
            label: label.into(),
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        }
    }
}

/// The check with the largest relative error.
pub fn worst(checks: &[CoordCheck]) -> Option<&CoordCheck> {
    checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
}


fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

fn random_box(rng: &mut ChaCha8Rng) -> BoxCCWH {
    let w = rng.gen_range(0.1..0.4);
    let h = rng.gen_range(0.1..0.4);
    BoxCCWH::new(rng.gen_range(w / 2.0..1.0 - w / 2.0), rng.gen_range(h / 2.0..1.0 - h / 2.0), w, h).expect("valid box")
}

/// Checks `f` at `inputs`: gradients from the tape against central
/// differences, on `coords` coordinates drawn among those with a non-zero
/// analytic gradient (any coordinate when none is non-zero).
pub fn check_function(
    inputs: &[Tensor],
    g: &dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
    coords: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CoordCheck>> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf_owned(t.clone().with_grad(true))).collect();
    let out = g(&vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for (i, a) in analytic.iter().enumerate() {
        pool.extend(a.data().iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, _)| (i, j)));
    }
    if pool.is_empty() {
        pool = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
    }
    let mut out = Vec::with_capacity(coords);
    for _ in 0..coords {
        let &(i, j) = pool.choose(rng).expect("non-empty pool");
        let numeric = central_difference(
            |d| {
                let mut shifted = inputs.to_vec();
                shifted[i].data_mut()[j] += d;
                let tape = Tape::new();
                let vars: Vec<Var<'_>> = shifted.iter().map(|t| tape.leaf(t)).collect();
                g(&vars).expect("evaluation succeeded at the base point").item()
            },
            h,
        );
        out.push(CoordCheck::new(format!("input{i}[{j}]"), analytic[i].data()[j], numeric));
    }
    Ok(out)
}

/// Random three-layer composition of matmul, sigmoid, layer norm, softmax,
/// exp/log/sin and elementwise products.
pub fn primitive_suite(seed: u64, coords: usize, h: f64) -> Result<Vec<CoordCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        random_tensor(&mut rng, &[3, 4], -1.0, 1.0),
        random_tensor(&mut rng, &[4, 5], -1.0, 1.0),
        random_tensor(&mut rng, &[5], -0.5, 0.5),
        random_tensor(&mut rng, &[5, 2], -1.0, 1.0),
        random_tensor(&mut rng, &[3, 2], 0.5, 1.5),
    ];
    fn net<'t>(v: &[Var<'t>]) -> Result<Var<'t>> {
        let h1 = v[0].matmul(v[1])?.add(v[2])?.sigmoid();
        let h2 = h1.layer_norm(1e-5).matmul(v[3])?.softmax();
        let h3 = h2.mul(v[4])?.add_scalar(1.0).log().add(v[4].exp().scale(0.1))?.add(v[4].sin())?;
        Ok(h3.pow(2.0).sum())
    }
    check_function(&inputs, &net, coords, h, &mut rng)
}

/// Random predictions and supervision with frozen targets, built so every
/// loss term is active.
#[derive(Debug, Clone)]
pub struct LossFixture {
    /// Box, box-score and class logits.
    pub logits: [Tensor; 3],
    pub targets: LossTargets,
    pub config: LossConfig,
}

fn preds_from<'t>(v: &[Var<'t>]) -> PredictionVars<'t> {
    PredictionVars {
        boxes: v[0].sigmoid(),
        box_scores: v[1].sigmoid(),
        cls: v[2].sigmoid(),
    }
}

impl LossFixture {
    pub fn random(rng: &mut ChaCha8Rng, config: LossConfig) -> Self {
        let (m, ch) = (8, 4);
        let logits = [
            random_tensor(rng, &[m, 4], -1.5, 1.5),
            random_tensor(rng, &[m], -2.0, 2.0),
            random_tensor(rng, &[m, ch], -2.0, 2.0),
        ];
        let mut labels: Vec<SupervisionLabel> = (0..2).map(|_| SupervisionLabel::ground_truth(random_box(rng), rng.gen_range(0..ch - 1))).collect();
        labels.extend((0..2).map(|_| SupervisionLabel::distilled(random_box(rng), rng.gen_range(0.05..1.0))));
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = logits.iter().map(|t| tape.constant(t.clone())).collect();
        let values = preds_from(&vars).values();
        let costs = CostMatrix::build(&labels, &values, MatchWeights::default()).expect("finite costs");
        let assignment = hungarian(&costs).expect("rows <= cols");
        let bs: Vec<f64> = values.iter().map(|p| p.bs).collect();
        let pseudo = select_pseudo(&bs, &assignment, 2);
        let targets = LossTargets::build(&values, &labels, &assignment, &pseudo, &config);
        LossFixture { logits, targets, config }
    }

    pub fn component<'t>(&self, v: &[Var<'t>], k: usize) -> Result<Var<'t>> {
        Ok(scene_loss(&preds_from(v), &self.targets, &self.config)?.components[k])
    }
}

fn component_fn(fx: &LossFixture, k: usize) -> impl for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>> + '_ {
    move |v| fx.component(v, k)
}

/// Per loss term, `coords` checks pooled over `scenes` random fixtures.
pub fn loss_suite(seed: u64, config: LossConfig, scenes: usize, coords: usize, h: f64) -> Result<Vec<(&'static str, Vec<CoordCheck>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fixtures: Vec<LossFixture> = (0..scenes).map(|_| LossFixture::random(&mut rng, config)).collect();
    let mut out = Vec::new();
    for (k, name) in LossBreakdown::COLUMNS[..7].iter().enumerate() {
        let mut checks = Vec::new();
        for (s, fx) in fixtures.iter().enumerate() {
            let n = coords / scenes + usize::from(s < coords % scenes);
            let g = component_fn(fx, k);
            checks.extend(check_function(&fx.logits, &g, n, h, &mut rng)?);
        }
        out.push((*name, checks));
    }
    Ok(out)
}

/// The small detector used by the model gradient check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_size: 8,
        patch_hidden: 16,
        embed_dim: 32,
        num_queries: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn_dim: 32,
        num_known: 3,
        reference_points: true,
        cascade: true,
    }
}

/// Full-model check: gradient of the scene loss (targets frozen at the
/// initial predictions) with respect to `coords` random parameter scalars.
pub fn model_suite(seed: u64, coords: usize, h: f64) -> Result<Vec<CoordCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_model_config();
    let model = Detector::new(cfg.clone(), seed).expect("valid tiny config");
    let image = random_tensor(&mut rng, &[cfg.image_size, cfg.image_size, 3], 0.0, 1.0);
    let patches = patchify(&image, cfg.patch_size)?;
    let mut labels: Vec<SupervisionLabel> = (0..2).map(|_| SupervisionLabel::ground_truth(random_box(&mut rng), rng.gen_range(0..cfg.num_known))).collect();
    labels.push(SupervisionLabel::distilled(random_box(&mut rng), 0.7));
    let loss_cfg = LossConfig::default();

    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let preds = model.forward(&p, tape.constant(patches.clone()))?;
    let values = preds.values();
    let costs = CostMatrix::build(&labels, &values, MatchWeights::default()).expect("finite costs");
    let assignment = hungarian(&costs).expect("rows <= cols");
    let bs: Vec<f64> = values.iter().map(|v| v.bs).collect();
    let pseudo = select_pseudo(&bs, &assignment, 2);
    let targets = LossTargets::build(&values, &labels, &assignment, &pseudo, &loss_cfg);
    let total = scene_loss(&preds, &targets, &loss_cfg)?.total;
    let grads = p.gradients(&tape.backward(total)?);

    let loss_at = |m: &Detector| -> f64 {
        let tape = Tape::new();
        let p = m.params.bind(&tape);
        let preds = m.forward(&p, tape.constant(patches.clone())).expect("forward");
        scene_loss(&preds, &targets, &loss_cfg).expect("loss").total.item()
    };
    let pool: Vec<(String, usize)> = model.params.iter().flat_map(|(n, t)| (0..t.numel()).map(move |i| (n.clone(), i))).collect();
    let mut out = Vec::with_capacity(coords);
    for _ in 0..coords {
        let (name, i) = pool.choose(&mut rng).expect("parameters exist").clone();
        let numeric = central_difference(
            |d| {
                let mut m = model.clone();
                m.params.get_mut(&name).expect("known name").data_mut()[i] += d;
                loss_at(&m)
            },
            h,
        );
        let analytic = grads.get(&name).map_or(0.0, |g| g.data()[i]);
        out.push(CoordCheck::new(format!("{name}[{i}]"), analytic, numeric));
    }
    Ok(out)
}

/// Largest absolute gradient that the box outputs `b` and box scores `bs`
/// send to the classification head of the tiny model. Zero when the two
/// branches are decoupled.
pub fn box_to_cls_head_leak(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_model_config();
    let model = Detector::new(cfg.clone(), seed).expect("valid tiny config");
    let image = random_tensor(&mut rng, &[cfg.image_size, cfg.image_size, 3], 0.0, 1.0);
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let preds = model.forward(&p, tape.constant(patchify(&image, cfg.patch_size)?))?;
    let wb = tape.constant(random_tensor(&mut rng, &[cfg.num_queries, 4], -1.0, 1.0));
    let ws = tape.constant(random_tensor(&mut rng, &[cfg.num_queries], -1.0, 1.0));
    let out = preds.boxes.mul(wb)?.sum().add(preds.box_scores.mul(ws)?.sum())?;
    let grads = p.gradients(&tape.backward(out)?);
    Ok(model
        .cls_head_params()
        .iter()
        .filter_map(|n| grads.get(*n))
        .flat_map(|g| g.data().iter().map(|v| v.abs()))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic() {
        let d = central_difference(|e| (2.0 + e).powi(3), 1e-5);
        assert!(relative_error(12.0, d) < 1e-9);
        assert_eq!(relative_error(0.0, 1e-9), 1e-5);
    }

    #[test]
    fn small_suites_pass() {
        let worst_of = |c: &[CoordCheck]| worst(c).unwrap().rel_error;
        assert!(worst_of(&primitive_suite(1, 20, 1e-5).unwrap()) < 1e-4);
        for (name, checks) in loss_suite(2, LossConfig::default(), 2, 10, 1e-5).unwrap() {
            assert!(worst_of(&checks) < 1e-4, "{name}: {:?}", worst(&checks));
        }
    }

    #[test]
    fn box_outputs_leave_cls_head_untouched() {
        for seed in 0..3 {
            assert_eq!(box_to_cls_head_leak(seed).unwrap(), 0.0);
        }
    }

    #[test]
    fn model_suite_passes() {
        let checks = model_suite(3, 100, 1e-5).unwrap();
        let w = worst(&checks).unwrap();
        assert!(w.rel_error < 1e-4, "{w:?}");
    }
}
