//! The cascade decoupled detector.
//!
//! Image patches are embedded, summed with a fixed 2-D sinusoidal position
//! encoding and passed through a self-attention encoder. A localization
//! decoder turns learned location queries into location embeddings, which
//! feed the box-regression and box-score heads. The same location embeddings
//! are the queries of an identification decoder whose class embeddings feed
//! the classification head. Box and box-score outputs therefore never depend
//! on classification parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, ParamMap};
use crate::geometry::BoxCCWH;
use crate::nn::{fan_in_uniform, standard_normal, Bound, DecoderLayer, EncoderLayer, Linear, Params};
use crate::tensor::{concat, Result as TensorResult, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Hidden width of a two-layer patch embedding; 0 embeds linearly.
    pub patch_hidden: usize,
    pub embed_dim: usize,
    pub num_queries: usize,
    pub encoder_layers: usize,
    /// Layers in each of the two decoders.
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Known categories; the classifier has one extra unknown channel.
    pub num_known: usize,
    /// Learned per-query reference centers; box centers become offsets and
    /// the sinusoidal encoding of each center is the query position.
    pub reference_points: bool,
    /// Cascade identification decoder. When off, the classifier reads the
    /// location embeddings directly (single coupled decoder).
    pub cascade: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            patch_hidden: 0,
            embed_dim: 64,
            num_queries: 25,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
            num_known: 4,
            reference_points: false,
            cascade: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint header: {0}")]
    Header(String),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("image_size must be a positive multiple of patch_size");
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be a positive multiple of heads");
        }
        if self.embed_dim % 4 != 0 {
            return bad("embed_dim must be divisible by 4 for the 2-D position encoding");
        }
        if self.num_queries == 0 || self.ffn_dim == 0 {
            return bad("num_queries and ffn_dim must be positive");
        }
        if self.decoder_layers == 0 {
            return bad("decoder_layers must be positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn num_channels(&self) -> usize {
        self.num_known + 1
    }
}

/// Per-query prediction values.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub bbox: BoxCCWH,
    /// Box score.
    pub bs: f64,
    /// Independent sigmoid scores; the last entry is the unknown channel.
    pub cls: Vec<f64>,
}

/// Differentiable detector outputs for one image.
#[derive(Debug, Clone, Copy)]
pub struct PredictionVars<'t> {
    /// `[M, 4]` ccwh boxes in `[0, 1]`.
    pub boxes: Var<'t>,
    /// `[M]` box scores.
    pub box_scores: Var<'t>,
    /// `[M, C + 1]` class scores.
    pub cls: Var<'t>,
}

const MIN_EXTENT: f64 = 1e-9;

impl PredictionVars<'_> {
    pub fn values(&self) -> Vec<Prediction> {
        let b = self.boxes.value();
        let s = self.box_scores.value();
        let c = self.cls.value();
        (0..s.numel())
            .map(|i| {
                let r = b.row(i);
                Prediction {
                    bbox: BoxCCWH::new(r[0], r[1], r[2].max(MIN_EXTENT), r[3].max(MIN_EXTENT)).expect("sigmoid outputs lie in the unit square"),
                    bs: s.data()[i],
                    cls: c.row(i).to_vec(),
                }
            })
            .collect()
    }
}

/// Intermediate tensors of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace<'t> {
    pub tokens: Var<'t>,
    pub positional: Var<'t>,
    pub e_location: Var<'t>,
    pub e_class: Var<'t>,
    pub preds: PredictionVars<'t>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Stop gradients between the two decoders.
    pub detach_cascade: bool,
}

/// Fixed 2-D sinusoidal encoding: the first half of the channels encodes the
/// row, the second half the column.
pub fn positional_encoding(grid: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs = half / 2;
    let mut data = vec![0.0; grid * grid * dim];
    for r in 0..grid {
        for c in 0..grid {
            let row = &mut data[(r * grid + c) * dim..(r * grid + c + 1) * dim];
            for (offset, coord) in [(0, r), (half, c)] {
                for f in 0..freqs {
                    let rate = 1.0 / 10000f64.powf(2.0 * f as f64 / half as f64);
                    let x = (coord as f64 + 0.5) * rate * std::f64::consts::PI;
                    row[offset + 2 * f] = x.sin();
                    row[offset + 2 * f + 1] = x.cos();
                }
            }
        }
    }
    Tensor::new([grid * grid, dim], data).expect("shape matches")
}

/// Constants mapping a `[M, 2]` matrix of `(x, y)` points in the unit
/// square to the channels of [`positional_encoding`]: the encoding is
/// `sin(points * freq + shift)`.
fn point_encoding_basis(grid: usize, dim: usize) -> (Tensor, Tensor) {
    let half = dim / 2;
    let mut freq = vec![0.0; 2 * dim];
    let mut shift = vec![0.0; dim];
    for (offset, axis) in [(0, 1), (half, 0)] {
        for f in 0..half / 2 {
            let rate = grid as f64 / 10000f64.powf(2.0 * f as f64 / half as f64) * std::f64::consts::PI;
            freq[axis * dim + offset + 2 * f] = rate;
            freq[axis * dim + offset + 2 * f + 1] = rate;
            shift[offset + 2 * f + 1] = std::f64::consts::FRAC_PI_2;
        }
    }
    (Tensor::new([2, dim], freq).expect("shape matches"), Tensor::new([dim], shift).expect("shape matches"))
}

/// Splits an `H x W x 3` image into row-major `patch x patch x 3` patches.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor, TensorError> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 || s[0] % patch != 0 || s[1] % patch != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "patchify",
            lhs: s.to_vec(),
            rhs: vec![patch, patch, 3],
        });
    }
    let (h, w) = (s[0], s[1]);
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * 3;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * pd);
    for gy in 0..gh {
        for gx in 0..gw {
            for y in 0..patch {
                let start = ((gy * patch + y) * w + gx * patch) * 3;
                out.extend_from_slice(&src[start..start + patch * 3]);
            }
        }
    }
    Tensor::new([gh * gw, pd], out)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ModelConfig,
    pub params: Params,
    positional: Tensor,
    patch_embed: Vec<Linear>,
    encoder: Vec<EncoderLayer>,
    location_decoder: Vec<DecoderLayer>,
    identification_decoder: Vec<DecoderLayer>,
    reg: [Linear; 3],
    obj: Linear,
    cls: Linear,
}

const SCORE_PRIOR: f64 = 0.01;

pub const QUERY_PARAM: &str = "query.location";
pub const REFERENCE_PARAM: &str = "query.reference";

impl Detector {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let (d, h, f) = (config.embed_dim, config.heads, config.ffn_dim);
        let patch_embed = match config.patch_hidden {
            0 => vec![Linear::new(&mut params, "patch", config.patch_dim(), d, &mut rng)],
            hidden => vec![
                Linear::new(&mut params, "patch.0", config.patch_dim(), hidden, &mut rng),
                Linear::new(&mut params, "patch.1", hidden, d, &mut rng),
            ],
        };
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut params, &format!("encoder.{i}"), d, h, f, &mut rng))
            .collect();
        params.insert(QUERY_PARAM, standard_normal(&mut rng, &[config.num_queries, d]));
        if config.reference_points {
            let refs: Vec<f64> = (0..config.num_queries * 2).map(|_| logit(rng.gen_range(0.1..0.9))).collect();
            params.insert(REFERENCE_PARAM, Tensor::new([config.num_queries, 2], refs)?);
        }
        let location_decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut params, &format!("loc_decoder.{i}"), d, h, f, &mut rng))
            .collect();
        let identification_decoder = if config.cascade {
            (0..config.decoder_layers)
                .map(|i| DecoderLayer::new(&mut params, &format!("id_decoder.{i}"), d, h, f, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let reg = [
            Linear::new(&mut params, "head.reg.0", d, d, &mut rng),
            Linear::new(&mut params, "head.reg.1", d, d, &mut rng),
            Linear::new(&mut params, "head.reg.2", d, 4, &mut rng),
        ];
        // initial boxes near (0.5, 0.5) with extent about 0.2
        let last_bias = Tensor::new([4], vec![0.0, 0.0, logit(0.2), logit(0.2)])?;
        params.insert(reg[2].bias.clone(), last_bias);
        let small = fan_in_uniform(&mut rng, &[d, 4], d * 100);
        params.insert(reg[2].weight.clone(), small);
        let obj = Linear::new(&mut params, "head.obj", d, 1, &mut rng);
        let cls = Linear::new(&mut params, "head.cls", d, config.num_channels(), &mut rng);
        // focal-loss prior: scores start near 0.01
        params.insert(obj.bias.clone(), Tensor::full([1], logit(SCORE_PRIOR)));
        params.insert(cls.bias.clone(), Tensor::full([config.num_channels()], logit(SCORE_PRIOR)));
        let positional = positional_encoding(config.grid(), d);
        Ok(Detector {
            config,
            params,
            positional,
            patch_embed,
            encoder,
            location_decoder,
            identification_decoder,
            reg,
            obj,
            cls,
        })
    }

    /// Rebuilds a detector from a parameter map; shapes must match `config`.
    pub fn from_params(config: ModelConfig, map: ParamMap) -> Result<Self, ModelError> {
        let mut det = Detector::new(config, 0)?;
        for (name, t) in det.params.iter() {
            let found = map.get(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if found.shape() != t.shape() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    found: found.shape().to_vec(),
                    expected: t.shape().to_vec(),
                });
            }
        }
        let keep: ParamMap = map.into_iter().filter(|(k, _)| det.params.get(k).is_some()).collect();
        det.params = Params::from_map(keep);
        Ok(det)
    }

    pub fn to_checkpoint(&self, mut header: serde_json::Value) -> Checkpoint {
        if let Some(obj) = header.as_object_mut() {
            obj.insert("model".into(), serde_json::to_value(&self.config).expect("serializable config"));
        }
        Checkpoint {
            header,
            params: self.params.to_map(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let cfg = ck.header.get("model").ok_or_else(|| ModelError::Header("missing \"model\"".into()))?;
        let config: ModelConfig = serde_json::from_value(cfg.clone()).map_err(|e| ModelError::Header(e.to_string()))?;
        Self::from_params(config, ck.params.clone())
    }

    pub fn positional(&self) -> &Tensor {
        &self.positional
    }

    /// Patch tokens after the encoder.
    pub fn encode<'t>(&self, p: &Bound<'t>, patches: Var<'t>) -> TensorResult<(Var<'t>, Var<'t>)> {
        let s = patches.shape();
        if s != [self.config.num_tokens(), self.config.patch_dim()] {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                lhs: s,
                rhs: vec![self.config.num_tokens(), self.config.patch_dim()],
            });
        }
        let tape = patches.tape();
        let pos = tape.constant(self.positional.clone());
        let mut x = patches;
        for (i, layer) in self.patch_embed.iter().enumerate() {
            if i > 0 {
                x = x.relu();
            }
            x = layer.forward(p, x)?;
        }
        let mut x = x.add(pos)?;
        for layer in &self.encoder {
            x = layer.forward(p, x, pos)?;
        }
        Ok((x, pos))
    }

    /// Positional encoding of the reference centers, `[M, D]`.
    pub fn reference_encoding<'t>(&self, p: &Bound<'t>) -> TensorResult<Var<'t>> {
        let refs = p.var(REFERENCE_PARAM);
        let tape = refs.tape();
        let (freq, shift) = point_encoding_basis(self.config.grid(), self.config.embed_dim);
        Ok(refs.sigmoid().matmul(tape.constant(freq))?.add(tape.constant(shift))?.sin())
    }

    fn query_pos<'t>(&self, p: &Bound<'t>) -> TensorResult<Option<Var<'t>>> {
        if self.config.reference_points {
            Ok(Some(self.reference_encoding(p)?))
        } else {
            Ok(None)
        }
    }

    /// Location embeddings from the learned location queries.
    pub fn decode_location<'t>(&self, p: &Bound<'t>, memory: Var<'t>, pos: Var<'t>) -> TensorResult<Var<'t>> {
        let queries = p.var(QUERY_PARAM);
        let query_pos = self.query_pos(p)?.unwrap_or(queries);
        let mut q = queries;
        for layer in &self.location_decoder {
            q = layer.forward(p, q, Some(query_pos), memory, pos)?;
        }
        Ok(q)
    }

    /// Class embeddings, using the location embeddings as queries.
    pub fn decode_class<'t>(&self, p: &Bound<'t>, memory: Var<'t>, pos: Var<'t>, e_location: Var<'t>) -> TensorResult<Var<'t>> {
        let query_pos = self.query_pos(p)?;
        let mut q = e_location;
        for layer in &self.identification_decoder {
            q = layer.forward(p, q, query_pos, memory, pos)?;
        }
        Ok(q)
    }

    /// Box, box-score and class heads.
    pub fn heads<'t>(&self, p: &Bound<'t>, e_location: Var<'t>, e_class: Var<'t>) -> TensorResult<PredictionVars<'t>> {
        let m = self.config.num_queries;
        let mut h = self.reg[0].forward(p, e_location)?.relu();
        h = self.reg[1].forward(p, h)?.relu();
        let mut raw = self.reg[2].forward(p, h)?;
        if self.config.reference_points {
            let tape = raw.tape();
            let offset = concat(&[p.var(REFERENCE_PARAM), tape.constant(Tensor::zeros([m, 2]))], 1)?;
            raw = raw.add(offset)?;
        }
        let boxes = raw.sigmoid();
        let box_scores = self.obj.forward(p, e_location)?.sigmoid().reshape([m])?;
        let cls = self.cls.forward(p, e_class)?.sigmoid();
        Ok(PredictionVars { boxes, box_scores, cls })
    }

    pub fn forward_traced<'t>(&self, p: &Bound<'t>, patches: Var<'t>, opts: ForwardOptions) -> TensorResult<ForwardTrace<'t>> {
        let (tokens, pos) = self.encode(p, patches)?;
        let e_location = self.decode_location(p, tokens, pos)?;
        let e_class = if self.config.cascade {
            let q = if opts.detach_cascade { e_location.detach() } else { e_location };
            self.decode_class(p, tokens, pos, q)?
        } else {
            e_location
        };
        let preds = self.heads(p, e_location, e_class)?;
        Ok(ForwardTrace {
            tokens,
            positional: pos,
            e_location,
            e_class,
            preds,
        })
    }

    /// Forward pass over pre-computed patches (`[N_s, patch_dim]`).
    pub fn forward<'t>(&self, p: &Bound<'t>, patches: Var<'t>) -> TensorResult<PredictionVars<'t>> {
        Ok(self.forward_traced(p, patches, ForwardOptions::default())?.preds)
    }

    /// Convenience inference on an `H x W x 3` image.
    pub fn predict_image(&self, image: &Tensor) -> TensorResult<Vec<Prediction>> {
        let patches = patchify(image, self.config.patch_size)?;
        self.predict_patches(&patches)
    }

    pub fn predict_patches(&self, patches: &Tensor) -> TensorResult<Vec<Prediction>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let x = tape.constant(patches.clone());
        Ok(self.forward(&p, x)?.values())
    }

    /// Grows the classifier to `new_known` known categories. Existing known
    /// channels and the unknown channel keep their weights; new channels are
    /// freshly initialized.
    pub fn expand_classes(&mut self, new_known: usize, seed: u64) -> Result<(), ModelError> {
        let old_known = self.config.num_known;
        if new_known < old_known {
            return Err(ModelError::Config(format!("cannot shrink classifier from {old_known} to {new_known}")));
        }
        if new_known == old_known {
            return Ok(());
        }
        let d = self.config.embed_dim;
        let (old_c, new_c) = (old_known + 1, new_known + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fresh_w = fan_in_uniform(&mut rng, &[d, new_c], d);
        let w_old = self.params.get(&self.cls.weight).expect("cls weight").clone();
        let b_old = self.params.get(&self.cls.bias).expect("cls bias").clone();
        let prior = b_old.data()[old_c - 1];
        let mut w = fresh_w.into_data();
        let mut b = vec![prior; new_c];
        for r in 0..d {
            for c in 0..old_known {
                w[r * new_c + c] = w_old.data()[r * old_c + c];
            }
            w[r * new_c + new_c - 1] = w_old.data()[r * old_c + old_c - 1];
        }
        b[..old_known].copy_from_slice(&b_old.data()[..old_known]);
        b[new_c - 1] = b_old.data()[old_c - 1];
        self.params.insert(self.cls.weight.clone(), Tensor::new([d, new_c], w)?);
        self.params.insert(self.cls.bias.clone(), Tensor::new([new_c], b)?);
        self.cls.out_dim = new_c;
        self.config.num_known = new_known;
        Ok(())
    }

    /// Parameter names of the classification head.
    pub fn cls_head_params(&self) -> [&str; 2] {
        [&self.cls.weight, &self.cls.bias]
    }

    /// Parameter names of the box regression head.
    pub fn reg_head_params(&self) -> Vec<&str> {
        self.reg.iter().flat_map(|l| [l.weight.as_str(), l.bias.as_str()]).collect()
    }
}
