//! Named parameters and the transformer layers the detector is built from.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::ParamMap;
use crate::tensor::{concat, Gradients, Result, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Trainable parameters keyed by dotted path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    map: ParamMap,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(map: ParamMap) -> Self {
        let map = map.into_iter().map(|(k, v)| (k, v.with_grad(true))).collect();
        Params { map }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t.with_grad(true));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn to_map(&self) -> ParamMap {
        self.map.clone()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self.map.iter().map(|(k, t)| (k.clone(), tape.leaf(t))).collect();
        Bound { vars }
    }
}

/// Parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} is not registered"),
        }
    }

    /// Gradient for every bound parameter (zeros where unreachable).
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), grads.get_or_zeros(*v))).collect()
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

pub fn standard_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(params: &mut Params, prefix: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        params.insert(weight.clone(), fan_in_uniform(rng, &[in_dim, out_dim], in_dim));
        params.insert(bias.clone(), fan_in_uniform(rng, &[out_dim], in_dim));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.var(&self.weight))?.add(p.var(&self.bias))
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: String,
    pub shift: String,
}

impl LayerNorm {
    pub fn new(params: &mut Params, prefix: &str, dim: usize) -> Self {
        let gain = format!("{prefix}.gain");
        let shift = format!("{prefix}.shift");
        params.insert(gain.clone(), Tensor::full([dim], 1.0));
        params.insert(shift.clone(), Tensor::zeros([dim]));
        LayerNorm { gain, shift }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(LN_EPS).mul(p.var(&self.gain))?.add(p.var(&self.shift))
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(params: &mut Params, prefix: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        MultiHeadAttention {
            q: Linear::new(params, &format!("{prefix}.q"), dim, dim, rng),
            k: Linear::new(params, &format!("{prefix}.k"), dim, dim, rng),
            v: Linear::new(params, &format!("{prefix}.v"), dim, dim, rng),
            out: Linear::new(params, &format!("{prefix}.out"), dim, dim, rng),
            heads,
        }
    }

    /// Scaled dot-product attention of `query` over `key`/`value` rows.
    pub fn forward<'t>(&self, p: &Bound<'t>, query: Var<'t>, key: Var<'t>, value: Var<'t>) -> Result<Var<'t>> {
        let q = self.q.forward(p, query)?;
        let k = self.k.forward(p, key)?;
        let v = self.v.forward(p, value)?;
        let dim = self.q.out_dim;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = q.slice(1, a, b)?;
            let kh = k.slice(1, a, b)?;
            let vh = v.slice(1, a, b)?;
            let attn = qh.matmul_nt(kh)?.scale(scale).softmax();
            outs.push(attn.matmul(vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { concat(&outs, 1)? };
        self.out.forward(p, merged)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(params: &mut Params, prefix: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            up: Linear::new(params, &format!("{prefix}.up"), dim, hidden, rng),
            down: Linear::new(params, &format!("{prefix}.down"), hidden, dim, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.down.forward(p, self.up.forward(p, x)?.relu())
    }
}

/// Post-norm self-attention encoder layer; `pos` is added to queries and keys.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(params: &mut Params, prefix: &str, dim: usize, heads: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(params, &format!("{prefix}.attn"), dim, heads, rng),
            norm1: LayerNorm::new(params, &format!("{prefix}.norm1"), dim),
            ffn: FeedForward::new(params, &format!("{prefix}.ffn"), dim, hidden, rng),
            norm2: LayerNorm::new(params, &format!("{prefix}.norm2"), dim),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, pos: Var<'t>) -> Result<Var<'t>> {
        let qk = x.add(pos)?;
        let x = self.norm1.forward(p, x.add(self.attn.forward(p, qk, qk, x)?)?)?;
        self.norm2.forward(p, x.add(self.ffn.forward(p, x)?)?)
    }
}

/// Post-norm decoder layer: query self-attention, cross-attention over the
/// encoder memory, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(params: &mut Params, prefix: &str, dim: usize, heads: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(params, &format!("{prefix}.self_attn"), dim, heads, rng),
            norm1: LayerNorm::new(params, &format!("{prefix}.norm1"), dim),
            cross_attn: MultiHeadAttention::new(params, &format!("{prefix}.cross_attn"), dim, heads, rng),
            norm2: LayerNorm::new(params, &format!("{prefix}.norm2"), dim),
            ffn: FeedForward::new(params, &format!("{prefix}.ffn"), dim, hidden, rng),
            norm3: LayerNorm::new(params, &format!("{prefix}.norm3"), dim),
        }
    }

    /// `query_pos` (optional) is added to the queries of both attentions;
    /// `memory_pos` to the cross-attention keys.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        q: Var<'t>,
        query_pos: Option<Var<'t>>,
        memory: Var<'t>,
        memory_pos: Var<'t>,
    ) -> Result<Var<'t>> {
        let with_pos = |x: Var<'t>| -> Result<Var<'t>> {
            match query_pos {
                Some(pos) => x.add(pos),
                None => Ok(x),
            }
        };
        let qp = with_pos(q)?;
        let q = self.norm1.forward(p, q.add(self.self_attn.forward(p, qp, qp, q)?)?)?;
        let keys = memory.add(memory_pos)?;
        let q = self.norm2.forward(p, q.add(self.cross_attn.forward(p, with_pos(q)?, keys, memory)?)?)?;
        self.norm3.forward(p, q.add(self.ffn.forward(p, q)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_shapes_and_init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = Params::new();
        let lin = Linear::new(&mut params, "l", 16, 4, &mut rng);
        let w = params.get("l.weight").unwrap();
        assert_eq!(w.shape(), &[16, 4]);
        assert!(w.data().iter().all(|v| v.abs() <= 0.25));
        let tape = Tape::new();
        let p = params.bind(&tape);
        let x = tape.constant(Tensor::zeros([3, 16]));
        assert_eq!(lin.forward(&p, x).unwrap().shape(), vec![3, 4]);
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = Params::new();
        let attn = MultiHeadAttention::new(&mut params, "a", 8, 2, &mut rng);
        let tape = Tape::new();
        let p = params.bind(&tape);
        let q = tape.constant(standard_normal(&mut rng, &[3, 8]));
        let kv = tape.constant(standard_normal(&mut rng, &[5, 8]));
        let out = attn.forward(&p, q, kv, kv).unwrap();
        assert_eq!(out.shape(), vec![3, 8]);
        assert!(out.value().data().iter().all(|v| v.is_finite()));
    }
}
