//! Causal softmax attention with a growing key/value cache, and closed-form
//! memory counts for the cache and for the recurrent state.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{dot, join, layer_norm, ParamTree};
use crate::{Error, Mat, Real, Result};

/// Keys and values of every processed token, one pair of row stores per
/// layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCache<F> {
    pub keys: Vec<Mat<F>>,
    pub values: Vec<Mat<F>>,
    dim: usize,
}

impl<F: Real> KvCache<F> {
    pub fn new(n_layers: usize, dim: usize) -> Self {
        Self {
            keys: (0..n_layers).map(|_| Mat::zeros(0, dim)).collect(),
            values: (0..n_layers).map(|_| Mat::zeros(0, dim)).collect(),
            dim,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Tokens cached in layer 0.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scalar_count(&self) -> usize {
        self.keys.iter().chain(&self.values).map(|m| m.len()).sum()
    }

    /// Drops every position from `len` on, in all layers, keeping capacity.
    pub fn truncate(&mut self, len: usize) {
        for m in self.keys.iter_mut().chain(self.values.iter_mut()) {
            m.truncate_rows(len);
        }
    }
}

fn attend<F: Real>(keys: &Mat<F>, values: &Mat<F>, q: &[F], out: &mut [F], scores: &mut Vec<F>) {
    let scale = F::one() / F::of(q.len() as f64).sqrt();
    scores.clear();
    scores.extend(keys.iter_rows().map(|k| dot(q, k) * scale));
    let max = scores.iter().fold(F::neg_infinity(), |m, &s| m.max(s));
    let mut total = F::zero();
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total = total + *s;
    }
    out.iter_mut().for_each(|o| *o = F::zero());
    for (s, v) in scores.iter().zip(values.iter_rows()) {
        let w = *s / total;
        for (o, &x) in out.iter_mut().zip(v) {
            *o = *o + w * x;
        }
    }
}

/// `softmax(q·Kᵀ/√d)·V` over the cached positions of `layer` plus the current
/// one; the cache is extended by `(k, v)` first.
pub fn causal_attention_step<F: Real>(
    cache: &mut KvCache<F>,
    layer: usize,
    q: &[F],
    k: &[F],
    v: &[F],
) -> Result<Vec<F>> {
    let d = cache.dim;
    for (ctx, x) in [("query", q), ("key", k), ("value", v)] {
        if x.len() != d {
            return Err(Error::Dimension {
                context: ctx,
                expected: d,
                actual: x.len(),
            });
        }
    }
    if layer >= cache.n_layers() {
        return Err(Error::Dimension {
            context: "cache layer",
            expected: cache.n_layers(),
            actual: layer,
        });
    }
    cache.keys[layer].push_row(k)?;
    cache.values[layer].push_row(v)?;
    let mut out = vec![F::zero(); d];
    attend(&cache.keys[layer], &cache.values[layer], q, &mut out, &mut Vec::new());
    Ok(out)
}

/// One pre-norm decoder layer: single-head causal attention, then a ReLU
/// feed-forward, both residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer<F> {
    pub ln1_gain: Mat<F>,
    pub ln1_bias: Mat<F>,
    pub w_q: Mat<F>,
    pub w_k: Mat<F>,
    pub w_v: Mat<F>,
    pub w_o: Mat<F>,
    pub ln2_gain: Mat<F>,
    pub ln2_bias: Mat<F>,
    pub ff_in: Mat<F>,
    pub ff_out: Mat<F>,
}

/// Minimal causal decoder matched in width and depth to the recurrent model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineDecoder<F> {
    pub layers: Vec<DecoderLayer<F>>,
}

#[derive(Debug, Clone)]
pub struct DecoderScratch<F> {
    xn: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    att: Vec<F>,
    proj: Vec<F>,
    hidden: Vec<F>,
    scores: Vec<F>,
}

impl<F: Real> BaselineDecoder<F> {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, n_layers: usize, rng: &mut R) -> Self {
        let s = 1.0 / libm::sqrt(dim as f64);
        let layers = (0..n_layers)
            .map(|_| DecoderLayer {
                ln1_gain: Mat::filled(1, dim, F::one()),
                ln1_bias: Mat::zeros(1, dim),
                w_q: Mat::random(dim, dim, s, rng),
                w_k: Mat::random(dim, dim, s, rng),
                w_v: Mat::random(dim, dim, s, rng),
                w_o: Mat::random(dim, dim, s, rng),
                ln2_gain: Mat::filled(1, dim, F::one()),
                ln2_bias: Mat::zeros(1, dim),
                ff_in: Mat::random(dim, hidden, s, rng),
                ff_out: Mat::random(hidden, dim, 1.0 / libm::sqrt(hidden as f64), rng),
            })
            .collect();
        Self { layers }
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w_q.rows())
    }

    pub fn hidden(&self) -> usize {
        self.layers.first().map_or(0, |l| l.ff_in.cols())
    }

    pub fn new_cache(&self) -> KvCache<F> {
        KvCache::new(self.layers.len(), self.dim())
    }

    pub fn scratch(&self) -> DecoderScratch<F> {
        let d = self.dim();
        DecoderScratch {
            xn: vec![F::zero(); d],
            q: vec![F::zero(); d],
            k: vec![F::zero(); d],
            v: vec![F::zero(); d],
            att: vec![F::zero(); d],
            proj: vec![F::zero(); d],
            hidden: vec![F::zero(); self.hidden()],
            scores: Vec::new(),
        }
    }

    /// Decodes one token, appending its keys and values to `cache`.
    pub fn step(&self, x: &[F], cache: &mut KvCache<F>, s: &mut DecoderScratch<F>, out: &mut [F]) -> Result<()> {
        if x.len() != self.dim() || cache.n_layers() != self.layers.len() {
            return Err(Error::Dimension {
                context: "decoder input width",
                expected: self.dim(),
                actual: x.len(),
            });
        }
        out.copy_from_slice(x);
        for (li, l) in self.layers.iter().enumerate() {
            layer_norm(out, l.ln1_gain.as_slice(), l.ln1_bias.as_slice(), &mut s.xn);
            l.w_q.vec_mul_into(&s.xn, &mut s.q);
            l.w_k.vec_mul_into(&s.xn, &mut s.k);
            l.w_v.vec_mul_into(&s.xn, &mut s.v);
            cache.keys[li].push_row(&s.k)?;
            cache.values[li].push_row(&s.v)?;
            attend(&cache.keys[li], &cache.values[li], &s.q, &mut s.att, &mut s.scores);
            l.w_o.vec_mul_into(&s.att, &mut s.proj);
            out.iter_mut().zip(&s.proj).for_each(|(o, &p)| *o = *o + p);

            layer_norm(out, l.ln2_gain.as_slice(), l.ln2_bias.as_slice(), &mut s.xn);
            l.ff_in.vec_mul_into(&s.xn, &mut s.hidden);
            s.hidden.iter_mut().for_each(|h| *h = h.max(F::zero()));
            l.ff_out.vec_mul_into(&s.hidden, &mut s.proj);
            out.iter_mut().zip(&s.proj).for_each(|(o, &p)| *o = *o + p);
        }
        Ok(())
    }
}

impl<F: Real> ParamTree<F> for BaselineDecoder<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Mat<F>)) {
        for (i, l) in self.layers.iter().enumerate() {
            let p = join(prefix, &alloc::format!("layers.{i}"));
            for (n, m) in [
                ("ln1_gain", &l.ln1_gain),
                ("ln1_bias", &l.ln1_bias),
                ("w_q", &l.w_q),
                ("w_k", &l.w_k),
                ("w_v", &l.w_v),
                ("w_o", &l.w_o),
                ("ln2_gain", &l.ln2_gain),
                ("ln2_bias", &l.ln2_bias),
                ("ff_in", &l.ff_in),
                ("ff_out", &l.ff_out),
            ] {
                f(&join(&p, n), m);
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Mat<F>)) {
        for l in &mut self.layers {
            for m in [
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.w_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.w_o,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.ff_in,
                &mut l.ff_out,
            ] {
                f(m);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MemoryVariant {
    KvCache,
    Rwkv4State,
    Rwkv5State { heads: usize, head_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub d_model: usize,
    pub n_layers: usize,
    pub bytes_per_scalar: usize,
    pub variant: MemoryVariant,
}

impl MemoryModel {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || !matches!(self.bytes_per_scalar, 2 | 4 | 8) {
            return Err(Error::Invalid(alloc::format!(
                "memory model needs positive dimensions and 2, 4 or 8 bytes per scalar, got {self:?}"
            )));
        }
        if let MemoryVariant::Rwkv5State { heads, head_dim } = self.variant {
            if heads * head_dim != self.d_model {
                return Err(Error::Invalid(alloc::format!(
                    "{heads} heads of {head_dim} do not make width {}",
                    self.d_model
                )));
            }
        }
        Ok(())
    }

    /// Scalars held after `tokens` tokens.
    pub fn floats(&self, tokens: u64) -> u64 {
        match self.variant {
            MemoryVariant::KvCache => kv_cache_floats(self, tokens),
            _ => recurrent_state_floats(self),
        }
    }

    pub fn bytes(&self, tokens: u64) -> u64 {
        self.floats(tokens) * self.bytes_per_scalar as u64
    }
}

/// `2 · T · d · L`.
pub fn kv_cache_floats(model: &MemoryModel, tokens: u64) -> u64 {
    2 * tokens * model.d_model as u64 * model.n_layers as u64
}

/// Recurrent state size, independent of sequence length. A key/value cache
/// model has no recurrent state.
pub fn recurrent_state_floats(model: &MemoryModel) -> u64 {
    let (d, l) = (model.d_model as u64, model.n_layers as u64);
    match model.variant {
        MemoryVariant::KvCache => 0,
        MemoryVariant::Rwkv4State => 5 * d * l,
        MemoryVariant::Rwkv5State { heads, head_dim } => {
            (heads as u64 * (head_dim as u64).pow(2) + 2 * d) * l
        }
    }
}

/// Smallest token count at which the cache exceeds `factor` times the
/// recurrent state.
pub fn crossover_tokens(cache: &MemoryModel, state: &MemoryModel, factor: u64) -> u64 {
    let target = factor * recurrent_state_floats(state);
    let per_token = kv_cache_floats(cache, 1);
    target / per_token + 1
}
