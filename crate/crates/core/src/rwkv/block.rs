//! One RWKV block: token-shifted time mixing around the wkv kernel, then a
//! token-shifted squared-ReLU feed-forward, both residual.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::shift::{lerp_into, DynamicMix, ShiftMixParams, ShiftTargets};
use super::wkv::{channel_step, check_finite, DecayParams, WkvState};
use crate::tensor::{join, layer_norm, ParamTree};
use crate::{Error, Mat, Real, Result};

/// Weights of one block. Projections are stored `in × out`; per-channel
/// vectors are `1 × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RwkvBlock<F> {
    pub ln1_gain: Mat<F>,
    pub ln1_bias: Mat<F>,
    pub shift: ShiftMixParams<F>,
    pub w_r: Mat<F>,
    pub w_k: Mat<F>,
    pub w_v: Mat<F>,
    pub w_o: Mat<F>,
    /// `w = exp(decay_log)` keeps the decay positive.
    pub decay_log: Mat<F>,
    pub bonus: Mat<F>,
    pub ln2_gain: Mat<F>,
    pub ln2_bias: Mat<F>,
    pub cm_mu: Mat<F>,
    pub cm_in: Mat<F>,
    pub cm_out: Mat<F>,
}

impl<F: Real> RwkvBlock<F> {
    /// Block whose projections are all zero: a pure residual.
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        let sq = || Mat::zeros(dim, dim);
        Self {
            ln1_gain: Mat::filled(1, dim, F::one()),
            ln1_bias: Mat::zeros(1, dim),
            shift: ShiftMixParams::uniform(dim, 0.5),
            w_r: sq(),
            w_k: sq(),
            w_v: sq(),
            w_o: sq(),
            decay_log: Mat::zeros(1, dim),
            bonus: Mat::zeros(1, dim),
            ln2_gain: Mat::filled(1, dim, F::one()),
            ln2_bias: Mat::zeros(1, dim),
            cm_mu: Mat::filled(1, dim, F::of(0.5)),
            cm_in: Mat::zeros(dim, hidden),
            cm_out: Mat::zeros(hidden, dim),
        }
    }

    /// Seeded random initialisation. Decay rates are spread log-uniformly
    /// across channels so that some channels remember far back.
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, dynamic: Option<ShiftTargets>, rng: &mut R) -> Self {
        let s = 1.0 / libm::sqrt(dim as f64);
        let mut b = Self::zeros(dim, hidden);
        b.w_r = Mat::random(dim, dim, s, rng);
        b.w_k = Mat::random(dim, dim, s, rng);
        b.w_v = Mat::random(dim, dim, s, rng);
        b.w_o = Mat::random(dim, dim, s, rng);
        b.cm_in = Mat::random(dim, hidden, s, rng);
        b.cm_out = Mat::random(hidden, dim, 1.0 / libm::sqrt(hidden as f64), rng);
        for c in 0..dim {
            let frac = if dim > 1 { c as f64 / (dim - 1) as f64 } else { 0.0 };
            b.decay_log.set(0, c, F::of(-4.0 + 4.0 * frac));
        }
        b.shift.dynamic = dynamic.map(|targets| DynamicMix {
            targets,
            weight: core::array::from_fn(|_| Mat::random(dim, dim, 0.1 * s, rng)),
            bias: core::array::from_fn(|_| Mat::zeros(1, dim)),
        });
        b
    }

    pub fn dim(&self) -> usize {
        self.w_r.rows()
    }

    pub fn hidden(&self) -> usize {
        self.cm_in.cols()
    }

    pub fn decay(&self) -> DecayParams<F> {
        DecayParams {
            w: self.decay_log.as_slice().iter().map(|x| x.exp()).collect(),
            u: self.bonus.as_slice().to_vec(),
        }
    }

    /// Clamps the static interpolation weights back into `[0, 1]`.
    pub fn project(&mut self) {
        let clamp = |m: &mut Mat<F>| {
            m.as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = x.max(F::zero()).min(F::one()))
        };
        self.shift.mu.iter_mut().for_each(clamp);
        clamp(&mut self.cm_mu);
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let h = self.hidden();
        let shapes: [(&'static str, &Mat<F>, (usize, usize)); 13] = [
            ("ln1_gain", &self.ln1_gain, (1, d)),
            ("ln1_bias", &self.ln1_bias, (1, d)),
            ("w_k", &self.w_k, (d, d)),
            ("w_v", &self.w_v, (d, d)),
            ("w_o", &self.w_o, (d, d)),
            ("decay_log", &self.decay_log, (1, d)),
            ("bonus", &self.bonus, (1, d)),
            ("ln2_gain", &self.ln2_gain, (1, d)),
            ("ln2_bias", &self.ln2_bias, (1, d)),
            ("cm_mu", &self.cm_mu, (1, d)),
            ("cm_in", &self.cm_in, (d, h)),
            ("cm_out", &self.cm_out, (h, d)),
            ("shift mu", &self.shift.mu[0], (1, d)),
        ];
        for (ctx, m, shape) in shapes {
            if m.shape() != shape {
                return Err(Error::Dimension {
                    context: ctx,
                    expected: shape.0 * shape.1,
                    actual: m.len(),
                });
            }
        }
        self.shift.validate()
    }

    /// Processes one token in place. `x` is the block input, `out` receives
    /// the block output.
    pub fn step(&self, x: &[F], state: &mut WkvState<F>, scratch: &mut BlockScratch<F>, out: &mut [F]) {
        let d = self.dim();
        let s = scratch;
        layer_norm(x, self.ln1_gain.as_slice(), self.ln1_bias.as_slice(), &mut s.xn);
        for (which, proj) in [&self.w_r, &self.w_k, &self.w_v].into_iter().enumerate() {
            self.shift.weights(which, &s.xn, &mut s.mu);
            lerp_into(&s.xn, &state.shift_tm, &s.mu, &mut s.mixed);
            proj.vec_mul_into(&s.mixed, &mut s.rkv[which]);
        }
        state.shift_tm.copy_from_slice(&s.xn);
        for c in 0..d {
            let w = self.decay_log.as_slice()[c].exp();
            let y = channel_step(
                &mut state.a[c],
                &mut state.b[c],
                &mut state.p[c],
                s.rkv[1][c],
                s.rkv[2][c],
                w,
                self.bonus.as_slice()[c],
            );
            s.mixed[c] = s.rkv[0][c].sigmoid() * y;
        }
        self.w_o.vec_mul_into(&s.mixed, out);
        for c in 0..d {
            out[c] = out[c] + x[c];
        }

        layer_norm(out, self.ln2_gain.as_slice(), self.ln2_bias.as_slice(), &mut s.xn);
        lerp_into(&s.xn, &state.shift_cm, self.cm_mu.as_slice(), &mut s.mixed);
        state.shift_cm.copy_from_slice(&s.xn);
        self.cm_in.vec_mul_into(&s.mixed, &mut s.hidden);
        s.hidden.iter_mut().for_each(|h| {
            let r = h.max(F::zero());
            *h = r * r;
        });
        self.cm_out.vec_mul_into(&s.hidden, &mut s.mixed);
        for c in 0..d {
            out[c] = out[c] + s.mixed[c];
        }
    }
}

/// Reusable buffers for [`RwkvBlock::step`].
#[derive(Debug, Clone)]
pub struct BlockScratch<F> {
    xn: Vec<F>,
    mu: Vec<F>,
    mixed: Vec<F>,
    rkv: [Vec<F>; 3],
    hidden: Vec<F>,
}

impl<F: Real> BlockScratch<F> {
    pub fn new(dim: usize, hidden: usize) -> Self {
        Self {
            xn: vec![F::zero(); dim],
            mu: vec![F::zero(); dim],
            mixed: vec![F::zero(); dim],
            rkv: core::array::from_fn(|_| vec![F::zero(); dim]),
            hidden: vec![F::zero(); hidden],
        }
    }
}

/// Runs a block over a length-T sequence (one token per row of `x`).
pub fn rwkv_block_forward<F: Real>(
    x: &Mat<F>,
    state: &WkvState<F>,
    block: &RwkvBlock<F>,
) -> Result<(Mat<F>, WkvState<F>)> {
    let d = block.dim();
    if x.cols() != d {
        return Err(Error::Dimension {
            context: "block input width",
            expected: d,
            actual: x.cols(),
        });
    }
    if state.dim() != d {
        return Err(Error::Dimension {
            context: "block state width",
            expected: d,
            actual: state.dim(),
        });
    }
    let mut state = state.clone();
    let mut scratch = BlockScratch::new(d, block.hidden());
    let mut y = Mat::zeros(x.rows(), d);
    for t in 0..x.rows() {
        check_finite("block input", x.row(t), Some(t))?;
        block.step(x.row(t), &mut state, &mut scratch, y.row_mut(t));
        check_finite("block output", y.row(t), Some(t))?;
    }
    Ok((y, state))
}

impl<F: Real> ParamTree<F> for ShiftMixParams<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Mat<F>)) {
        for (m, n) in self.mu.iter().zip(["mu_r", "mu_k", "mu_v"]) {
            f(&join(prefix, n), m);
        }
        if let Some(dm) = &self.dynamic {
            for (i, n) in ["r", "k", "v"].iter().enumerate() {
                f(&join(prefix, &alloc::format!("mix_weight_{n}")), &dm.weight[i]);
                f(&join(prefix, &alloc::format!("mix_bias_{n}")), &dm.bias[i]);
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Mat<F>)) {
        self.mu.iter_mut().for_each(&mut *f);
        if let Some(dm) = &mut self.dynamic {
            for (w, b) in dm.weight.iter_mut().zip(dm.bias.iter_mut()) {
                f(w);
                f(b);
            }
        }
    }
}

impl<F: Real> ParamTree<F> for RwkvBlock<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Mat<F>)) {
        f(&join(prefix, "ln1_gain"), &self.ln1_gain);
        f(&join(prefix, "ln1_bias"), &self.ln1_bias);
        self.shift.visit(&join(prefix, "shift"), f);
        f(&join(prefix, "w_r"), &self.w_r);
        f(&join(prefix, "w_k"), &self.w_k);
        f(&join(prefix, "w_v"), &self.w_v);
        f(&join(prefix, "w_o"), &self.w_o);
        f(&join(prefix, "decay_log"), &self.decay_log);
        f(&join(prefix, "bonus"), &self.bonus);
        f(&join(prefix, "ln2_gain"), &self.ln2_gain);
        f(&join(prefix, "ln2_bias"), &self.ln2_bias);
        f(&join(prefix, "cm_mu"), &self.cm_mu);
        f(&join(prefix, "cm_in"), &self.cm_in);
        f(&join(prefix, "cm_out"), &self.cm_out);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Mat<F>)) {
        f(&mut self.ln1_gain);
        f(&mut self.ln1_bias);
        self.shift.visit_mut(f);
        f(&mut self.w_r);
        f(&mut self.w_k);
        f(&mut self.w_v);
        f(&mut self.w_o);
        f(&mut self.decay_log);
        f(&mut self.bonus);
        f(&mut self.ln2_gain);
        f(&mut self.ln2_bias);
        f(&mut self.cm_mu);
        f(&mut self.cm_in);
        f(&mut self.cm_out);
    }
}
