//! The wkv recurrence.
//!
//! The textbook form keeps `α_i = e^{-w} α_{i-1} + e^{k_i} v_i` and
//! `β_i = e^{-w} β_{i-1} + e^{k_i}` and emits
//! `wkv_i = (e^{u+k_i} v_i + α_{i-1}) / (e^{u+k_i} + β_{i-1})`. Those sums
//! overflow as soon as a key exceeds ~709 (f64) or ~88 (f32), so the state is
//! kept shifted by a running maximum exponent `p`: `a = α·e^{-p}`,
//! `b = β·e^{-p}`. Every update renormalises so that the largest of the two
//! exponentials it combines is exactly 1, which keeps `b ≥ 1` after the first
//! token and all intermediates bounded.
//!
//! A state with `b == 0` is empty (`α = β = 0`, `p = -∞`); the first token
//! bypasses decay.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Mat, Real, Result};

/// Per-channel decay `w ≥ 0` and current-token bonus `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayParams<F> {
    pub w: Vec<F>,
    pub u: Vec<F>,
}

impl<F: Real> DecayParams<F> {
    pub fn new(w: Vec<F>, u: Vec<F>) -> Result<Self> {
        let p = Self { w, u };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.len() != self.u.len() {
            return Err(Error::Dimension {
                context: "decay params u",
                expected: self.w.len(),
                actual: self.u.len(),
            });
        }
        check_finite("decay w", &self.w, None)?;
        check_finite("bonus u", &self.u, None)?;
        if let Some(c) = self.w.iter().position(|&w| w < F::zero()) {
            return Err(Error::Invalid(alloc::format!(
                "decay w must be non-negative (channel {c})"
            )));
        }
        Ok(())
    }
}

/// Constant-size recurrent state of one RWKV block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WkvState<F> {
    /// Shifted numerator, `α·e^{-p}`.
    pub a: Vec<F>,
    /// Shifted denominator, `β·e^{-p}`.
    pub b: Vec<F>,
    /// Exponent offset.
    pub p: Vec<F>,
    /// Previous token's (normalised) input to time mixing.
    pub shift_tm: Vec<F>,
    /// Previous token's (normalised) input to channel mixing.
    pub shift_cm: Vec<F>,
}

impl<F: Real> WkvState<F> {
    /// Empty state: `α = β = 0` and zero shift buffers.
    pub fn new(dim: usize) -> Self {
        Self {
            a: vec![F::zero(); dim],
            b: vec![F::zero(); dim],
            p: vec![F::zero(); dim],
            shift_tm: vec![F::zero(); dim],
            shift_cm: vec![F::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// Number of scalars held, independent of how many tokens were consumed.
    pub fn scalar_count(&self) -> usize {
        self.a.len() + self.b.len() + self.p.len() + self.shift_tm.len() + self.shift_cm.len()
    }

    /// Recovers the unshifted `(α, β)`. Overflows exactly where the naive
    /// recurrence would.
    pub fn naive(&self) -> (Vec<F>, Vec<F>) {
        let alpha = self
            .a
            .iter()
            .zip(&self.p)
            .zip(&self.b)
            .map(|((&a, &p), &b)| if b == F::zero() { F::zero() } else { a * p.exp() })
            .collect();
        let beta = self
            .b
            .iter()
            .zip(&self.p)
            .map(|(&b, &p)| if b == F::zero() { F::zero() } else { b * p.exp() })
            .collect();
        (alpha, beta)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (ctx, v) in [
            ("state b", &self.b),
            ("state p", &self.p),
            ("state shift_tm", &self.shift_tm),
            ("state shift_cm", &self.shift_cm),
        ] {
            if v.len() != d {
                return Err(Error::Dimension {
                    context: ctx,
                    expected: d,
                    actual: v.len(),
                });
            }
        }
        check_finite("state a", &self.a, None)?;
        check_finite("state b", &self.b, None)?;
        check_finite("state p", &self.p, None)?;
        check_finite("state shift_tm", &self.shift_tm, None)?;
        check_finite("state shift_cm", &self.shift_cm, None)?;
        if let Some(c) = self.b.iter().position(|&b| b < F::zero()) {
            return Err(Error::Invalid(alloc::format!(
                "state b must be non-negative (channel {c})"
            )));
        }
        Ok(())
    }

    /// Little-endian serialisation: `a, b, p, shift_tm, shift_cm` back to back.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.scalar_count() * F::BYTES);
        for v in [&self.a, &self.b, &self.p, &self.shift_tm, &self.shift_cm] {
            v.iter().for_each(|x| x.push_le(&mut out));
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8], dim: usize) -> Result<Self> {
        let expected = 5 * dim * F::BYTES;
        if bytes.len() != expected {
            return Err(Error::Dimension {
                context: "serialized wkv state bytes",
                expected,
                actual: bytes.len(),
            });
        }
        let mut fields = bytes
            .chunks_exact(dim * F::BYTES)
            .map(|c| c.chunks_exact(F::BYTES).map(F::read_le).collect::<Vec<F>>());
        let mut next = || fields.next().unwrap_or_default();
        Ok(Self {
            a: next(),
            b: next(),
            p: next(),
            shift_tm: next(),
            shift_cm: next(),
        })
    }
}

/// Receptance, key and value of one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeMixInputs<F> {
    pub r: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Real> TimeMixInputs<F> {
    pub fn new(r: Vec<F>, k: Vec<F>, v: Vec<F>) -> Self {
        Self { r, k, v }
    }

    /// Inputs with a zero receptance, for callers that only need wkv.
    pub fn kv(k: Vec<F>, v: Vec<F>) -> Self {
        let r = vec![F::zero(); k.len()];
        Self { r, k, v }
    }
}

pub(crate) fn check_finite<F: Real>(what: &'static str, v: &[F], step: Option<usize>) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(channel) => Err(Error::NonFinite {
            what,
            channel,
            step,
        }),
        None => Ok(()),
    }
}

#[inline]
fn fmax<F: Real>(a: F, b: F) -> F {
    if a > b {
        a
    } else {
        b
    }
}

/// Exponentials used by one step of one channel.
#[derive(Debug, Clone, Copy)]
struct StepCoeffs<F> {
    /// Weight of the carried state in the output.
    e1: F,
    /// Weight of the current token in the output.
    e2: F,
    den: F,
    y: F,
    /// Weight of the carried state in the update.
    f1: F,
    /// Weight of the current token in the update.
    f2: F,
    q: F,
}

#[inline]
fn coeffs<F: Real>(a: F, b: F, p: F, k: F, v: F, w: F, u: F) -> StepCoeffs<F> {
    if b == F::zero() {
        return StepCoeffs {
            e1: F::zero(),
            e2: F::one(),
            den: F::one(),
            y: v,
            f1: F::zero(),
            f2: F::one(),
            q: k,
        };
    }
    let ww = u + k;
    let q = fmax(p, ww);
    let e1 = (p - q).exp();
    let e2 = (ww - q).exp();
    let den = e1 * b + e2;
    let y = (e1 * a + e2 * v) / den;
    let ww = p - w;
    let q2 = fmax(ww, k);
    StepCoeffs {
        e1,
        e2,
        den,
        y,
        f1: (ww - q2).exp(),
        f2: (k - q2).exp(),
        q: q2,
    }
}

/// Advances one channel in place and returns its wkv output.
#[inline]
pub(crate) fn channel_step<F: Real>(a: &mut F, b: &mut F, p: &mut F, k: F, v: F, w: F, u: F) -> F {
    let c = coeffs(*a, *b, *p, k, v, w, u);
    *a = c.f1 * *a + c.f2 * v;
    *b = c.f1 * *b + c.f2;
    *p = c.q;
    c.y
}

/// Advances `state` by one token, writing wkv into `out`. Shift buffers are
/// left untouched.
pub fn wkv_step_in_place<F: Real>(
    state: &mut WkvState<F>,
    k: &[F],
    v: &[F],
    params: &DecayParams<F>,
    out: &mut [F],
) {
    for c in 0..state.a.len() {
        out[c] = channel_step(
            &mut state.a[c],
            &mut state.b[c],
            &mut state.p[c],
            k[c],
            v[c],
            params.w[c],
            params.u[c],
        );
    }
}

fn check_dims<F: Real>(state: &WkvState<F>, inp: &TimeMixInputs<F>, params: &DecayParams<F>) -> Result<()> {
    let d = params.dim();
    for (ctx, n) in [
        ("state", state.dim()),
        ("key", inp.k.len()),
        ("value", inp.v.len()),
    ] {
        if n != d {
            return Err(Error::Dimension {
                context: ctx,
                expected: d,
                actual: n,
            });
        }
    }
    Ok(())
}

/// One recurrence step. Returns the wkv vector and the advanced state.
pub fn wkv_step<F: Real>(
    state: &WkvState<F>,
    inp: &TimeMixInputs<F>,
    params: &DecayParams<F>,
) -> Result<(Vec<F>, WkvState<F>)> {
    check_dims(state, inp, params)?;
    check_finite("key", &inp.k, None)?;
    check_finite("value", &inp.v, None)?;
    let mut next = state.clone();
    let mut out = vec![F::zero(); params.dim()];
    wkv_step_in_place(&mut next, &inp.k, &inp.v, params, &mut out);
    check_finite("wkv output", &out, None)?;
    Ok((out, next))
}

/// Left fold of [`wkv_step`] over a sequence.
pub fn wkv_sequence<F: Real>(
    seq: &[TimeMixInputs<F>],
    params: &DecayParams<F>,
    init: &WkvState<F>,
) -> Result<(Vec<Vec<F>>, WkvState<F>)> {
    if seq.is_empty() {
        return Err(Error::Empty("sequence"));
    }
    let mut state = init.clone();
    let mut outputs = Vec::with_capacity(seq.len());
    for (t, inp) in seq.iter().enumerate() {
        check_dims(&state, inp, params)?;
        check_finite("key", &inp.k, Some(t))?;
        check_finite("value", &inp.v, Some(t))?;
        let mut out = vec![F::zero(); params.dim()];
        wkv_step_in_place(&mut state, &inp.k, &inp.v, params, &mut out);
        check_finite("wkv output", &out, Some(t))?;
        outputs.push(out);
    }
    Ok((outputs, state))
}

/// Same contract as [`wkv_sequence`], evaluated chunk by chunk.
///
/// Inside a chunk every output is a closed-form weighted sum over the carried
/// state and the earlier tokens of the chunk, with decay applied as
/// `w·distance` and a per-output maximum exponent for stability; the chunk's
/// end state is formed the same way and carried into the next chunk.
pub fn wkv_chunked<F: Real>(
    seq: &[TimeMixInputs<F>],
    params: &DecayParams<F>,
    init: &WkvState<F>,
    chunk_size: usize,
) -> Result<(Vec<Vec<F>>, WkvState<F>)> {
    if chunk_size == 0 {
        return Err(Error::Invalid("chunk_size must be at least 1".into()));
    }
    if seq.is_empty() {
        return Err(Error::Empty("sequence"));
    }
    for (t, inp) in seq.iter().enumerate() {
        check_dims(init, inp, params)?;
        check_finite("key", &inp.k, Some(t))?;
        check_finite("value", &inp.v, Some(t))?;
    }
    let d = params.dim();
    let mut state = init.clone();
    let mut outputs = vec![vec![F::zero(); d]; seq.len()];
    for (ci, chunk) in seq.chunks(chunk_size).enumerate() {
        let base = ci * chunk_size;
        for c in 0..d {
            chunk_channel(chunk, c, params.w[c], params.u[c], &mut state, &mut outputs[base..]);
        }
        for (j, out) in outputs[base..base + chunk.len()].iter().enumerate() {
            check_finite("wkv output", out, Some(base + j))?;
        }
    }
    Ok((outputs, state))
}

fn chunk_channel<F: Real>(
    chunk: &[TimeMixInputs<F>],
    c: usize,
    w: F,
    u: F,
    state: &mut WkvState<F>,
    outputs: &mut [Vec<F>],
) {
    let (a0, b0, p0) = (state.a[c], state.b[c], state.p[c]);
    let carried = b0 != F::zero();
    let len = chunk.len();
    for j in 0..=len {
        // j < len: output j; j == len: end-of-chunk state.
        let emit = j < len;
        let mut q = F::neg_infinity();
        if carried {
            q = fmax(q, p0 - w * F::of(j as f64));
        }
        for (i, inp) in chunk[..j].iter().enumerate() {
            q = fmax(q, inp.k[c] - w * F::of(past_distance(i, j)));
        }
        if emit {
            q = fmax(q, u + chunk[j].k[c]);
        }
        let mut num = F::zero();
        let mut den = F::zero();
        if carried {
            let e = (p0 - w * F::of(j as f64) - q).exp();
            num = num + e * a0;
            den = den + e * b0;
        }
        for (i, inp) in chunk[..j].iter().enumerate() {
            let e = (inp.k[c] - w * F::of(past_distance(i, j)) - q).exp();
            num = num + e * inp.v[c];
            den = den + e;
        }
        if emit {
            let e = (u + chunk[j].k[c] - q).exp();
            num = num + e * chunk[j].v[c];
            den = den + e;
            outputs[j][c] = num / den;
        } else {
            state.a[c] = num;
            state.b[c] = den;
            state.p[c] = q;
        }
    }
}

/// Decay steps separating token `i` from the position being formed: an output
/// at `j` sees `α_{j-1}`, the end state sees `α_{len-1}`.
#[inline]
fn past_distance(i: usize, j: usize) -> f64 {
    (j - 1 - i) as f64
}

/// Row-major variant of the sequential fold used by blocks and the autodiff
/// tape: row `t` of `k`/`v` is token `t`.
pub(crate) fn wkv_rows<F: Real>(k: &Mat<F>, v: &Mat<F>, w: &[F], u: &[F], state: &mut WkvState<F>) -> Mat<F> {
    let (t_len, d) = k.shape();
    let mut out = Mat::zeros(t_len, d);
    for t in 0..t_len {
        let (kr, vr) = (k.row(t), v.row(t));
        let orow = out.row_mut(t);
        for c in 0..d {
            orow[c] = channel_step(&mut state.a[c], &mut state.b[c], &mut state.p[c], kr[c], vr[c], w[c], u[c]);
        }
    }
    out
}

/// Gradients of a scalar loss with respect to the inputs of a wkv fold.
#[derive(Debug, Clone, PartialEq)]
pub struct WkvGrads<F> {
    pub k: Mat<F>,
    pub v: Mat<F>,
    pub w: Vec<F>,
    pub u: Vec<F>,
}

/// Reverse-mode gradient of `Σ_t ⟨grad_out_t, wkv_t⟩` through the sequential
/// fold starting from `init`.
///
/// The adjoints are carried in the same shifted coordinates as the state
/// (`∂L/∂a = e^{p}·∂L/∂α`), so every factor in the backward sweep is one of
/// the bounded exponentials of the forward sweep.
pub fn wkv_backward<F: Real>(
    k: &Mat<F>,
    v: &Mat<F>,
    params: &DecayParams<F>,
    init: &WkvState<F>,
    grad_out: &Mat<F>,
) -> WkvGrads<F> {
    let (t_len, d) = k.shape();
    // pre-step states
    let mut pa = Mat::zeros(t_len, d);
    let mut pb = Mat::zeros(t_len, d);
    let mut pp = Mat::zeros(t_len, d);
    let mut st = init.clone();
    for t in 0..t_len {
        pa.row_mut(t).copy_from_slice(&st.a);
        pb.row_mut(t).copy_from_slice(&st.b);
        pp.row_mut(t).copy_from_slice(&st.p);
        for c in 0..d {
            channel_step(&mut st.a[c], &mut st.b[c], &mut st.p[c], k.get(t, c), v.get(t, c), params.w[c], params.u[c]);
        }
    }
    let mut gk = Mat::zeros(t_len, d);
    let mut gv = Mat::zeros(t_len, d);
    let mut gw = vec![F::zero(); d];
    let mut gu = vec![F::zero(); d];
    for c in 0..d {
        let (w, u) = (params.w[c], params.u[c]);
        let mut ga = F::zero();
        let mut gb = F::zero();
        for t in (0..t_len).rev() {
            let (a, b, p) = (pa.get(t, c), pb.get(t, c), pp.get(t, c));
            let (kk, vv) = (k.get(t, c), v.get(t, c));
            let s = coeffs(a, b, p, kk, vv, w, u);
            let gy = grad_out.get(t, c);
            let dy_dk = s.e2 * (vv - s.y) / s.den;
            gk.set(t, c, gy * dy_dk + ga * s.f2 * vv + gb * s.f2);
            gv.set(t, c, gy * s.e2 / s.den + ga * s.f2);
            gu[c] = gu[c] + gy * dy_dk;
            gw[c] = gw[c] - (ga * s.f1 * a + gb * s.f1 * b);
            let ga_prev = gy * s.e1 / s.den + ga * s.f1;
            let gb_prev = -gy * s.y * s.e1 / s.den + gb * s.f1;
            ga = ga_prev;
            gb = gb_prev;
        }
    }
    WkvGrads {
        k: gk,
        v: gv,
        w: gw,
        u: gu,
    }
}
