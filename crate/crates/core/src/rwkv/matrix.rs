//! Matrix-valued per-head state.
//!
//! Each head keeps a `d_head × d_head` accumulator `S`. A step emits
//! `out = r · (diag(e^{u}) kᵀv + S)` and updates `S ← diag(e^{-w}) S + kᵀv`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::wkv::{check_finite, DecayParams, TimeMixInputs};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixState<F> {
    heads: usize,
    head_dim: usize,
    /// `heads` consecutive row-major `head_dim × head_dim` blocks.
    s: Vec<F>,
}

impl<F: Real> MatrixState<F> {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Invalid(alloc::format!(
                "{heads} heads do not divide model width {dim}"
            )));
        }
        let head_dim = dim / heads;
        Ok(Self {
            heads,
            head_dim,
            s: vec![F::zero(); heads * head_dim * head_dim],
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn scalar_count(&self) -> usize {
        self.s.len()
    }

    /// Entry `(i, j)` of head `h`.
    pub fn get(&self, h: usize, i: usize, j: usize) -> F {
        let n = self.head_dim;
        self.s[h * n * n + i * n + j]
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.s.len() * F::BYTES);
        self.s.iter().for_each(|x| x.push_le(&mut out));
        out
    }

    /// In-place step; writes the output into `out`.
    pub fn step_in_place(&mut self, r: &[F], k: &[F], v: &[F], params: &DecayParams<F>, out: &mut [F]) {
        let n = self.head_dim;
        for h in 0..self.heads {
            let off = h * n;
            let block = &mut self.s[h * n * n..(h + 1) * n * n];
            for j in 0..n {
                let mut acc = F::zero();
                for i in 0..n {
                    let bonus = params.u[off + i].exp() * k[off + i] * v[off + j];
                    acc = acc + r[off + i] * (bonus + block[i * n + j]);
                }
                out[off + j] = acc;
            }
            for i in 0..n {
                let decay = (-params.w[off + i]).exp();
                let ki = k[off + i];
                for j in 0..n {
                    block[i * n + j] = decay * block[i * n + j] + ki * v[off + j];
                }
            }
        }
    }
}

pub fn wkv_matrix_step<F: Real>(
    state: &MatrixState<F>,
    inp: &TimeMixInputs<F>,
    params: &DecayParams<F>,
) -> Result<(Vec<F>, MatrixState<F>)> {
    let d = state.dim();
    for (ctx, n) in [
        ("decay params", params.dim()),
        ("receptance", inp.r.len()),
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
    check_finite("receptance", &inp.r, None)?;
    check_finite("key", &inp.k, None)?;
    check_finite("value", &inp.v, None)?;
    let mut next = state.clone();
    let mut out = vec![F::zero(); d];
    next.step_in_place(&inp.r, &inp.k, &inp.v, params, &mut out);
    Ok((out, next))
}

pub fn wkv_matrix_sequence<F: Real>(
    seq: &[TimeMixInputs<F>],
    params: &DecayParams<F>,
    init: &MatrixState<F>,
) -> Result<(Vec<Vec<F>>, MatrixState<F>)> {
    if seq.is_empty() {
        return Err(Error::Empty("sequence"));
    }
    let mut state = init.clone();
    let mut outs = Vec::with_capacity(seq.len());
    for (t, inp) in seq.iter().enumerate() {
        let (o, s) = wkv_matrix_step(&state, inp, params).map_err(|e| match e {
            Error::NonFinite { what, channel, .. } => Error::NonFinite {
                what,
                channel,
                step: Some(t),
            },
            other => other,
        })?;
        check_finite("matrix wkv output", &o, Some(t))?;
        outs.push(o);
        state = s;
    }
    Ok((outs, state))
}
