//! Token shift: linear interpolation between the current and previous token.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::wkv::check_finite;
use crate::{Error, Mat, Real, Result};

/// Which projected quantities receive an input-conditioned interpolation
/// weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftTargets {
    pub r: bool,
    pub k: bool,
    pub v: bool,
}

impl ShiftTargets {
    pub const ALL: Self = Self {
        r: true,
        k: true,
        v: true,
    };
    pub const NONE: Self = Self {
        r: false,
        k: false,
        v: false,
    };

    pub fn get(&self, i: usize) -> bool {
        [self.r, self.k, self.v][i]
    }
}

impl Default for ShiftTargets {
    fn default() -> Self {
        Self::ALL
    }
}

/// Input-conditioned mixing: `mu = σ(bias + x_t · weight)` per target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicMix<F> {
    pub targets: ShiftTargets,
    /// `d × d` per projection (r, k, v).
    pub weight: [Mat<F>; 3],
    /// `1 × d` per projection.
    pub bias: [Mat<F>; 3],
}

/// Interpolation weights for the r, k and v projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftMixParams<F> {
    /// Static weights in `[0, 1]`, `1 × d` each.
    pub mu: [Mat<F>; 3],
    /// Present when the data-dependent mode is selected.
    pub dynamic: Option<DynamicMix<F>>,
}

/// Shifted inputs for the three projections.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedInputs<F> {
    pub r: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Real> ShiftMixParams<F> {
    pub fn uniform(dim: usize, mu: f64) -> Self {
        Self {
            mu: core::array::from_fn(|_| Mat::filled(1, dim, F::of(mu))),
            dynamic: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu[0].cols()
    }

    pub fn is_data_dependent(&self) -> bool {
        self.dynamic.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        for m in &self.mu {
            check_finite("shift mu", m.as_slice(), None)?;
            if let Some(c) = m
                .as_slice()
                .iter()
                .position(|&x| x < F::zero() || x > F::one())
            {
                return Err(Error::Invalid(alloc::format!(
                    "static shift weight outside [0, 1] at channel {c}"
                )));
            }
        }
        Ok(())
    }

    /// Interpolation weight for projection `which` (0 = r, 1 = k, 2 = v).
    pub fn weights(&self, which: usize, x_t: &[F], out: &mut [F]) {
        match &self.dynamic {
            Some(dm) if dm.targets.get(which) => {
                dm.weight[which].vec_mul_into(x_t, out);
                for (o, &b) in out.iter_mut().zip(dm.bias[which].as_slice()) {
                    *o = (*o + b).sigmoid();
                }
            }
            _ => out.copy_from_slice(self.mu[which].as_slice()),
        }
    }
}

#[inline]
pub fn lerp_into<F: Real>(x_t: &[F], x_prev: &[F], mu: &[F], out: &mut [F]) {
    for i in 0..out.len() {
        out[i] = x_t[i] + mu[i] * (x_prev[i] - x_t[i]);
    }
}

/// `x' = x_t + mu ⊙ (x_prev − x_t)` for each projection, with `mu` either
/// static or produced from `x_t` through a sigmoid.
pub fn data_dependent_shift<F: Real>(
    x_t: &[F],
    x_prev: &[F],
    params: &ShiftMixParams<F>,
) -> Result<ShiftedInputs<F>> {
    let d = params.dim();
    for (ctx, n) in [("x_t", x_t.len()), ("x_prev", x_prev.len())] {
        if n != d {
            return Err(Error::Dimension {
                context: ctx,
                expected: d,
                actual: n,
            });
        }
    }
    check_finite("x_t", x_t, None)?;
    check_finite("x_prev", x_prev, None)?;
    let mut mu = alloc::vec![F::zero(); d];
    let mut shifted: [Vec<F>; 3] = core::array::from_fn(|_| alloc::vec![F::zero(); d]);
    for (which, out) in shifted.iter_mut().enumerate() {
        params.weights(which, x_t, &mut mu);
        lerp_into(x_t, x_prev, &mu, out);
        check_finite("shifted input", out, None)?;
    }
    let [r, k, v] = shifted;
    Ok(ShiftedInputs { r, k, v })
}
