//! Adam over a [`ParamTree`].

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::ParamTree;
use crate::{Mat, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    m: Vec<Mat<F>>,
    v: Vec<Mat<F>>,
    t: i32,
}

impl<F: Real> Adam<F> {
    pub fn new<P: ParamTree<F> + ?Sized>(cfg: AdamConfig, tree: &P) -> Self {
        let mut m = Vec::new();
        tree.visit("", &mut |_, p| m.push(Mat::zeros(p.rows(), p.cols())));
        Self {
            cfg,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// Applies one update with gradients listed in visit order.
    pub fn step<P: ParamTree<F> + ?Sized>(&mut self, tree: &mut P, grads: &[Mat<F>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.t += 1;
        let c = &self.cfg;
        let sq = grads
            .iter()
            .flat_map(|g| g.as_slice())
            .map(|x| x.to_f64().unwrap_or(f64::NAN))
            .fold(0.0, |a, x| a + x * x);
        let norm = libm::sqrt(sq);
        let clip = if c.clip > 0.0 && norm > c.clip { c.clip / norm } else { 1.0 };
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let lr = F::of(c.lr * libm::sqrt(1.0 - libm::pow(c.beta2, self.t as f64)) / (1.0 - libm::pow(c.beta1, self.t as f64)));
        let (eps, clip) = (F::of(c.eps), F::of(clip));
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        tree.visit_mut(&mut |p| {
            let (m, v, g) = (&mut ms[i], &mut vs[i], &grads[i]);
            for j in 0..p.len() {
                let gj = g.as_slice()[j] * clip;
                let mj = b1 * m.as_slice()[j] + (F::one() - b1) * gj;
                let vj = b2 * v.as_slice()[j] + (F::one() - b2) * gj * gj;
                m.as_mut_slice()[j] = mj;
                v.as_mut_slice()[j] = vj;
                let x = &mut p.as_mut_slice()[j];
                *x = *x - lr * mj / (vj.sqrt() + eps);
            }
            i += 1;
        });
    }
}
