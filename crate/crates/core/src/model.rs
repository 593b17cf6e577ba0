//! The recurrent language model and the end-to-end toy model (encoder,
//! connector, sandwich prompt, RWKV stack, classifier head).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager};
use crate::merge::MergeSchedule;
use crate::prompt::{assemble_sandwich, tokenize_stub, PromptLayout};
use crate::rwkv::{BlockScratch, RwkvBlock, ShiftTargets, WkvState};
use crate::tensor::{join, layer_norm, ParamTree};
use crate::vision::{encode_with, EncoderConfig, Frame, FrameEmbedding, VisionWeights};
use crate::{Error, Mat, Real, Result};

/// Byte vocabulary of the stub tokenizer.
pub const VOCAB: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RwkvLm<F> {
    /// One row per byte id.
    pub embed: Mat<F>,
    pub blocks: Vec<RwkvBlock<F>>,
    pub ln_out_gain: Mat<F>,
    pub ln_out_bias: Mat<F>,
    pub head: Mat<F>,
    pub head_bias: Mat<F>,
}

/// Per-sequence inference state: one [`WkvState`] per block.
#[derive(Debug, Clone, PartialEq)]
pub struct LmState<F> {
    pub blocks: Vec<WkvState<F>>,
}

impl<F: Real> LmState<F> {
    pub fn scalar_count(&self) -> usize {
        self.blocks.iter().map(|s| s.scalar_count()).sum()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.blocks.iter().flat_map(|s| s.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LmScratch<F> {
    block: BlockScratch<F>,
    buf: Vec<F>,
}

impl<F: Real> RwkvLm<F> {
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        hidden: usize,
        n_blocks: usize,
        n_out: usize,
        dynamic: Option<ShiftTargets>,
        rng: &mut R,
    ) -> Self {
        Self {
            embed: Mat::random(VOCAB, dim, 1.0, rng),
            blocks: (0..n_blocks).map(|_| RwkvBlock::init(dim, hidden, dynamic, rng)).collect(),
            ln_out_gain: Mat::filled(1, dim, F::one()),
            ln_out_bias: Mat::zeros(1, dim),
            head: Mat::random(dim, n_out, 1.0 / libm::sqrt(dim as f64), rng),
            head_bias: Mat::zeros(1, n_out),
        }
    }

    pub fn dim(&self) -> usize {
        self.embed.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.embed.rows() != VOCAB || self.head.rows() != d || self.head_bias.cols() != self.head.cols() {
            return Err(Error::Dimension {
                context: "language model head or embedding",
                expected: d,
                actual: self.head.rows(),
            });
        }
        for b in &self.blocks {
            b.validate()?;
            if b.dim() != d {
                return Err(Error::Dimension {
                    context: "block width",
                    expected: d,
                    actual: b.dim(),
                });
            }
        }
        Ok(())
    }

    pub fn new_state(&self) -> LmState<F> {
        LmState {
            blocks: self.blocks.iter().map(|b| WkvState::new(b.dim())).collect(),
        }
    }

    pub fn scratch(&self) -> LmScratch<F> {
        let d = self.dim();
        let hidden = self.blocks.first().map_or(0, |b| b.hidden());
        LmScratch {
            block: BlockScratch::new(d, hidden),
            buf: vec![F::zero(); d],
        }
    }

    /// Advances every block by one token; `x` is overwritten with the top
    /// hidden state.
    pub fn step(&self, x: &mut [F], state: &mut LmState<F>, s: &mut LmScratch<F>) {
        for (b, st) in self.blocks.iter().zip(&mut state.blocks) {
            b.step(x, st, &mut s.block, &mut s.buf);
            x.copy_from_slice(&s.buf);
        }
    }

    /// Runs all rows of `seq` through the stack; returns the last hidden row.
    pub fn prefill(&self, seq: &Mat<F>, state: &mut LmState<F>) -> Result<Vec<F>> {
        if seq.cols() != self.dim() {
            return Err(Error::Dimension {
                context: "prefill width",
                expected: self.dim(),
                actual: seq.cols(),
            });
        }
        let mut s = self.scratch();
        let mut x = vec![F::zero(); self.dim()];
        for row in seq.iter_rows() {
            x.copy_from_slice(row);
            self.step(&mut x, state, &mut s);
        }
        Ok(x)
    }

    /// Classifier logits from a top hidden state.
    pub fn logits(&self, hidden: &[F]) -> Vec<F> {
        let mut xn = vec![F::zero(); hidden.len()];
        layer_norm(hidden, self.ln_out_gain.as_slice(), self.ln_out_bias.as_slice(), &mut xn);
        let mut out = self.head.vec_mul(&xn);
        out.iter_mut().zip(self.head_bias.as_slice()).for_each(|(o, &b)| *o = *o + b);
        out
    }
}

/// Whole-sequence block forward from a zero state, on any backend.
pub fn block_forward<F: Real, B: Backend<F>>(be: &mut B, x: &B::T, block: &RwkvBlock<F>) -> B::T {
    let d = block.dim();
    let zero = be.constant(Mat::zeros(1, d));
    let (g1, b1) = (be.param(&block.ln1_gain), be.param(&block.ln1_bias));
    let xn = be.layer_norm(x, &g1, &b1);
    let prev = be.shift_rows(&xn, &zero);
    let mut rkv = Vec::with_capacity(3);
    for (which, w) in [&block.w_r, &block.w_k, &block.w_v].into_iter().enumerate() {
        let mixed = match &block.shift.dynamic {
            Some(dm) if dm.targets.get(which) => {
                let (mw, mb) = (be.param(&dm.weight[which]), be.param(&dm.bias[which]));
                let z = be.linear(&xn, &mw, &mb);
                let mu = be.sigmoid(&z);
                be.lerp(&xn, &prev, &mu)
            }
            _ => {
                let mu = be.param(&block.shift.mu[which]);
                be.lerp_row(&xn, &prev, &mu)
            }
        };
        let w = be.param(w);
        rkv.push(be.matmul(&mixed, &w));
    }
    let dl = be.param(&block.decay_log);
    let w = be.exp(&dl);
    let u = be.param(&block.bonus);
    let y = be.wkv(&rkv[1], &rkv[2], &w, &u, &WkvState::new(d));
    let gate = be.sigmoid(&rkv[0]);
    let g = be.mul(&gate, &y);
    let wo = be.param(&block.w_o);
    let o = be.matmul(&g, &wo);
    let x1 = be.add(x, &o);

    let (g2, b2) = (be.param(&block.ln2_gain), be.param(&block.ln2_bias));
    let xn2 = be.layer_norm(&x1, &g2, &b2);
    let prev2 = be.shift_rows(&xn2, &zero);
    let mu = be.param(&block.cm_mu);
    let mixed = be.lerp_row(&xn2, &prev2, &mu);
    let wi = be.param(&block.cm_in);
    let h = be.matmul(&mixed, &wi);
    let h = be.sq_relu(&h);
    let wo2 = be.param(&block.cm_out);
    let o2 = be.matmul(&h, &wo2);
    be.add(&x1, &o2)
}

impl<F: Real> ParamTree<F> for RwkvLm<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Mat<F>)) {
        f(&join(prefix, "embed"), &self.embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &alloc::format!("blocks.{i}")), f);
        }
        f(&join(prefix, "ln_out_gain"), &self.ln_out_gain);
        f(&join(prefix, "ln_out_bias"), &self.ln_out_bias);
        f(&join(prefix, "head"), &self.head);
        f(&join(prefix, "head_bias"), &self.head_bias);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Mat<F>)) {
        f(&mut self.embed);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        f(&mut self.ln_out_gain);
        f(&mut self.ln_out_bias);
        f(&mut self.head);
        f(&mut self.head_bias);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub encoder: EncoderConfig,
    pub n_blocks: usize,
    pub lm_hidden: usize,
    pub n_classes: usize,
    /// Data-dependent token shift on r, k and v when set.
    pub dynamic_shift: bool,
    pub prefix: String,
    pub suffix: String,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::needle(),
            n_blocks: 2,
            lm_hidden: 128,
            n_classes: 4,
            dynamic_shift: false,
            prefix: "video:".into(),
            suffix: "color?".into(),
        }
    }
}

/// Encoder + connector + recurrent language model with a class head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel<F> {
    pub vision: VisionWeights<F>,
    pub lm: RwkvLm<F>,
}

impl<F: Real> ToyModel<F> {
    pub fn init<R: Rng + ?Sized>(cfg: &ToyConfig, rng: &mut R) -> Self {
        let dynamic = cfg.dynamic_shift.then_some(ShiftTargets::ALL);
        Self {
            vision: VisionWeights::init(&cfg.encoder, rng),
            lm: RwkvLm::init(cfg.encoder.d_llm, cfg.lm_hidden, cfg.n_blocks, cfg.n_classes, dynamic, rng),
        }
    }

    pub fn check(&self, cfg: &ToyConfig) -> Result<()> {
        cfg.encoder.validate()?;
        self.vision.check(&cfg.encoder)?;
        self.lm.validate()?;
        if self.lm.dim() != cfg.encoder.d_llm || self.lm.head.cols() != cfg.n_classes {
            return Err(Error::Dimension {
                context: "language model width",
                expected: cfg.encoder.d_llm,
                actual: self.lm.dim(),
            });
        }
        Ok(())
    }

    /// Keeps static interpolation weights inside `[0, 1]` after an update.
    pub fn project(&mut self) {
        self.lm.blocks.iter_mut().for_each(|b| b.project());
    }

    /// Class logits (`1 × C`) for one sample, on any backend.
    pub fn forward<B: Backend<F>>(
        &self,
        be: &mut B,
        cfg: &ToyConfig,
        schedule: &MergeSchedule,
        frames: &[Frame],
    ) -> Result<B::T> {
        if frames.is_empty() {
            return Err(Error::Empty("frame list"));
        }
        let table = be.param(&self.lm.embed);
        let mut parts = Vec::with_capacity(frames.len() + 2);
        let prefix = tokenize_stub(&cfg.prefix).ids;
        let suffix = tokenize_stub(&cfg.suffix).ids;
        let rows = |ids: &[u32]| ids.iter().map(|&i| i as usize).collect::<Vec<_>>();
        if !prefix.is_empty() {
            parts.push(be.gather_rows(&table, &rows(&prefix)));
        }
        for (i, f) in frames.iter().enumerate() {
            parts.push(encode_with(be, f, &cfg.encoder, &self.vision, schedule, i, None)?.0);
        }
        if !suffix.is_empty() {
            parts.push(be.gather_rows(&table, &rows(&suffix)));
        }
        let mut x = be.concat_rows(&parts);
        for b in &self.lm.blocks {
            x = block_forward(be, &x, b);
        }
        let last = be.value(&x).rows() - 1;
        let h = be.gather_rows(&x, &[last]);
        let (g, bias) = (be.param(&self.lm.ln_out_gain), be.param(&self.lm.ln_out_bias));
        let h = be.layer_norm(&h, &g, &bias);
        let (w, hb) = (be.param(&self.lm.head), be.param(&self.lm.head_bias));
        Ok(be.linear(&h, &w, &hb))
    }

    pub fn loss<B: Backend<F>>(
        &self,
        be: &mut B,
        cfg: &ToyConfig,
        schedule: &MergeSchedule,
        frames: &[Frame],
        label: usize,
    ) -> Result<B::T> {
        let logits = self.forward(be, cfg, schedule, frames)?;
        Ok(be.cross_entropy(&logits, label))
    }

    pub fn predict(&self, cfg: &ToyConfig, schedule: &MergeSchedule, frames: &[Frame]) -> Result<usize> {
        let logits = self.forward(&mut Eager, cfg, schedule, frames)?;
        Ok(argmax(logits.as_slice()))
    }

    /// The same prediction through the streaming path: sandwich assembly and
    /// per-token recurrent steps.
    pub fn predict_streaming(
        &self,
        cfg: &ToyConfig,
        schedule: &MergeSchedule,
        frames: &[Frame],
    ) -> Result<(Vec<F>, PromptLayout)> {
        let mut visual: Vec<FrameEmbedding<F>> = Vec::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            let (rows, meta) = encode_with(&mut Eager, f, &cfg.encoder, &self.vision, schedule, i, None)?;
            visual.push(FrameEmbedding {
                tokens: crate::merge::FrameTokenSet {
                    cls: crate::merge::MergedToken::new(rows.row(0).to_vec(), 0),
                    patches: meta
                        .iter()
                        .enumerate()
                        .map(|(j, &(size, origin))| crate::merge::MergedToken {
                            embedding: rows.row(j + 1).to_vec(),
                            size,
                            origin,
                        })
                        .collect(),
                    n_original: cfg.encoder.n_patches(),
                },
                frame_index: i,
            });
        }
        let (seq, layout) = assemble_sandwich(
            &tokenize_stub(&cfg.prefix),
            &visual,
            &tokenize_stub(&cfg.suffix),
            &self.lm.embed,
        )?;
        let mut state = self.lm.new_state();
        let h = self.lm.prefill(&seq, &mut state)?;
        Ok((self.lm.logits(&h), layout))
    }
}

impl<F: Real> ParamTree<F> for ToyModel<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Mat<F>)) {
        self.vision.visit(&join(prefix, "vision"), f);
        self.lm.visit(&join(prefix, "lm"), f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Mat<F>)) {
        self.vision.visit_mut(f);
        self.lm.visit_mut(f);
    }
}

pub fn argmax<F: Real>(x: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}
