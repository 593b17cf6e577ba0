//! A small vision transformer with sorted token merge inside every retained
//! layer and a two-layer connector into the language model width.
//!
//! Each retained layer runs attention, then splits off CLS, merges and
//! re-sorts the patch tokens, re-attaches CLS, and finally applies the
//! feed-forward. The encoder is built with `n_layers` layers of which the
//! last is never run.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager};
use crate::merge::{plan_layer, plan_schedule, FrameTokenSet, LayerTrace, MergeSchedule, MergedToken, SortOrder};
use crate::tensor::{join, ParamTree};
use crate::{Error, Mat, Real, Result};

/// When token merge is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergePolicy {
    /// Merge every input, single images included.
    Always,
    /// Skip merging when the input is a single frame.
    MultiFrameOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub d_vis: usize,
    pub n_layers: usize,
    /// Layers actually run: `n_layers − 1`.
    pub n_used: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub d_llm: usize,
    pub keep_ratio: f64,
    pub sort_order: SortOrder,
    pub merge_policy: MergePolicy,
}

impl EncoderConfig {
    /// Desk-scale default: 64-pixel frames, patch 8, width 64, 5 layers.
    pub fn toy() -> Self {
        Self {
            image_side: 64,
            patch_size: 8,
            d_vis: 64,
            n_layers: 5,
            n_used: 4,
            n_heads: 4,
            mlp_hidden: 128,
            d_llm: 64,
            keep_ratio: 0.25,
            sort_order: SortOrder::Ascending,
            merge_policy: MergePolicy::Always,
        }
    }

    /// 384-pixel frames with 16-pixel patches and 24 layers (23 retained),
    /// at a narrow width. Used for token-count checks.
    pub fn preset_384_16() -> Self {
        Self {
            image_side: 384,
            patch_size: 16,
            d_vis: 32,
            n_layers: 24,
            n_used: 23,
            n_heads: 2,
            mlp_hidden: 64,
            d_llm: 64,
            keep_ratio: 0.1,
            sort_order: SortOrder::Ascending,
            merge_policy: MergePolicy::Always,
        }
    }

    /// Encoder used by the needle training task: 32-pixel frames, patch 8,
    /// 6 layers (5 retained, the fewest that reach a 0.1 keep ratio over 16
    /// patches).
    pub fn needle() -> Self {
        Self {
            image_side: 32,
            patch_size: 8,
            d_vis: 32,
            n_layers: 6,
            n_used: 5,
            n_heads: 2,
            mlp_hidden: 64,
            d_llm: 64,
            keep_ratio: 0.1,
            sort_order: SortOrder::Ascending,
            merge_policy: MergePolicy::Always,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Invalid(m));
        if self.patch_size == 0 || self.image_side == 0 || self.image_side % self.patch_size != 0 {
            return bad(alloc::format!(
                "image side {} is not a multiple of patch size {}",
                self.image_side,
                self.patch_size
            ));
        }
        if self.n_layers < 2 || self.n_used + 1 != self.n_layers {
            return bad(alloc::format!(
                "retained layers ({}) must be total layers ({}) minus one",
                self.n_used,
                self.n_layers
            ));
        }
        if self.n_heads == 0 || self.d_vis % self.n_heads != 0 {
            return bad(alloc::format!("{} heads do not divide width {}", self.n_heads, self.d_vis));
        }
        if self.d_llm == 0 || self.mlp_hidden == 0 {
            return bad("widths must be positive".into());
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return bad(alloc::format!("keep ratio {} outside (0, 1]", self.keep_ratio));
        }
        Ok(())
    }

    /// Schedule for this geometry, or the no-op schedule when merging is
    /// switched off.
    pub fn schedule(&self, merge: bool) -> Result<MergeSchedule> {
        let ratio = if merge { self.keep_ratio } else { 1.0 };
        plan_schedule(self.n_patches(), self.n_used, ratio)
    }

    /// Whether a video of `n_frames` frames is merged under the policy.
    pub fn merges(&self, n_frames: usize) -> bool {
        match self.merge_policy {
            MergePolicy::Always => true,
            MergePolicy::MultiFrameOnly => n_frames > 1,
        }
    }
}

/// One RGB frame, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub timestamp_index: usize,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, timestamp_index: usize) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Dimension {
                context: "frame pixels",
                expected: width * height * 3,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
            timestamp_index,
        })
    }

    pub fn solid(side: usize, rgb: [u8; 3], timestamp_index: usize) -> Self {
        let pixels = (0..side * side).flat_map(|_| rgb).collect();
        Self {
            width: side,
            height: side,
            pixels,
            timestamp_index,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }
}

/// Encoded frame in the language model's width, CLS first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEmbedding<F> {
    pub tokens: FrameTokenSet<F>,
    pub frame_index: usize,
}

impl<F: Real> FrameEmbedding<F> {
    pub fn token_count(&self) -> usize {
        self.tokens.token_count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitLayer<F> {
    pub ln1_gain: Mat<F>,
    pub ln1_bias: Mat<F>,
    pub w_q: Mat<F>,
    pub w_k: Mat<F>,
    pub w_v: Mat<F>,
    pub w_o: Mat<F>,
    pub b_o: Mat<F>,
    pub ln2_gain: Mat<F>,
    pub ln2_bias: Mat<F>,
    pub w_1: Mat<F>,
    pub b_1: Mat<F>,
    pub w_2: Mat<F>,
    pub b_2: Mat<F>,
}

impl<F: Real> VitLayer<F> {
    fn init<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        let s = 1.0 / libm::sqrt(d as f64);
        Self {
            ln1_gain: Mat::filled(1, d, F::one()),
            ln1_bias: Mat::zeros(1, d),
            w_q: Mat::random(d, d, s, rng),
            w_k: Mat::random(d, d, s, rng),
            w_v: Mat::random(d, d, s, rng),
            w_o: Mat::random(d, d, s, rng),
            b_o: Mat::zeros(1, d),
            ln2_gain: Mat::filled(1, d, F::one()),
            ln2_bias: Mat::zeros(1, d),
            w_1: Mat::random(d, hidden, s, rng),
            b_1: Mat::zeros(1, hidden),
            w_2: Mat::random(hidden, d, 1.0 / libm::sqrt(hidden as f64), rng),
            b_2: Mat::zeros(1, d),
        }
    }
}

impl<F: Real> ParamTree<F> for VitLayer<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Mat<F>)) {
        for (n, m) in [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_1", &self.w_1),
            ("b_1", &self.b_1),
            ("w_2", &self.w_2),
            ("b_2", &self.b_2),
        ] {
            f(&join(prefix, n), m);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Mat<F>)) {
        for m in [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
        ] {
            f(m);
        }
    }
}

/// Encoder and connector weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionWeights<F> {
    pub patch_w: Mat<F>,
    pub patch_b: Mat<F>,
    pub cls: Mat<F>,
    /// One row per token position, CLS first.
    pub pos: Mat<F>,
    /// All `n_layers` layers; the last one is never run.
    pub layers: Vec<VitLayer<F>>,
    pub conn_w1: Mat<F>,
    pub conn_b1: Mat<F>,
    pub conn_w2: Mat<F>,
    pub conn_b2: Mat<F>,
}

impl<F: Real> VisionWeights<F> {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.d_vis;
        let pd = cfg.patch_dim();
        Self {
            patch_w: Mat::random(pd, d, 1.0 / libm::sqrt(pd as f64), rng),
            patch_b: Mat::zeros(1, d),
            cls: Mat::random(1, d, 0.5, rng),
            pos: Mat::random(cfg.n_patches() + 1, d, 0.5, rng),
            layers: (0..cfg.n_layers).map(|_| VitLayer::init(d, cfg.mlp_hidden, rng)).collect(),
            conn_w1: Mat::random(d, cfg.d_llm, 1.0 / libm::sqrt(d as f64), rng),
            conn_b1: Mat::zeros(1, cfg.d_llm),
            conn_w2: Mat::random(cfg.d_llm, cfg.d_llm, 1.0 / libm::sqrt(cfg.d_llm as f64), rng),
            conn_b2: Mat::zeros(1, cfg.d_llm),
        }
    }

    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        let expect = |ctx: &'static str, m: &Mat<F>, rows: usize, cols: usize| {
            if m.shape() == (rows, cols) {
                Ok(())
            } else {
                Err(Error::Dimension {
                    context: ctx,
                    expected: rows * cols,
                    actual: m.len(),
                })
            }
        };
        expect("patch_w", &self.patch_w, cfg.patch_dim(), cfg.d_vis)?;
        expect("pos", &self.pos, cfg.n_patches() + 1, cfg.d_vis)?;
        expect("conn_w1", &self.conn_w1, cfg.d_vis, cfg.d_llm)?;
        expect("conn_w2", &self.conn_w2, cfg.d_llm, cfg.d_llm)?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Dimension {
                context: "encoder layers",
                expected: cfg.n_layers,
                actual: self.layers.len(),
            });
        }
        for l in &self.layers {
            expect("w_q", &l.w_q, cfg.d_vis, cfg.d_vis)?;
            expect("w_1", &l.w_1, cfg.d_vis, cfg.mlp_hidden)?;
        }
        Ok(())
    }
}

impl<F: Real> ParamTree<F> for VisionWeights<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Mat<F>)) {
        f(&join(prefix, "patch_w"), &self.patch_w);
        f(&join(prefix, "patch_b"), &self.patch_b);
        f(&join(prefix, "cls"), &self.cls);
        f(&join(prefix, "pos"), &self.pos);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &alloc::format!("layers.{i}")), f);
        }
        f(&join(prefix, "conn_w1"), &self.conn_w1);
        f(&join(prefix, "conn_b1"), &self.conn_b1);
        f(&join(prefix, "conn_w2"), &self.conn_w2);
        f(&join(prefix, "conn_b2"), &self.conn_b2);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Mat<F>)) {
        f(&mut self.patch_w);
        f(&mut self.patch_b);
        f(&mut self.cls);
        f(&mut self.pos);
        for l in &mut self.layers {
            l.visit_mut(f);
        }
        f(&mut self.conn_w1);
        f(&mut self.conn_b1);
        f(&mut self.conn_w2);
        f(&mut self.conn_b2);
    }
}

/// Raster-ordered patches, one flattened `p × p × 3` patch per row, pixel
/// values mapped to `[-1, 1]`.
pub fn patch_matrix<F: Real>(frame: &Frame, cfg: &EncoderConfig) -> Result<Mat<F>> {
    if frame.width != cfg.image_side || frame.height != cfg.image_side {
        return Err(Error::Dimension {
            context: "frame side",
            expected: cfg.image_side,
            actual: if frame.width != cfg.image_side {
                frame.width
            } else {
                frame.height
            },
        });
    }
    let (g, p) = (cfg.grid(), cfg.patch_size);
    let mut m = Mat::zeros(g * g, cfg.patch_dim());
    let scale = F::of(2.0 / 255.0);
    for py in 0..g {
        for px in 0..g {
            let row = m.row_mut(py * g + px);
            let mut i = 0;
            for y in 0..p {
                for x in 0..p {
                    for c in frame.pixel(px * p + x, py * p + y) {
                        row[i] = F::of(c as f64) * scale - F::one();
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Patch embedding with positional embeddings added and CLS prepended;
/// every token has size 1 and its raster index as origin.
pub fn patchify<F: Real>(frame: &Frame, cfg: &EncoderConfig, weights: &VisionWeights<F>) -> Result<FrameTokenSet<F>> {
    cfg.validate()?;
    weights.check(cfg)?;
    let mut be = Eager;
    let x = embed(&mut be, frame, cfg, weights)?;
    let patches = Mat::from_rows(&x.iter_rows().skip(1).collect::<Vec<_>>())?;
    Ok(FrameTokenSet::from_rows(x.row(0).to_vec(), &patches))
}

fn embed<F: Real, B: Backend<F>>(
    be: &mut B,
    frame: &Frame,
    cfg: &EncoderConfig,
    w: &VisionWeights<F>,
) -> Result<B::T> {
    let p = be.constant(patch_matrix(frame, cfg)?);
    let (pw, pb) = (be.param(&w.patch_w), be.param(&w.patch_b));
    let xp = be.linear(&p, &pw, &pb);
    let cls = be.param(&w.cls);
    let x = be.concat_rows(&[cls, xp]);
    let pos = be.param(&w.pos);
    Ok(be.add(&x, &pos))
}

fn attention<F: Real, B: Backend<F>>(be: &mut B, h: &B::T, l: &VitLayer<F>, heads: usize) -> B::T {
    let d = be.value(h).cols();
    let dh = d / heads;
    let (wq, wk, wv) = (be.param(&l.w_q), be.param(&l.w_k), be.param(&l.w_v));
    let q = be.matmul(h, &wq);
    let k = be.matmul(h, &wk);
    let v = be.matmul(h, &wv);
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = be.slice_cols(&q, hd * dh, dh);
        let kh = be.slice_cols(&k, hd * dh, dh);
        let vh = be.slice_cols(&v, hd * dh, dh);
        let kt = be.transpose(&kh);
        let s = be.matmul(&qh, &kt);
        let s = be.scale(&s, scale);
        let pr = be.softmax_rows(&s);
        outs.push(be.matmul(&pr, &vh));
    }
    let o = if heads == 1 { outs.pop().expect("one head") } else { be.concat_cols(&outs) };
    let (wo, bo) = (be.param(&l.w_o), be.param(&l.b_o));
    be.linear(&o, &wo, &bo)
}

/// Size and origin of each patch row (CLS excluded).
pub(crate) type PatchMeta = Vec<(u32, u32)>;

/// Runs the encoder and connector on one frame. Returns the `d_llm` token
/// rows (CLS first) and the per-patch size/origin metadata.
pub(crate) fn encode_with<F: Real, B: Backend<F>>(
    be: &mut B,
    frame: &Frame,
    cfg: &EncoderConfig,
    w: &VisionWeights<F>,
    schedule: &MergeSchedule,
    frame_index: usize,
    mut traces: Option<&mut Vec<LayerTrace>>,
) -> Result<(B::T, PatchMeta)> {
    let mut x = embed(be, frame, cfg, w)?;
    let mut meta: PatchMeta = (0..cfg.n_patches() as u32).map(|i| (1, i)).collect();
    for (li, layer) in w.layers[..cfg.n_used].iter().enumerate() {
        let (g1, b1) = (be.param(&layer.ln1_gain), be.param(&layer.ln1_bias));
        let h = be.layer_norm(&x, &g1, &b1);
        let a = attention(be, &h, layer, cfg.n_heads);
        x = be.add(&x, &a);

        let r = schedule.removals[li];
        let order = cfg.sort_order.for_layer(frame_index, li);
        let tokens: Vec<MergedToken<F>> = {
            let xm = be.value(&x);
            meta.iter()
                .enumerate()
                .map(|(i, &(size, origin))| MergedToken {
                    embedding: xm.row(i + 1).to_vec(),
                    size,
                    origin,
                })
                .collect()
        };
        let (plan, decision) = plan_layer(&tokens, r, order)?;
        let identity = plan.iter().enumerate().all(|(i, p)| p.members.len() == 1 && p.members[0] == i);
        if !identity {
            let mut groups: Vec<Vec<(usize, F)>> = Vec::with_capacity(plan.len() + 1);
            groups.push(vec![(0, F::one())]);
            for p in &plan {
                let wts: Vec<F> = p.weights(|m| meta[m].0);
                groups.push(p.members.iter().zip(wts).map(|(&m, wt)| (m + 1, wt)).collect());
            }
            x = be.row_mix(&x, groups);
        }
        meta = plan.iter().map(|p| (p.size, p.origin)).collect();
        if let Some(t) = traces.as_deref_mut() {
            t.push(LayerTrace {
                layer: li,
                r,
                pairs: decision.pairs,
                sizes: meta.iter().map(|m| m.0).collect(),
                order: meta.iter().map(|m| m.1).collect(),
            });
        }

        let (g2, b2) = (be.param(&layer.ln2_gain), be.param(&layer.ln2_bias));
        let h = be.layer_norm(&x, &g2, &b2);
        let (w1, bb1) = (be.param(&layer.w_1), be.param(&layer.b_1));
        let m = be.linear(&h, &w1, &bb1);
        let m = be.gelu(&m);
        let (w2, bb2) = (be.param(&layer.w_2), be.param(&layer.b_2));
        let m = be.linear(&m, &w2, &bb2);
        x = be.add(&x, &m);
    }
    let (c1, cb1) = (be.param(&w.conn_w1), be.param(&w.conn_b1));
    let y = be.linear(&x, &c1, &cb1);
    let y = be.gelu(&y);
    let (c2, cb2) = (be.param(&w.conn_w2), be.param(&w.conn_b2));
    Ok((be.linear(&y, &c2, &cb2), meta))
}

fn to_embedding<F: Real>(rows: &Mat<F>, meta: &PatchMeta, n_original: usize, frame_index: usize) -> FrameEmbedding<F> {
    FrameEmbedding {
        tokens: FrameTokenSet {
            cls: MergedToken::new(rows.row(0).to_vec(), 0),
            patches: meta
                .iter()
                .enumerate()
                .map(|(i, &(size, origin))| MergedToken {
                    embedding: rows.row(i + 1).to_vec(),
                    size,
                    origin,
                })
                .collect(),
            n_original,
        },
        frame_index,
    }
}

/// Encodes one frame with merging on, returning the embedding and the merge
/// trace of every retained layer.
pub fn encode_frame<F: Real>(
    frame: &Frame,
    cfg: &EncoderConfig,
    weights: &VisionWeights<F>,
) -> Result<(FrameEmbedding<F>, Vec<LayerTrace>)> {
    encode_frame_with(frame, cfg, weights, true)
}

/// Encodes one frame; `merge = false` runs the no-op schedule.
pub fn encode_frame_with<F: Real>(
    frame: &Frame,
    cfg: &EncoderConfig,
    weights: &VisionWeights<F>,
    merge: bool,
) -> Result<(FrameEmbedding<F>, Vec<LayerTrace>)> {
    cfg.validate()?;
    weights.check(cfg)?;
    let schedule = cfg.schedule(merge)?;
    let mut traces = Vec::with_capacity(cfg.n_used);
    let (rows, meta) = encode_with(
        &mut Eager,
        frame,
        cfg,
        weights,
        &schedule,
        frame.timestamp_index,
        Some(&mut traces),
    )?;
    Ok((to_embedding(&rows, &meta, cfg.n_patches(), frame.timestamp_index), traces))
}

/// Encodes every frame independently, preserving order. The merge policy
/// decides from the frame count whether merging applies.
pub fn encode_video<F: Real>(
    frames: &[Frame],
    cfg: &EncoderConfig,
    weights: &VisionWeights<F>,
) -> Result<Vec<FrameEmbedding<F>>> {
    encode_video_traced(frames, cfg, weights).map(|v| v.into_iter().map(|(e, _)| e).collect())
}

pub fn encode_video_traced<F: Real>(
    frames: &[Frame],
    cfg: &EncoderConfig,
    weights: &VisionWeights<F>,
) -> Result<Vec<(FrameEmbedding<F>, Vec<LayerTrace>)>> {
    let first = frames.first().ok_or(Error::Empty("frame list"))?;
    if let Some(f) = frames
        .iter()
        .find(|f| f.width != first.width || f.height != first.height)
    {
        return Err(Error::Invalid(alloc::format!(
            "mixed frame geometry: {}x{} (frame {}) vs {}x{} (frame {})",
            first.width,
            first.height,
            first.timestamp_index,
            f.width,
            f.height,
            f.timestamp_index
        )));
    }
    let merge = cfg.merges(frames.len());
    frames
        .iter()
        .map(|f| encode_frame_with(f, cfg, weights, merge))
        .collect()
}
