//! Synthetic marked-frame classification.
//!
//! Each sample is a short clip of noisy single-colour frames. Exactly one
//! frame carries a white square; the label is that frame's colour class.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::merge::MergeSchedule;
use crate::model::{ToyConfig, ToyModel};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::ParamTree;
use crate::vision::Frame;
use crate::{Error, Mat, Real, Result};

pub const PALETTE: [[u8; 3]; 4] = [[190, 40, 40], [40, 170, 40], [40, 60, 190], [170, 150, 30]];
pub const MARKER: [u8; 3] = [255, 255, 255];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeedleTask {
    pub n_frames: usize,
    pub image_side: usize,
    pub marker_side: usize,
    pub n_classes: usize,
    /// Per-channel uniform noise amplitude.
    pub noise: u8,
    pub seed: u64,
}

impl Default for NeedleTask {
    fn default() -> Self {
        Self {
            n_frames: 8,
            image_side: 32,
            marker_side: 8,
            n_classes: 4,
            noise: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeedleSample {
    pub frames: Vec<Frame>,
    pub label: usize,
    pub marked_frame: usize,
}

/// Dataset split; each draws from its own random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl NeedleTask {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0
            || self.n_classes == 0
            || self.n_classes > PALETTE.len()
            || self.marker_side == 0
            || self.marker_side > self.image_side
        {
            return Err(Error::Invalid(alloc::format!("invalid needle task {self:?}")));
        }
        Ok(())
    }

    /// Sample `index` of `split`, a pure function of the task and index.
    pub fn sample(&self, split: Split, index: u64) -> NeedleSample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index * 2 + matches!(split, Split::Test) as u64);
        let side = self.image_side;
        let label = rng.gen_range(0..self.n_classes);
        let marked_frame = rng.gen_range(0..self.n_frames);
        let frames = (0..self.n_frames)
            .map(|t| {
                let class = if t == marked_frame { label } else { rng.gen_range(0..self.n_classes) };
                let base = PALETTE[class];
                let n = self.noise as i16;
                let mut f = Frame::solid(side, base, t);
                for p in f.pixels.iter_mut() {
                    let jitter = if n > 0 { rng.gen_range(-n..=n) } else { 0 };
                    *p = (*p as i16 + jitter).clamp(0, 255) as u8;
                }
                if t == marked_frame {
                    let x0 = rng.gen_range(0..=side - self.marker_side);
                    let y0 = rng.gen_range(0..=side - self.marker_side);
                    for y in y0..y0 + self.marker_side {
                        for x in x0..x0 + self.marker_side {
                            f.set_pixel(x, y, MARKER);
                        }
                    }
                }
                f
            })
            .collect();
        NeedleSample {
            frames,
            label,
            marked_frame,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub batch: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            n_train: 5000,
            n_test: 500,
            batch: 8,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

/// Loss and gradients of one sample, gradients in parameter visit order.
pub fn sample_grads<F: Real>(
    model: &ToyModel<F>,
    cfg: &ToyConfig,
    schedule: &MergeSchedule,
    sample: &NeedleSample,
) -> Result<(F, Vec<Mat<F>>)> {
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, cfg, schedule, &sample.frames, sample.label)?;
    let value = crate::autodiff::Backend::value(&tape, &loss).get(0, 0);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "training loss",
            channel: 0,
            step: None,
        });
    }
    tape.backward(loss);
    Ok((value, tape.param_grads(model)))
}

/// Mean loss and accuracy over the first `n` test samples.
pub fn evaluate<F: Real>(
    model: &ToyModel<F>,
    cfg: &ToyConfig,
    schedule: &MergeSchedule,
    task: &NeedleTask,
    n: usize,
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..n {
        let s = task.sample(Split::Test, i as u64);
        let mut be = crate::autodiff::Eager;
        let logits = model.forward(&mut be, cfg, schedule, &s.frames)?;
        let l = crate::autodiff::Backend::cross_entropy(&mut be, &logits, s.label);
        loss += l.get(0, 0).to_f64().unwrap_or(f64::NAN);
        correct += (crate::model::argmax(logits.as_slice()) == s.label) as usize;
    }
    Ok((loss / n.max(1) as f64, correct as f64 / n.max(1) as f64))
}

/// Mini-batch Adam training. `on_epoch` sees each log line and may stop
/// training early by returning `false`. On a non-finite loss the model is
/// left at its last finite state and the error is returned.
pub fn train<F: Real>(
    model: &mut ToyModel<F>,
    cfg: &ToyConfig,
    task: &NeedleTask,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &ToyModel<F>) -> bool,
) -> Result<Vec<EpochLog>> {
    task.validate()?;
    model.check(cfg)?;
    let schedule = cfg.encoder.schedule(cfg.encoder.merges(task.n_frames))?;
    let mut opt = Adam::new(tc.adam, model);
    let mut logs = Vec::with_capacity(tc.epochs);
    let batch = tc.batch.max(1);
    let mut order: Vec<u64> = (0..tc.n_train as u64).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(task.seed ^ 0x5eed);
    for epoch in 0..tc.epochs {
        order.shuffle(&mut shuffler);
        let mut total = 0.0;
        let mut start = 0;
        while start < tc.n_train {
            let end = (start + batch).min(tc.n_train);
            let mut acc: Option<Vec<Mat<F>>> = None;
            for i in start..end {
                let s = task.sample(Split::Train, order[i]);
                let (l, g) = sample_grads(model, cfg, &schedule, &s)?;
                total += l.to_f64().unwrap_or(f64::NAN);
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = F::one() / F::of((end - start) as f64);
            grads.iter_mut().for_each(|g| g.scale(inv));
            let backup = model.clone();
            opt.step(model, &grads);
            model.project();
            let mut finite = true;
            model.visit("", &mut |_, m| finite &= m.all_finite());
            if !finite {
                *model = backup;
                return Err(Error::NonFinite {
                    what: "parameters after update",
                    channel: 0,
                    step: Some(epoch),
                });
            }
            start = end;
        }
        let (test_loss, test_accuracy) = evaluate(model, cfg, &schedule, task, tc.n_test)?;
        let log = EpochLog {
            epoch,
            train_loss: total / tc.n_train.max(1) as f64,
            test_loss,
            test_accuracy,
        };
        logs.push(log);
        if !on_epoch(&log, model) {
            break;
        }
    }
    Ok(logs)
}
