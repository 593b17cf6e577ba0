use std::time::Instant;

use serde::Serialize;
use stome_core::model::{ToyConfig, ToyModel};
use stome_core::needle::{evaluate, train, EpochLog, NeedleTask, TrainConfig};
use stome_core::tensor::ParamTree;
use stome_core::Real;

use super::{rng, with_precision, Stream};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::report::{Report, Sink};
use crate::weights::write_tree;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Evaluation {
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainTimings {
    pub elapsed_s: f64,
    /// Wall clock at the end of each epoch, from the start of training.
    pub epoch_end_s: Vec<f64>,
}

pub struct Outcome<F> {
    pub model: ToyModel<F>,
    pub initial: Evaluation,
    pub epochs: Vec<EpochLog>,
    pub stopped_by_budget: bool,
    /// Set when training stopped on a non-finite value; `model` is then the
    /// last finite state.
    pub diverged: Option<String>,
    pub timings: TrainTimings,
}

impl<F> Outcome<F> {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(self.initial.test_accuracy, |e| e.test_accuracy)
    }
}

/// Initialises from `seed`, evaluates, then trains until the epochs run out
/// or `budget_s` is exceeded at an epoch boundary.
pub fn train_once<F: Real>(
    toy: &ToyConfig,
    task: &NeedleTask,
    tc: &TrainConfig,
    seed: u64,
    budget_s: f64,
    verbose: bool,
) -> CliResult<Outcome<F>> {
    let mut model: ToyModel<F> = ToyModel::init(toy, &mut rng(seed, Stream::Weights));
    model.check(toy)?;
    let schedule = toy.encoder.schedule(toy.encoder.merges(task.n_frames))?;
    let (test_loss, test_accuracy) = evaluate(&model, toy, &schedule, task, tc.n_test)?;
    let initial = Evaluation {
        test_loss,
        test_accuracy,
    };
    if verbose {
        eprintln!("initial: test loss {test_loss:.4}, accuracy {test_accuracy:.3}");
    }
    let started = Instant::now();
    let mut epoch_end_s = Vec::new();
    let mut stopped_by_budget = false;
    let mut logs = Vec::new();
    let result = train(&mut model, toy, task, tc, |log, _| {
        let t = started.elapsed().as_secs_f64();
        epoch_end_s.push(t);
        logs.push(*log);
        if verbose {
            eprintln!(
                "epoch {}: train loss {:.4}, test loss {:.4}, accuracy {:.3} ({t:.1} s)",
                log.epoch, log.train_loss, log.test_loss, log.test_accuracy
            );
        }
        stopped_by_budget = t > budget_s && log.epoch + 1 < tc.epochs;
        !stopped_by_budget
    });
    let diverged = match result {
        Ok(_) => None,
        Err(e @ stome_core::Error::NonFinite { .. }) => Some(e.to_string()),
        Err(e) => return Err(e.into()),
    };
    Ok(Outcome {
        model,
        initial,
        epochs: logs,
        stopped_by_budget,
        diverged,
        timings: TrainTimings {
            elapsed_s: started.elapsed().as_secs_f64(),
            epoch_end_s,
        },
    })
}

#[derive(Debug, Serialize)]
pub struct TrainBody {
    pub param_count: usize,
    pub tokens_per_frame: usize,
    pub initial: Evaluation,
    pub epochs: Vec<EpochLog>,
    pub final_accuracy: f64,
    /// Final held-out loss over the initial one.
    pub loss_ratio: f64,
    pub stopped_by_budget: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diverged: Option<String>,
    pub timings: TrainTimings,
}

pub fn run(cfg: &RunConfig, sink: &mut Sink) -> CliResult<()> {
    with_precision!(cfg.precision, F => toy_train::<F>(cfg, sink))
}

fn toy_train<F: Real>(cfg: &RunConfig, sink: &mut Sink) -> CliResult<()> {
    let toy = &cfg.toy;
    let o = train_once::<F>(toy, &cfg.needle, &cfg.train, cfg.seed, cfg.train_budget_seconds, true)?;
    let final_loss = o.epochs.last().map_or(o.initial.test_loss, |e| e.test_loss);
    let body = TrainBody {
        param_count: o.model.param_count(),
        tokens_per_frame: toy.encoder.schedule(toy.encoder.merges(cfg.needle.n_frames))?.tokens_per_frame(),
        initial: o.initial,
        final_accuracy: o.final_accuracy(),
        loss_ratio: final_loss / o.initial.test_loss,
        epochs: o.epochs.clone(),
        stopped_by_budget: o.stopped_by_budget,
        diverged: o.diverged.clone(),
        timings: o.timings.clone(),
    };
    if sink.has_dir() {
        let rows: Vec<Vec<String>> = o
            .epochs
            .iter()
            .map(|e| {
                vec![
                    e.epoch.to_string(),
                    e.train_loss.to_string(),
                    e.test_loss.to_string(),
                    e.test_accuracy.to_string(),
                ]
            })
            .collect();
        sink.dat("toy-train.dat", &["epoch", "train_loss", "test_loss", "test_accuracy"], &rows)?;
        sink.file("weights.bin", &write_tree(&o.model))?;
    }
    sink.report("toy-train.json", &Report::new("toy-train", cfg, body))?;
    match o.diverged {
        Some(msg) => Err(CliError::Numeric(format!("training diverged: {msg}; last finite weights kept"))),
        None => Ok(()),
    }
}
