//! Token-order and keep-ratio ablations on the needle task.

use serde::Serialize;
use stome_core::merge::SortOrder;
use stome_core::Real;

use super::toy_train::train_once;
use super::with_precision;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::report::{Report, Sink};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Order,
    Ratio,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderRow {
    pub order: &'static str,
    pub accuracy: f64,
    pub tokens_per_frame: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioRow {
    pub keep_ratio: f64,
    /// On the configured encoder geometry; empty when infeasible there.
    pub tokens_per_frame: Option<usize>,
    /// On the needle encoder geometry.
    pub toy_tokens_per_frame: Option<usize>,
    /// Empty when the needle geometry cannot reach the ratio.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Serialize)]
struct AblateBody<R> {
    axis: &'static str,
    rows: Vec<R>,
}

pub fn run(cfg: &RunConfig, axis: Axis, sink: &mut Sink) -> CliResult<()> {
    with_precision!(cfg.precision, F => ablate::<F>(cfg, axis, sink))
}

fn accuracy<F: Real>(cfg: &RunConfig, toy: &stome_core::model::ToyConfig) -> CliResult<f64> {
    let o = train_once::<F>(toy, &cfg.needle, &cfg.ablate.train, cfg.seed, f64::INFINITY, false)?;
    if let Some(msg) = o.diverged {
        return Err(CliError::Numeric(format!("ablation run diverged: {msg}")));
    }
    Ok(o.final_accuracy())
}

fn ablate<F: Real>(cfg: &RunConfig, axis: Axis, sink: &mut Sink) -> CliResult<()> {
    let n_frames = cfg.needle.n_frames;
    match axis {
        Axis::Order => {
            let mut rows = Vec::new();
            for order in [SortOrder::Ascending, SortOrder::Descending, SortOrder::Random(cfg.seed)] {
                let mut toy = cfg.toy.clone();
                toy.encoder.sort_order = order;
                let tpf = toy.encoder.schedule(toy.encoder.merges(n_frames))?.tokens_per_frame();
                let accuracy = accuracy::<F>(cfg, &toy)?;
                eprintln!("order {}: accuracy {accuracy:.3}", order.name());
                rows.push(OrderRow {
                    order: order.name(),
                    accuracy,
                    tokens_per_frame: tpf,
                });
            }
            sink.csv("ablate-order.csv", &rows)?;
            if sink.has_dir() {
                sink.report("ablate-order.json", &Report::new("ablate", cfg, AblateBody { axis: "order", rows }))?;
            }
        }
        Axis::Ratio => {
            let enc = cfg.encoder();
            let mut rows = Vec::new();
            for &ratio in &cfg.ablate.ratios {
                let mut e = enc.clone();
                e.keep_ratio = ratio;
                let mut toy = cfg.toy.clone();
                toy.encoder.keep_ratio = ratio;
                let toy_tpf = toy.encoder.schedule(toy.encoder.merges(n_frames)).ok().map(|s| s.tokens_per_frame());
                let accuracy = match toy_tpf {
                    Some(_) => Some(accuracy::<F>(cfg, &toy)?),
                    None => None,
                };
                eprintln!("keep ratio {ratio}: accuracy {accuracy:?}");
                rows.push(RatioRow {
                    keep_ratio: ratio,
                    tokens_per_frame: e.schedule(true).ok().map(|s| s.tokens_per_frame()),
                    toy_tokens_per_frame: toy_tpf,
                    accuracy,
                });
            }
            sink.csv("ablate-ratio.csv", &rows)?;
            if sink.has_dir() {
                sink.report("ablate-ratio.json", &Report::new("ablate", cfg, AblateBody { axis: "ratio", rows }))?;
            }
        }
    }
    Ok(())
}
