//! Per-token decode time after a prefix of given length, for the recurrent
//! model and the attention baseline.
//!
//! The recurrent model really consumes the prefix; its state is snapshotted
//! and restored before every sample. The baseline's cache is filled with
//! seeded noise keys and values (their content does not change the cost) and
//! truncated back to the prefix before every sample.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;
use stome_core::attention::BaselineDecoder;
use stome_core::model::RwkvLm;
use stome_core::Real;

use super::{rng, with_precision, Stream};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::report::{Report, Sink};

/// Leading-order multiply-adds per decoded token.
#[derive(Debug, Clone, Serialize)]
pub struct StepCost {
    pub recurrent_macs: u64,
    pub baseline_macs: u64,
}

pub fn step_cost(d: usize, hidden: usize, layers: usize, prefix: usize) -> StepCost {
    let (d, h, l, t) = (d as u64, hidden as u64, layers as u64, prefix as u64);
    let dense = 4 * d * d + 2 * d * h;
    StepCost {
        recurrent_macs: l * dense,
        baseline_macs: l * (dense + 2 * d * (t + 1)),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PointTimings {
    pub recurrent_median_s: f64,
    pub baseline_median_s: f64,
    pub recurrent_samples_s: Vec<f64>,
    pub baseline_samples_s: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyPoint {
    pub prefix: usize,
    pub analytic: StepCost,
    pub timings: PointTimings,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencySummary {
    pub timer_resolution_s: f64,
    /// Recurrent median at the longest prefix over that at the shortest.
    pub recurrent_growth: f64,
    pub baseline_strictly_increasing: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyBody {
    pub d_model: usize,
    pub n_layers: usize,
    pub warmup: usize,
    pub samples: usize,
    pub batch: usize,
    pub points: Vec<LatencyPoint>,
    pub timings: LatencySummary,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Smallest positive step of the monotonic clock.
fn timer_resolution() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_secs_f64());
    }
    best
}

fn noise<F: Real, R: Rng>(n: usize, rng: &mut R) -> Vec<F> {
    (0..n).map(|_| F::of(rng.gen_range(-1.0..1.0))).collect()
}

pub fn run(cfg: &RunConfig, sink: &mut Sink) -> CliResult<()> {
    with_precision!(cfg.precision, F => bench::<F>(cfg, sink))
}

fn bench<F: Real>(cfg: &RunConfig, sink: &mut Sink) -> CliResult<()> {
    let bc = &cfg.bench_latency;
    let d = cfg.encoder().d_llm;
    let lm: RwkvLm<F> = RwkvLm::init(d, bc.lm_hidden, bc.lm_blocks, 1, None, &mut rng(cfg.seed, Stream::Weights));
    let dec: BaselineDecoder<F> = BaselineDecoder::init(d, bc.lm_hidden, bc.lm_blocks, &mut rng(cfg.seed, Stream::Baseline));
    let resolution = timer_resolution();
    let mut tokens = rng(cfg.seed, Stream::Tokens);
    let total = bc.warmup + bc.samples;

    let mut state = lm.new_state();
    let mut lm_scratch = lm.scratch();
    let mut cache = dec.new_cache();
    let mut dec_scratch = dec.scratch();
    let mut out = vec![F::zero(); d];
    let mut consumed = 0;
    let mut points = Vec::new();
    for &prefix in &bc.prefix_lengths {
        while consumed < prefix {
            let mut x: Vec<F> = noise(d, &mut tokens);
            lm.step(&mut x, &mut state, &mut lm_scratch);
            for m in cache.keys.iter_mut().chain(cache.values.iter_mut()) {
                m.push_row(&noise::<F, _>(d, &mut tokens))?;
            }
            consumed += 1;
        }
        let probes: Vec<Vec<F>> = (0..bc.batch).map(|_| noise(d, &mut tokens)).collect();

        let mut rec = Vec::with_capacity(total);
        for _ in 0..total {
            let mut s = state.clone();
            let mut xs = probes.clone();
            let t0 = Instant::now();
            for x in &mut xs {
                lm.step(x, &mut s, &mut lm_scratch);
            }
            rec.push(t0.elapsed().as_secs_f64());
            std::hint::black_box(&xs);
        }
        let mut base = Vec::with_capacity(total);
        for _ in 0..total {
            cache.truncate(prefix);
            let t0 = Instant::now();
            for x in &probes {
                dec.step(x, &mut cache, &mut dec_scratch, &mut out)?;
            }
            base.push(t0.elapsed().as_secs_f64());
            std::hint::black_box(&out);
        }
        cache.truncate(prefix);

        let rec_median = median(&rec[bc.warmup..]);
        if rec_median < 100.0 * resolution {
            return Err(CliError::Config(format!(
                "timer resolution {resolution:.3e} s is too coarse for {rec_median:.3e} s samples; \
                 raise bench_latency.batch"
            )));
        }
        let per = |v: &[f64]| v[bc.warmup..].iter().map(|t| t / bc.batch as f64).collect::<Vec<_>>();
        let (rec, base) = (per(&rec), per(&base));
        points.push(LatencyPoint {
            prefix,
            analytic: step_cost(d, bc.lm_hidden, bc.lm_blocks, prefix),
            timings: PointTimings {
                recurrent_median_s: median(&rec),
                baseline_median_s: median(&base),
                recurrent_samples_s: rec,
                baseline_samples_s: base,
            },
        });
    }

    let first = &points[0].timings;
    let last = &points[points.len() - 1].timings;
    let summary = LatencySummary {
        timer_resolution_s: resolution,
        recurrent_growth: last.recurrent_median_s / first.recurrent_median_s,
        baseline_strictly_increasing: points
            .windows(2)
            .all(|w| w[1].timings.baseline_median_s > w[0].timings.baseline_median_s),
    };
    if sink.has_dir() {
        let header = ["prefix", "recurrent_median_s", "baseline_median_s", "recurrent_macs", "baseline_macs"];
        let rows: Vec<Vec<String>> = points
            .iter()
            .map(|p| {
                vec![
                    p.prefix.to_string(),
                    p.timings.recurrent_median_s.to_string(),
                    p.timings.baseline_median_s.to_string(),
                    p.analytic.recurrent_macs.to_string(),
                    p.analytic.baseline_macs.to_string(),
                ]
            })
            .collect();
        let csv_rows: Vec<Vec<String>> = std::iter::once(header.iter().map(|s| s.to_string()).collect())
            .chain(rows.iter().cloned())
            .collect();
        sink.csv("bench-latency.csv", &csv_rows)?;
        sink.dat("bench-latency.dat", &header, &rows)?;
    }
    let body = LatencyBody {
        d_model: d,
        n_layers: bc.lm_blocks,
        warmup: bc.warmup,
        samples: bc.samples,
        batch: bc.batch,
        points,
        timings: summary,
    };
    sink.report("bench-latency.json", &Report::new("bench-latency", cfg, body))
}
