//! Peak sequence-dependent memory of the recurrent path against the
//! attention baseline, over a ladder of frame counts.
//!
//! Visual tokens are seeded noise at the encoder's per-frame token budget:
//! content does not change which buffers exist or how large they get.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;
use stome_core::attention::{crossover_tokens, kv_cache_floats, recurrent_state_floats, BaselineDecoder, MemoryModel, MemoryVariant};
use stome_core::ledger::AllocationLedger;
use stome_core::model::RwkvLm;
use stome_core::Real;

use super::{rng, with_precision, Stream};
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::report::{num, Report, Sink};

#[derive(Debug, Clone, Serialize)]
pub struct PathMemory {
    /// Ledger peak, `None` when the path was not run at this size.
    pub measured_peak_bytes: Option<u64>,
    /// Closed-form sequence-dependent bytes.
    pub analytic_bytes: u64,
    /// Bytes the ledger holds that do not depend on sequence length.
    pub overhead_bytes: u64,
    /// `|measured − (analytic + overhead)| / (analytic + overhead)`.
    pub relative_gap: Option<f64>,
}

impl PathMemory {
    fn new(measured: Option<u64>, analytic: u64, overhead: u64) -> Self {
        let expect = (analytic + overhead) as f64;
        Self {
            measured_peak_bytes: measured,
            analytic_bytes: analytic,
            overhead_bytes: overhead,
            relative_gap: measured.map(|m| (m as f64 - expect).abs() / expect.max(1.0)),
        }
    }

    pub fn sequence_dependent(&self) -> Option<u64> {
        self.measured_peak_bytes.map(|m| m - self.overhead_bytes)
    }
}

/// Closed forms at model scale for one scalar width.
#[derive(Debug, Clone, Serialize)]
pub struct ScalePoint {
    pub bytes_per_scalar: usize,
    pub kv_cache_bytes: u64,
    pub rwkv4_state_bytes: u64,
    pub rwkv5_state_bytes: u64,
    pub ratio_rwkv4: f64,
    pub ratio_rwkv5: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MemTimings {
    pub recurrent_seconds: f64,
    pub baseline_seconds: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MemPoint {
    pub frames: usize,
    pub tokens: u64,
    pub recurrent: PathMemory,
    pub baseline: PathMemory,
    /// Baseline over recurrent, closed forms at the run's width and depth.
    pub ratio: f64,
    pub scale: Vec<ScalePoint>,
    pub timings: MemTimings,
}

#[derive(Debug, Clone, Serialize)]
pub struct Crossover {
    pub factor: u64,
    pub tokens: u64,
    pub frames: u64,
    pub scale_rwkv4_tokens: u64,
    pub scale_rwkv5_tokens: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MemBody {
    pub complete: bool,
    pub tokens_per_frame: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub bytes_per_scalar: usize,
    pub points: Vec<MemPoint>,
    /// `(max − min) / min` of the recurrent path's sequence-dependent peak.
    pub recurrent_spread: Option<f64>,
    /// Coefficient of determination of a line through the baseline's
    /// closed-form bytes against frame count.
    pub baseline_linear_r2: f64,
    pub crossover: Crossover,
}

fn fill<F: Real, R: Rng>(buf: &mut [F], rng: &mut R) {
    buf.iter_mut().for_each(|x| *x = F::of(rng.gen_range(-1.0..1.0)));
}

/// Streams `tokens` noise tokens through the recurrent model, one frame
/// buffer at a time, and returns the ledger peak.
fn run_recurrent<F: Real>(lm: &RwkvLm<F>, frames: usize, tpf: usize, seed: u64) -> u64 {
    let d = lm.dim();
    let mut rng = rng(seed, Stream::Tokens);
    let mut ledger = AllocationLedger::new();
    let mut state = lm.new_state();
    let mut scratch = lm.scratch();
    let mut buf = vec![F::zero(); tpf * d];
    ledger.register("frame_tokens", buf.len() * F::BYTES);
    ledger.register("state", state.scalar_count() * F::BYTES);
    for _ in 0..frames {
        fill(&mut buf, &mut rng);
        for x in buf.chunks_exact_mut(d) {
            lm.step(x, &mut state, &mut scratch);
            ledger.resize("state", state.scalar_count() * F::BYTES);
        }
    }
    ledger.peak() as u64
}

fn run_baseline<F: Real>(dec: &BaselineDecoder<F>, frames: usize, tpf: usize, seed: u64) -> CliResult<u64> {
    let d = dec.dim();
    let mut rng = rng(seed, Stream::Tokens);
    let mut ledger = AllocationLedger::new();
    let mut cache = dec.new_cache();
    let mut scratch = dec.scratch();
    let mut buf = vec![F::zero(); tpf * d];
    let mut out = vec![F::zero(); d];
    ledger.register("frame_tokens", buf.len() * F::BYTES);
    for _ in 0..frames {
        fill(&mut buf, &mut rng);
        for x in buf.chunks_exact(d) {
            dec.step(x, &mut cache, &mut scratch, &mut out)?;
            ledger.resize("kv_cache", cache.scalar_count() * F::BYTES);
        }
    }
    Ok(ledger.peak() as u64)
}

fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 1.0;
    }
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

pub fn run(cfg: &RunConfig, sink: &mut Sink) -> CliResult<()> {
    with_precision!(cfg.precision, F => bench::<F>(cfg, sink))
}

fn bench<F: Real>(cfg: &RunConfig, sink: &mut Sink) -> CliResult<()> {
    let bc = &cfg.bench_mem;
    let enc = cfg.encoder();
    let tpf = enc.schedule(enc.merges(2))?.tokens_per_frame();
    let d = enc.d_llm;
    let lm: RwkvLm<F> = RwkvLm::init(d, bc.lm_hidden, bc.lm_blocks, 1, None, &mut rng(cfg.seed, Stream::Weights));
    let dec: BaselineDecoder<F> = BaselineDecoder::init(d, bc.lm_hidden, bc.lm_blocks, &mut rng(cfg.seed, Stream::Baseline));
    let here = |variant| MemoryModel {
        d_model: d,
        n_layers: bc.lm_blocks,
        bytes_per_scalar: F::BYTES,
        variant,
    };
    let (cache_m, state_m) = (here(MemoryVariant::KvCache), here(MemoryVariant::Rwkv4State));
    let scale = |bytes, variant| MemoryModel {
        d_model: bc.scale_d_model,
        n_layers: bc.scale_layers,
        bytes_per_scalar: bytes,
        variant,
    };
    let heads = bc.scale_heads.max(1);
    let rwkv5 = MemoryVariant::Rwkv5State {
        heads,
        head_dim: bc.scale_d_model / heads,
    };
    for &b in &bc.scale_bytes_per_scalar {
        scale(b, rwkv5).validate()?;
    }

    let started = Instant::now();
    let mut points = Vec::new();
    let mut complete = true;
    for &frames in &bc.frame_counts {
        if started.elapsed().as_secs_f64() > bc.budget_seconds {
            complete = false;
            break;
        }
        let tokens = (frames * tpf) as u64;
        let t0 = Instant::now();
        let rec_peak = run_recurrent(&lm, frames, tpf, cfg.seed);
        let recurrent_seconds = t0.elapsed().as_secs_f64();
        let (base_peak, baseline_seconds) = if frames <= bc.baseline_max_frames {
            let t0 = Instant::now();
            let p = run_baseline(&dec, frames, tpf, cfg.seed)?;
            (Some(p), Some(t0.elapsed().as_secs_f64()))
        } else {
            (None, None)
        };
        let buffer = (tpf * d * F::BYTES) as u64;
        let rec_analytic = recurrent_state_floats(&state_m) * F::BYTES as u64;
        let base_analytic = kv_cache_floats(&cache_m, tokens) * F::BYTES as u64;
        points.push(MemPoint {
            frames,
            tokens,
            recurrent: PathMemory::new(Some(rec_peak), rec_analytic, buffer),
            baseline: PathMemory::new(base_peak, base_analytic, buffer),
            ratio: base_analytic as f64 / rec_analytic as f64,
            scale: bc
                .scale_bytes_per_scalar
                .iter()
                .map(|&b| {
                    let kv = scale(b, MemoryVariant::KvCache).bytes(tokens);
                    let r4 = scale(b, MemoryVariant::Rwkv4State).bytes(tokens);
                    let r5 = scale(b, rwkv5).bytes(tokens);
                    ScalePoint {
                        bytes_per_scalar: b,
                        kv_cache_bytes: kv,
                        rwkv4_state_bytes: r4,
                        rwkv5_state_bytes: r5,
                        ratio_rwkv4: kv as f64 / r4 as f64,
                        ratio_rwkv5: kv as f64 / r5 as f64,
                    }
                })
                .collect(),
            timings: MemTimings {
                recurrent_seconds,
                baseline_seconds,
            },
        });
    }

    let seq: Vec<u64> = points.iter().filter_map(|p| p.recurrent.sequence_dependent()).collect();
    let recurrent_spread = match (seq.iter().min(), seq.iter().max()) {
        (Some(&lo), Some(&hi)) if lo > 0 => Some((hi - lo) as f64 / lo as f64),
        _ => None,
    };
    let xs: Vec<f64> = points.iter().map(|p| p.frames as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.baseline.analytic_bytes as f64).collect();
    let factor = bc.crossover_factor;
    let toy_cross = crossover_tokens(&cache_m, &state_m, factor);
    let body = MemBody {
        complete,
        tokens_per_frame: tpf,
        d_model: d,
        n_layers: bc.lm_blocks,
        bytes_per_scalar: F::BYTES,
        recurrent_spread,
        baseline_linear_r2: r_squared(&xs, &ys),
        crossover: Crossover {
            factor,
            tokens: toy_cross,
            frames: toy_cross.div_ceil(tpf as u64),
            scale_rwkv4_tokens: crossover_tokens(
                &scale(2, MemoryVariant::KvCache),
                &scale(2, MemoryVariant::Rwkv4State),
                factor,
            ),
            scale_rwkv5_tokens: crossover_tokens(&scale(2, MemoryVariant::KvCache), &scale(2, rwkv5), factor),
        },
        points,
    };

    let header = [
        "frames",
        "tokens",
        "recurrent_measured_bytes",
        "recurrent_analytic_bytes",
        "baseline_measured_bytes",
        "baseline_analytic_bytes",
        "ratio",
    ];
    let rows: Vec<Vec<String>> = body
        .points
        .iter()
        .map(|p| {
            vec![
                p.frames.to_string(),
                p.tokens.to_string(),
                num(p.recurrent.measured_peak_bytes.map(|v| v as f64)),
                p.recurrent.analytic_bytes.to_string(),
                num(p.baseline.measured_peak_bytes.map(|v| v as f64)),
                p.baseline.analytic_bytes.to_string(),
                p.ratio.to_string(),
            ]
        })
        .collect();
    if sink.has_dir() {
        let csv_rows: Vec<Vec<String>> = std::iter::once(header.iter().map(|s| s.to_string()).collect())
            .chain(rows.iter().map(|r| r.iter().map(|c| if c == "?" { String::new() } else { c.clone() }).collect()))
            .collect();
        sink.csv("bench-mem.csv", &csv_rows)?;
        sink.dat("bench-mem.dat", &header, &rows)?;
    }
    sink.report("bench-mem.json", &Report::new("bench-mem", cfg, body))
}
