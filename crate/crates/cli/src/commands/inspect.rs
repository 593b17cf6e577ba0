//! Derived quantities of a config: merge schedules, the prompt layout, the
//! memory closed forms, and optionally a tensor file summary and merge
//! traces.

use std::fs;
use std::path::PathBuf;

use rand::Rng;
use serde::Serialize;
use stome_core::attention::{crossover_tokens, recurrent_state_floats, MemoryModel, MemoryVariant};
use stome_core::merge::{LayerTrace, MergeSchedule};
use stome_core::prompt::{tokenize_stub, PromptLayout};
use stome_core::vision::{encode_frame_with, EncoderConfig, Frame};

use super::encode::vision_weights;
use super::{rng, Stream};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::ppm;
use crate::report::{Report, Sink};
use crate::weights::{read_tensors, Dtype};

#[derive(Debug, Clone)]
pub struct InspectArgs {
    pub frames: Option<PathBuf>,
    pub n_frames: usize,
    pub weights: Option<PathBuf>,
    pub trace: bool,
}

#[derive(Debug, Serialize)]
pub struct Geometry {
    pub n_patches: usize,
    pub merged: bool,
    pub schedule: MergeSchedule,
    pub counts: Vec<usize>,
    pub tokens_per_frame: usize,
}

fn geometry(enc: &EncoderConfig, n_frames: usize) -> CliResult<Geometry> {
    enc.validate()?;
    let merged = enc.merges(n_frames);
    let schedule = enc.schedule(merged)?;
    Ok(Geometry {
        n_patches: enc.n_patches(),
        merged,
        counts: schedule.counts(),
        tokens_per_frame: schedule.tokens_per_frame(),
        schedule,
    })
}

#[derive(Debug, Serialize)]
pub struct MemorySummary {
    pub d_model: usize,
    pub n_layers: usize,
    pub kv_cache_floats_per_token: u64,
    pub rwkv4_state_floats: u64,
    pub rwkv5_state_floats: u64,
    pub crossover_factor: u64,
    pub rwkv4_crossover_tokens: u64,
    pub rwkv5_crossover_tokens: u64,
}

#[derive(Debug, Serialize)]
pub struct TensorSummary {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Serialize)]
pub struct WeightsSummary {
    pub dtype: Dtype,
    pub param_count: usize,
    pub tensors: Vec<TensorSummary>,
}

#[derive(Debug, Serialize)]
pub struct InspectBody {
    pub n_frames: usize,
    pub encoder: Geometry,
    pub toy_encoder: Geometry,
    pub layout: PromptLayout,
    pub memory: MemorySummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightsSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub traces: Option<Vec<LayerTrace>>,
}

pub fn run(cfg: &RunConfig, args: &InspectArgs, sink: &mut Sink) -> CliResult<()> {
    let enc = cfg.encoder();
    let frames = match &args.frames {
        Some(dir) => Some(ppm::load_frames(dir)?),
        None => None,
    };
    let n_frames = frames.as_ref().map_or(args.n_frames, Vec::len);
    if n_frames == 0 {
        return Err(CliError::Config("inspect needs at least one frame".into()));
    }
    let encoder = geometry(&enc, n_frames)?;
    let toy_encoder = geometry(&cfg.toy.encoder, cfg.needle.n_frames)?;
    let layout = PromptLayout::new(
        tokenize_stub(&cfg.instruction.prefix).len(),
        &vec![encoder.tokens_per_frame; n_frames],
        tokenize_stub(&cfg.instruction.suffix).len(),
    )?;

    let bm = &cfg.bench_mem;
    let model = |variant| MemoryModel {
        d_model: bm.scale_d_model,
        n_layers: bm.scale_layers,
        bytes_per_scalar: 2,
        variant,
    };
    let heads = bm.scale_heads.max(1);
    let v5 = model(MemoryVariant::Rwkv5State {
        heads,
        head_dim: bm.scale_d_model / heads,
    });
    v5.validate()?;
    let (kv, v4) = (model(MemoryVariant::KvCache), model(MemoryVariant::Rwkv4State));
    let memory = MemorySummary {
        d_model: bm.scale_d_model,
        n_layers: bm.scale_layers,
        kv_cache_floats_per_token: kv.floats(1),
        rwkv4_state_floats: recurrent_state_floats(&v4),
        rwkv5_state_floats: recurrent_state_floats(&v5),
        crossover_factor: bm.crossover_factor,
        rwkv4_crossover_tokens: crossover_tokens(&kv, &v4, bm.crossover_factor),
        rwkv5_crossover_tokens: crossover_tokens(&kv, &v5, bm.crossover_factor),
    };

    let weights = match &args.weights {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| CliError::io(p, e))?;
            let file = read_tensors(&bytes)?;
            Some(WeightsSummary {
                dtype: file.header.dtype,
                param_count: file.header.tensors.iter().map(|t| t.rows * t.cols).sum(),
                tensors: file
                    .header
                    .tensors
                    .iter()
                    .map(|t| TensorSummary {
                        name: t.name.clone(),
                        rows: t.rows,
                        cols: t.cols,
                    })
                    .collect(),
            })
        }
        None => None,
    };

    let traces = if args.trace {
        let frame = match frames.as_ref().and_then(|f| f.first()) {
            Some(f) => f.clone(),
            None => {
                let mut r = rng(cfg.seed, Stream::Frames);
                let side = enc.image_side;
                Frame::new(side, side, (0..side * side * 3).map(|_| r.gen()).collect(), 0)?
            }
        };
        let w = vision_weights::<f64>(&enc, cfg.seed, args.weights.as_deref())?;
        Some(encode_frame_with(&frame, &enc, &w, encoder.merged)?.1)
    } else {
        None
    };

    let body = InspectBody {
        n_frames,
        encoder,
        toy_encoder,
        layout,
        memory,
        weights,
        traces,
    };
    sink.report("inspect.json", &Report::new("inspect", cfg, body))
}
