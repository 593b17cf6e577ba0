use std::fs;
use std::path::PathBuf;

use serde::Serialize;
use stome_core::merge::{LayerTrace, MergeSchedule};
use stome_core::prompt::{tokenize_stub, PromptLayout};
use stome_core::vision::{encode_video_traced, EncoderConfig, Frame, VisionWeights};
use stome_core::Real;

use super::{rng, with_precision, Stream};
use crate::config::{Precision, RunConfig};
use crate::error::{CliError, CliResult};
use crate::ppm;
use crate::report::{Report, Sink};
use crate::weights::{read_tensors, write_tensors};

#[derive(Debug, Clone)]
pub struct EncodeArgs {
    pub frames: PathBuf,
    pub weights: Option<PathBuf>,
    pub dump_tokens: bool,
    pub trace: bool,
}

#[derive(Debug, Serialize)]
pub struct FrameReport {
    pub index: usize,
    pub file: String,
    pub tokens: usize,
    pub size_sum: usize,
}

#[derive(Debug, Serialize)]
pub struct EncodeBody {
    pub precision: Precision,
    pub merged: bool,
    pub schedule: MergeSchedule,
    pub frames: Vec<FrameReport>,
    pub total_visual_tokens: usize,
    pub prompt_tokens: usize,
    pub layout: PromptLayout,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub traces: Option<Vec<Vec<LayerTrace>>>,
}

/// Encoder weights from a tensor file (bare or under `vision.`) or freshly
/// initialised from the seed.
pub(crate) fn vision_weights<F: Real>(
    cfg: &EncoderConfig,
    seed: u64,
    path: Option<&std::path::Path>,
) -> CliResult<VisionWeights<F>> {
    let mut w = VisionWeights::init(cfg, &mut rng(seed, Stream::Weights));
    if let Some(p) = path {
        let bytes = fs::read(p).map_err(|e| CliError::io(p, e))?;
        let file = read_tensors(&bytes)?;
        let prefix = if file.header.tensors.iter().any(|t| t.name.starts_with("vision.")) {
            "vision"
        } else {
            ""
        };
        file.load_into(&mut w, prefix)?;
    }
    Ok(w)
}

pub fn run(cfg: &RunConfig, args: &EncodeArgs, sink: &mut Sink) -> CliResult<()> {
    let frames = ppm::load_frames(&args.frames)?;
    let names: Vec<String> = ppm::frame_paths(&args.frames)?
        .iter()
        .map(|p| p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()))
        .collect();
    with_precision!(cfg.precision, F => encode::<F>(cfg, args, &frames, &names, sink))
}

fn encode<F: Real>(cfg: &RunConfig, args: &EncodeArgs, frames: &[Frame], names: &[String], sink: &mut Sink) -> CliResult<()> {
    let enc = cfg.encoder();
    enc.validate()?;
    let weights = vision_weights::<F>(&enc, cfg.seed, args.weights.as_deref())?;
    let merged = enc.merges(frames.len());
    let schedule = enc.schedule(merged)?;
    let encoded = encode_video_traced(frames, &enc, &weights)?;

    let prefix = tokenize_stub(&cfg.instruction.prefix);
    let suffix = tokenize_stub(&cfg.instruction.suffix);
    let lens: Vec<usize> = encoded.iter().map(|(e, _)| e.token_count()).collect();
    let layout = PromptLayout::new(prefix.len(), &lens, suffix.len())?;
    let body = EncodeBody {
        precision: cfg.precision,
        merged,
        schedule,
        frames: encoded
            .iter()
            .zip(names)
            .map(|((e, _), name)| FrameReport {
                index: e.frame_index,
                file: name.clone(),
                tokens: e.token_count(),
                size_sum: e.tokens.size_sum(),
            })
            .collect(),
        total_visual_tokens: lens.iter().sum(),
        prompt_tokens: layout.len(),
        layout,
        traces: args.trace.then(|| encoded.iter().map(|(_, t)| t.clone()).collect()),
    };
    sink.report("encode.json", &Report::new("encode", cfg, body))?;
    if args.dump_tokens {
        let mats: Vec<_> = encoded.iter().map(|(e, _)| e.tokens.to_mat()).collect();
        let named: Vec<(String, &stome_core::Mat<F>)> =
            mats.iter().enumerate().map(|(i, m)| (format!("frame.{i}"), m)).collect();
        sink.file("tokens.bin", &write_tensors(&named))?;
    }
    Ok(())
}
