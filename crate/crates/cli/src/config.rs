//! The JSON run configuration shared by every subcommand.
//!
//! Every field has a default, so `{}` is a valid config. Command-line flags
//! are applied on top with [`RunConfig::apply`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stome_core::merge::SortOrder;
use stome_core::model::ToyConfig;
use stome_core::needle::{NeedleTask, TrainConfig};
use stome_core::vision::{EncoderConfig, MergePolicy};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OrderFlag {
    Asc,
    Desc,
    Random,
}

impl OrderFlag {
    /// Random orders are seeded from the run seed.
    pub fn to_order(self, seed: u64) -> SortOrder {
        match self {
            OrderFlag::Asc => SortOrder::Ascending,
            OrderFlag::Desc => SortOrder::Descending,
            OrderFlag::Random => SortOrder::Random(seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "toy")]
    Toy,
    #[serde(rename = "384-16")]
    P384x16,
    #[serde(rename = "needle")]
    Needle,
}

/// A named preset or a full encoder description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EncoderSpec {
    Preset(Preset),
    Custom(EncoderConfig),
}

impl EncoderSpec {
    pub fn resolve(&self) -> EncoderConfig {
        match self {
            EncoderSpec::Preset(Preset::Toy) => EncoderConfig::toy(),
            EncoderSpec::Preset(Preset::P384x16) => EncoderConfig::preset_384_16(),
            EncoderSpec::Preset(Preset::Needle) => EncoderConfig::needle(),
            EncoderSpec::Custom(c) => c.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Instruction {
    pub prefix: String,
    pub suffix: String,
}

impl Default for Instruction {
    fn default() -> Self {
        Self {
            prefix: "Describe the video. ".into(),
            suffix: " Answer:".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchMemConfig {
    pub frame_counts: Vec<usize>,
    /// Language model depth and feed-forward width; its width is the
    /// encoder's `d_llm`.
    pub lm_blocks: usize,
    pub lm_hidden: usize,
    /// The baseline decoder is run for real only up to this many frames;
    /// beyond it only the closed form is reported.
    pub baseline_max_frames: usize,
    /// Width and depth of the closed-form comparison at model scale.
    pub scale_d_model: usize,
    pub scale_layers: usize,
    pub scale_heads: usize,
    pub scale_bytes_per_scalar: Vec<usize>,
    /// Cache-to-state factor whose crossover length is reported.
    pub crossover_factor: u64,
    pub budget_seconds: f64,
}

impl Default for BenchMemConfig {
    fn default() -> Self {
        Self {
            frame_counts: vec![64, 256, 1024, 4096],
            lm_blocks: 2,
            lm_hidden: 128,
            baseline_max_frames: 64,
            scale_d_model: 1024,
            scale_layers: 24,
            scale_heads: 16,
            scale_bytes_per_scalar: vec![2, 4],
            crossover_factor: 34,
            budget_seconds: 300.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchLatencyConfig {
    pub prefix_lengths: Vec<usize>,
    pub lm_blocks: usize,
    pub lm_hidden: usize,
    pub warmup: usize,
    pub samples: usize,
    /// Steps timed together per sample.
    pub batch: usize,
}

impl Default for BenchLatencyConfig {
    fn default() -> Self {
        Self {
            prefix_lengths: vec![1024, 4096, 16384, 32768],
            lm_blocks: 2,
            lm_hidden: 128,
            warmup: 10,
            samples: 100,
            batch: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub ratios: Vec<f64>,
    /// Training budget per ablation row.
    pub train: TrainConfig,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            ratios: (1..=10).map(|i| i as f64 / 10.0).collect(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Geometry for `encode`, `inspect` and the token budget of the
    /// benchmarks.
    pub encoder: EncoderSpec,
    pub instruction: Instruction,
    pub toy: ToyConfig,
    pub needle: NeedleTask,
    pub train: TrainConfig,
    /// Wall-clock cap on toy training, checked between epochs.
    pub train_budget_seconds: f64,
    pub bench_mem: BenchMemConfig,
    pub bench_latency: BenchLatencyConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::Double,
            encoder: EncoderSpec::Preset(Preset::P384x16),
            instruction: Instruction::default(),
            toy: ToyConfig::default(),
            needle: NeedleTask::default(),
            train: TrainConfig::default(),
            train_budget_seconds: 900.0,
            bench_mem: BenchMemConfig::default(),
            bench_latency: BenchLatencyConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Flags that override config fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub order: Option<OrderFlag>,
    pub keep_ratio: Option<f64>,
    pub policy: Option<MergePolicy>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Applies flags. Order, ratio and policy reach both the main encoder
    /// and the toy model's encoder; the seed also seeds the needle data.
    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        self.needle.seed = self.seed;
        if let Some(p) = o.precision {
            self.precision = p;
        }
        let mut enc = self.encoder.resolve();
        for e in [&mut enc, &mut self.toy.encoder] {
            if let Some(order) = o.order {
                e.sort_order = order.to_order(self.seed);
            }
            if let Some(r) = o.keep_ratio {
                e.keep_ratio = r;
            }
            if let Some(p) = o.policy {
                e.merge_policy = p;
            }
        }
        self.encoder = EncoderSpec::Custom(enc);
        self
    }

    pub fn encoder(&self) -> EncoderConfig {
        self.encoder.resolve()
    }

    pub fn validate(&self) -> CliResult<()> {
        self.encoder().validate()?;
        self.toy.encoder.validate()?;
        self.needle.validate()?;
        if self.needle.n_classes != self.toy.n_classes {
            return Err(CliError::Config(format!(
                "needle task has {} classes but the toy head has {}",
                self.needle.n_classes, self.toy.n_classes
            )));
        }
        if self.needle.image_side != self.toy.encoder.image_side {
            return Err(CliError::Config(format!(
                "needle frames are {} pixels but the toy encoder expects {}",
                self.needle.image_side, self.toy.encoder.image_side
            )));
        }
        let ascending = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if self.bench_mem.frame_counts.is_empty() || !ascending(&self.bench_mem.frame_counts) {
            return Err(CliError::Config("bench_mem.frame_counts must be non-empty and strictly ascending".into()));
        }
        if self.bench_latency.prefix_lengths.is_empty() || !ascending(&self.bench_latency.prefix_lengths) {
            return Err(CliError::Config(
                "bench_latency.prefix_lengths must be non-empty and strictly ascending".into(),
            ));
        }
        if self.bench_latency.samples < 100 {
            return Err(CliError::Config(format!(
                "bench_latency.samples is {}; at least 100 are required",
                self.bench_latency.samples
            )));
        }
        if self.bench_latency.batch == 0 || self.bench_mem.lm_blocks == 0 || self.bench_latency.lm_blocks == 0 {
            return Err(CliError::Config("batch and block counts must be positive".into()));
        }
        Ok(())
    }
}
