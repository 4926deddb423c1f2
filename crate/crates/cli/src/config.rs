//! Run configuration: one TOML file, strictly parsed.

use std::path::{Path, PathBuf};

use recticast_core::backbone::BackboneConfig;
use recticast_core::cascade::{CascadeSampling, SegmentSchedule};
use recticast_core::data::DataSpec;
use recticast_core::metrics::DEFAULT_THRESHOLDS;
use recticast_core::stunet::STUNetConfig;
use recticast_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Environment variable that overrides the output directory.
pub const OUT_ENV: &str = "RECTICAST_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub channels: usize,
    pub hidden: usize,
    pub depth: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let d = BackboneConfig::default();
        BackboneSection {
            channels: d.channels,
            hidden: d.hidden,
            depth: d.depth,
        }
    }
}

/// U-Net settings shared by the Rectifier and the Generator. Frame count and
/// size come from the data section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub patch: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_scale: usize,
    pub injection_scales: Vec<usize>,
    pub time_freq_dim: usize,
    pub emb_dim: usize,
    pub temporal_ratio: usize,
}

impl Default for FlowSection {
    fn default() -> Self {
        let d = STUNetConfig::default();
        FlowSection {
            patch: d.patch,
            base_channels: d.base_channels,
            channel_mults: d.channel_mults,
            blocks_per_scale: d.blocks_per_scale,
            injection_scales: d.injection_scales,
            time_freq_dim: d.time_freq_dim,
            emb_dim: d.emb_dim,
            temporal_ratio: d.temporal_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub backbone: TrainConfig,
    pub rectifier: TrainConfig,
    pub generator: TrainConfig,
    /// Optimizer steps between checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            backbone: TrainConfig::default(),
            rectifier: TrainConfig {
                steps: 5000,
                ..TrainConfig::default()
            },
            generator: TrainConfig {
                steps: 5000,
                ..TrainConfig::default()
            },
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub steps_rect: usize,
    pub steps_gen: usize,
    /// Count rectifier evaluations for segment 1 in the NFE total.
    pub count_first_rect_segment: bool,
}

impl Default for SamplingSection {
    fn default() -> Self {
        let d = CascadeSampling::default();
        SamplingSection {
            steps_rect: d.steps_rect,
            steps_gen: d.steps_gen,
            count_first_rect_segment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Thresholds on the 0..255 scale.
    pub thresholds: Vec<f64>,
    /// Forecasts per batched sampler call.
    pub batch: usize,
    /// Use at most this many windows of the split.
    pub limit: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            batch: 8,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSpec,
    pub backbone: BackboneSection,
    pub flow: FlowSection,
    pub train: TrainSection,
    pub sampling: SamplingSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataSpec::default(),
            backbone: BackboneSection::default(),
            flow: FlowSection::default(),
            train: TrainSection::default(),
            sampling: SamplingSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            l_in: self.data.input_len,
            l_out: self.data.target_len(),
            height: self.data.height,
            width: self.data.width,
            channels: self.backbone.channels,
            hidden: self.backbone.hidden,
            depth: self.backbone.depth,
        }
    }

    pub fn schedule(&self) -> CliResult<SegmentSchedule> {
        Ok(SegmentSchedule::new(self.data.input_len, self.data.target_len())?)
    }

    /// Base U-Net config; the cascade fills in the frame count and index table.
    pub fn flow_base(&self) -> STUNetConfig {
        let f = &self.flow;
        STUNetConfig {
            frames: self.data.input_len,
            height: self.data.height,
            width: self.data.width,
            patch: f.patch,
            base_channels: f.base_channels,
            channel_mults: f.channel_mults.clone(),
            blocks_per_scale: f.blocks_per_scale,
            injection_scales: f.injection_scales.clone(),
            time_freq_dim: f.time_freq_dim,
            emb_dim: f.emb_dim,
            temporal_ratio: f.temporal_ratio,
            segment_vocab: None,
        }
    }

    pub fn sampling(&self) -> CascadeSampling {
        CascadeSampling {
            steps_rect: self.sampling.steps_rect,
            steps_gen: self.sampling.steps_gen,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let d = &self.data;
        if d.input_len == 0 || d.window <= d.input_len {
            return Err(CliError::Config(format!(
                "window {} must exceed the input length {}",
                d.window, d.input_len
            )));
        }
        if d.sequence_len < d.window {
            return Err(CliError::Config(format!(
                "sequence length {} is shorter than the window {}",
                d.sequence_len, d.window
            )));
        }
        if ![32, 64].contains(&d.height) || ![32, 64].contains(&d.width) {
            return Err(CliError::Config(format!(
                "frame size {}x{} unsupported: height and width must each be 32 or 64",
                d.height, d.width
            )));
        }
        recticast_core::backbone::Backbone::new(self.backbone_config())?;
        self.flow_base().validate()?;
        for t in [&self.train.backbone, &self.train.rectifier, &self.train.generator] {
            t.validate()?;
        }
        if self.train.checkpoint_every == 0 {
            return Err(CliError::Config("checkpoint_every must be positive".into()));
        }
        if self.sampling.steps_rect == 0 || self.sampling.steps_gen == 0 {
            return Err(CliError::Config("sampler step counts must be positive".into()));
        }
        if self.eval.batch == 0 {
            return Err(CliError::Config("evaluation batch must be positive".into()));
        }
        if self.eval.thresholds.iter().any(|t| !(0.0..=255.0).contains(t)) {
            return Err(CliError::Config("thresholds must lie in [0, 255]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
