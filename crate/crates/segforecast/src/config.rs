//! Architecture and training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Past RGB frames (the main task).
    Rgb,
    /// One-hot encodings of past label maps (the segmentation-input task).
    SegmentationOnehot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastKind {
    Conv3d,
}

/// Shape of the student/teacher networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    #[serde(default = "default_input_mode")]
    pub input_mode: InputMode,
    /// How many past frames the student consumes (2..=4).
    #[serde(default = "default_num_input_frames")]
    pub num_input_frames: usize,
    /// Scales every channel count; 1.0 is the full-width network.
    #[serde(default = "default_width_multiplier")]
    pub width_multiplier: f64,
    /// Full-width channel count per encoder block.
    #[serde(default = "default_base_channels")]
    pub base_channels: Vec<usize>,
    /// Convolution repetitions per encoder block.
    #[serde(default = "default_conv_repeats")]
    pub conv_repeats: Vec<usize>,
    #[serde(default = "default_forecast_module")]
    pub forecast_module: ForecastKind,
    /// One encoder applied to every frame (default) vs. one per time step.
    #[serde(default = "default_true")]
    pub shared_encoder_weights: bool,
}

fn default_input_mode() -> InputMode {
    InputMode::Rgb
}
fn default_num_input_frames() -> usize {
    4
}
fn default_width_multiplier() -> f64 {
    1.0
}
fn default_base_channels() -> Vec<usize> {
    vec![64, 128, 256, 512, 512]
}
fn default_conv_repeats() -> Vec<usize> {
    vec![2, 2, 4, 4, 4]
}
fn default_forecast_module() -> ForecastKind {
    ForecastKind::Conv3d
}
fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        ModelConfig {
            num_classes,
            input_mode: default_input_mode(),
            num_input_frames: default_num_input_frames(),
            width_multiplier: default_width_multiplier(),
            base_channels: default_base_channels(),
            conv_repeats: default_conv_repeats(),
            forecast_module: default_forecast_module(),
            shared_encoder_weights: true,
        }
    }

    pub fn with_width(mut self, width_multiplier: f64) -> Self {
        self.width_multiplier = width_multiplier;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(Error::Config(format!(
                "num_classes must be in 1..=254, got {}",
                self.num_classes
            )));
        }
        if !(2..=4).contains(&self.num_input_frames) {
            return Err(Error::Config(format!(
                "num_input_frames must be 2, 3, or 4, got {}",
                self.num_input_frames
            )));
        }
        if self.base_channels.len() != 5 || self.conv_repeats.len() != 5 {
            return Err(Error::Config(
                "base_channels and conv_repeats must each have 5 entries".into(),
            ));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::Config(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        self.scaled_channels()?;
        if self.conv_repeats.iter().any(|&r| r == 0) {
            return Err(Error::Config("conv_repeats entries must be >= 1".into()));
        }
        Ok(())
    }

    /// Channel count per level: `round(width_multiplier * base)`, never 0.
    pub fn scaled_channels(&self) -> Result<Vec<usize>> {
        self.base_channels
            .iter()
            .map(|&b| {
                let c = (self.width_multiplier * b as f64).round();
                if c < 1.0 {
                    Err(Error::Config(format!(
                        "width_multiplier {} collapses a {b}-channel level to zero",
                        self.width_multiplier
                    )))
                } else {
                    Ok(c as usize)
                }
            })
            .collect()
    }

    /// Channels of the raw per-frame input tensor.
    pub fn in_channels(&self) -> usize {
        match self.input_mode {
            InputMode::Rgb => 3,
            InputMode::SegmentationOnehot => self.num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

/// Optimization hyperparameters and run-level knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Weight of the distillation term in the total loss.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_ignore_label")]
    pub ignore_label: u8,
    /// Clip gradient L2 norm to this value when set.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Write an intermediate checkpoint every K steps (0 = end only).
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_lr() -> f64 {
    0.001
}
fn default_batch_size() -> usize {
    8
}
fn default_lambda() -> f64 {
    100.0
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_max_steps() -> u64 {
    2000
}
fn default_seed() -> u64 {
    42
}
fn default_ignore_label() -> u8 {
    crate::types::IGNORE_LABEL
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch_size(),
            lambda: default_lambda(),
            optimizer: default_optimizer(),
            max_steps: default_max_steps(),
            seed: default_seed(),
            ignore_label: default_ignore_label(),
            grad_clip: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        Ok(())
    }
}
