//! Future semantic segmentation forecasting from past RGB frames.
//!
//! A student network (per-frame encoder pathways, a temporal 3D-convolution
//! forecasting module, and a skip-connected decoder) predicts the label map
//! of a future frame directly from past frames. Training pairs a
//! cross-entropy forecasting loss with a mean-squared-error distillation
//! loss against a frozen single-frame teacher network that sees the future
//! frame; at inference the student runs alone.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod palette;
pub mod schedule;
pub mod train;
pub mod types;

pub use config::{InputMode, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use palette::{colorize, decolorize, ClassPalette};
pub use schedule::{builtin_setting, ForecastSetting};
pub use types::{Frame, SegMap, IGNORE_LABEL};
