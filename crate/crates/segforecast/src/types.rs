//! Core value types: RGB frames and integer label maps.
//!
//! Tensors are channel-first: a frame is `(3, H, W)`, a feature map is
//! `(C, H, W)`. Frames hold real values in `[0, 1]`; label maps hold class
//! ids in `0..C` plus the `IGNORE_LABEL` sentinel.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Sentinel label excluded from losses and metrics (void regions).
pub const IGNORE_LABEL: u8 = 255;

/// An RGB image with values in `[0, 1]`, stored `(3, H, W)`.
///
/// Height and width must each be divisible by 16 so the five encoder
/// halvings land on integer sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    data: Array3<f64>,
}

impl Frame {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::Shape(format!("frame must have 3 channels, got {c}")));
        }
        check_dims_divisible(h, w)?;
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Numeric(
                "frame values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(Frame { data })
    }

    /// Build from 8-bit RGB pixels in row-major `(H, W, 3)` order.
    pub fn from_rgb8(h: usize, w: usize, pixels: &[u8]) -> Result<Self> {
        if pixels.len() != h * w * 3 {
            return Err(Error::Shape(format!(
                "expected {} bytes for {h}x{w} rgb image, got {}",
                h * w * 3,
                pixels.len()
            )));
        }
        check_dims_divisible(h, w)?;
        let mut data = Array3::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[[c, y, x]] = f64::from(pixels[(y * w + x) * 3 + c]) / 255.0;
                }
            }
        }
        Ok(Frame { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Quantize back to 8-bit RGB, row-major `(H, W, 3)`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (_, h, w) = self.data.dim();
        let mut out = vec![0u8; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[(y * w + x) * 3 + c] =
                        (self.data[[c, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        out
    }
}

fn check_dims_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Shape(format!(
            "frame dimensions must be nonzero and divisible by 16, got {h}x{w}"
        )));
    }
    Ok(())
}

/// A per-pixel class label map over `num_classes` classes plus [`IGNORE_LABEL`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMap {
    labels: Array2<u8>,
    num_classes: usize,
}

impl SegMap {
    pub fn new(labels: Array2<u8>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes > usize::from(IGNORE_LABEL) {
            return Err(Error::Config(format!(
                "num_classes must be in 1..{IGNORE_LABEL}, got {num_classes}"
            )));
        }
        if let Some(((y, x), &bad)) = labels
            .indexed_iter()
            .find(|(_, &l)| usize::from(l) >= num_classes && l != IGNORE_LABEL)
        {
            return Err(Error::Data(format!(
                "label {bad} at pixel ({y}, {x}) is outside 0..{num_classes} and not the ignore sentinel"
            )));
        }
        Ok(SegMap {
            labels,
            num_classes,
        })
    }

    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    pub fn width(&self) -> usize {
        self.labels.dim().1
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    /// One-hot encode as a `(C, H, W)` tensor; ignored pixels become all-zero.
    pub fn to_onehot(&self) -> Array3<f64> {
        let (h, w) = self.labels.dim();
        let mut out = Array3::zeros((self.num_classes, h, w));
        for ((y, x), &l) in self.labels.indexed_iter() {
            if l != IGNORE_LABEL {
                out[[usize::from(l), y, x]] = 1.0;
            }
        }
        out
    }
}
