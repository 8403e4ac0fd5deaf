//! Image, mask and labelled sample containers shared by every module.

use crate::error::{OdexError, Result};

/// Row-major grayscale image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(OdexError::ShapeMismatch {
                expected: format!("{height}x{width} = {} pixels", height * width),
                actual: format!("{} pixels", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Row-major binary mask; every entry is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(OdexError::ShapeMismatch {
                expected: format!("{height}x{width} = {} pixels", height * width),
                actual: format!("{} pixels", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(OdexError::InvalidConfig(format!(
                "mask value {v} is not binary"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Thresholds probabilities strictly above 0.5.
    pub fn from_probabilities(height: usize, width: usize, probs: &[f64]) -> Self {
        Self {
            height,
            width,
            data: probs.iter().map(|&p| u8::from(p > 0.5)).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// One training or test instance. `task_label` is carried for evaluation only;
/// nothing on the training path reads it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask: Mask,
    pub task_label: u32,
    pub sample_id: u64,
}
