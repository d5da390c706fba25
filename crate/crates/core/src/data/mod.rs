//! Samples, synthetic generation, on-disk datasets and augmentation.

mod augment;
mod io;
mod synth;

pub use augment::{augment, flip_horizontal, rotate90, Augmentation};
pub use io::{list_dataset, load_dataset, load_gray, load_rgb, load_sample, save_gray, save_rgb, write_sample, SampleFiles};
pub use synth::{generate_sample, synthetic_dataset, Quality, MIN_SIZE};

use crate::tensor::Tensor;

/// One RGB-D sample with its ground truth, all values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    /// `[3,H,W]`.
    pub rgb: Tensor<f32>,
    /// `[1,H,W]`.
    pub depth: Tensor<f32>,
    /// Binary `[H,W]`.
    pub gt: Tensor<f32>,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.gt.shape()[0], self.gt.shape()[1])
    }

    pub fn foreground_ratio(&self) -> f64 {
        self.gt.data().iter().filter(|&&v| v > 0.5).count() as f64 / self.gt.numel() as f64
    }
}
