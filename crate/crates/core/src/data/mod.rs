//! Synthetic segmentation samples and their on-disk format.

mod io;
mod synth;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, FORMAT_VERSION, MAGIC};
pub use synth::{generate, GenConfig, MIN_SIDE};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// C×H×W intensities in `[0, 1]`, exactly representable as f32.
    pub image: Tensor,
    /// H·W labels in raster order.
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub split: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegDataset {
    pub manifest: Manifest,
    pub samples: Vec<SegSample>,
}

impl SegDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks every sample against the manifest.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let shape = [m.channels, m.height, m.width];
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.shape() != shape || s.labels.len() != m.height * m.width {
                return Err(Error::shape(
                    "dataset",
                    format!("sample {i}: image {:?}, {} labels, manifest {shape:?}", s.image.shape(), s.labels.len()),
                ));
            }
            if let Some(&bad) = s.labels.iter().find(|&&l| l as usize >= m.classes) {
                return Err(Error::invalid(format!("sample {i}: label {bad} ≥ {} classes", m.classes)));
            }
        }
        Ok(())
    }
}
