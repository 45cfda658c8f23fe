//! Datasets, outlier exposure, confetti noise, procedural scenarios and
//! augmentation.

mod augment;
mod confetti;
mod io;
mod rng;
mod synth;

pub use augment::{augment, augment_sample, channel_stats, normalize, AugmentPolicy, ChannelStats};
pub use confetti::{confetti, oe_mix, ColorMode, ConfettiConfig};
pub use io::{load_dataset, load_image, load_image_dir, save_dataset, save_image, save_rgb8, INDEX_FILE};
pub use rng::{sample_rng, stream_seed};
pub use synth::{synth_scenario, watermark_region, Scenario, ScenarioConfig, TextureParams, WatermarkParams};

use crate::error::{config_err, Result};
use crate::numerics::Tensor;

/// One image with its label and optional ground-truth anomaly map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Identifier used in reports (file name for loaded data).
    pub id: String,
    /// `[c,h,w]`, values in `[0,1]` before normalization.
    pub image: Tensor<f32>,
    /// `true` for anomalous.
    pub label: bool,
    /// `[1,h,w]` binary map.
    pub mask: Option<Tensor<f32>>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, label: bool, mask: Option<Tensor<f32>>) -> Result<Self> {
        let s = Self {
            id: id.into(),
            image,
            label,
            mask,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        if shape.len() != 3 {
            return Err(config_err!("sample '{}' image must be [c,h,w], got {shape:?}", self.id));
        }
        if let Some(m) = &self.mask {
            if m.shape() != [1, shape[1], shape[2]] {
                return Err(config_err!(
                    "sample '{}' mask shape {:?} does not match image {:?}",
                    self.id,
                    m.shape(),
                    shape
                ));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(config_err!("sample '{}' mask is not binary", self.id));
            }
            if !self.label && m.data().iter().any(|&v| v != 0.0) {
                return Err(config_err!("nominal sample '{}' has a nonzero mask", self.id));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    /// The ground-truth map, with a missing map read as all-zero for nominal
    /// samples and all-one for anomalous ones.
    pub fn mask_or_label(&self) -> Tensor<f32> {
        match &self.mask {
            Some(m) => m.clone(),
            None => {
                let (h, w) = self.size();
                Tensor::full(&[1, h, w], if self.label { 1.0 } else { 0.0 })
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn has_masks(&self) -> bool {
        self.samples.iter().any(|s| s.mask.is_some())
    }

    pub fn nominal(&self) -> Dataset {
        self.filtered(false)
    }

    pub fn anomalous(&self) -> Dataset {
        self.filtered(true)
    }

    fn filtered(&self, label: bool) -> Dataset {
        Dataset::new(self.samples.iter().filter(|s| s.label == label).cloned().collect())
    }

    /// `[c,h,w]` shared by all samples, or a config error if they disagree.
    pub fn image_shape(&self) -> Result<Option<[usize; 3]>> {
        let mut shape = None;
        for s in &self.samples {
            let sh = s.image.shape();
            let sh = [sh[0], sh[1], sh[2]];
            match shape {
                None => shape = Some(sh),
                Some(prev) if prev != sh => {
                    return Err(config_err!(
                        "sample '{}' has shape {sh:?}, expected {prev:?}",
                        s.id
                    ))
                }
                _ => {}
            }
        }
        Ok(shape)
    }

    /// Stacks images into `[b,c,h,w]`.
    pub fn stack_images(samples: &[Sample]) -> Result<Tensor<f32>> {
        let parts: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
        Tensor::stack(&parts)
    }

    /// Stacks ground-truth maps into `[b,1,h,w]` via [`Sample::mask_or_label`].
    pub fn stack_masks(samples: &[Sample]) -> Result<Tensor<f32>> {
        let parts: Vec<_> = samples.iter().map(Sample::mask_or_label).collect();
        Tensor::stack(&parts)
    }
}

/// Converts a `[c,h,w]` image to `channels` channels: gray is replicated,
/// RGB is reduced by luma weights.
pub fn convert_channels(image: &Tensor<f32>, channels: usize) -> Result<Tensor<f32>> {
    let sh = image.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    if c == channels {
        return Ok(image.clone());
    }
    let plane = h * w;
    match (c, channels) {
        (1, n) => {
            let mut data = Vec::with_capacity(n * plane);
            for _ in 0..n {
                data.extend_from_slice(image.data());
            }
            Tensor::new(vec![n, h, w], data)
        }
        (3, 1) => {
            let d = image.data();
            let data = (0..plane)
                .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
                .collect();
            Tensor::new(vec![1, h, w], data)
        }
        _ => Err(config_err!("cannot convert {c}-channel images to {channels} channels")),
    }
}
