//! Built-in architectures.
//!
//! Layer stacks follow the three published families; channel widths are
//! configurable through [`PresetOptions::width`] rather than canonical.

use super::arch::{ArchitectureSpec, InputShape, LayerSpec};
use crate::error::{config_err, usage_err, Result};

/// Slope used by all preset activations.
pub const PRESET_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Three convs with batchnorm separated by two pools, 1×28×28 input.
    Fmnist28,
    /// LeNet-style with 3×3 kernels and two extra convs instead of the
    /// dense head, 3×32×32 input.
    Cifar32,
    /// VGG11-like feature stack with overlapping 3×3 pools and a 1×1 head,
    /// 3×224×224 input. Ships untrained.
    Vgg224Like,
}

impl Preset {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "fmnist28" => Ok(Preset::Fmnist28),
            "cifar32" => Ok(Preset::Cifar32),
            "vgg224like" => Ok(Preset::Vgg224Like),
            other => Err(usage_err!(
                "unknown preset '{other}' (expected fmnist28, cifar32 or vgg224like)"
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Fmnist28 => "fmnist28",
            Preset::Cifar32 => "cifar32",
            Preset::Vgg224Like => "vgg224like",
        }
    }

    /// Default Gaussian upsampling σ for the preset's image scale.
    pub fn default_sigma(self) -> f64 {
        match self {
            Preset::Fmnist28 | Preset::Cifar32 => 1.2,
            Preset::Vgg224Like => 12.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PresetOptions {
    /// Replaces the varied kernel size (first conv for fmnist28/cifar32,
    /// every 3×3 conv for vgg224like). Must be odd.
    pub kernel: Option<usize>,
    /// Multiplies every hidden width (1.0 = reference widths).
    pub width: Option<f64>,
}

fn scaled(base: usize, width: f64) -> usize {
    ((base as f64 * width).round() as usize).max(1)
}

fn block(layers: &mut Vec<LayerSpec>, cin: usize, cout: usize, k: usize) {
    layers.push(LayerSpec::conv(cin, cout, k, 1, (k - 1) / 2));
    layers.push(LayerSpec::BatchNorm);
    layers.push(LayerSpec::lrelu(PRESET_ALPHA));
}

pub fn preset(name: &str, opts: PresetOptions) -> Result<ArchitectureSpec> {
    let which = Preset::from_name(name)?;
    let k = opts.kernel.unwrap_or(3);
    if k == 0 || k.is_multiple_of(2) {
        return Err(config_err!("preset kernel size must be odd, got {k}"));
    }
    let w = opts.width.unwrap_or(1.0);
    if !(w > 0.0) {
        return Err(config_err!("preset width multiplier must be positive"));
    }
    let mut l = Vec::new();
    let input = match which {
        Preset::Fmnist28 => {
            let (a, b) = (scaled(128, w), scaled(128, w));
            block(&mut l, 1, a, k);
            l.push(LayerSpec::maxpool(2, 2));
            block(&mut l, a, b, 3);
            l.push(LayerSpec::maxpool(2, 2));
            l.push(LayerSpec::conv(b, 1, 1, 1, 0));
            InputShape::new(1, 28, 28)
        }
        Preset::Cifar32 => {
            let (a, b, c) = (scaled(128, w), scaled(256, w), scaled(256, w));
            block(&mut l, 3, a, k);
            l.push(LayerSpec::maxpool(2, 2));
            block(&mut l, a, b, 3);
            l.push(LayerSpec::maxpool(2, 2));
            block(&mut l, b, c, 3);
            l.push(LayerSpec::conv(c, 1, 1, 1, 0));
            InputShape::new(3, 32, 32)
        }
        Preset::Vgg224Like => {
            let widths = [64, 128, 256, 256, 512].map(|c| scaled(c, w));
            block(&mut l, 3, widths[0], k);
            l.push(LayerSpec::MaxPool { kernel: 3, stride: 2, padding: 1 });
            block(&mut l, widths[0], widths[1], k);
            l.push(LayerSpec::MaxPool { kernel: 3, stride: 2, padding: 1 });
            block(&mut l, widths[1], widths[2], k);
            block(&mut l, widths[2], widths[3], k);
            l.push(LayerSpec::MaxPool { kernel: 3, stride: 2, padding: 1 });
            block(&mut l, widths[3], widths[4], k);
            l.push(LayerSpec::conv(widths[4], 1, 1, 1, 0));
            InputShape::new(3, 224, 224)
        }
    };
    ArchitectureSpec::new(l, input)
}
