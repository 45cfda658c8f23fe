use rand::Rng;

use super::{Dataset, Sample};
use crate::error::{config_err, Result};
use crate::numerics::Tensor;

/// How a blob is colored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ColorMode {
    /// Each blob gets one uniformly random color.
    UniformRgb,
    /// Each blob shifts the underlying pixels by `±δ`, `δ ~ U[min, max]`,
    /// keeping the texture inside the blob.
    IntensityShift { min: f32, max: f32 },
}

/// Square-blob noise parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfettiConfig {
    pub count: (usize, usize),
    pub side: (usize, usize),
    pub color: ColorMode,
    pub seed: u64,
}

impl Default for ConfettiConfig {
    fn default() -> Self {
        Self {
            count: (1, 3),
            side: (2, 6),
            color: ColorMode::UniformRgb,
            seed: 0,
        }
    }
}

impl ConfettiConfig {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let (kmin, kmax) = self.count;
        let (smin, smax) = self.side;
        if kmin == 0 || kmin > kmax {
            return Err(config_err!("confetti count range [{kmin},{kmax}] is empty or zero"));
        }
        if smin == 0 || smin > smax {
            return Err(config_err!("confetti side range [{smin},{smax}] is empty or zero"));
        }
        if smax > h.min(w) / 2 {
            return Err(config_err!(
                "confetti side {smax} exceeds half the {h}x{w} image"
            ));
        }
        if let ColorMode::IntensityShift { min, max } = self.color {
            if !(0.0..=1.0).contains(&min) || min > max || max > 1.0 {
                return Err(config_err!("intensity shift range [{min},{max}] is invalid"));
            }
        }
        Ok(())
    }
}

enum Paint {
    Fill(Vec<f32>),
    Shift(f32),
}

/// Pastes `k ~ U[k_min, k_max]` square blobs at uniform positions. Returns the
/// modified image (clamped to `[0,1]`) and the `[1,h,w]` union of blob supports.
pub fn confetti<R: Rng + ?Sized>(
    image: &Tensor<f32>,
    cfg: &ConfettiConfig,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let sh = image.shape();
    if sh.len() != 3 {
        return Err(config_err!("confetti expects a [c,h,w] image, got {sh:?}"));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    cfg.validate(h, w)?;
    let mut out = image.clone();
    let mut mask = Tensor::zeros(&[1, h, w]);
    let k = rng.random_range(cfg.count.0..=cfg.count.1);
    for _ in 0..k {
        let side = rng.random_range(cfg.side.0..=cfg.side.1);
        let top = rng.random_range(0..=h - side);
        let left = rng.random_range(0..=w - side);
        let paint = match cfg.color {
            ColorMode::UniformRgb => Paint::Fill((0..c).map(|_| rng.random()).collect()),
            ColorMode::IntensityShift { min, max } => {
                let mag = if min == max { min } else { rng.random_range(min..=max) };
                Paint::Shift(if rng.random_bool(0.5) { mag } else { -mag })
            }
        };
        for y in top..top + side {
            for x in left..left + side {
                for ch in 0..c {
                    let i = (ch * h + y) * w + x;
                    let v = match &paint {
                        Paint::Fill(color) => color[ch],
                        Paint::Shift(delta) => image.data()[i] + delta,
                    };
                    out.data_mut()[i] = v.clamp(0.0, 1.0);
                }
                mask.data_mut()[y * w + x] = 1.0;
            }
        }
    }
    Ok((out, mask))
}

/// Replaces each nominal sample independently with probability `p` by a
/// uniformly drawn outlier-exposure sample labeled anomalous. Anomalous inputs
/// and the batch size are left unchanged.
pub fn oe_mix<R: Rng + ?Sized>(batch: Vec<Sample>, oe_source: &Dataset, p: f64, rng: &mut R) -> Result<Vec<Sample>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(config_err!("outlier exposure probability {p} is outside [0,1]"));
    }
    if p > 0.0 && oe_source.is_empty() {
        return Err(config_err!("outlier exposure probability is {p} but the OE source is empty"));
    }
    Ok(batch
        .into_iter()
        .map(|s| {
            if s.label || p == 0.0 || !rng.random_bool(p) {
                return s;
            }
            let mut oe = oe_source.samples[rng.random_range(0..oe_source.len())].clone();
            oe.label = true;
            oe
        })
        .collect())
}
