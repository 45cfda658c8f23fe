use std::f32::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::confetti::{confetti, ColorMode, ConfettiConfig};
use super::rng::stream_seed;
use super::{Dataset, Sample};
use crate::error::{config_err, Result};
use crate::numerics::Tensor;

/// Periodic-plus-noise texture family and its test defects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureParams {
    /// Stripe frequency range, in cycles per image width.
    pub frequency: (f32, f32),
    /// Mean stripe orientation (radians) and uniform jitter around it.
    pub orientation: f32,
    pub orientation_jitter: f32,
    pub stripe_amplitude: f32,
    /// Smooth value noise: amplitude and lattice cells per side.
    pub noise_amplitude: f32,
    pub noise_cells: usize,
    /// Per-pixel uniform grain amplitude.
    pub grain: f32,
    pub base_color: [f32; 3],
    /// Defects injected into anomalous samples.
    pub defect: ConfettiConfig,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            frequency: (5.0, 7.0),
            orientation: 0.6,
            orientation_jitter: 0.15,
            stripe_amplitude: 0.18,
            noise_amplitude: 0.12,
            noise_cells: 4,
            grain: 0.03,
            base_color: [0.55, 0.45, 0.35],
            defect: ConfettiConfig {
                count: (1, 3),
                side: (4, 10),
                color: ColorMode::IntensityShift { min: 0.06, max: 0.1 },
                seed: 0,
            },
        }
    }
}

/// Object-plus-glyph scenario for shortcut diagnosis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WatermarkParams {
    /// Probability that an anomalous training image carries the glyph.
    pub correlation: f64,
    /// Same for anomalous test images; 0 removes the glyph at test time.
    pub test_correlation: f64,
    /// Glyph side in pixels, placed in the lower-left corner.
    pub glyph_size: usize,
    pub object_radius: (f32, f32),
    /// Brightness of nominal objects and the offset added for anomalous ones.
    pub object_level: f32,
    pub object_offset: f32,
    pub background_noise: f32,
}

impl Default for WatermarkParams {
    fn default() -> Self {
        Self {
            correlation: 1.0,
            test_correlation: 1.0,
            glyph_size: 6,
            object_radius: (3.0, 5.0),
            object_level: 0.6,
            object_offset: 0.08,
            background_noise: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scenario {
    Texture(TextureParams),
    Watermark(WatermarkParams),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub image_size: usize,
    pub channels: usize,
    pub train_nominal: usize,
    /// Labeled anomalies (with maps) added to the training split.
    pub train_anomalous: usize,
    pub test_nominal: usize,
    pub test_anomalous: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn texture() -> Self {
        Self {
            scenario: Scenario::Texture(TextureParams::default()),
            image_size: 64,
            channels: 3,
            train_nominal: 400,
            train_anomalous: 0,
            test_nominal: 100,
            test_anomalous: 100,
            seed: 0,
        }
    }

    pub fn watermark() -> Self {
        Self {
            scenario: Scenario::Watermark(WatermarkParams::default()),
            image_size: 32,
            channels: 3,
            train_nominal: 400,
            train_anomalous: 200,
            test_nominal: 100,
            test_anomalous: 100,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_nominal == 0 || self.test_nominal == 0 || self.test_anomalous == 0 {
            return Err(config_err!("scenario sample counts must be at least 1"));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return Err(config_err!("scenario channels must be 1 or 3, got {}", self.channels));
        }
        let n = self.image_size;
        if n < 8 {
            return Err(config_err!("scenario image size must be at least 8, got {n}"));
        }
        match self.scenario {
            Scenario::Texture(t) => {
                if t.noise_cells == 0 || t.frequency.0 > t.frequency.1 || t.frequency.0 < 0.0 {
                    return Err(config_err!("invalid texture parameters"));
                }
                t.defect.validate(n, n)
            }
            Scenario::Watermark(p) => {
                if self.train_anomalous == 0 {
                    return Err(config_err!("watermark scenario needs anomalous training samples"));
                }
                for c in [p.correlation, p.test_correlation] {
                    if !(0.0..=1.0).contains(&c) {
                        return Err(config_err!("watermark correlation {c} is outside [0,1]"));
                    }
                }
                if p.glyph_size < 3 || p.glyph_size * 2 > n {
                    return Err(config_err!("glyph size {} does not fit a {n}px image", p.glyph_size));
                }
                let (r0, r1) = p.object_radius;
                if !(r0 >= 1.0 && r0 <= r1 && 2.0 * r1 + 2.0 < (n - p.glyph_size - 2) as f32) {
                    return Err(config_err!("object radius range [{r0},{r1}] does not fit"));
                }
                Ok(())
            }
        }
    }
}

const TRAIN: u64 = 0;
const TEST: u64 = 1;
/// Separate stream for glyph draws so that glyph presence does not change the
/// rest of the image.
const GLYPH: u64 = 2;

/// Generates `(train, test)` splits, bit-identical for a given config.
pub fn synth_scenario(cfg: &ScenarioConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let split = |name: &str, split_id: u64, nominal: usize, anomalous: usize| -> Result<Dataset> {
        let mut samples = Vec::with_capacity(nominal + anomalous);
        for i in 0..nominal + anomalous {
            let label = i >= nominal;
            let seed = stream_seed(cfg.seed, &[split_id, i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let glyph_seed = stream_seed(cfg.seed, &[split_id, i as u64, GLYPH]);
            let (image, mask) = match cfg.scenario {
                Scenario::Texture(t) => texture_sample(cfg, &t, label, &mut rng)?,
                Scenario::Watermark(p) => {
                    let corr = if split_id == TRAIN { p.correlation } else { p.test_correlation };
                    let glyph = label && ChaCha8Rng::seed_from_u64(glyph_seed).random_bool(corr);
                    watermark_sample(cfg, &p, label, glyph, &mut rng)
                }
            };
            samples.push(Sample::new(format!("{name}{i:05}"), image, label, Some(mask))?);
        }
        Ok(Dataset::new(samples))
    };
    let train = split("train", TRAIN, cfg.train_nominal, cfg.train_anomalous)?;
    let test = split("test", TEST, cfg.test_nominal, cfg.test_anomalous)?;
    Ok((train, test))
}

/// Bilinear value noise in `[-1,1]` on a `cells × cells` lattice, smoothstep
/// interpolated.
fn value_noise<R: Rng + ?Sized>(n: usize, cells: usize, rng: &mut R) -> Vec<f32> {
    let lattice: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        let fy = y as f32 / n as f32 * cells as f32;
        let (iy, ty) = (fy as usize, smooth(fy.fract()));
        for x in 0..n {
            let fx = x as f32 / n as f32 * cells as f32;
            let (ix, tx) = (fx as usize, smooth(fx.fract()));
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn nominal_texture<R: Rng + ?Sized>(cfg: &ScenarioConfig, t: &TextureParams, rng: &mut R) -> Tensor<f32> {
    let n = cfg.image_size;
    let theta = t.orientation + rng.random_range(-1.0..=1.0) * t.orientation_jitter;
    let freq = if t.frequency.0 == t.frequency.1 {
        t.frequency.0
    } else {
        rng.random_range(t.frequency.0..=t.frequency.1)
    };
    let phase = rng.random_range(0.0..TAU);
    let noise = value_noise(n, t.noise_cells, rng);
    let (cos, sin) = (theta.cos(), theta.sin());
    let mut field = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let u = (x as f32 * cos + y as f32 * sin) / n as f32;
            let stripe = (TAU * freq * u + phase).sin();
            let grain = rng.random_range(-1.0..=1.0) * t.grain;
            field.push(t.stripe_amplitude * stripe + t.noise_amplitude * noise[y * n + x] + grain);
        }
    }
    let base: Vec<f32> = if cfg.channels == 1 {
        vec![t.base_color.iter().sum::<f32>() / 3.0]
    } else {
        t.base_color.to_vec()
    };
    let mut data = Vec::with_capacity(cfg.channels * n * n);
    for b in base {
        data.extend(field.iter().map(|f| (b + f).clamp(0.0, 1.0)));
    }
    Tensor::new(vec![cfg.channels, n, n], data).expect("texture shape")
}

fn texture_sample<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    t: &TextureParams,
    label: bool,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let image = nominal_texture(cfg, t, rng);
    if label {
        confetti(&image, &t.defect, rng)
    } else {
        let n = cfg.image_size;
        Ok((image, Tensor::zeros(&[1, n, n])))
    }
}

/// Lower-left glyph box `(top, left, side)`.
fn glyph_box(n: usize, p: &WatermarkParams) -> (usize, usize, usize) {
    (n - p.glyph_size - 1, 1, p.glyph_size)
}

fn watermark_sample<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    p: &WatermarkParams,
    label: bool,
    glyph: bool,
    rng: &mut R,
) -> (Tensor<f32>, Tensor<f32>) {
    let n = cfg.image_size;
    let c = cfg.channels;
    let noise = value_noise(n, 4, rng);
    let tint: Vec<f32> = (0..c).map(|_| rng.random_range(0.25..0.45)).collect();
    let radius = rng.random_range(p.object_radius.0..=p.object_radius.1);
    // object center kept clear of the glyph box
    let (gt, _, gs) = glyph_box(n, p);
    let lo = radius + 1.0;
    let (cy, cx) = loop {
        let cy = rng.random_range(lo..n as f32 - lo);
        let cx = rng.random_range(lo..n as f32 - lo);
        if cy + radius < gt as f32 - 1.0 || cx - radius > (gs + 2) as f32 {
            break (cy, cx);
        }
    };
    let level = p.object_level + if label { p.object_offset } else { 0.0 };
    let mut data = vec![0.0f32; c * n * n];
    let mut mask = vec![0.0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
            let inside = dy * dy + dx * dx <= radius * radius;
            if inside && label {
                mask[i] = 1.0;
            }
            for ch in 0..c {
                let bg = tint[ch] + p.background_noise * noise[i];
                data[ch * n * n + i] = if inside { level } else { bg }.clamp(0.0, 1.0);
            }
        }
    }
    if glyph {
        // white frame with a dark cross: high contrast, fixed position
        let (top, left, side) = glyph_box(n, p);
        for y in 0..side {
            for x in 0..side {
                let border = y == 0 || x == 0 || y == side - 1 || x == side - 1;
                let cross = y == x || y + x == side - 1;
                let v = if border || cross { 1.0 } else { 0.0 };
                for ch in 0..c {
                    data[(ch * n + top + y) * n + left + x] = v;
                }
            }
        }
    }
    (
        Tensor::new(vec![c, n, n], data).expect("watermark shape"),
        Tensor::new(vec![1, n, n], mask).expect("mask shape"),
    )
}

/// Pixel box of the watermark glyph for a config, as `(top, left, side)`.
pub fn watermark_region(cfg: &ScenarioConfig) -> Option<(usize, usize, usize)> {
    match &cfg.scenario {
        Scenario::Watermark(p) => Some(glyph_box(cfg.image_size, p)),
        Scenario::Texture(_) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mut cfg: ScenarioConfig) -> ScenarioConfig {
        cfg.train_nominal = 6;
        cfg.train_anomalous = 4;
        cfg.test_nominal = 5;
        cfg.test_anomalous = 5;
        cfg
    }

    #[test]
    fn texture_anomalies_have_masks() {
        let (train, test) = synth_scenario(&small(ScenarioConfig::texture())).unwrap();
        assert_eq!(train.len(), 10);
        assert_eq!(test.len(), 10);
        for s in &test.samples {
            let m = s.mask.as_ref().unwrap().sum();
            assert_eq!(s.label, m > 0.0, "{}", s.id);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        for cfg in [ScenarioConfig::texture(), ScenarioConfig::watermark()] {
            let cfg = small(cfg);
            assert_eq!(synth_scenario(&cfg).unwrap(), synth_scenario(&cfg).unwrap());
            let mut other = cfg;
            other.seed = 1;
            assert_ne!(synth_scenario(&cfg).unwrap().0, synth_scenario(&other).unwrap().0);
        }
    }

    fn has_glyph(s: &Sample, cfg: &ScenarioConfig) -> bool {
        let (top, left, side) = watermark_region(cfg).unwrap();
        let n = cfg.image_size;
        (0..side).all(|x| s.image.data()[(top * n) + left + x] == 1.0)
    }

    #[test]
    fn full_correlation_marks_every_anomaly() {
        let cfg = small(ScenarioConfig::watermark());
        let (train, _) = synth_scenario(&cfg).unwrap();
        for s in &train.samples {
            assert_eq!(has_glyph(s, &cfg), s.label);
            if s.label {
                // the mask marks the object, not the glyph
                let (top, left, _) = watermark_region(&cfg).unwrap();
                assert_eq!(s.mask.as_ref().unwrap().data()[top * cfg.image_size + left], 0.0);
                assert!(s.mask.as_ref().unwrap().sum() > 0.0);
            }
        }
    }

    #[test]
    fn removing_glyph_keeps_the_rest() {
        let with = small(ScenarioConfig::watermark());
        let mut without = with;
        if let Scenario::Watermark(p) = &mut without.scenario {
            p.test_correlation = 0.0;
        }
        let (_, a) = synth_scenario(&with).unwrap();
        let (_, b) = synth_scenario(&without).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!(!has_glyph(y, &without));
            assert_eq!(x.mask, y.mask);
            if !x.label {
                assert_eq!(x.image, y.image);
            }
        }
    }

    #[test]
    fn zero_counts_are_rejected() {
        let mut cfg = ScenarioConfig::texture();
        cfg.test_anomalous = 0;
        assert!(synth_scenario(&cfg).is_err());
    }
}
