use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Sample};
use crate::error::{config_err, Result};
use crate::numerics::Tensor;

/// Per-channel mean and standard deviation of a nominal training split.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Population statistics over every pixel of every nominal sample.
pub fn channel_stats(data: &Dataset) -> Result<ChannelStats> {
    let nominal: Vec<&Sample> = data.samples.iter().filter(|s| !s.label).collect();
    let first = nominal
        .first()
        .ok_or_else(|| config_err!("channel statistics need at least one nominal sample"))?;
    let c = first.channels();
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    let mut count = 0usize;
    for s in &nominal {
        if s.channels() != c {
            return Err(config_err!("sample '{}' has {} channels, expected {c}", s.id, s.channels()));
        }
        let plane = s.image.len() / c;
        for (ch, chunk) in s.image.data().chunks(plane).enumerate() {
            for &v in chunk {
                sum[ch] += f64::from(v);
                sq[ch] += f64::from(v) * f64::from(v);
            }
        }
        count += plane;
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let var = (q / n - m * m).max(0.0);
            if var.sqrt() < 1e-12 {
                1.0
            } else {
                var.sqrt() as f32
            }
        })
        .collect();
    Ok(ChannelStats {
        mean: mean.iter().map(|&m| m as f32).collect(),
        std,
    })
}

/// `(x − mean_c) / std_c` per channel.
pub fn normalize(image: &Tensor<f32>, stats: &ChannelStats) -> Result<Tensor<f32>> {
    let c = image.shape()[0];
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(config_err!(
            "normalization statistics have {} channels, image has {c}",
            stats.mean.len()
        ));
    }
    let plane = image.len() / c;
    let mut out = image.clone();
    for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(out)
}

/// Augmentation pipeline, applied in field order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentPolicy {
    /// Per-channel affine jitter: scale in `[1−j, 1+j]`, shift in `[−j, j]`.
    pub jitter: f32,
    /// Random crop of `size × size` from the image zero-padded by `padding`.
    pub crop: Option<(usize, usize)>,
    /// Horizontal flip probability.
    pub flip: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_std: f32,
    pub normalize: Option<ChannelStats>,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(config_err!("jitter must be in [0,1), got {}", self.jitter));
        }
        if !(0.0..=1.0).contains(&self.flip) {
            return Err(config_err!("flip probability must be in [0,1], got {}", self.flip));
        }
        if self.noise_std < 0.0 {
            return Err(config_err!("noise std must be nonnegative"));
        }
        if let Some((size, pad)) = self.crop {
            if size == 0 || size > h + 2 * pad || size > w + 2 * pad {
                return Err(config_err!(
                    "crop {size} is larger than the padded {}x{} image",
                    h + 2 * pad,
                    w + 2 * pad
                ));
            }
        }
        Ok(())
    }
}

fn crop(t: &Tensor<f32>, size: usize, pad: usize, top: usize, left: usize) -> Tensor<f32> {
    let sh = t.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    Tensor::from_fn(&[c, size, size], |i| {
        let ch = i / (size * size);
        let y = (i / size) % size + top;
        let x = i % size + left;
        if y < pad || x < pad || y - pad >= h || x - pad >= w {
            0.0
        } else {
            t.data()[(ch * h + y - pad) * w + x - pad]
        }
    })
}

fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.shape()[2];
    Tensor::from_fn(t.shape(), |i| {
        let x = i % w;
        t.data()[i - x + (w - 1 - x)]
    })
}

fn apply<R: Rng + ?Sized>(
    image: &Tensor<f32>,
    mut mask: Option<Tensor<f32>>,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    let sh = image.shape();
    if sh.len() != 3 {
        return Err(config_err!("augment expects a [c,h,w] image, got {sh:?}"));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    policy.validate(h, w)?;
    let mut img = image.clone();
    if policy.jitter > 0.0 {
        let j = policy.jitter;
        let plane = h * w;
        for chunk in img.data_mut().chunks_mut(plane) {
            let scale = rng.random_range(1.0 - j..=1.0 + j);
            let shift = rng.random_range(-j..=j);
            chunk.iter_mut().for_each(|v| *v = (*v * scale + shift).clamp(0.0, 1.0));
        }
    }
    if let Some((size, pad)) = policy.crop {
        let top = rng.random_range(0..=h + 2 * pad - size);
        let left = rng.random_range(0..=w + 2 * pad - size);
        img = crop(&img, size, pad, top, left);
        mask = mask.map(|m| crop(&m, size, pad, top, left));
    }
    if policy.flip > 0.0 && rng.random_bool(policy.flip) {
        img = hflip(&img);
        mask = mask.map(|m| hflip(&m));
    }
    if policy.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, policy.noise_std).map_err(|e| config_err!("noise: {e}"))?;
        img.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    if let Some(stats) = &policy.normalize {
        img = normalize(&img, stats)?;
    }
    debug_assert_eq!(img.shape()[0], c);
    Ok((img, mask))
}

/// Applies `policy` to one image.
pub fn augment<R: Rng + ?Sized>(image: &Tensor<f32>, policy: &AugmentPolicy, rng: &mut R) -> Result<Tensor<f32>> {
    Ok(apply(image, None, policy, rng)?.0)
}

/// Applies `policy` to a sample; crops and flips are mirrored on its mask.
pub fn augment_sample<R: Rng + ?Sized>(sample: &Sample, policy: &AugmentPolicy, rng: &mut R) -> Result<Sample> {
    let (image, mask) = apply(&sample.image, sample.mask.clone(), policy, rng)?;
    Ok(Sample {
        id: sample.id.clone(),
        image,
        label: sample.label,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img() -> Tensor<f32> {
        Tensor::from_fn(&[2, 3, 4], |i| i as f32 / 24.0)
    }

    #[test]
    fn identity_policy_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img(), &AugmentPolicy::identity(), &mut rng).unwrap(), img());
    }

    #[test]
    fn forced_double_flip_restores() {
        let p = AugmentPolicy {
            flip: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = augment(&img(), &p, &mut rng).unwrap();
        assert_ne!(once, img());
        assert_eq!(once.data()[0], img().data()[3]);
        assert_eq!(augment(&once, &p, &mut rng).unwrap(), img());
    }

    #[test]
    fn crop_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ok = AugmentPolicy {
            crop: Some((5, 1)),
            ..Default::default()
        };
        assert_eq!(augment(&img(), &ok, &mut rng).unwrap().shape(), &[2, 5, 5]);
        let bad = AugmentPolicy {
            crop: Some((6, 1)),
            ..Default::default()
        };
        assert!(augment(&img(), &bad, &mut rng).is_err());
        // zero padding, full-size crop: identity
        let full = AugmentPolicy {
            crop: Some((3, 0)),
            ..Default::default()
        };
        let sq = Tensor::from_fn(&[1, 3, 3], |i| i as f32);
        assert_eq!(augment(&sq, &full, &mut rng).unwrap(), sq);
    }

    #[test]
    fn mask_follows_geometry() {
        let image = Tensor::from_fn(&[1, 4, 4], |i| (i % 4) as f32 / 4.0);
        let mask = Tensor::from_fn(&[1, 4, 4], |i| (i % 4 == 0) as u8 as f32);
        let s = Sample::new("m", image, true, Some(mask)).unwrap();
        let p = AugmentPolicy {
            flip: 1.0,
            crop: Some((4, 2)),
            ..Default::default()
        };
        let out = augment_sample(&s, &p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let m = out.mask.unwrap();
        // mask pixels still sit where the image column value is 0 (inside the image)
        for (v, mv) in out.image.data().iter().zip(m.data()) {
            if *mv == 1.0 {
                assert_eq!(*v, 0.0);
            }
        }
    }
}
