use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::save_rgb8;
use crate::error::{numeric_err, usage_err, Result};
use crate::model::FcnModel;
use crate::numerics::{Element, Mode, Tape, Tensor};
use crate::upsample::blur;

/// Denominators at or below this give all-zero normalized maps.
pub const NORMALIZATION_GUARD: f64 = 1e-12;

/// Linear-interpolation percentile at index `(n−1)·η` of the sorted values.
pub fn percentile(values: &[f64], eta: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(usage_err!("percentile of an empty set"));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(usage_err!("percentile level {eta} is outside [0,1]"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (v.len() - 1) as f64 * eta;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// `min((x − min(ref)) / q_η(ref − min(ref)), 1)`, clamped to `[0,1]`.
///
/// `reference` is the pool of pixels defining the scale: a single map for
/// self-normalization, or many maps for dataset-wide normalization.
pub fn normalize_heatmaps<T: Element>(maps: &Tensor<T>, eta: f64, reference: &Tensor<T>) -> Result<Tensor<T>> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(usage_err!("eta must be in (0,1], got {eta}"));
    }
    let rv: Vec<f64> = reference.data().iter().map(|v| v.as_f64()).collect();
    let min = rv.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = rv.iter().map(|v| v - min).collect();
    let q = percentile(&shifted, eta)?;
    if !(q > NORMALIZATION_GUARD) {
        return Ok(Tensor::zeros(maps.shape()));
    }
    Ok(maps.map(|v| T::from_f64_lossy(((v.as_f64() - min) / q).clamp(0.0, 1.0))))
}

/// Indices of a class-balanced subset: the larger class is downsampled to the
/// size of the smaller with a seeded draw. Order is ascending.
pub fn balanced_reference(labels: &[bool], seed: u64) -> Vec<usize> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let n = pos.len().min(neg.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |class: &[usize]| -> Vec<usize> {
        if class.len() == n {
            class.to_vec()
        } else {
            sample(&mut rng, class.len(), n).into_iter().map(|i| class[i]).collect()
        }
    };
    let mut out = pick(&pos);
    out.extend(pick(&neg));
    out.sort_unstable();
    out
}

/// Gradient baseline: per pixel, the channel maximum of `|∂‖A(x)‖₁/∂x|`,
/// optionally blurred. `[b,c,h,w] → [b,1,h,w]`.
pub fn gradient_heatmap<T: Element>(
    model: &mut FcnModel<T>,
    x: &Tensor<T>,
    blur_sigma: Option<f64>,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), true);
    let out = model.forward_tape(&mut tape, input, Mode::Eval, false)?.output;
    let a = tape.pseudo_huber_map(out)?;
    // samples are independent in eval mode, so one backward over the summed
    // scores yields every per-sample gradient
    let score = tape.sum(a)?;
    tape.backward(score)?;
    let grad = tape
        .take_grad(input)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    if !grad.all_finite() {
        return Err(numeric_err!("gradient heatmap has non-finite entries"));
    }
    let plane = h * w;
    let mut out = vec![T::zero(); b * plane];
    for bi in 0..b {
        for ch in 0..c {
            let g = &grad.data()[(bi * c + ch) * plane..][..plane];
            for (o, &v) in out[bi * plane..][..plane].iter_mut().zip(g) {
                *o = o.max(v.abs());
            }
        }
    }
    let map = Tensor::new(vec![b, 1, h, w], out)?;
    match blur_sigma {
        Some(s) => blur(&map, s),
        None => Ok(map),
    }
}

const LOW: [f64; 3] = [0.0, 0.0, 128.0];
const MID: [f64; 3] = [255.0, 255.0, 255.0];
const HIGH: [f64; 3] = [200.0, 0.0, 0.0];

/// Piecewise-linear colormap: 0 → navy, 0.5 → white, 1 → red.
pub fn colormap(v: f64) -> [u8; 3] {
    let (from, to, t) = if v <= 0.5 { (LOW, MID, v / 0.5) } else { (MID, HIGH, (v - 0.5) / 0.5) };
    let mut px = [0u8; 3];
    for i in 0..3 {
        px[i] = (from[i] + (to[i] - from[i]) * t).round() as u8;
    }
    px
}

/// Writes a normalized `h × w` map (any shape with `h·w` entries given
/// `(h, w)`) as a colormapped PPM.
pub fn render<T: Element>(map: &[T], h: usize, w: usize, path: &Path) -> Result<()> {
    if map.len() != h * w {
        return Err(usage_err!("render expects {} values, got {}", h * w, map.len()));
    }
    let mut raw = Vec::with_capacity(3 * h * w);
    for &v in map {
        let v = v.as_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(usage_err!("render expects values in [0,1], got {v}"));
        }
        raw.extend_from_slice(&colormap(v));
    }
    save_rgb8(path, &raw, h, w)
}
