//! Pseudo-Huber transform, one-class objectives and the anomaly score.
//!
//! Labels are booleans: `true` marks an anomalous sample. Every objective is
//! available both as a plain function on tensors and as a differentiable
//! operation on a [`Tape`].

use crate::error::{config_err, numeric_err, usage_err, Result};
use crate::numerics::{Element, Function, Tape, Tensor, Var};
use crate::numerics::mix;

/// Lower clamp on the distance fed to `−log(1 − exp(−d))`.
pub const MIN_ANOMALY_DISTANCE: f64 = 1e-6;

/// Which objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Hypersphere classifier on the flattened network output.
    Hsc,
    /// Per-sample mean of the low-resolution heatmap.
    Fcdd,
    /// Pixel-wise objective on the upsampled heatmap against ground-truth maps.
    FcddPixel,
}

impl LossMode {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "hsc" => Ok(LossMode::Hsc),
            "fcdd" => Ok(LossMode::Fcdd),
            "fcdd_pixel" => Ok(LossMode::FcddPixel),
            other => Err(config_err!("unknown loss '{other}' (hsc | fcdd | fcdd_pixel)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Hsc => "hsc",
            LossMode::Fcdd => "fcdd",
            LossMode::FcddPixel => "fcdd_pixel",
        }
    }
}

/// `√(s + 1) − 1` for a squared norm `s`, written to avoid cancellation.
fn huber_from_sq<T: Element>(s: T) -> T {
    s / ((s + T::one()).sqrt() + T::one())
}

/// Upper end of the anomalous term, `−log(1 − e^{−1e−6})` ≈ 13.8.
pub fn log_cap<T: Element>() -> T {
    anomalous_term(T::zero())
}

fn anomalous_term<T: Element>(d: T) -> T {
    let d = d.max(T::from_f64_lossy(MIN_ANOMALY_DISTANCE));
    // log(1 − e^{−d}) evaluated on whichever side keeps precision
    if d < T::from_f64_lossy(std::f64::consts::LN_2) {
        -(-(-d).exp_m1()).ln()
    } else {
        -(-(-d).exp()).ln_1p()
    }
}

fn anomalous_slope<T: Element>(d: T) -> T {
    if d < T::from_f64_lossy(MIN_ANOMALY_DISTANCE) {
        T::zero()
    } else {
        -T::one() / d.exp_m1()
    }
}

/// `d` for nominal samples, `−log(1 − exp(−d))` (clamped) for anomalies.
pub fn one_class_term<T: Element>(d: T, anomalous: bool) -> T {
    if anomalous {
        anomalous_term(d)
    } else {
        d
    }
}

fn check_finite<T: Element>(values: &[T], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(numeric_err!("{what}: non-finite input"))
    }
}

/// `h(a) = √(‖a‖² + 1) − 1`.
pub fn pseudo_huber<T: Element>(a: &[T]) -> Result<T> {
    check_finite(a, "pseudo_huber")?;
    Ok(huber_from_sq(a.iter().map(|&v| v * v).sum()))
}

/// Elementwise `A = √(φ² + 1) − 1`.
pub fn heatmap_a<T: Element>(phi: &Tensor<T>) -> Result<Tensor<T>> {
    check_finite(phi.data(), "heatmap_a")?;
    Ok(phi.map(|v| huber_from_sq(v * v)))
}

/// `‖A‖₁` of one heatmap (or any nonnegative map).
pub fn anomaly_score<T: Element>(a: &[T]) -> T {
    a.iter().map(|v| v.abs()).sum()
}

/// Per-sample anomaly scores of a `[b, ...]` heatmap batch.
pub fn anomaly_scores<T: Element>(a: &Tensor<T>) -> Vec<T> {
    let b = a.shape()[0];
    let inner = a.len() / b;
    a.data().chunks(inner).map(anomaly_score).collect()
}

fn check_batch(b: usize, labels: usize) -> Result<()> {
    if b == 0 || labels == 0 {
        return Err(usage_err!("loss over an empty batch"));
    }
    if b != labels {
        return Err(usage_err!("batch of {b} samples with {labels} labels"));
    }
    Ok(())
}

/// Mean over the batch of `one_class_term(mean(A_i), y_i)`.
pub fn fcdd_loss<T: Element>(a: &Tensor<T>, labels: &[bool]) -> Result<T> {
    let b = a.shape()[0];
    check_batch(b, labels.len())?;
    check_finite(a.data(), "fcdd_loss")?;
    if a.data().iter().any(|&v| v < T::zero()) {
        return Err(usage_err!("fcdd_loss needs a nonnegative heatmap"));
    }
    let inner = a.len() / b;
    let n = T::from_usize(inner).unwrap();
    let total: T = a
        .data()
        .chunks(inner)
        .zip(labels)
        .map(|(s, &y)| one_class_term(s.iter().copied().sum::<T>() / n, y))
        .sum();
    Ok(total / T::from_usize(b).unwrap())
}

/// Hypersphere objective on `[b, d]` outputs (the center lives in the
/// network's last bias, so distances are measured from the origin).
pub fn hsc_loss<T: Element>(phi: &Tensor<T>, labels: &[bool]) -> Result<T> {
    let b = phi.shape()[0];
    check_batch(b, labels.len())?;
    check_finite(phi.data(), "hsc_loss")?;
    let inner = phi.len() / b;
    let total: T = phi
        .data()
        .chunks(inner)
        .zip(labels)
        .map(|(s, &y)| one_class_term(huber_from_sq(s.iter().map(|&v| v * v).sum()), y))
        .sum();
    Ok(total / T::from_usize(b).unwrap())
}

fn pixel_term<T: Element>(a: &[T], y: &[T]) -> T {
    let m = T::from_usize(a.len()).unwrap();
    let mut nominal = T::zero();
    let mut anomalous = T::zero();
    let mut any = false;
    for (&av, &yv) in a.iter().zip(y) {
        if yv > T::zero() {
            anomalous = anomalous + av;
            any = true;
        } else {
            nominal = nominal + av;
        }
    }
    let mut t = nominal / m;
    if any {
        t = t + anomalous_term(anomalous / m);
    }
    t
}

fn check_masks<T: Element>(a: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if a.shape() != y.shape() {
        return Err(usage_err!(
            "heatmap shape {:?} does not match ground-truth shape {:?}",
            a.shape(),
            y.shape()
        ));
    }
    if y.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(usage_err!("ground-truth maps must be binary"));
    }
    Ok(())
}

/// Pixel-wise objective on full-resolution heatmaps `A′` with binary maps `Y`:
/// per sample `(1/m)Σ(1−Y)A′ − log(1 − exp(−(1/m)ΣY·A′))`, where the log term
/// is dropped for samples without anomalous pixels. Mean over the batch.
pub fn pixel_loss<T: Element>(a_prime: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
    check_masks(a_prime, y)?;
    check_finite(a_prime.data(), "pixel_loss")?;
    let b = a_prime.shape()[0];
    check_batch(b, b)?;
    let inner = a_prime.len() / b;
    let total: T = a_prime
        .data()
        .chunks(inner)
        .zip(y.data().chunks(inner))
        .map(|(a, y)| pixel_term(a, y))
        .sum();
    Ok(total / T::from_usize(b).unwrap())
}

struct HuberMapFn;

impl<T: Element> Function<T> for HuberMapFn {
    fn name(&self) -> &'static str {
        "pseudo_huber_map"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&x, &g)| g * x / (x * x + T::one()).sqrt())
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), data)?)])
    }
}

/// `[b, ...] → [b]`, `√(‖x_i‖² + 1) − 1` per sample.
struct HuberNormFn;

impl<T: Element> Function<T> for HuberNormFn {
    fn name(&self) -> &'static str {
        "pseudo_huber_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let b = x.shape()[0];
        let inner = x.len() / b;
        let mut dx = Vec::with_capacity(x.len());
        for i in 0..b {
            // d/dx √(s+1) = x / √(s+1) and √(s+1) = h + 1
            let scale = grad_out.data()[i] / (output.data()[i] + T::one());
            dx.extend(x.data()[i * inner..(i + 1) * inner].iter().map(|&v| v * scale));
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx)?)])
    }
}

struct SampleMeanFn;

impl<T: Element> Function<T> for SampleMeanFn {
    fn name(&self) -> &'static str {
        "sample_mean"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let b = x.shape()[0];
        let inner = x.len() / b;
        let n = T::from_usize(inner).unwrap();
        let dx = (0..b)
            .flat_map(|i| std::iter::repeat_n(grad_out.data()[i] / n, inner))
            .collect();
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), dx)?)])
    }
}

struct OneClassFn {
    labels: Vec<bool>,
}

impl<T: Element> Function<T> for OneClassFn {
    fn name(&self) -> &'static str {
        "one_class_term"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let d = inputs[0];
        let data = d
            .data()
            .iter()
            .zip(&self.labels)
            .zip(grad_out.data())
            .map(|((&dv, &y), &g)| if y { g * anomalous_slope(dv) } else { g })
            .collect();
        Ok(vec![Some(Tensor::new(d.shape().to_vec(), data)?)])
    }

    fn kink_signature(&self, inputs: &[&Tensor<T>], state: &mut u64) {
        let floor = T::from_f64_lossy(MIN_ANOMALY_DISTANCE);
        for &d in inputs[0].data() {
            mix(state, u64::from(d < floor));
        }
    }
}

struct PixelTermFn<T> {
    masks: Tensor<T>,
}

impl<T: Element> Function<T> for PixelTermFn<T> {
    fn name(&self) -> &'static str {
        "pixel_term"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let a = inputs[0];
        let b = a.shape()[0];
        let inner = a.len() / b;
        let m = T::from_usize(inner).unwrap();
        let mut dx = Vec::with_capacity(a.len());
        for i in 0..b {
            let av = &a.data()[i * inner..(i + 1) * inner];
            let yv = &self.masks.data()[i * inner..(i + 1) * inner];
            let (mut s, mut any) = (T::zero(), false);
            for (&x, &y) in av.iter().zip(yv) {
                if y > T::zero() {
                    s = s + x;
                    any = true;
                }
            }
            let g = grad_out.data()[i];
            let slope_anom = if any { anomalous_slope(s / m) } else { T::zero() };
            dx.extend(yv.iter().map(|&y| {
                if y > T::zero() {
                    g * slope_anom / m
                } else {
                    g / m
                }
            }));
        }
        Ok(vec![Some(Tensor::new(a.shape().to_vec(), dx)?)])
    }

    fn kink_signature(&self, inputs: &[&Tensor<T>], state: &mut u64) {
        let a = inputs[0];
        let b = a.shape()[0];
        let inner = a.len() / b;
        let m = T::from_usize(inner).unwrap();
        let floor = T::from_f64_lossy(MIN_ANOMALY_DISTANCE);
        for i in 0..b {
            let s: T = a.data()[i * inner..(i + 1) * inner]
                .iter()
                .zip(&self.masks.data()[i * inner..(i + 1) * inner])
                .map(|(&x, &y)| x * y)
                .sum();
            mix(state, u64::from(s / m < floor));
        }
    }
}

impl<T: Element> Tape<T> {
    /// Elementwise `√(x² + 1) − 1`.
    pub fn pseudo_huber_map(&mut self, x: Var) -> Result<Var> {
        let out = heatmap_a(self.value(x))?;
        self.push(out, vec![x], Box::new(HuberMapFn))
    }

    /// Per-sample `√(‖x_i‖² + 1) − 1`, `[b, ...] → [b]`.
    pub fn pseudo_huber_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let b = t.shape()[0];
        let inner = t.len() / b;
        let out: Vec<T> = t
            .data()
            .chunks(inner)
            .map(|s| huber_from_sq(s.iter().map(|&v| v * v).sum()))
            .collect();
        self.push(Tensor::new(vec![b], out)?, vec![x], Box::new(HuberNormFn))
    }

    /// Per-sample mean, `[b, ...] → [b]`.
    pub fn sample_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let b = t.shape()[0];
        let inner = t.len() / b;
        let n = T::from_usize(inner).unwrap();
        let out: Vec<T> = t.data().chunks(inner).map(|s| s.iter().copied().sum::<T>() / n).collect();
        self.push(Tensor::new(vec![b], out)?, vec![x], Box::new(SampleMeanFn))
    }

    /// `[b]` distances → `[b]` one-class loss terms.
    pub fn one_class_term(&mut self, d: Var, labels: &[bool]) -> Result<Var> {
        let t = self.value(d);
        check_batch(t.len(), labels.len())?;
        let out: Vec<T> = t.data().iter().zip(labels).map(|(&v, &y)| one_class_term(v, y)).collect();
        let func = OneClassFn {
            labels: labels.to_vec(),
        };
        self.push(Tensor::new(vec![labels.len()], out)?, vec![d], Box::new(func))
    }

    /// Per-sample pixel objective, `[b, ...]` heatmaps with same-shape binary masks → `[b]`.
    pub fn pixel_term(&mut self, a_prime: Var, masks: &Tensor<T>) -> Result<Var> {
        let t = self.value(a_prime);
        check_masks(t, masks)?;
        let b = t.shape()[0];
        let inner = t.len() / b;
        let out: Vec<T> = t
            .data()
            .chunks(inner)
            .zip(masks.data().chunks(inner))
            .map(|(a, y)| pixel_term(a, y))
            .collect();
        let func = PixelTermFn {
            masks: masks.clone(),
        };
        self.push(Tensor::new(vec![b], out)?, vec![a_prime], Box::new(func))
    }

    /// FCDD objective from the heatmap `A` (`[b,1,u,v]`).
    pub fn fcdd_loss(&mut self, a: Var, labels: &[bool]) -> Result<Var> {
        check_batch(self.value(a).shape()[0], labels.len())?;
        let d = self.sample_mean(a)?;
        let terms = self.one_class_term(d, labels)?;
        self.mean(terms)
    }

    /// HSC objective from raw outputs `φ` (`[b, ...]`, flattened per sample).
    pub fn hsc_loss(&mut self, phi: Var, labels: &[bool]) -> Result<Var> {
        check_batch(self.value(phi).shape()[0], labels.len())?;
        let d = self.pseudo_huber_norm(phi)?;
        let terms = self.one_class_term(d, labels)?;
        self.mean(terms)
    }

    /// Pixel-wise objective from full-resolution heatmaps `A′`.
    pub fn pixel_loss(&mut self, a_prime: Var, masks: &Tensor<T>) -> Result<Var> {
        let terms = self.pixel_term(a_prime, masks)?;
        self.mean(terms)
    }
}
