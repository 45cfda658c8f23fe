//! Shared helpers for the integration tests and the acceptance suite.
#![allow(dead_code)]

use fcdd::loss::LossMode;
use fcdd::model::{ArchitectureSpec, FcnModel, InputShape, LayerSpec};
use fcdd::numerics::{Element, Mode, Tape, Tensor, Var};
use fcdd::upsample::UpsamplePlan;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random small FCN: 2–4 convs with optional batchnorm, leaky ReLU and
/// pooling, ending in a 1-channel conv. Kernels are never smaller than
/// strides, so receptive fields have no holes.
pub fn random_spec(r: &mut ChaCha8Rng, min_size: usize, max_size: usize, allow_bn: bool) -> ArchitectureSpec {
    loop {
        let c0 = r.random_range(1..=2);
        let h = r.random_range(min_size..=max_size);
        let w = r.random_range(min_size..=max_size);
        let convs = r.random_range(2..=4);
        let mut layers = Vec::new();
        let mut c = c0;
        for i in 0..convs {
            let last = i == convs - 1;
            let out = if last { 1 } else { r.random_range(2..=3) };
            let k = r.random_range(1..=3usize);
            let s = if last { 1 } else { r.random_range(1..=2usize).min(k) };
            let p = r.random_range(0..=k / 2);
            layers.push(LayerSpec::conv(c, out, k, s, p));
            c = out;
            if last {
                break;
            }
            if allow_bn && r.random_bool(0.5) {
                layers.push(LayerSpec::BatchNorm);
            }
            layers.push(LayerSpec::lrelu(r.random_range(0.05..0.3)));
            if r.random_bool(0.3) {
                let k = r.random_range(2..=3);
                layers.push(LayerSpec::MaxPool {
                    kernel: k,
                    stride: 2,
                    padding: r.random_range(0..=k / 2),
                });
            }
        }
        if let Ok(spec) = ArchitectureSpec::new(layers, InputShape::new(c0, h, w)) {
            return spec;
        }
    }
}

pub fn random_tensor<T: Element>(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(r.random_range(-scale..scale)))
}

/// A batch with inputs, labels (both classes) and binary masks.
pub struct GradProblem {
    pub spec: ArchitectureSpec,
    pub x: Tensor<f64>,
    pub labels: Vec<bool>,
    pub masks: Tensor<f64>,
    pub sigma: f64,
}

impl GradProblem {
    pub fn random(r: &mut ChaCha8Rng) -> Self {
        let spec = random_spec(r, 6, 10, true);
        let inp = spec.input();
        let b = r.random_range(3..=4);
        let x = random_tensor(r, &[b, inp.channels, inp.height, inp.width], 1.0);
        let mut labels: Vec<bool> = (0..b).map(|_| r.random_bool(0.5)).collect();
        labels[0] = false;
        labels[1] = true;
        let mut masks = Tensor::zeros(&[b, 1, inp.height, inp.width]);
        let plane = inp.height * inp.width;
        for (i, &l) in labels.iter().enumerate() {
            if l {
                for v in &mut masks.data_mut()[i * plane..(i + 1) * plane] {
                    *v = if r.random_bool(0.3) { 1.0 } else { 0.0 };
                }
            }
        }
        Self {
            spec,
            x,
            labels,
            masks,
            sigma: r.random_range(0.8..2.0),
        }
    }

    /// Records the loss on a fresh tape; returns the loss and parameter vars.
    pub fn record<T: Element>(&self, model: &mut FcnModel<T>, mode: LossMode) -> (Tape<T>, Var, Vec<Var>) {
        let mut tape = Tape::new();
        let input = tape.constant(self.x.cast());
        let fwd = model.forward_tape(&mut tape, input, Mode::Train, true).unwrap();
        let loss = match mode {
            LossMode::Hsc => tape.hsc_loss(fwd.output, &self.labels).unwrap(),
            LossMode::Fcdd => {
                let a = tape.pseudo_huber_map(fwd.output).unwrap();
                tape.fcdd_loss(a, &self.labels).unwrap()
            }
            LossMode::FcddPixel => {
                let a = tape.pseudo_huber_map(fwd.output).unwrap();
                let [_, _, u, v] = tape.value(a).dims4().unwrap();
                let inp = self.spec.input();
                let plan =
                    UpsamplePlan::new(&model.receptive_field(), self.sigma, (u, v), (inp.height, inp.width)).unwrap();
                let up = tape.upsample(a, &plan).unwrap();
                tape.pixel_loss(up, &self.masks.cast()).unwrap()
            }
        };
        (tape, loss, fwd.params)
    }

    pub fn analytic<T: Element>(&self, model: &FcnModel<T>, mode: LossMode) -> Vec<Tensor<T>> {
        let mut m = model.clone();
        let (mut tape, loss, params) = self.record(&mut m, mode);
        tape.backward(loss).unwrap();
        params
            .iter()
            .map(|&p| tape.take_grad(p).unwrap_or_else(|| Tensor::zeros(tape.value(p).shape())))
            .collect()
    }

    fn loss_and_kinks(&self, model: &FcnModel<f64>, mode: LossMode) -> (f64, u64) {
        let mut m = model.clone();
        let (tape, loss, _) = self.record(&mut m, mode);
        (tape.value(loss).data()[0], tape.kink_signature())
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradStats {
    pub checked: usize,
    pub skipped: usize,
    pub failed: usize,
    pub worst: f64,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares analytic gradients of a 32- and a 64-bit copy of one model with
/// 64-bit central differences. Entries whose branch pattern changes between
/// `θ ± h` are skipped. Relative errors use the denominator floor
/// `floor · max(1, ‖g‖∞)` so entries that are zero by construction are judged
/// against the gradient's overall scale.
pub fn gradcheck(p: &GradProblem, seed: u64, mode: LossMode, tol32: f64, tol64: f64, floor: f64) -> (GradStats, GradStats) {
    let m32 = FcnModel::<f32>::build(&p.spec, seed).unwrap();
    let mut m64: FcnModel<f64> = m32.cast();
    // jitter the init so biases and batchnorm parameters are not at symmetric points
    let mut r = rng(seed ^ 0x9e37);
    for t in m64.parameters_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.1..0.1);
            *v = f64::from(*v as f32);
        }
    }
    let m32: FcnModel<f32> = m64.cast();
    let g32 = p.analytic(&m32, mode);
    let g64 = p.analytic(&m64, mode);
    let (_, base_sig) = p.loss_and_kinks(&m64, mode);
    let h = 1e-5;
    let mut numeric = Vec::new();
    let mut skipped = 0;
    let count = m64.parameters().len();
    for ti in 0..count {
        let len = m64.parameters()[ti].1.len();
        for j in 0..len {
            let orig = m64.parameters()[ti].1.data()[j];
            m64.parameters_mut()[ti].data_mut()[j] = orig + h;
            let (lp, sp) = p.loss_and_kinks(&m64, mode);
            m64.parameters_mut()[ti].data_mut()[j] = orig - h;
            let (lm, sm) = p.loss_and_kinks(&m64, mode);
            m64.parameters_mut()[ti].data_mut()[j] = orig;
            if sp != base_sig || sm != base_sig {
                skipped += 1;
                continue;
            }
            numeric.push((ti, j, (lp - lm) / (2.0 * h)));
        }
    }
    let scale = numeric.iter().fold(1.0f64, |a, &(_, _, n)| a.max(n.abs()));
    let floor = floor * scale;
    let mut s32 = GradStats { skipped, ..Default::default() };
    let mut s64 = s32;
    for &(ti, j, n) in &numeric {
        for (stats, analytic, tol) in [
            (&mut s32, f64::from(g32[ti].data()[j]), tol32),
            (&mut s64, g64[ti].data()[j], tol64),
        ] {
            let e = rel_err(analytic, n, floor);
            stats.checked += 1;
            stats.worst = stats.worst.max(e);
            if e > tol {
                if std::env::var_os("FCDD_GRAD_DEBUG").is_some() {
                    eprintln!("param {ti}[{j}] analytic {analytic:e} numeric {n:e}");
                }
                stats.failed += 1;
            }
        }
    }
    (s32, s64)
}

/// Empirical receptive fields: with unit weights, zero biases and a zero
/// image, lighting one input pixel makes exactly the outputs that see it
/// positive. Returns, per output pixel, the bounding box of input pixels that
/// reach it and whether that set is the full box.
pub fn perturbation_windows(spec: &ArchitectureSpec) -> Vec<Vec<Option<((usize, usize), (usize, usize))>>> {
    let mut model = FcnModel::<f64>::build(spec, 0).unwrap();
    // parameters come in (weight, bias) and (gamma, beta) pairs
    for (i, t) in model.parameters_mut().into_iter().enumerate() {
        let shape = t.shape().to_vec();
        *t = Tensor::full(&shape, if i % 2 == 0 { 1.0 } else { 0.0 });
    }
    let inp = spec.input();
    let (h, w) = (inp.height, inp.width);
    let (u, v) = spec.output_size().unwrap();
    let mut hits = vec![vec![Vec::new(); v]; u];
    for y in 0..h {
        for x in 0..w {
            let mut img = Tensor::<f64>::zeros(&[1, inp.channels, h, w]);
            for c in 0..inp.channels {
                img.data_mut()[(c * h + y) * w + x] = 1.0;
            }
            let out = model.forward(&img, Mode::Eval).unwrap();
            for i in 0..u {
                for j in 0..v {
                    if out.data()[i * v + j] > 0.0 {
                        hits[i][j].push((y, x));
                    }
                }
            }
        }
    }
    hits.into_iter()
        .map(|row| {
            row.into_iter()
                .map(|px| {
                    if px.is_empty() {
                        return None;
                    }
                    let y0 = px.iter().map(|p| p.0).min().unwrap();
                    let y1 = px.iter().map(|p| p.0).max().unwrap();
                    let x0 = px.iter().map(|p| p.1).min().unwrap();
                    let x1 = px.iter().map(|p| p.1).max().unwrap();
                    assert_eq!(px.len(), (y1 - y0 + 1) * (x1 - x0 + 1), "receptive field has holes");
                    Some(((y0, y1), (x0, x1)))
                })
                .collect()
        })
        .collect()
}

/// True when no strided layer drops trailing rows or columns, so clipped
/// analytic windows coincide with the pixels that actually reach each output.
pub fn tiles_exactly(spec: &ArchitectureSpec) -> bool {
    let inp = spec.input();
    let (mut h, mut w) = (inp.height, inp.width);
    for l in spec.layers().iter().filter(|l| l.is_spatial()) {
        let (k, s, p) = l.geometry();
        if (h + 2 * p - k) % s != 0 || (w + 2 * p - k) % s != 0 {
            return false;
        }
        h = (h + 2 * p - k) / s + 1;
        w = (w + 2 * p - k) / s + 1;
    }
    true
}

/// Compares analytic windows (clipped to the image) with the empirical ones.
pub fn rf_matches(spec: &ArchitectureSpec) -> bool {
    let rf = fcdd::model::receptive_field(spec);
    let inp = spec.input();
    let clip = |lo: isize, hi: isize, n: usize| -> Option<(usize, usize)> {
        let lo = lo.max(0);
        let hi = hi.min(n as isize - 1);
        (lo <= hi).then_some((lo as usize, hi as usize))
    };
    let empirical = perturbation_windows(spec);
    for (i, row) in empirical.iter().enumerate() {
        for (j, got) in row.iter().enumerate() {
            let ((y0, y1), (x0, x1)) = rf.window(i, j);
            let expected = match (clip(y0, y1, inp.height), clip(x0, x1, inp.width)) {
                (Some(a), Some(b)) => Some((a, b)),
                _ => None,
            };
            if *got != expected {
                return false;
            }
        }
    }
    true
}
