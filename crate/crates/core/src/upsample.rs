//! Receptive-field upsampling of low-resolution heatmaps.
//!
//! Each output pixel `a` of `A` spreads `a · G(c, σ)` over the input image,
//! where `c` is the centre of its receptive field. With kernel size equal to
//! the receptive field and stride equal to the cumulative stride this is a
//! strided transposed convolution followed by a crop.

use crate::error::{config_err, Result};
use crate::model::RfInfo;
use crate::numerics::{transposed_conv2d, Element, Function, Tape, Tensor, Var};

/// Normalized 2-d Gaussian, `k × k` with odd `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    size: usize,
    sigma: f64,
    values: Vec<f64>,
}

impl GaussianKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.size, self.size],
            self.values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
        .expect("kernel shape is consistent")
    }
}

/// Entry `(x, y)` ∝ `exp(−((x−c)² + (y−c)²) / 2σ²)` with `c = (size−1)/2`,
/// normalized to sum 1.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<GaussianKernel> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(config_err!("gaussian kernel size must be odd, got {size}"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(config_err!("gaussian sigma must be positive, got {sigma}"));
    }
    let c = (size as f64 - 1.0) / 2.0;
    let mut values = Vec::with_capacity(size * size);
    for x in 0..size {
        for y in 0..size {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            values.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v /= total);
    Ok(GaussianKernel {
        size,
        sigma,
        values,
    })
}

/// Geometry of one upsampling: fixed kernel, stride and crop.
#[derive(Debug, Clone, PartialEq)]
pub struct UpsamplePlan {
    kernel: GaussianKernel,
    stride: usize,
    /// Image coordinate of the top-left kernel cell of output pixel (0, 0).
    origin: (isize, isize),
    low: (usize, usize),
    out: (usize, usize),
}

impl UpsamplePlan {
    /// Kernel size is the receptive field (reduced by one when even), stride the
    /// cumulative stride, and kernel centres sit at the receptive-field centres.
    pub fn new(rf: &RfInfo, sigma: f64, low: (usize, usize), out: (usize, usize)) -> Result<Self> {
        let size = if rf.rf_size.is_multiple_of(2) { rf.rf_size - 1 } else { rf.rf_size };
        let kernel = gaussian_kernel(size.max(1), sigma)?;
        let (u, v) = low;
        let (h, w) = out;
        if u == 0 || v == 0 || h == 0 || w == 0 {
            return Err(config_err!("upsampling needs nonempty maps, got {low:?} -> {out:?}"));
        }
        let slack = rf.rf_size as f64 / 2.0;
        let first = rf.center(0, 0);
        let last = rf.center(u - 1, v - 1);
        let fits = |lo: f64, hi: f64, extent: usize| lo >= -slack && hi <= extent as f64 - 1.0 + slack;
        if !fits(first.0, last.0, h) || !fits(first.1, last.1, w) {
            return Err(config_err!(
                "a {u}x{v} map with stride {} does not align with a {h}x{w} image",
                rf.cumulative_stride
            ));
        }
        let half = (kernel.size() / 2) as isize;
        let origin = (first.0.floor() as isize - half, first.1.floor() as isize - half);
        Ok(Self {
            kernel,
            stride: rf.cumulative_stride,
            origin,
            low,
            out,
        })
    }

    pub fn kernel(&self) -> &GaussianKernel {
        &self.kernel
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_shape(&self) -> (usize, usize) {
        self.out
    }

    /// Image coordinate of the kernel centre for low-res pixel `(i, j)`.
    pub fn kernel_center(&self, i: usize, j: usize) -> (isize, isize) {
        let half = (self.kernel.size() / 2) as isize;
        let s = self.stride as isize;
        (
            self.origin.0 + half + i as isize * s,
            self.origin.1 + half + j as isize * s,
        )
    }

    fn check_input<T: Element>(&self, a: &Tensor<T>) -> Result<usize> {
        let [b, c, u, v] = a.dims4()?;
        if c != 1 || (u, v) != self.low {
            return Err(config_err!(
                "upsampling plan expects [b,1,{},{}], got {:?}",
                self.low.0,
                self.low.1,
                a.shape()
            ));
        }
        Ok(b)
    }

    /// Strided transposed convolution, then crop to the image.
    pub fn apply<T: Element>(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.check_input(a)?;
        let full = transposed_conv2d(a, &self.kernel.to_tensor(), self.stride)?;
        let [_, _, fh, fw] = full.dims4()?;
        let (h, w) = self.out;
        let mut out = vec![T::zero(); b * h * w];
        for bi in 0..b {
            let src = &full.data()[bi * fh * fw..][..fh * fw];
            let dst = &mut out[bi * h * w..][..h * w];
            for y in 0..h {
                let sy = y as isize - self.origin.0;
                if sy < 0 || sy >= fh as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x as isize - self.origin.1;
                    if sx >= 0 && sx < fw as isize {
                        dst[y * w + x] = src[sy as usize * fw + sx as usize];
                    }
                }
            }
        }
        Tensor::new(vec![b, 1, h, w], out)
    }

    /// The explicit per-pixel loop: `A′ += a · G(c, σ)` for every `a` in `A`.
    pub fn apply_loop<T: Element>(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.check_input(a)?;
        let (u, v) = self.low;
        let (h, w) = self.out;
        let k = self.kernel.size();
        let half = (k / 2) as isize;
        let mut out = vec![T::zero(); b * h * w];
        for bi in 0..b {
            let dst = &mut out[bi * h * w..][..h * w];
            for i in 0..u {
                for j in 0..v {
                    let val = a.data()[(bi * u + i) * v + j];
                    let (cy, cx) = self.kernel_center(i, j);
                    for ky in 0..k {
                        let y = cy - half + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let x = cx - half + kx as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let g = T::from_f64_lossy(self.kernel.at(ky, kx));
                            let cell = &mut dst[y as usize * w + x as usize];
                            *cell = *cell + val * g;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![b, 1, h, w], out)
    }

    /// Adjoint of [`apply`](Self::apply): gathers image gradients back onto
    /// the low-resolution grid.
    fn adjoint<T: Element>(&self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let [b, _, h, w] = g.dims4()?;
        let (u, v) = self.low;
        let k = self.kernel.size();
        let half = (k / 2) as isize;
        let kernel: Vec<T> = self.kernel.values().iter().map(|&x| T::from_f64_lossy(x)).collect();
        let mut out = vec![T::zero(); b * u * v];
        for bi in 0..b {
            let src = &g.data()[bi * h * w..][..h * w];
            for i in 0..u {
                for j in 0..v {
                    let (cy, cx) = self.kernel_center(i, j);
                    let mut acc = T::zero();
                    for ky in 0..k {
                        let y = cy - half + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let x = cx - half + kx as isize;
                            if x >= 0 && x < w as isize {
                                acc = acc + kernel[ky * k + kx] * src[y as usize * w + x as usize];
                            }
                        }
                    }
                    out[(bi * u + i) * v + j] = acc;
                }
            }
        }
        Tensor::new(vec![b, 1, u, v], out)
    }
}

/// One-shot convenience around [`UpsamplePlan`].
pub fn upsample<T: Element>(a: &Tensor<T>, rf: &RfInfo, sigma: f64, out: (usize, usize)) -> Result<Tensor<T>> {
    let [_, _, u, v] = a.dims4()?;
    UpsamplePlan::new(rf, sigma, (u, v), out)?.apply(a)
}

struct UpsampleFn {
    plan: UpsamplePlan,
}

impl<T: Element> Function<T> for UpsampleFn {
    fn name(&self) -> &'static str {
        "upsample"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(self.plan.adjoint(grad_out)?)])
    }
}

impl<T: Element> Tape<T> {
    /// Differentiable upsampling (the kernel itself is fixed).
    pub fn upsample(&mut self, a: Var, plan: &UpsamplePlan) -> Result<Var> {
        let out = plan.apply(self.value(a))?;
        self.push(out, vec![a], Box::new(UpsampleFn { plan: plan.clone() }))
    }
}

/// Mirror index without repeating the edge pixel.
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Stride-1 smoothing of `[b,1,h,w]` (or `[b,c,h,w]`) maps with a normalized
/// Gaussian kernel and reflective borders.
pub fn blur_with_kernel<T: Element>(maps: &Tensor<T>, kernel: &GaussianKernel) -> Result<Tensor<T>> {
    let [b, c, h, w] = maps.dims4()?;
    let k = kernel.size();
    let half = (k / 2) as isize;
    let kv: Vec<T> = kernel.values().iter().map(|&x| T::from_f64_lossy(x)).collect();
    let mut out = vec![T::zero(); maps.len()];
    for plane in 0..b * c {
        let src = &maps.data()[plane * h * w..][..h * w];
        let dst = &mut out[plane * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for ky in 0..k {
                    let sy = reflect(y as isize + ky as isize - half, h);
                    for kx in 0..k {
                        let sx = reflect(x as isize + kx as isize - half, w);
                        acc = acc + kv[ky * k + kx] * src[sy * w + sx];
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    }
    Tensor::new(maps.shape().to_vec(), out)
}

/// Kernel size used by [`blur`] for a given σ (truncated at 3σ).
pub fn blur_kernel_size(sigma: f64) -> usize {
    2 * (3.0 * sigma).ceil().max(1.0) as usize + 1
}

pub fn blur<T: Element>(maps: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    blur_with_kernel(maps, &gaussian_kernel(blur_kernel_size(sigma), sigma)?)
}
