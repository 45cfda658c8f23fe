//! Convolutional layer kernels and their tape-recording wrappers.
//!
//! Every kernel exists as a pure `Tensor -> Tensor` function and as a
//! `Tape` method that records the backward rule.

use super::element::Element;
use super::tape::{mix, Function, Tape, Var};
use super::tensor::Tensor;
use crate::error::{config_err, Result};

/// Batchnorm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(config_err!("kernel {k} / stride {stride} must be positive"));
    }
    if k > input + 2 * pad {
        return Err(config_err!(
            "kernel {k} does not fit input extent {input} with padding {pad}"
        ));
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one sample `[c,h,w]` into a `[c*kh*kw, oh*ow]` patch matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.cols();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.cols();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeom)> {
    let [b, c, h, w] = input.dims4()?;
    let [o, wc, kh, kw] = weight.dims4()?;
    if wc != c {
        return Err(config_err!(
            "conv weight expects {wc} input channels, input has {c}"
        ));
    }
    let oh = out_extent(h, kh, stride, pad)?;
    let ow = out_extent(w, kw, stride, pad)?;
    Ok((
        b,
        o,
        ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        },
    ))
}

/// 2-d cross-correlation with zero padding: `[b,c,h,w] * [o,c,k,k] -> [b,o,h',w']`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (b, o, g) = conv_geom(input, weight, stride, padding)?;
    if let Some(bias) = bias {
        if bias.len() != o {
            return Err(config_err!("conv bias has {} entries, expected {o}", bias.len()));
        }
    }
    let (rows, n) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); b * o * n];
    let mut cols = vec![T::zero(); rows * n];
    let in_stride = g.c * g.h * g.w;
    for bi in 0..b {
        im2col(&input.data()[bi * in_stride..][..in_stride], &g, &mut cols);
        let dst = &mut out[bi * o * n..][..o * n];
        if let Some(bias) = bias {
            for (oc, chunk) in dst.chunks_mut(n).enumerate() {
                chunk.fill(bias.data()[oc]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            o,
            rows,
            n,
            T::one(),
            weight.data(),
            (rows as isize, 1),
            &cols,
            (n as isize, 1),
            beta,
            dst,
        );
    }
    let t = Tensor::new(vec![b, o, g.oh, g.ow], out)?;
    t.ensure_finite("conv2d")?;
    Ok(t)
}

struct Conv2dFn {
    stride: usize,
    padding: usize,
}

impl<T: Element> Function<T> for Conv2dFn {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (input, weight) = (inputs[0], inputs[1]);
        let (b, o, g) = conv_geom(input, weight, self.stride, self.padding)?;
        let (rows, n) = (g.rows(), g.cols());
        let in_stride = g.c * g.h * g.w;
        let mut cols = vec![T::zero(); rows * n];
        let mut dx = needs[0].then(|| vec![T::zero(); input.len()]);
        let mut dw = needs[1].then(|| vec![T::zero(); weight.len()]);
        let has_bias = inputs.len() > 2;
        let mut db = (has_bias && needs[2]).then(|| vec![T::zero(); o]);
        for bi in 0..b {
            let go = &grad_out.data()[bi * o * n..][..o * n];
            if let Some(dw) = dw.as_mut() {
                im2col(&input.data()[bi * in_stride..][..in_stride], &g, &mut cols);
                // dW += dOut · colsᵀ
                T::gemm(o, n, rows, T::one(), go, (n as isize, 1), &cols, (1, n as isize), T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                // dCols = Wᵀ · dOut
                T::gemm(rows, o, n, T::one(), weight.data(), (1, rows as isize), go, (n as isize, 1), T::zero(), &mut cols);
                col2im(&cols, &g, &mut dx[bi * in_stride..][..in_stride]);
            }
            if let Some(db) = db.as_mut() {
                for (oc, chunk) in go.chunks(n).enumerate() {
                    db[oc] = db[oc] + chunk.iter().copied().sum();
                }
            }
        }
        let mut grads = vec![
            dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
            dw.map(|d| Tensor::new(weight.shape().to_vec(), d)).transpose()?,
        ];
        if has_bias {
            grads.push(db.map(|d| Tensor::new(vec![o], d)).transpose()?);
        }
        Ok(grads)
    }
}

/// Max pooling; padded cells never win. Returns the pooled tensor and, per
/// output cell, the flat input index of the first (scan-order) maximum.
pub fn maxpool2d_with_argmax<T: Element>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = input.dims4()?;
    if padding * 2 > k {
        return Err(config_err!("pool padding {padding} exceeds half the window {k}"));
    }
    let oh = out_extent(h, k, stride, padding)?;
    let ow = out_extent(w, k, stride, padding)?;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    let x = input.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(T, usize)> = None;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        let v = x[idx];
                        if best.is_none_or(|(bv, _)| v > bv) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.ok_or_else(|| config_err!("empty pooling window"))?;
                out.push(v);
                argmax.push(idx);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, oh, ow], out)?, argmax))
}

pub fn maxpool2d<T: Element>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    maxpool2d_with_argmax(input, k, stride, padding).map(|(t, _)| t)
}

struct MaxPoolFn {
    argmax: Vec<usize>,
}

impl<T: Element> Function<T> for MaxPoolFn {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for (&idx, &g) in self.argmax.iter().zip(grad_out.data()) {
            d[idx] = d[idx] + g;
        }
        Ok(vec![Some(dx)])
    }

    fn kink_signature(&self, _inputs: &[&Tensor<T>], state: &mut u64) {
        for &i in &self.argmax {
            mix(state, i as u64);
        }
    }
}

/// Whether batchnorm normalizes with batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance of a batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }
}

struct BnForward<T> {
    out: Tensor<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var_unbiased: Vec<T>,
}

fn bn_forward<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
    mode: Mode,
) -> Result<BnForward<T>> {
    let [b, c, h, w] = input.dims4()?;
    if gamma.len() != c || beta.len() != c || stats.mean.len() != c || stats.var.len() != c {
        return Err(config_err!("batchnorm parameters do not match {c} channels"));
    }
    if mode == Mode::Train && b < 2 {
        return Err(config_err!("batchnorm in train mode needs batch size >= 2, got {b}"));
    }
    let hw = h * w;
    let count = b * hw;
    let n = T::from_usize(count).unwrap();
    let eps = T::from_f64_lossy(BN_EPS);
    let x = input.data();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    let mut batch_mean = vec![T::zero(); c];
    let mut batch_var_unbiased = vec![T::zero(); c];
    for ch in 0..c {
        let plane = |bi: usize| (bi * c + ch) * hw;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = T::zero();
                for bi in 0..b {
                    sum = sum + x[plane(bi)..plane(bi) + hw].iter().copied().sum();
                }
                let mean = sum / n;
                let mut sq = T::zero();
                for bi in 0..b {
                    for &v in &x[plane(bi)..plane(bi) + hw] {
                        sq = sq + (v - mean) * (v - mean);
                    }
                }
                batch_mean[ch] = mean;
                batch_var_unbiased[ch] = if count > 1 {
                    sq / T::from_usize(count - 1).unwrap()
                } else {
                    T::zero()
                };
                (mean, sq / n)
            }
            Mode::Eval => (stats.mean.data()[ch], stats.var.data()[ch]),
        };
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        for bi in 0..b {
            for i in plane(bi)..plane(bi) + hw {
                let xh = (x[i] - mean) * is;
                xhat[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    Ok(BnForward {
        out: Tensor::new(input.shape().to_vec(), out)?,
        xhat,
        inv_std,
        batch_mean,
        batch_var_unbiased,
    })
}

/// Per-channel batch normalization. In train mode the running statistics are
/// updated in place with momentum [`BN_MOMENTUM`].
pub fn batchnorm2d<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let fwd = bn_forward(input, gamma, beta, stats, mode)?;
    if mode == Mode::Train {
        update_running(stats, &fwd);
    }
    Ok(fwd.out)
}

fn update_running<T: Element>(stats: &mut RunningStats<T>, fwd: &BnForward<T>) {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    for (r, &bm) in stats.mean.data_mut().iter_mut().zip(&fwd.batch_mean) {
        *r = (T::one() - m) * *r + m * bm;
    }
    for (r, &bv) in stats.var.data_mut().iter_mut().zip(&fwd.batch_var_unbiased) {
        *r = (T::one() - m) * *r + m * bv;
    }
}

struct BatchNormFn<T> {
    mode: Mode,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Element> Function<T> for BatchNormFn<T> {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let [b, c, h, w] = inputs[0].dims4()?;
        let gamma = inputs[1].data();
        let hw = h * w;
        let n = (b * hw) as f64;
        let dy = grad_out.data();
        // channel reductions accumulate in f64; the input gradient cancels them
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for ch in 0..c {
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    dgamma[ch] += dy[i].as_f64() * self.xhat[i].as_f64();
                    dbeta[ch] += dy[i].as_f64();
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); dy.len()];
            for ch in 0..c {
                let scale = gamma[ch].as_f64() * self.inv_std[ch].as_f64();
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    for i in base..base + hw {
                        let g = match self.mode {
                            Mode::Eval => scale * dy[i].as_f64(),
                            Mode::Train => {
                                scale * (dy[i].as_f64() - dbeta[ch] / n - self.xhat[i].as_f64() * dgamma[ch] / n)
                            }
                        };
                        dx[i] = T::from_f64_lossy(g);
                    }
                }
            }
            dx
        });
        let dgamma: Vec<T> = dgamma.into_iter().map(T::from_f64_lossy).collect();
        let dbeta: Vec<T> = dbeta.into_iter().map(T::from_f64_lossy).collect();
        Ok(vec![
            dx.map(|d| Tensor::new(inputs[0].shape().to_vec(), d)).transpose()?,
            needs[1].then(|| Tensor::new(vec![c], dgamma)).transpose()?,
            needs[2].then(|| Tensor::new(vec![c], dbeta)).transpose()?,
        ])
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(config_err!("leaky relu slope {alpha} outside [0, 1)"));
    }
    Ok(())
}

/// `max(x, αx)` elementwise; `α = 0` is a plain ReLU.
pub fn leaky_relu<T: Element>(input: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    check_alpha(alpha)?;
    let a = T::from_f64_lossy(alpha);
    Ok(input.map(|v| if v > T::zero() { v } else { a * v }))
}

struct LeakyReluFn {
    alpha: f64,
}

impl<T: Element> Function<T> for LeakyReluFn {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let a = T::from_f64_lossy(self.alpha);
        let data = inputs[0]
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&x, &g)| if x > T::zero() { g } else { a * g })
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), data)?)])
    }

    fn kink_signature(&self, inputs: &[&Tensor<T>], state: &mut u64) {
        let mut word = 0u64;
        for (i, &x) in inputs[0].data().iter().enumerate() {
            word = (word << 1) | u64::from(x > T::zero());
            if i % 64 == 63 {
                mix(state, word);
                word = 0;
            }
        }
        mix(state, word);
    }
}

/// Fixed-kernel transposed convolution of single-channel maps:
/// `[b,1,u,v] -> [b,1,(u-1)s+k,(v-1)s+k]`. Overlapping kernel copies add up.
pub fn transposed_conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let [b, c, u, v] = input.dims4()?;
    if c != 1 {
        return Err(config_err!("transposed conv expects one channel, got {c}"));
    }
    let (kh, kw) = match kernel.shape() {
        [kh, kw] => (*kh, *kw),
        s => return Err(config_err!("kernel must be 2-d, got {s:?}")),
    };
    if stride < 1 {
        return Err(config_err!("stride must be >= 1"));
    }
    let oh = (u - 1) * stride + kh;
    let ow = (v - 1) * stride + kw;
    let mut out = vec![T::zero(); b * oh * ow];
    let k = kernel.data();
    for bi in 0..b {
        let src = &input.data()[bi * u * v..][..u * v];
        let dst = &mut out[bi * oh * ow..][..oh * ow];
        for i in 0..u {
            for j in 0..v {
                let a = src[i * v + j];
                if a == T::zero() {
                    continue;
                }
                for ki in 0..kh {
                    let row = &mut dst[(i * stride + ki) * ow + j * stride..][..kw];
                    for (d, &kv) in row.iter_mut().zip(&k[ki * kw..(ki + 1) * kw]) {
                        *d = *d + a * kv;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, 1, oh, ow], out)
}

impl<T: Element> Tape<T> {
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.push(out, parents, Box::new(Conv2dFn { stride, padding }))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let (out, argmax) = maxpool2d_with_argmax(self.value(input), k, stride, padding)?;
        self.push(out, vec![input], Box::new(MaxPoolFn { argmax }))
    }

    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let fwd = bn_forward(self.value(input), self.value(gamma), self.value(beta), stats, mode)?;
        if mode == Mode::Train {
            update_running(stats, &fwd);
        }
        let func = BatchNormFn {
            mode,
            xhat: fwd.xhat,
            inv_std: fwd.inv_std,
        };
        self.push(fwd.out, vec![input, gamma, beta], Box::new(func))
    }

    pub fn leaky_relu(&mut self, input: Var, alpha: f64) -> Result<Var> {
        let out = leaky_relu(self.value(input), alpha)?;
        self.push(out, vec![input], Box::new(LeakyReluFn { alpha }))
    }
}
