use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchitectureSpec, LayerSpec};
use super::rf::{receptive_field, RfInfo};
use crate::error::{load_err, usage_err, Result};
use crate::numerics::{self, Checkpoint, Element, Mode, RunningStats, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
enum LayerState<T> {
    Conv {
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        gamma: Tensor<T>,
        beta: Tensor<T>,
        stats: RunningStats<T>,
    },
    Activation {
        alpha: f64,
    },
}

/// A fully convolutional network `φ: [c,h,w] → [1,u,v]`. The bias of the
/// final conv plays the role of the hypersphere center.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnModel<T> {
    spec: ArchitectureSpec,
    layers: Vec<LayerState<T>>,
}

/// Tape handles produced by [`FcnModel::forward_tape`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub output: Var,
    /// One entry per trainable tensor, in [`FcnModel::parameters`] order.
    pub params: Vec<Var>,
}

impl<T: Element> FcnModel<T> {
    /// Kaiming-uniform weights (`U(±√(6/fan_in))`), zero biases, unit batchnorm
    /// scales. Deterministic per seed and identical across element types.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = spec.input().channels;
        let mut layers = Vec::with_capacity(spec.layers().len());
        for layer in spec.layers() {
            layers.push(match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let fan_in = (in_channels * kernel * kernel) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    let weight = Tensor::from_fn(&[out_channels, in_channels, kernel, kernel], |_| {
                        T::from_f64_lossy(rng.random_range(-bound..bound))
                    });
                    channels = out_channels;
                    LayerState::Conv {
                        weight,
                        bias: Tensor::zeros(&[out_channels]),
                        stride,
                        padding,
                    }
                }
                LayerSpec::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => LayerState::MaxPool {
                    kernel,
                    stride,
                    padding,
                },
                LayerSpec::BatchNorm => LayerState::BatchNorm {
                    gamma: Tensor::full(&[channels], T::one()),
                    beta: Tensor::zeros(&[channels]),
                    stats: RunningStats::new(channels),
                },
                LayerSpec::Activation { alpha } => LayerState::Activation { alpha },
            });
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn receptive_field(&self) -> RfInfo {
        receptive_field(&self.spec)
    }

    /// Trainable tensors with stable names (`layer{i}.weight`, `.bias`,
    /// `.gamma`, `.beta`).
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                LayerState::Conv { weight, bias, .. } => {
                    out.push((format!("layer{i}.weight"), weight));
                    out.push((format!("layer{i}.bias"), bias));
                }
                LayerState::BatchNorm { gamma, beta, .. } => {
                    out.push((format!("layer{i}.gamma"), gamma));
                    out.push((format!("layer{i}.beta"), beta));
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                LayerState::Conv { weight, bias, .. } => {
                    out.push(weight);
                    out.push(bias);
                }
                LayerState::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// The last conv's bias, i.e. the center `c`.
    pub fn center(&self) -> T {
        match self.layers.last() {
            Some(LayerState::Conv { bias, .. }) => bias.data()[0],
            _ => unreachable!("validated architecture ends in a conv"),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(usage_err!("model input must be [b,c,h,w], got {shape:?}"));
        };
        if *c != self.spec.input().channels {
            return Err(usage_err!(
                "model expects {} input channels, got {c}",
                self.spec.input().channels
            ));
        }
        self.spec
            .output_size_for(*h, *w)
            .map_err(|e| usage_err!("input {h}x{w} does not fit the architecture: {e}"))?;
        Ok(())
    }

    /// Plain forward pass `[b,c,h,w] → [b,1,u,v]`. Train mode normalizes with
    /// batch statistics and updates the running statistics.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        let mut x = batch.clone();
        for l in &mut self.layers {
            x = match l {
                LayerState::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                } => numerics::conv2d(&x, weight, Some(bias), *stride, *padding)?,
                LayerState::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => numerics::maxpool2d(&x, *kernel, *stride, *padding)?,
                LayerState::BatchNorm { gamma, beta, stats } => {
                    numerics::batchnorm2d(&x, gamma, beta, stats, mode)?
                }
                LayerState::Activation { alpha } => numerics::leaky_relu(&x, *alpha)?,
            };
        }
        Ok(x)
    }

    /// Forward pass recorded on `tape`. With `track_params` every trainable
    /// tensor becomes a gradient-carrying leaf; otherwise they are constants.
    pub fn forward_tape(
        &mut self,
        tape: &mut Tape<T>,
        input: Var,
        mode: Mode,
        track_params: bool,
    ) -> Result<ForwardVars> {
        self.check_input(tape.value(input).shape())?;
        let mut x = input;
        let mut params = Vec::new();
        let leaf = |tape: &mut Tape<T>, t: &Tensor<T>, params: &mut Vec<Var>| {
            let v = tape.leaf(t.clone(), track_params);
            params.push(v);
            v
        };
        for l in &mut self.layers {
            x = match l {
                LayerState::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let w = leaf(tape, weight, &mut params);
                    let b = leaf(tape, bias, &mut params);
                    tape.conv2d(x, w, Some(b), *stride, *padding)?
                }
                LayerState::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => tape.maxpool2d(x, *kernel, *stride, *padding)?,
                LayerState::BatchNorm { gamma, beta, stats } => {
                    let g = leaf(tape, gamma, &mut params);
                    let b = leaf(tape, beta, &mut params);
                    tape.batchnorm2d(x, g, b, stats, mode)?
                }
                LayerState::Activation { alpha } => tape.leaky_relu(x, *alpha)?,
            };
        }
        Ok(ForwardVars { output: x, params })
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        for (name, t) in self.parameters() {
            ck.insert(name, t);
        }
        for (i, l) in self.layers.iter().enumerate() {
            if let LayerState::BatchNorm { stats, .. } = l {
                ck.insert(format!("layer{i}.running_mean"), &stats.mean);
                ck.insert(format!("layer{i}.running_var"), &stats.var);
            }
        }
    }

    /// Rebuilds a model for `spec` from the tensors in `ck`.
    pub fn from_checkpoint(spec: &ArchitectureSpec, ck: &Checkpoint) -> Result<Self> {
        let mut model = Self::build(spec, 0)?;
        for (i, l) in model.layers.iter_mut().enumerate() {
            let fill = |suffix: &str, dst: &mut Tensor<T>| -> Result<()> {
                let name = format!("layer{i}.{suffix}");
                let t: Tensor<T> = ck.require(&name)?;
                if t.shape() != dst.shape() {
                    return Err(load_err!(
                        "tensor '{name}' has shape {:?}, architecture needs {:?}",
                        t.shape(),
                        dst.shape()
                    ));
                }
                *dst = t;
                Ok(())
            };
            match l {
                LayerState::Conv { weight, bias, .. } => {
                    fill("weight", weight)?;
                    fill("bias", bias)?;
                }
                LayerState::BatchNorm { gamma, beta, stats } => {
                    fill("gamma", gamma)?;
                    fill("beta", beta)?;
                    fill("running_mean", &mut stats.mean)?;
                    fill("running_var", &mut stats.var)?;
                }
                _ => {}
            }
        }
        Ok(model)
    }

    /// Element-type conversion (used by the 64-bit oracle tests).
    pub fn cast<U: Element>(&self) -> FcnModel<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerState::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                } => LayerState::Conv {
                    weight: weight.cast(),
                    bias: bias.cast(),
                    stride: *stride,
                    padding: *padding,
                },
                LayerState::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => LayerState::MaxPool {
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                },
                LayerState::BatchNorm { gamma, beta, stats } => LayerState::BatchNorm {
                    gamma: gamma.cast(),
                    beta: beta.cast(),
                    stats: RunningStats {
                        mean: stats.mean.cast(),
                        var: stats.var.cast(),
                    },
                },
                LayerState::Activation { alpha } => LayerState::Activation { alpha: *alpha },
            })
            .collect();
        FcnModel {
            spec: self.spec.clone(),
            layers,
        }
    }
}
