use crate::error::{config_err, usage_err, Result};
use crate::numerics::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerFamily {
    SgdNesterov,
    Adam,
}

/// How Adam applies weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecayMode {
    /// `θ ← θ − lr·wd·θ` before the adaptive step.
    #[default]
    Decoupled,
    /// `g ← g + wd·θ` before the moment updates.
    Coupled,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// `lr₀·fᵉ`.
    Exponential(f64),
    /// `lr₀·10^−(number of milestones ≤ e)`.
    Milestones(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub family: OptimizerFamily,
    pub lr: f64,
    pub momentum: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    pub schedule: Schedule,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            family: OptimizerFamily::SgdNesterov,
            lr,
            momentum: 0.9,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            decay_mode: DecayMode::Decoupled,
            schedule: Schedule::Exponential(1.0),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            family: OptimizerFamily::Adam,
            ..Self::sgd(lr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(config_err!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must be in [0,1), got {}", self.momentum));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(config_err!("betas must be in [0,1), got ({b1}, {b2})"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err!("weight decay must be nonnegative"));
        }
        if !(self.eps > 0.0) {
            return Err(config_err!("eps must be positive"));
        }
        if let Schedule::Exponential(f) = self.schedule {
            if !(f > 0.0) {
                return Err(config_err!("schedule factor must be positive, got {f}"));
            }
        }
        Ok(())
    }
}

/// Learning rate for a zero-based epoch.
pub fn schedule_lr(epoch: usize, cfg: &OptimizerConfig) -> f64 {
    match &cfg.schedule {
        Schedule::Exponential(f) => cfg.lr * f.powi(epoch as i32),
        Schedule::Milestones(m) => {
            let passed = m.iter().filter(|&&e| e <= epoch).count();
            cfg.lr * 10f64.powi(-(passed as i32))
        }
    }
}

fn check_shapes<T: Element>(params: &[&mut Tensor<T>], grads: &[Tensor<T>], state: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(usage_err!("{} parameters but {} gradients", params.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(usage_err!(
                "parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            ));
        }
        if let Some(s) = state.get(i) {
            if s.shape() != p.shape() {
                return Err(usage_err!("optimizer state {i} does not match its parameter"));
            }
        }
    }
    Ok(())
}

fn init_like<T: Element>(state: &mut Vec<Tensor<T>>, params: &[&mut Tensor<T>]) {
    if state.is_empty() {
        *state = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
}

/// Velocity buffers, created on the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Tensor<T>>,
}

/// `v ← μv + g + wd·θ;  θ ← θ − lr·(g + wd·θ + μv)`.
pub fn sgd_nesterov_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_shapes(params, grads, &state.velocity)?;
    init_like(&mut state.velocity, params);
    let (lr, mu, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((theta, &grad), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let d = grad + wd * *theta;
            *vel = mu * *vel + d;
            *theta = *theta - lr * (d + mu * *vel);
        }
    }
    Ok(())
}

/// First/second moments and step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

/// Bias-corrected Adam step.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
    eps: f64,
    mode: DecayMode,
) -> Result<()> {
    check_shapes(params, grads, &state.m)?;
    init_like(&mut state.m, params);
    init_like(&mut state.v, params);
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = betas;
    let c1 = T::from_f64_lossy(1.0 - b1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - b2.powi(t));
    let (b1, b2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
    let (lr, wd, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(weight_decay), T::from_f64_lossy(eps));
    let one = T::one();
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
        for (((theta, &grad), m), v) in iter {
            let grad = match mode {
                DecayMode::Coupled => grad + wd * *theta,
                DecayMode::Decoupled => {
                    *theta = *theta - lr * wd * *theta;
                    grad
                }
            };
            *m = b1 * *m + (one - b1) * grad;
            *v = b2 * *v + (one - b2) * grad * grad;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn plain_sgd_when_no_momentum() {
        let mut p = scalar(2.0);
        let mut st = SgdState::default();
        sgd_nesterov_step(&mut [&mut p], &[scalar(0.5)], &mut st, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.data()[0], 2.0 - 0.1 * 0.5);
        sgd_nesterov_step(&mut [&mut p], &[scalar(0.0)], &mut SgdState::default(), 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.data()[0], 1.95);
    }

    #[test]
    fn nesterov_two_steps_by_hand() {
        let (lr, mu) = (0.1, 0.9);
        let mut p = scalar(1.0);
        let mut st = SgdState::default();
        sgd_nesterov_step(&mut [&mut p], &[scalar(1.0)], &mut st, lr, mu, 0.0).unwrap();
        // v = 1, θ = 1 − 0.1·(1 + 0.9)
        assert!((p.data()[0] - 0.81).abs() < 1e-15);
        sgd_nesterov_step(&mut [&mut p], &[scalar(1.0)], &mut st, lr, mu, 0.0).unwrap();
        // v = 1.9, θ = 0.81 − 0.1·(1 + 1.71)
        assert!((p.data()[0] - (0.81 - 0.271)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr() {
        for g in [1e-3, 0.5, -7.0] {
            let mut p = scalar(0.0);
            let mut st = AdamState::default();
            adam_step(&mut [&mut p], &[scalar(g)], &mut st, 0.01, (0.9, 0.999), 0.0, 1e-8, DecayMode::Decoupled).unwrap();
            let expected = 0.01 * g.abs() / (g.abs() + 1e-8);
            assert!((p.data()[0].abs() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_grad_is_noop_and_lr_zero_decay_is_noop() {
        let mut p = scalar(3.0);
        let mut st = AdamState::default();
        adam_step(&mut [&mut p], &[scalar(0.0)], &mut st, 0.1, (0.9, 0.999), 0.0, 1e-8, DecayMode::Decoupled).unwrap();
        assert_eq!(p.data()[0], 3.0);
        let mut s = SgdState::default();
        sgd_nesterov_step(&mut [&mut p], &[scalar(0.0)], &mut s, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.data()[0], 3.0);
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let mut p = scalar(1.0);
        let g = Tensor::<f64>::zeros(&[2]);
        let r = sgd_nesterov_step(&mut [&mut p], &[g], &mut SgdState::default(), 0.1, 0.0, 0.0);
        assert!(matches!(r, Err(crate::FcddError::Usage(_))));
    }

    #[test]
    fn schedules() {
        let mut cfg = OptimizerConfig::sgd(1.0);
        cfg.schedule = Schedule::Exponential(0.98);
        assert_eq!(schedule_lr(0, &cfg), 1.0);
        assert!((schedule_lr(2, &cfg) - 0.9604).abs() < 1e-15);
        cfg.schedule = Schedule::Milestones(vec![400, 500]);
        assert_eq!(schedule_lr(399, &cfg), 1.0);
        assert_eq!(schedule_lr(450, &cfg), 0.1);
        assert!((schedule_lr(500, &cfg) - 0.01).abs() < 1e-18);
    }
}
