//! Adam and momentum SGD with step-wise learning-rate decay.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 2] = [OptimizerKind::Adam, OptimizerKind::Sgd];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }

    /// State tensors kept per parameter.
    pub fn slots_per_param(self) -> usize {
        match self {
            OptimizerKind::Adam => 2,
            OptimizerKind::Sgd => 1,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "optimizer",
                name: s.to_string(),
                valid: OptimizerKind::ALL.map(|k| k.name()).join(", "),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Epoch indices (0-based) from which the rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            milestones: Vec::new(),
            decay: 0.1,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid(format!("decay factor must lie in (0, 1], got {}", self.decay)));
        }
        for (name, v) in [("momentum", self.momentum), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.learning_rate * self.decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    /// Adam: all first moments then all second moments. SGD: velocities.
    pub slots: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, param_shapes: &[Vec<usize>]) -> Result<Self> {
        cfg.validate()?;
        let mut slots = Vec::new();
        for _ in 0..cfg.kind.slots_per_param() {
            for s in param_shapes {
                slots.push(Tensor::zeros(s)?);
            }
        }
        let state = OptimizerState {
            kind: cfg.kind,
            step: 0,
            slots,
        };
        Ok(Self { cfg, state })
    }

    /// Rebuilds an optimizer from saved state, checking it fits the
    /// parameters.
    pub fn restore(cfg: OptimizerConfig, state: OptimizerState, param_shapes: &[Vec<usize>]) -> Result<Self> {
        cfg.validate()?;
        if state.kind != cfg.kind {
            return Err(Error::invalid(format!(
                "saved optimizer is {}, configuration asks for {}",
                state.kind, cfg.kind
            )));
        }
        let want = cfg.kind.slots_per_param() * param_shapes.len();
        if state.slots.len() != want {
            return Err(Error::invalid(format!(
                "saved optimizer has {} state tensors, expected {want}",
                state.slots.len()
            )));
        }
        for (i, t) in state.slots.iter().enumerate() {
            let s = &param_shapes[i % param_shapes.len()];
            if t.shape() != s.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer state",
                    lhs: t.shape().to_vec(),
                    rhs: s.clone(),
                });
            }
        }
        Ok(Self { cfg, state })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// One update with learning rate `lr`. Missing gradients count as zero.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Option<Tensor<f32>>], lr: f64) {
        self.state.step += 1;
        let n = params.len();
        match self.cfg.kind {
            OptimizerKind::Adam => {
                let t = self.state.step as i32;
                let (b1, b2) = (self.cfg.beta1 as f32, self.cfg.beta2 as f32);
                let c1 = (1.0 - self.cfg.beta1.powi(t)) as f32;
                let c2 = (1.0 - self.cfg.beta2.powi(t)) as f32;
                let (lr, eps) = (lr as f32, self.cfg.adam_eps as f32);
                let (ms, vs) = self.state.slots.split_at_mut(n);
                for (i, p) in params.iter_mut().enumerate() {
                    let Some(g) = &grads[i] else { continue };
                    let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
                    for (k, w) in p.data_mut().iter_mut().enumerate() {
                        let gk = g.data()[k];
                        m[k] = b1 * m[k] + (1.0 - b1) * gk;
                        v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                        *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd => {
                let (lr, mu) = (lr as f32, self.cfg.momentum as f32);
                for (i, p) in params.iter_mut().enumerate() {
                    let Some(g) = &grads[i] else { continue };
                    let vel = self.state.slots[i].data_mut();
                    for (k, w) in p.data_mut().iter_mut().enumerate() {
                        vel[k] = mu * vel[k] + g.data()[k];
                        *w -= lr * vel[k];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn milestones_decay_tenfold() {
        let cfg = OptimizerConfig {
            milestones: vec![5, 8],
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert!((cfg.lr_at(5) - 1e-4).abs() < 1e-18);
        assert!((cfg.lr_at(9) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = vec![Tensor::from_vec(vec![1.0f32, -1.0, 0.5])];
        let mut opt = Optimizer::new(OptimizerConfig::default(), &[vec![3]]).unwrap();
        let g = Tensor::from_vec(vec![0.3f32, -2.0, 0.0]);
        opt.step(&mut p, &[Some(g)], 0.1);
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-5 && (d[1] + 0.9).abs() < 1e-5 && d[2] == 0.5, "{d:?}");
        assert_eq!(opt.state().step, 1);
    }

    #[test]
    fn sgd_without_momentum_is_gradient_descent() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            momentum: 0.0,
            ..Default::default()
        };
        let mut p = vec![Tensor::from_vec(vec![1.0f32])];
        let mut opt = Optimizer::new(cfg, &[vec![1]]).unwrap();
        opt.step(&mut p, &[Some(Tensor::from_vec(vec![2.0]))], 0.25);
        assert_eq!(p[0].data(), &[0.5]);
    }

    #[test]
    fn restore_checks_shapes_and_kind() {
        let opt = Optimizer::new(OptimizerConfig::default(), &[vec![2]]).unwrap();
        let state = opt.state().clone();
        assert!(Optimizer::restore(OptimizerConfig::default(), state.clone(), &[vec![3]]).is_err());
        let sgd = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..Default::default()
        };
        assert!(Optimizer::restore(sgd, state.clone(), &[vec![2]]).is_err());
        assert!(Optimizer::restore(OptimizerConfig::default(), state, &[vec![2]]).is_ok());
    }
}
