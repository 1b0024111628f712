//! Untargeted l∞ projected gradient descent on the cross-entropy of the true
//! class.
//!
//! Each restart starts from a uniform point in the ε-ball and takes signed
//! gradient steps, projecting back onto the ball and the pixel range after
//! every step. An example counts as broken as soon as any iterate is not
//! strictly classified correctly; that iterate is returned.
//!
//! Random starts are drawn from a stream keyed by `(seed, example index,
//! restart)`, so adding restarts only adds attempts and results do not
//! depend on batching or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{strictly_correct, PIXEL_RANGE};
use crate::network::Network;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub iterations: usize,
    pub restarts: usize,
    /// Defaults to `epsilon / 8`.
    pub step_size: Option<f64>,
    pub clamp: Option<(f64, f64)>,
    pub seed: u64,
    /// Examples attacked together.
    pub batch_size: usize,
}

impl AttackConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            iterations: 200,
            restarts: 10,
            step_size: None,
            clamp: Some(PIXEL_RANGE),
            seed: 0,
            batch_size: 100,
        }
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 8.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("attack epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.iterations == 0 || self.restarts == 0 {
            return Err(Error::invalid("attack needs at least one iteration and one restart"));
        }
        if self.restarts >= 1 << 16 {
            return Err(Error::invalid("at most 65535 restarts are supported"));
        }
        if let Some(a) = self.step_size {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::invalid(format!("step size must be finite and > 0, got {a}")));
            }
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo <= hi) {
                return Err(Error::invalid(format!("clamp range [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }
}

/// Outcome for a batch: adversarial inputs `[B, C, H, W]` and per-example
/// success flags.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub x_adv: Tensor<f32>,
    pub success: Vec<bool>,
}

fn start_rng(seed: u64, example: usize, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((example as u64) << 16) | restart as u64);
    rng
}

struct Ball<'a> {
    center: &'a [f32],
    eps: f32,
    clamp: Option<(f32, f32)>,
}

impl Ball<'_> {
    fn project(&self, i: usize, v: f32) -> f32 {
        let c = self.center[i];
        let v = v.max(c - self.eps).min(c + self.eps);
        match self.clamp {
            Some((lo, hi)) => v.max(lo).min(hi),
            None => v,
        }
    }
}

/// Logits and the input gradient of `sum_b CE(f(x_b), y_b)`.
fn logits_and_grad(net: &Network<f32>, x: Tensor<f32>, labels: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let g = Graph::new();
    let params = net.bind(&g, false);
    let xv = g.param(x);
    let logits = net.forward_graph(&g, &params, xv)?;
    let ce = g.cross_entropy(logits, labels)?;
    let loss = g.scale(ce, labels.len() as f32);
    let mut grads = g.backward(loss)?;
    let gx = grads.take(xv).expect("input gradient");
    Ok(((*g.value(logits)).clone(), gx))
}

/// Attacks a batch `x: [B, C, H, W]`; `indices` are the examples' dataset
/// positions, used only to key the random starts.
pub fn pgd_attack_batch(
    net: &Network<f32>,
    x: &Tensor<f32>,
    labels: &[usize],
    indices: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    if x.ndim() != 4 || x.shape()[0] != labels.len() || indices.len() != labels.len() {
        return Err(Error::invalid(format!(
            "attack batch {:?} does not match {} labels / {} indices",
            x.shape(),
            labels.len(),
            indices.len()
        )));
    }
    let b = labels.len();
    let per = x.len() / b;
    let eps = cfg.epsilon as f32;
    let alpha = cfg.step() as f32;
    let ball = Ball {
        center: x.data(),
        eps,
        clamp: cfg.clamp.map(|(lo, hi)| (lo as f32, hi as f32)),
    };
    let n_classes = net.num_classes();
    let mut x_adv = x.clone();
    let mut success = vec![false; b];

    // Clean misclassification already counts.
    let clean = net.forward(x)?;
    for (i, row) in clean.data().chunks(n_classes).enumerate() {
        success[i] = !strictly_correct(row, labels[i]);
    }
    let mut last: Vec<Option<Vec<f32>>> = vec![None; b];

    for restart in 0..cfg.restarts {
        let active: Vec<usize> = (0..b).filter(|&i| !success[i]).collect();
        if active.is_empty() {
            break;
        }
        let act_labels: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
        let mut cur: Vec<f32> = Vec::with_capacity(active.len() * per);
        for &i in &active {
            let mut rng = start_rng(cfg.seed, indices[i], restart);
            for j in 0..per {
                let u: f32 = if eps > 0.0 { rng.gen_range(-eps..=eps) } else { 0.0 };
                cur.push(ball.project(i * per + j, x.data()[i * per + j] + u));
            }
        }
        let mut done = vec![false; active.len()];
        let mut shape = x.shape().to_vec();
        shape[0] = active.len();
        for it in 0..=cfg.iterations {
            let xt = Tensor::from_parts(shape.clone(), cur.clone());
            let (logits, grad) = if it < cfg.iterations {
                logits_and_grad(net, xt, &act_labels)?
            } else {
                (net.forward(&xt)?, Tensor::from_parts(shape.clone(), vec![0.0; cur.len()]))
            };
            for (a, row) in logits.data().chunks(n_classes).enumerate() {
                if !done[a] && !strictly_correct(row, act_labels[a]) {
                    done[a] = true;
                    let i = active[a];
                    success[i] = true;
                    x_adv.data_mut()[i * per..(i + 1) * per].copy_from_slice(&cur[a * per..(a + 1) * per]);
                }
            }
            if it == cfg.iterations || done.iter().all(|&d| d) {
                break;
            }
            for (a, &i) in active.iter().enumerate() {
                if done[a] {
                    continue;
                }
                for j in 0..per {
                    let k = a * per + j;
                    let step = alpha * crate::tensor::sign(grad.data()[k]);
                    cur[k] = ball.project(i * per + j, cur[k] + step);
                }
            }
        }
        for (a, &i) in active.iter().enumerate() {
            if !done[a] {
                last[i] = Some(cur[a * per..(a + 1) * per].to_vec());
            }
        }
    }
    for i in 0..b {
        if !success[i] {
            if let Some(v) = &last[i] {
                x_adv.data_mut()[i * per..(i + 1) * per].copy_from_slice(v);
            }
        }
    }
    Ok(AttackOutcome { x_adv, success })
}

/// Attacks one input `x: [C, H, W]`; returns the adversarial point and
/// whether it is misclassified.
pub fn pgd_attack(net: &Network<f32>, x: &Tensor<f32>, y: usize, cfg: &AttackConfig) -> Result<(Tensor<f32>, bool)> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let out = pgd_attack_batch(net, &x.reshape(&shape)?, &[y], &[0], cfg)?;
    Ok((out.x_adv.reshape(x.shape())?, out.success[0]))
}

/// Fraction of examples that are misclassified or broken by the attack.
pub fn pgd_error(net: &Network<f32>, ds: &Dataset, cfg: &AttackConfig) -> Result<f64> {
    cfg.validate()?;
    let size = cfg.batch_size.max(1);
    let starts: Vec<usize> = (0..ds.len()).step_by(size).collect();
    let broken = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + size).min(ds.len())).collect();
            let (x, labels) = ds.batch(&idx);
            let out = pgd_attack_batch(net, &x, &labels, &idx, cfg)?;
            Ok(out.success.iter().filter(|&&b| b).count())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(broken.iter().sum::<usize>() as f64 / ds.len() as f64)
}
