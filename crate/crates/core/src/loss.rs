//! Training objectives: cross-entropy on nominal and worst-case logits, and
//! the interval-width penalty.
//!
//! Every objective is built on a [`Graph`] so the same code produces values
//! and gradients. The tensor-level functions here wrap a throwaway graph.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::interval::{width_var, IntervalTensor, IntervalVars};
use crate::network::TracedBounds;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Objective {
    Ibp,
    #[default]
    ConstrainedIbp,
}

impl Objective {
    pub const ALL: [Objective; 2] = [Objective::Ibp, Objective::ConstrainedIbp];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Ibp => "ibp",
            Objective::ConstrainedIbp => "constrained-ibp",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL.into_iter().find(|o| o.name() == s).ok_or_else(|| Error::Unknown {
            kind: "loss",
            name: s.to_string(),
            valid: Objective::ALL.map(|o| o.name()).join(", "),
        })
    }
}

/// How squared widths are reduced within one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PenaltyReduction {
    /// Mean over the layer's units.
    #[default]
    Mean,
    /// Sum over the layer's units.
    Sum,
}

impl PenaltyReduction {
    pub const ALL: [PenaltyReduction; 2] = [PenaltyReduction::Mean, PenaltyReduction::Sum];

    pub fn name(self) -> &'static str {
        match self {
            PenaltyReduction::Mean => "mean",
            PenaltyReduction::Sum => "sum",
        }
    }
}

impl fmt::Display for PenaltyReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PenaltyReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PenaltyReduction::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "penalty reduction",
                name: s.to_string(),
                valid: PenaltyReduction::ALL.map(|o| o.name()).join(", "),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub objective: Objective,
    /// Weight of the width penalty. Ignored by [`Objective::Ibp`].
    pub lambda: f64,
    pub reduction: PenaltyReduction,
    /// Penalize the logit layer's widths too, not only hidden layers.
    pub include_logits: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            objective: Objective::ConstrainedIbp,
            lambda: 1.0,
            reduction: PenaltyReduction::Mean,
            include_logits: true,
        }
    }
}

impl LossConfig {
    pub fn ibp() -> Self {
        Self {
            objective: Objective::Ibp,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Weight actually applied to the penalty.
    pub fn effective_lambda(&self) -> f64 {
        match self.objective {
            Objective::Ibp => 0.0,
            Objective::ConstrainedIbp => self.lambda,
        }
    }
}

/// Batch-mean loss terms. `total = kappa * nominal_ce + (1 - kappa) *
/// robust_ce + lambda * width_penalty`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub nominal_ce: f64,
    pub robust_ce: f64,
    pub width_penalty: f64,
    pub total: f64,
    pub kappa: f64,
    /// Perturbation radius the bounds were computed for, when known.
    pub epsilon: f64,
}

impl LossBreakdown {
    /// Adds `weight * other` to the loss terms, leaving `kappa` and `epsilon`.
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.nominal_ce += weight * other.nominal_ce;
        self.robust_ce += weight * other.robust_ce;
        self.width_penalty += weight * other.width_penalty;
        self.total += weight * other.total;
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.nominal_ce *= c;
        self.robust_ce *= c;
        self.width_penalty *= c;
        self.total *= c;
        self
    }
}

/// Graph handles of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub nominal_ce: Var,
    pub robust_ce: Var,
    pub width_penalty: Option<Var>,
}

impl ObjectiveVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>, kappa: f64, epsilon: f64) -> LossBreakdown {
        let read = |v: Var| g.value(v).item().to_f64_lossy();
        LossBreakdown {
            nominal_ce: read(self.nominal_ce),
            robust_ce: read(self.robust_ce),
            width_penalty: self.width_penalty.map_or(0.0, read),
            total: read(self.total),
            kappa,
            epsilon,
        }
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::invalid(format!("kappa must lie in [0, 1], got {kappa}")));
    }
    Ok(())
}

/// Indices into `layers` whose widths are penalized: post-affine bounds,
/// optionally without the last affine layer (the logits).
pub fn penalized_layers(affine: &[bool], include_logits: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = affine.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect();
    if !include_logits {
        idx.pop();
    }
    idx
}

/// `sum_k reduce(width_k^2)`, averaged over a batch of `batch` examples.
pub fn width_penalty_graph<T: Scalar>(
    g: &Graph<T>,
    bounds: &[IntervalVars],
    batch: usize,
    reduction: PenaltyReduction,
) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for z in bounds {
        let sq = g.square(width_var(g, *z)?);
        let term = match reduction {
            PenaltyReduction::Mean => g.mean(sq),
            PenaltyReduction::Sum => g.scale(g.sum(sq), T::from_f64_lossy(1.0 / batch as f64)),
        };
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc)
}

/// Builds the selected objective for a batch of `[B, N]` logits.
///
/// Terms with zero weight are left out of `total`, so `kappa = 1` yields
/// exactly the nominal cross-entropy and `lambda = 0` exactly the plain
/// interval objective.
pub fn objective_graph<T: Scalar>(
    g: &Graph<T>,
    logits: Var,
    logit_bounds: IntervalVars,
    layers: &[TracedBounds],
    labels: &[usize],
    kappa: f64,
    cfg: &LossConfig,
) -> Result<ObjectiveVars> {
    check_kappa(kappa)?;
    cfg.validate()?;
    let nominal_ce = g.cross_entropy(logits, labels)?;
    let worst = g.worst_case_logits(logit_bounds.lower, logit_bounds.upper, labels)?;
    let robust_ce = g.cross_entropy(worst, labels)?;
    let mut total = g.scale(nominal_ce, T::from_f64_lossy(kappa));
    if kappa < 1.0 {
        total = g.add(total, g.scale(robust_ce, T::from_f64_lossy(1.0 - kappa)))?;
    }
    let lambda = cfg.effective_lambda();
    let mut width_penalty = None;
    if lambda > 0.0 {
        let affine: Vec<bool> = layers.iter().map(|l| l.affine).collect();
        let bounds: Vec<IntervalVars> = penalized_layers(&affine, cfg.include_logits)
            .into_iter()
            .map(|i| layers[i].bounds)
            .collect();
        width_penalty = width_penalty_graph(g, &bounds, labels.len(), cfg.reduction)?;
        if let Some(p) = width_penalty {
            total = g.add(total, g.scale(p, T::from_f64_lossy(lambda)))?;
        }
    }
    Ok(ObjectiveVars {
        total,
        nominal_ce,
        robust_ce,
        width_penalty,
    })
}

/// Promotes `[N]` to `[1, N]`; leaves `[B, N]` alone.
fn as_batch<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    match t.ndim() {
        1 => t.reshape(&[1, t.len()]),
        2 => Ok(t.clone()),
        _ => Err(Error::invalid(format!("expected logits of shape [N] or [B, N], got {:?}", t.shape()))),
    }
}

/// `-log softmax(logits)[y]` for a single logit vector.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, y: usize) -> Result<T> {
    if logits.ndim() != 1 {
        return Err(Error::invalid(format!("expected logits of shape [N], got {:?}", logits.shape())));
    }
    let g = Graph::new();
    let z = g.constant(as_batch(logits)?);
    Ok(g.value(g.cross_entropy(z, &[y])?).item())
}

/// `[N]` worst-case logits: lower bound at `y`, upper bound elsewhere.
pub fn worst_case_logits<T: Scalar>(z: &IntervalTensor<T>, y: usize) -> Result<Tensor<T>> {
    if z.shape().len() != 1 {
        return Err(Error::invalid(format!("expected an interval of shape [N], got {:?}", z.shape())));
    }
    let g = Graph::new();
    let zb = IntervalVars::constant(&g, &z.reshape(&[1, z.shape()[0]])?);
    let w = g.worst_case_logits(zb.lower, zb.upper, &[y])?;
    g.value(w).reshape(z.shape())
}

/// The plain interval objective. Logits may be `[N]` (one label) or
/// `[B, N]`; the result is a batch mean.
pub fn ibp_loss<T: Scalar>(
    logits: &Tensor<T>,
    logit_interval: &IntervalTensor<T>,
    labels: &[usize],
    kappa: f64,
) -> Result<LossBreakdown> {
    constrained_ibp_loss(logits, logit_interval, &[], labels, kappa, 0.0, PenaltyReduction::Mean)
}

/// The interval objective plus `lambda * sum_k reduce(width_k^2)` over the
/// given layer bounds. Layer tensors carry a leading batch axis exactly when
/// `logits` does.
pub fn constrained_ibp_loss<T: Scalar>(
    logits: &Tensor<T>,
    logit_interval: &IntervalTensor<T>,
    layers: &[IntervalTensor<T>],
    labels: &[usize],
    kappa: f64,
    lambda: f64,
    reduction: PenaltyReduction,
) -> Result<LossBreakdown> {
    let cfg = LossConfig {
        objective: Objective::ConstrainedIbp,
        lambda,
        reduction,
        include_logits: true,
    };
    let g = Graph::new();
    let z = g.constant(as_batch(logits)?);
    let (lo, hi) = (as_batch(logit_interval.lower())?, as_batch(logit_interval.upper())?);
    let zb = IntervalVars::constant(&g, &IntervalTensor::new(lo, hi)?);
    let traced: Vec<TracedBounds> = layers
        .iter()
        .enumerate()
        .map(|(i, l)| TracedBounds {
            layer: i,
            affine: true,
            bounds: IntervalVars::constant(&g, l),
        })
        .collect();
    let obj = objective_graph(&g, z, zb, &traced, labels, kappa, &cfg)?;
    Ok(obj.breakdown(&g, kappa, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(l: &[f64], u: &[f64]) -> IntervalTensor<f64> {
        IntervalTensor::new(Tensor::from_vec(l.to_vec()), Tensor::from_vec(u.to_vec())).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_n() {
        let ce = softmax_cross_entropy(&Tensor::<f64>::zeros(&[10]).unwrap(), 3).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_stable() {
        let ce = softmax_cross_entropy(&Tensor::from_vec(vec![1000.0f32, 0.0]), 0).unwrap();
        assert!(ce.is_finite() && ce.abs() < 1e-6);
        assert!(softmax_cross_entropy(&Tensor::from_vec(vec![1.0f32, 0.0]), 2).is_err());
    }

    #[test]
    fn worst_case_from_two_intervals() {
        let w = worst_case_logits(&iv(&[1.0, 0.0], &[3.0, 2.0]), 0).unwrap();
        assert_eq!(w.data(), &[1.0, 2.0]);
        assert!(worst_case_logits(&iv(&[1.0, 0.0], &[3.0, 2.0]), 2).is_err());
    }

    #[test]
    fn kappa_one_is_nominal_exactly() {
        let z = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let b = ibp_loss(&z, &iv(&[-1.0, -2.0, 1.0], &[1.0, 0.0, 3.0]), &[1], 1.0).unwrap();
        assert_eq!(b.total, softmax_cross_entropy(&z, 1).unwrap());
        assert_eq!(b.width_penalty, 0.0);
        assert!(b.robust_ce >= b.nominal_ce);
    }

    #[test]
    fn kappa_half_averages() {
        let z = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let b = ibp_loss(&z, &iv(&[-1.0, -2.0, 1.0], &[1.0, 0.0, 3.0]), &[2], 0.5).unwrap();
        assert!((b.total - 0.5 * (b.nominal_ce + b.robust_ce)).abs() < 1e-12);
        assert!(ibp_loss(&z, &iv(&[0.0; 3], &[0.0; 3]), &[0], 1.5).is_err());
    }

    #[test]
    fn degenerate_interval_has_equal_terms() {
        let z = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let b = ibp_loss(&z, &IntervalTensor::degenerate(z.clone()), &[0], 0.3).unwrap();
        assert_eq!(b.robust_ce, b.nominal_ce);
    }

    #[test]
    fn penalty_sum_and_mean_reductions() {
        let z = Tensor::from_vec(vec![0.0, 0.0]);
        let zi = IntervalTensor::degenerate(z.clone());
        let layer = iv(&[0.0, 0.0], &[0.1, 0.2]);
        let s = constrained_ibp_loss(&z, &zi, &[layer.clone()], &[0], 1.0, 1.0, PenaltyReduction::Sum).unwrap();
        assert!((s.width_penalty - 0.05).abs() < 1e-12);
        let m = constrained_ibp_loss(&z, &zi, &[layer], &[0], 1.0, 1.0, PenaltyReduction::Mean).unwrap();
        assert!((m.width_penalty - 0.025).abs() < 1e-12);
        assert!((m.total - (m.nominal_ce + 0.025)).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_and_degenerate_reduce_to_ibp() {
        let z = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let zi = iv(&[-1.0, -2.0, 1.0], &[1.0, 0.0, 3.0]);
        let layer = iv(&[0.0, 0.0], &[0.5, 0.2]);
        let base = ibp_loss(&z, &zi, &[1], 0.7).unwrap();
        let c = constrained_ibp_loss(&z, &zi, &[layer], &[1], 0.7, 0.0, PenaltyReduction::Mean).unwrap();
        assert_eq!(base, c);
        let flat = IntervalTensor::degenerate(Tensor::from_vec(vec![1.0, 2.0]));
        let d = constrained_ibp_loss(&z, &zi, &[flat], &[1], 0.7, 2.0, PenaltyReduction::Sum).unwrap();
        assert_eq!(d.width_penalty, 0.0);
        assert_eq!(d.total, base.total);
        assert!(constrained_ibp_loss(&z, &zi, &[], &[1], 0.7, -1.0, PenaltyReduction::Sum).is_err());
    }

    #[test]
    fn penalized_layer_selection() {
        let affine = [true, false, true, false, true];
        assert_eq!(penalized_layers(&affine, true), vec![0, 2, 4]);
        assert_eq!(penalized_layers(&affine, false), vec![0, 2]);
    }

    #[test]
    fn names_round_trip() {
        for o in Objective::ALL {
            assert_eq!(o.name().parse::<Objective>().unwrap(), o);
        }
        let err = "hinge".parse::<Objective>().unwrap_err().to_string();
        assert!(err.contains("ibp, constrained-ibp"), "{err}");
        assert_eq!("sum".parse::<PenaltyReduction>().unwrap(), PenaltyReduction::Sum);
    }
}
