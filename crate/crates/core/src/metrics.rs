//! Nominal and verified error rates, and the layer-width statistic.
//!
//! Work is split into fixed chunks evaluated in parallel; partial counts are
//! combined in chunk order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::Result;
use crate::interval::{input_interval, width_var, IntervalVars};
use crate::loss::penalized_layers;
use crate::network::Network;
use crate::tensor::Tensor;

/// Pixel range used to clip input boxes.
pub const PIXEL_RANGE: (f64, f64) = (0.0, 1.0);

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Examples per chunk.
    pub batch_size: usize,
    /// Intersect input boxes with [`PIXEL_RANGE`].
    pub clamp: bool,
    /// Whether `width_sum` covers the logit layer.
    pub include_logits: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 100,
            clamp: true,
            include_logits: true,
        }
    }
}

impl EvalOptions {
    pub fn clamp_range(&self) -> Option<(f64, f64)> {
        self.clamp.then_some(PIXEL_RANGE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub epsilon: f64,
    pub nominal_error: f64,
    pub verified_error: f64,
    /// Sum over penalized layers of the mean squared interval width.
    pub width_sum: f64,
}

/// True iff `row[y]` is strictly greater than every other entry.
pub fn strictly_correct(row: &[f32], y: usize) -> bool {
    row.iter().enumerate().all(|(j, &v)| j == y || row[y] > v)
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let n = logits.shape()[1];
    logits
        .data()
        .chunks(n)
        .zip(labels)
        .filter(|(row, &y)| strictly_correct(row, y))
        .count()
}

/// Worst-case logits for every row: lower bound at the label, upper
/// elsewhere.
fn worst_case_rows(lower: &Tensor<f32>, upper: &Tensor<f32>, labels: &[usize]) -> Tensor<f32> {
    let n = lower.shape()[1];
    let mut data = upper.data().to_vec();
    for (b, &y) in labels.iter().enumerate() {
        data[b * n + y] = lower.data()[b * n + y];
    }
    Tensor::from_parts(lower.shape().to_vec(), data)
}

#[derive(Clone, Debug, Default)]
struct Partial {
    nominal_correct: usize,
    verified_correct: usize,
    /// Per penalized layer: sum of squared widths and the element count.
    widths: Vec<(f64, usize)>,
}

fn chunks(len: usize, size: usize) -> Vec<Vec<usize>> {
    let size = size.max(1);
    (0..len).step_by(size).map(|s| (s..(s + size).min(len)).collect()).collect()
}

fn eval_chunk(net: &Network<f32>, ds: &Dataset, idx: &[usize], epsilon: f64, opts: &EvalOptions) -> Result<Partial> {
    let (x, labels) = ds.batch(idx);
    let g = Graph::new();
    let params = net.bind(&g, false);
    let xv = g.constant(x.clone());
    let logits = net.forward_graph(&g, &params, xv)?;
    let nominal_correct = count_correct(&g.value(logits), &labels);

    let z0 = input_interval(&x, epsilon, opts.clamp_range())?;
    let trace = net.forward_interval_graph(&g, &params, IntervalVars::constant(&g, &z0))?;
    let bounds = trace.logits.read(&g);
    let worst = worst_case_rows(bounds.lower(), bounds.upper(), &labels);
    let verified_correct = count_correct(&worst, &labels);

    let affine: Vec<bool> = trace.layers.iter().map(|l| l.affine).collect();
    let widths = penalized_layers(&affine, opts.include_logits)
        .into_iter()
        .map(|i| {
            let w = g.value(width_var(&g, trace.layers[i].bounds)?);
            let s: f64 = w.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
            Ok((s, w.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Partial {
        nominal_correct,
        verified_correct,
        widths,
    })
}

/// Nominal error, verified error at `epsilon` and the width statistic in
/// one pass over `ds`.
pub fn evaluate(net: &Network<f32>, ds: &Dataset, epsilon: f64, opts: &EvalOptions) -> Result<EvalSummary> {
    let parts = chunks(ds.len(), opts.batch_size)
        .par_iter()
        .map(|idx| eval_chunk(net, ds, idx, epsilon, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut total = Partial::default();
    for p in parts {
        total.nominal_correct += p.nominal_correct;
        total.verified_correct += p.verified_correct;
        if total.widths.is_empty() {
            total.widths = vec![(0.0, 0); p.widths.len()];
        }
        for (acc, (s, n)) in total.widths.iter_mut().zip(p.widths) {
            acc.0 += s;
            acc.1 += n;
        }
    }
    let n = ds.len() as f64;
    Ok(EvalSummary {
        epsilon,
        nominal_error: 1.0 - total.nominal_correct as f64 / n,
        verified_error: 1.0 - total.verified_correct as f64 / n,
        width_sum: total.widths.iter().map(|&(s, c)| s / c as f64).sum(),
    })
}

pub fn nominal_error(net: &Network<f32>, ds: &Dataset) -> Result<f64> {
    let opts = EvalOptions::default();
    let correct = chunks(ds.len(), opts.batch_size)
        .par_iter()
        .map(|idx| {
            let (x, labels) = ds.batch(idx);
            Ok(count_correct(&net.forward(&x)?, &labels))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(1.0 - correct.iter().sum::<usize>() as f64 / ds.len() as f64)
}

/// Fraction of examples without a strict interval certificate at `epsilon`
/// (input boxes clipped to the pixel range).
pub fn verified_error(net: &Network<f32>, ds: &Dataset, epsilon: f64) -> Result<f64> {
    Ok(evaluate(net, ds, epsilon, &EvalOptions::default())?.verified_error)
}
