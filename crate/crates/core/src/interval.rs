//! Axis-aligned interval bounds and their propagation through layers.
//!
//! Affine layers are propagated in center/radius form:
//!
//! ```text
//! mu  = (upper + lower) / 2        r  = (upper - lower) / 2
//! mu' = W mu + b                   r' = |W| r
//! lower' = mu' - r'                upper' = mu' + r'
//! ```
//!
//! which yields the smallest box containing the image of the input box.
//! Monotone nondecreasing activations map each bound independently.
//!
//! Every propagator has a graph form (used by the network so gradients flow
//! into `W`, `b` and both bounds) and a plain tensor form built on top of it.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Paired lower/upper bounds of identical shape with `lower <= upper`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalTensor<T: Scalar = f32> {
    lower: Tensor<T>,
    upper: Tensor<T>,
}

impl<T: Scalar> IntervalTensor<T> {
    pub fn new(lower: Tensor<T>, upper: Tensor<T>) -> Result<Self> {
        lower.expect_same_shape(&upper, "interval bounds")?;
        if let Some(i) = lower
            .data()
            .iter()
            .zip(upper.data())
            .position(|(l, u)| !(l <= u))
        {
            return Err(Error::invalid(format!(
                "interval lower bound exceeds upper bound at index {i}: {} > {}",
                lower.data()[i],
                upper.data()[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    /// The zero-width interval `[x, x]`.
    pub fn degenerate(x: Tensor<T>) -> Self {
        Self {
            lower: x.clone(),
            upper: x,
        }
    }

    pub(crate) fn from_bounds_unchecked(lower: Tensor<T>, upper: Tensor<T>) -> Self {
        Self { lower, upper }
    }

    pub fn lower(&self) -> &Tensor<T> {
        &self.lower
    }

    pub fn upper(&self) -> &Tensor<T> {
        &self.upper
    }

    pub fn shape(&self) -> &[usize] {
        self.lower.shape()
    }

    pub fn into_bounds(self) -> (Tensor<T>, Tensor<T>) {
        (self.lower, self.upper)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Ok(Self {
            lower: self.lower.reshape(shape)?,
            upper: self.upper.reshape(shape)?,
        })
    }

    /// Whether `point` lies inside the box, allowing `slack` on both sides.
    pub fn contains(&self, point: &Tensor<T>, slack: T) -> bool {
        point.shape() == self.shape()
            && point
                .data()
                .iter()
                .zip(self.lower.data().iter().zip(self.upper.data()))
                .all(|(&p, (&l, &u))| p >= l - slack && p <= u + slack)
    }

    pub fn cast<U: Scalar>(&self) -> IntervalTensor<U> {
        IntervalTensor {
            lower: self.lower.cast(),
            upper: self.upper.cast(),
        }
    }
}

/// Center/half-width form of an interval.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterRadius<T: Scalar = f32> {
    pub mu: Tensor<T>,
    pub r: Tensor<T>,
}

impl<T: Scalar> CenterRadius<T> {
    pub fn from_interval(z: &IntervalTensor<T>) -> Self {
        let half = T::from_f64_lossy(0.5);
        Self {
            mu: z.lower.zip_map(&z.upper, "center", |l, u| (u + l) * half).unwrap(),
            r: z.lower.zip_map(&z.upper, "radius", |l, u| (u - l) * half).unwrap(),
        }
    }

    pub fn to_interval(&self) -> Result<IntervalTensor<T>> {
        if let Some(v) = self.r.data().iter().find(|&&v| !(v >= T::zero())) {
            return Err(Error::invalid(format!("negative or NaN radius {v}")));
        }
        IntervalTensor::new(self.mu.sub(&self.r)?, self.mu.add(&self.r)?)
    }
}

/// Monotone nondecreasing elementwise maps with exact interval images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    pub const ALL: [Activation; 2] = [Activation::Relu, Activation::Sigmoid];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn apply<T: Scalar>(self, t: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => t.relu(),
            Activation::Sigmoid => t.sigmoid(),
        }
    }

    pub(crate) fn graph<T: Scalar>(self, g: &Graph<T>, v: Var) -> Var {
        match self {
            Activation::Relu => g.relu(v),
            Activation::Sigmoid => g.sigmoid(v),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "activation",
                name: s.to_string(),
                valid: Activation::ALL.map(|a| a.name()).join(", "),
            })
    }
}

/// The l∞ box `[x - eps, x + eps]`, optionally intersected with `[lo, hi]`.
pub fn input_interval<T: Scalar>(
    x: &Tensor<T>,
    epsilon: f64,
    clamp: Option<(f64, f64)>,
) -> Result<IntervalTensor<T>> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    let eps = T::from_f64_lossy(epsilon);
    let (lower, upper) = match clamp {
        Some((lo, hi)) => {
            let (lo, hi) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
            (x.map(|v| (v - eps).max(lo)), x.map(|v| (v + eps).min(hi)))
        }
        None => (x.map(|v| v - eps), x.map(|v| v + eps)),
    };
    IntervalTensor::new(lower, upper)
}

/// Interval bounds held on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntervalVars {
    pub lower: Var,
    pub upper: Var,
}

impl IntervalVars {
    pub fn constant<T: Scalar>(g: &Graph<T>, z: &IntervalTensor<T>) -> Self {
        Self {
            lower: g.constant(z.lower.clone()),
            upper: g.constant(z.upper.clone()),
        }
    }

    pub fn read<T: Scalar>(&self, g: &Graph<T>) -> IntervalTensor<T> {
        IntervalTensor::from_bounds_unchecked((*g.value(self.lower)).clone(), (*g.value(self.upper)).clone())
    }
}

fn center_radius<T: Scalar>(g: &Graph<T>, z: IntervalVars) -> Result<(Var, Var)> {
    let half = T::from_f64_lossy(0.5);
    let mu = g.scale(g.add(z.upper, z.lower)?, half);
    let r = g.scale(g.sub(z.upper, z.lower)?, half);
    Ok((mu, r))
}

fn reassemble<T: Scalar>(g: &Graph<T>, mu: Var, r: Var) -> Result<IntervalVars> {
    Ok(IntervalVars {
        lower: g.sub(mu, r)?,
        upper: g.add(mu, r)?,
    })
}

/// Dense layer bounds for a batch `[B, in]` with `w: [out, in]`.
pub fn affine_bounds<T: Scalar>(g: &Graph<T>, z: IntervalVars, w: Var, b: Option<Var>) -> Result<IntervalVars> {
    let (mu, r) = center_radius(g, z)?;
    let mu = g.linear(mu, w, b)?;
    let r = g.linear(r, g.abs(w), None)?;
    reassemble(g, mu, r)
}

/// Convolution bounds for a batch `[B, C, H, W]`.
pub fn conv2d_bounds<T: Scalar>(
    g: &Graph<T>,
    z: IntervalVars,
    kernel: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
) -> Result<IntervalVars> {
    let (mu, r) = center_radius(g, z)?;
    let mu = g.conv2d(mu, kernel, bias, stride, padding)?;
    let r = g.conv2d(r, g.abs(kernel), None, stride, padding)?;
    reassemble(g, mu, r)
}

pub fn monotone_bounds<T: Scalar>(g: &Graph<T>, z: IntervalVars, act: Activation) -> IntervalVars {
    IntervalVars {
        lower: act.graph(g, z.lower),
        upper: act.graph(g, z.upper),
    }
}

/// `upper - lower` on the graph.
pub fn width_var<T: Scalar>(g: &Graph<T>, z: IntervalVars) -> Result<Var> {
    g.sub(z.upper, z.lower)
}

/// Image of a vector interval `z: [n]` (or a batch `[B, n]`) under `W z + b`
/// with `W: [m, n]`, `b: [m]`.
pub fn propagate_affine<T: Scalar>(
    z: &IntervalTensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<IntervalTensor<T>> {
    let single = z.lower.ndim() == 1;
    let batched = if single { z.reshape(&[1, z.lower.len()])? } else { z.clone() };
    let g = Graph::new();
    let zv = IntervalVars::constant(&g, &batched);
    let out = affine_bounds(&g, zv, g.constant(w.clone()), Some(g.constant(b.clone())))?;
    let out = out.read(&g);
    if single {
        out.reshape(&[w.shape()[0]])
    } else {
        Ok(out)
    }
}

/// Image of a `[C, H, W]` (or `[B, C, H, W]`) interval under a convolution.
pub fn propagate_conv2d<T: Scalar>(
    z: &IntervalTensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<IntervalTensor<T>> {
    let single = z.lower.ndim() == 3;
    let batched = if single {
        let mut s = vec![1];
        s.extend_from_slice(z.shape());
        z.reshape(&s)?
    } else {
        z.clone()
    };
    let g = Graph::new();
    let zv = IntervalVars::constant(&g, &batched);
    let b = bias.map(|b| g.constant(b.clone()));
    let out = conv2d_bounds(&g, zv, g.constant(kernel.clone()), b, stride, padding)?.read(&g);
    if single {
        out.reshape(&out.shape()[1..].to_vec())
    } else {
        Ok(out)
    }
}

pub fn propagate_monotonic<T: Scalar>(z: &IntervalTensor<T>, act: Activation) -> IntervalTensor<T> {
    IntervalTensor::from_bounds_unchecked(act.apply(&z.lower), act.apply(&z.upper))
}

/// Like [`propagate_monotonic`] with the activation looked up by name.
pub fn propagate_monotonic_by_name<T: Scalar>(z: &IntervalTensor<T>, name: &str) -> Result<IntervalTensor<T>> {
    Ok(propagate_monotonic(z, name.parse()?))
}

pub fn interval_widths<T: Scalar>(z: &IntervalTensor<T>) -> Tensor<T> {
    z.upper.sub(&z.lower).expect("interval bounds share a shape")
}

/// Per-step output of [`wrapping_demo`].
#[derive(Clone, Debug, PartialEq)]
pub struct WrappingStep {
    pub step: usize,
    /// Half-width of the propagated interval box.
    pub interval_half_width: f64,
    /// Half-width of the axis-aligned hull of the exactly rotated box.
    pub exact_half_width: f64,
    /// Ratio to the previous step's interval half-width.
    pub growth: f64,
}

/// Repeatedly rotates the unit box `[-1, 1]^2` by 45 degrees, once through
/// interval propagation and once exactly, recording both half-widths.
pub fn wrapping_demo(steps: usize) -> Result<Vec<WrappingStep>> {
    if steps == 0 {
        return Err(Error::invalid("wrapping demo needs at least one step"));
    }
    let c = std::f64::consts::FRAC_1_SQRT_2;
    let rotation = Tensor::<f64>::new(&[2, 2], vec![c, -c, c, c])?;
    let zero = Tensor::<f64>::zeros(&[2])?;
    let mut boxed = IntervalTensor::new(Tensor::full(&[2], -1.0)?, Tensor::full(&[2], 1.0)?)?;
    let mut corners = vec![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
    let mut prev = 1.0;
    let mut out = Vec::with_capacity(steps);
    for step in 1..=steps {
        boxed = propagate_affine(&boxed, &rotation, &zero)?;
        let half = CenterRadius::from_interval(&boxed).r.max_abs();
        for p in &mut corners {
            *p = [c * p[0] - c * p[1], c * p[0] + c * p[1]];
        }
        let exact = corners
            .iter()
            .flat_map(|p| [p[0].abs(), p[1].abs()])
            .fold(0.0, f64::max);
        out.push(WrappingStep {
            step,
            interval_half_width: half,
            exact_half_width: exact,
            growth: half / prev,
        });
        prev = half;
    }
    Ok(out)
}
