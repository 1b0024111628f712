//! Layer stacks, architecture presets and the two forward passes.
//!
//! A network is a sequence of convolutions, dense layers, monotone
//! activations and flattens, optionally preceded by a fixed per-channel
//! normalization. Inputs are always raw pixels, so an l∞ radius is measured
//! in pixel units regardless of normalization.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::interval::{affine_bounds, conv2d_bounds, monotone_bounds, Activation, IntervalTensor, IntervalVars};
use crate::tensor::{conv_output_size, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_filters: usize,
        out_filters: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        out_features: usize,
    },
    Activation(Activation),
    Flatten,
}

impl LayerSpec {
    pub fn conv(in_filters: usize, out_filters: usize, kernel_size: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            in_filters,
            out_filters,
            kernel_size,
            stride,
            padding: 0,
        }
    }

    pub fn dense(out_features: usize) -> Self {
        LayerSpec::Dense { out_features }
    }

    pub fn relu() -> Self {
        LayerSpec::Activation(Activation::Relu)
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d {
                in_filters,
                out_filters,
                kernel_size,
                stride,
                padding,
            } => write!(f, "conv2d {in_filters} {out_filters} {kernel_size} {stride} {padding}"),
            LayerSpec::Dense { out_features } => write!(f, "dense {out_features}"),
            LayerSpec::Activation(a) => write!(f, "{a}"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let nums = |n: usize| -> Result<Vec<usize>> {
            if parts.len() != n + 1 {
                return Err(Error::invalid(format!("layer `{s}` expects {n} integer arguments")));
            }
            parts[1..]
                .iter()
                .map(|p| p.parse().map_err(|_| Error::invalid(format!("bad integer `{p}` in layer `{s}`"))))
                .collect()
        };
        match parts.first().copied() {
            Some("conv2d") => {
                let v = nums(5)?;
                Ok(LayerSpec::Conv2d {
                    in_filters: v[0],
                    out_filters: v[1],
                    kernel_size: v[2],
                    stride: v[3],
                    padding: v[4],
                })
            }
            Some("dense") => Ok(LayerSpec::Dense {
                out_features: nums(1)?[0],
            }),
            Some("flatten") if parts.len() == 1 => Ok(LayerSpec::Flatten),
            Some(name) if parts.len() == 1 => Ok(LayerSpec::Activation(name.parse()?)),
            _ => Err(Error::invalid(format!("cannot parse layer `{s}`"))),
        }
    }
}

/// Fixed per-channel `(x - mean) / std` applied to raw pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelNorm {
    fn scale_shift<T: Scalar>(&self) -> (Vec<T>, Vec<T>) {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(&m, &s)| (T::from_f64_lossy(1.0 / s), T::from_f64_lossy(-m / s)))
            .unzip()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub normalization: Option<ChannelNorm>,
}

/// Named architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// A one-convolution network for the 8x8 synthetic set (not from the
    /// benchmark table, which needs larger inputs).
    Tiny,
    Small,
    Medium,
    Large,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Tiny, Preset::Small, Preset::Medium, Preset::Large];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Small => "small",
            Preset::Medium => "medium",
            Preset::Large => "large",
        }
    }

    /// Parameterized layers as `(conv: (out, kernel, stride)) | dense(out)`.
    fn stack(self, num_classes: usize) -> (Vec<(usize, usize, usize)>, Vec<usize>) {
        match self {
            Preset::Tiny => (vec![(8, 3, 1)], vec![32, num_classes]),
            Preset::Small => (vec![(16, 4, 2), (32, 4, 1)], vec![100, num_classes]),
            Preset::Medium => (
                vec![(32, 3, 1), (32, 4, 2), (64, 3, 1), (64, 4, 2)],
                vec![512, 512, num_classes],
            ),
            Preset::Large => (
                vec![(64, 3, 1), (64, 3, 1), (128, 3, 2), (128, 3, 1), (128, 3, 1)],
                vec![200, num_classes],
            ),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "architecture",
                name: s.to_string(),
                valid: Preset::ALL.map(|p| p.name()).join(", "),
            })
    }
}

/// Builds a named architecture: a relu after every convolution and hidden
/// dense layer, and a flatten before the first dense layer.
pub fn preset(name: &str, input_shape: [usize; 3], num_classes: usize) -> Result<NetworkSpec> {
    let p: Preset = name.parse()?;
    let (convs, denses) = p.stack(num_classes);
    let mut layers = Vec::new();
    let mut channels = input_shape[0];
    for (out, k, s) in convs {
        layers.push(LayerSpec::conv(channels, out, k, s));
        layers.push(LayerSpec::relu());
        channels = out;
    }
    layers.push(LayerSpec::Flatten);
    let last = denses.len() - 1;
    for (i, out) in denses.into_iter().enumerate() {
        layers.push(LayerSpec::dense(out));
        if i != last {
            layers.push(LayerSpec::relu());
        }
    }
    let spec = NetworkSpec::new(input_shape, layers, num_classes);
    spec.validate()?;
    Ok(spec)
}

impl NetworkSpec {
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>, num_classes: usize) -> Self {
        Self {
            input_shape,
            layers,
            num_classes,
            normalization: None,
        }
    }

    pub fn with_normalization(mut self, norm: Option<ChannelNorm>) -> Self {
        self.normalization = norm;
        self
    }

    /// Output shape (without batch) of every layer, checking that the stack
    /// type-checks end to end.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!("input shape {:?} has a zero dimension", self.input_shape)));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if let Some(n) = &self.normalization {
            if n.mean.len() != c || n.std.len() != c || n.std.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::invalid("normalization needs one mean and one positive std per channel"));
            }
        }
        let mut shape = vec![c, h, w];
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                LayerSpec::Conv2d {
                    in_filters,
                    out_filters,
                    kernel_size,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 || shape[0] != *in_filters {
                        return Err(Error::invalid(format!(
                            "layer {i} ({layer}) expects [{in_filters}, H, W] input, got {shape:?}"
                        )));
                    }
                    if *out_filters == 0 || *kernel_size == 0 || *stride == 0 {
                        return Err(Error::invalid(format!("layer {i} ({layer}) has a zero dimension")));
                    }
                    match (
                        conv_output_size(shape[1], *kernel_size, *stride, *padding),
                        conv_output_size(shape[2], *kernel_size, *stride, *padding),
                    ) {
                        (Some(oh), Some(ow)) => vec![*out_filters, oh, ow],
                        _ => {
                            return Err(Error::invalid(format!(
                                "layer {i} ({layer}) produces an empty output from {shape:?}"
                            )))
                        }
                    }
                }
                LayerSpec::Dense { out_features } => {
                    if shape.len() != 1 {
                        return Err(Error::invalid(format!(
                            "layer {i} ({layer}) needs a flattened input, got {shape:?}"
                        )));
                    }
                    if *out_features == 0 {
                        return Err(Error::invalid(format!("layer {i} ({layer}) has zero outputs")));
                    }
                    vec![*out_features]
                }
                LayerSpec::Activation(_) => shape,
                LayerSpec::Flatten => vec![shape.iter().product()],
            };
            shapes.push(shape.clone());
        }
        if shape != [self.num_classes] {
            return Err(Error::invalid(format!(
                "network output shape {shape:?} does not match {} classes",
                self.num_classes
            )));
        }
        Ok(shapes)
    }

    /// Shapes of `W_k, b_k` for every parameterized layer, in layer order.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.validate()?;
        let mut input = vec![self.input_shape.iter().product::<usize>()];
        let mut out = Vec::new();
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            match layer {
                LayerSpec::Conv2d {
                    in_filters,
                    out_filters,
                    kernel_size,
                    ..
                } => {
                    out.push(vec![*out_filters, *in_filters, *kernel_size, *kernel_size]);
                    out.push(vec![*out_filters]);
                }
                LayerSpec::Dense { out_features } => {
                    out.push(vec![*out_features, input[0]]);
                    out.push(vec![*out_features]);
                }
                _ => {}
            }
            input = shape.clone();
        }
        Ok(out)
    }

    pub fn num_parameterized_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.is_affine()).count()
    }
}

/// Bounds recorded after one layer of an interval pass.
#[derive(Clone, Debug)]
pub struct LayerBounds<T: Scalar = f32> {
    /// Index into `NetworkSpec::layers`.
    pub layer: usize,
    /// Conv or dense (post-affine bounds) as opposed to an activation.
    pub affine: bool,
    pub bounds: IntervalTensor<T>,
}

/// Graph-resident counterpart of [`LayerBounds`].
#[derive(Clone, Copy, Debug)]
pub struct TracedBounds {
    pub layer: usize,
    pub affine: bool,
    pub bounds: IntervalVars,
}

#[derive(Clone, Debug)]
pub struct IntervalTrace {
    /// Bounds after every non-flatten layer, in order.
    pub layers: Vec<TracedBounds>,
    pub logits: IntervalVars,
}

/// Result of [`Network::forward_interval`].
#[derive(Clone, Debug)]
pub struct IntervalForward<T: Scalar = f32> {
    pub layers: Vec<LayerBounds<T>>,
    pub logits: IntervalTensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Scalar = f32> {
    spec: NetworkSpec,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Network<T> {
    /// Uniform `±1/sqrt(fan_in)` weights and zero biases, deterministic in
    /// `seed`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .param_shapes()?
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                Tensor::from_fn(&shape, |_| T::from_f64_lossy(dist.sample(&mut rng)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, params })
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        let params = spec
            .param_shapes()?
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect::<Result<_>>()?;
        Ok(Self { spec, params })
    }

    /// A network with caller-supplied `W_k, b_k` (in layer order).
    pub fn from_parameters(spec: NetworkSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != params.len() {
            return Err(Error::invalid(format!(
                "network expects {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (want, got)) in shapes.iter().zip(&params).enumerate() {
            if want.as_slice() != got.shape() {
                return Err(Error::invalid(format!(
                    "parameter {i} has shape {:?}, expected {want:?}",
                    got.shape()
                )));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn parameters(&self) -> &[Tensor<T>] {
        &self.params
    }

    /// Replaces every parameter; shapes must be unchanged.
    pub fn set_parameters(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        *self = Self::from_parameters(self.spec.clone(), params)?;
        Ok(())
    }

    pub(crate) fn parameters_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Puts every parameter on `g`, as gradient-receiving leaves when
    /// `trainable`.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }

    fn batched_input(&self, x: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
        let [c, h, w] = self.spec.input_shape;
        match x.shape() {
            [cc, hh, ww] if [*cc, *hh, *ww] == [c, h, w] => Ok((x.reshape(&[1, c, h, w])?, false)),
            [_, cc, hh, ww] if [*cc, *hh, *ww] == [c, h, w] => Ok((x.clone(), true)),
            other => Err(Error::ShapeMismatch {
                op: "network input",
                lhs: other.to_vec(),
                rhs: vec![c, h, w],
            }),
        }
    }

    /// Nominal logits on the graph for a batch `x: [B, C, H, W]`.
    pub fn forward_graph(&self, g: &Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        let batch = g.shape(x)[0];
        let mut h = x;
        if let Some(norm) = &self.spec.normalization {
            let (scale, shift) = norm.scale_shift::<T>();
            h = g.channel_affine(h, &scale, &shift)?;
        }
        let mut p = 0;
        for layer in &self.spec.layers {
            h = match layer {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let out = g.conv2d(h, params[p], Some(params[p + 1]), *stride, *padding)?;
                    p += 2;
                    out
                }
                LayerSpec::Dense { .. } => {
                    let out = g.linear(h, params[p], Some(params[p + 1]))?;
                    p += 2;
                    out
                }
                LayerSpec::Activation(a) => a.graph(g, h),
                LayerSpec::Flatten => {
                    let n = g.shape(h)[1..].iter().product();
                    g.reshape(h, &[batch, n])?
                }
            };
        }
        Ok(h)
    }

    /// Interval pass on the graph, recording bounds after every layer except
    /// flattens.
    pub fn forward_interval_graph(&self, g: &Graph<T>, params: &[Var], z: IntervalVars) -> Result<IntervalTrace> {
        let batch = g.shape(z.lower)[0];
        let mut h = z;
        if let Some(norm) = &self.spec.normalization {
            // std > 0, so the map is increasing and bounds map directly.
            let (scale, shift) = norm.scale_shift::<T>();
            h = IntervalVars {
                lower: g.channel_affine(h.lower, &scale, &shift)?,
                upper: g.channel_affine(h.upper, &scale, &shift)?,
            };
        }
        let mut layers = Vec::with_capacity(self.spec.layers.len());
        let mut p = 0;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            h = match layer {
                LayerSpec::Conv2d { stride, padding, .. } => {
                    let out = conv2d_bounds(g, h, params[p], Some(params[p + 1]), *stride, *padding)?;
                    p += 2;
                    out
                }
                LayerSpec::Dense { .. } => {
                    let out = affine_bounds(g, h, params[p], Some(params[p + 1]))?;
                    p += 2;
                    out
                }
                LayerSpec::Activation(a) => monotone_bounds(g, h, *a),
                LayerSpec::Flatten => {
                    let n = g.shape(h.lower)[1..].iter().product();
                    h = IntervalVars {
                        lower: g.reshape(h.lower, &[batch, n])?,
                        upper: g.reshape(h.upper, &[batch, n])?,
                    };
                    continue;
                }
            };
            layers.push(TracedBounds {
                layer: i,
                affine: layer.is_affine(),
                bounds: h,
            });
        }
        Ok(IntervalTrace { layers, logits: h })
    }

    /// Logits for `x: [C, H, W]` (shape `[N]`) or a batch `[B, C, H, W]`
    /// (shape `[B, N]`).
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (xb, batched) = self.batched_input(x)?;
        let g = Graph::new();
        let params = self.bind(&g, false);
        let xv = g.constant(xb);
        let out = (*g.value(self.forward_graph(&g, &params, xv)?)).clone();
        if batched {
            Ok(out)
        } else {
            out.reshape(&[self.spec.num_classes])
        }
    }

    /// Interval bounds of every layer and of the logits, for an input box of
    /// shape `[C, H, W]` or `[B, C, H, W]`.
    pub fn forward_interval(&self, z0: &IntervalTensor<T>) -> Result<IntervalForward<T>> {
        let (lower, batched) = self.batched_input(z0.lower())?;
        let upper = z0.upper().reshape(lower.shape())?;
        let g = Graph::new();
        let params = self.bind(&g, false);
        let z = IntervalVars::constant(&g, &IntervalTensor::new(lower, upper)?);
        let trace = self.forward_interval_graph(&g, &params, z)?;
        let unbatch = |t: IntervalTensor<T>| -> Result<IntervalTensor<T>> {
            if batched {
                Ok(t)
            } else {
                t.reshape(&t.shape()[1..].to_vec())
            }
        };
        let layers = trace
            .layers
            .iter()
            .map(|tb| {
                Ok(LayerBounds {
                    layer: tb.layer,
                    affine: tb.affine,
                    bounds: unbatch(tb.bounds.read(&g))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(IntervalForward {
            layers,
            logits: unbatch(trace.logits.read(&g))?,
        })
    }

    /// Activations after every non-flatten layer, aligned with the entries of
    /// [`IntervalForward::layers`].
    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let z = IntervalTensor::degenerate(x.clone());
        // A degenerate box propagates exactly the nominal activations.
        Ok(self
            .forward_interval(&z)?
            .layers
            .into_iter()
            .map(|l| l.bounds.into_bounds().0)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval::input_interval;

    #[test]
    fn small_preset_matches_table() {
        let spec = preset("small", [1, 28, 28], 10).unwrap();
        let affine: Vec<String> = spec.layers.iter().filter(|l| l.is_affine()).map(|l| l.to_string()).collect();
        assert_eq!(affine, ["conv2d 1 16 4 2 0", "conv2d 16 32 4 1 0", "dense 100", "dense 10"]);
        let shapes = spec.validate().unwrap();
        assert_eq!(shapes[0], [16, 13, 13]);
        assert_eq!(shapes[2], [32, 10, 10]);
        assert_eq!(shapes[4], [3200]);
        assert_eq!(shapes[5], [100]);
        assert_eq!(shapes.last().unwrap(), &[10]);
    }

    #[test]
    fn medium_and_large_presets() {
        let m = preset("medium", [3, 32, 32], 10).unwrap();
        let convs: Vec<String> = m.layers.iter().filter(|l| matches!(l, LayerSpec::Conv2d { .. })).map(|l| l.to_string()).collect();
        assert_eq!(convs, ["conv2d 3 32 3 1 0", "conv2d 32 32 4 2 0", "conv2d 32 64 3 1 0", "conv2d 64 64 4 2 0"]);
        let dense: Vec<String> = m.layers.iter().filter(|l| matches!(l, LayerSpec::Dense { .. })).map(|l| l.to_string()).collect();
        assert_eq!(dense, ["dense 512", "dense 512", "dense 10"]);

        let l = preset("large", [3, 32, 32], 10).unwrap();
        let outs: Vec<usize> = l
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv2d { out_filters, .. } => Some(*out_filters),
                _ => None,
            })
            .collect();
        assert_eq!(outs, [64, 64, 128, 128, 128]);
        assert!(l.layers.contains(&LayerSpec::dense(200)));
        assert!(preset("small", [3, 32, 32], 10).is_ok());
        assert!(preset("medium", [1, 28, 28], 10).is_ok());
        assert!(preset("large", [1, 28, 28], 10).is_ok());
    }

    #[test]
    fn unknown_preset_lists_names() {
        let err = preset("huge", [1, 28, 28], 10).unwrap_err().to_string();
        assert!(err.contains("small") && err.contains("medium") && err.contains("large"), "{err}");
    }

    #[test]
    fn relu_placement() {
        let spec = preset("small", [1, 28, 28], 10).unwrap();
        let text: Vec<String> = spec.layers.iter().map(|l| l.to_string()).collect();
        assert_eq!(
            text,
            ["conv2d 1 16 4 2 0", "relu", "conv2d 16 32 4 1 0", "relu", "flatten", "dense 100", "relu", "dense 10"]
        );
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = NetworkSpec::new([100, 1, 1], vec![LayerSpec::Flatten, LayerSpec::dense(10)], 10);
        let a = Network::<f32>::init(spec.clone(), 7).unwrap();
        let b = Network::<f32>::init(spec.clone(), 7).unwrap();
        let c = Network::<f32>::init(spec, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let w = &a.parameters()[0];
        assert!(w.data().iter().all(|v| v.abs() <= 0.1));
        assert!(a.parameters()[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let net = Network::<f32>::zeros(preset("small", [1, 28, 28], 10).unwrap()).unwrap();
        let x = Tensor::from_fn(&[1, 28, 28], |i| (i % 7) as f32 / 7.0).unwrap();
        assert!(net.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let net = Network::<f32>::init(preset("small", [1, 28, 28], 10).unwrap(), 0).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 27, 28]).unwrap()).is_err());
    }

    #[test]
    fn recorded_layer_count_small() {
        let net = Network::<f32>::init(preset("small", [1, 28, 28], 10).unwrap(), 0).unwrap();
        let x = Tensor::from_fn(&[1, 28, 28], |i| (i % 5) as f32 / 5.0).unwrap();
        let fi = net.forward_interval(&input_interval(&x, 0.1, Some((0.0, 1.0))).unwrap()).unwrap();
        assert_eq!(fi.layers.len(), 7);
        assert_eq!(fi.layers.iter().filter(|l| l.affine).count(), 4);
        assert_eq!(fi.logits.shape(), &[10]);
    }

    #[test]
    fn zero_radius_interval_equals_forward() {
        let spec = preset("small", [1, 28, 28], 10).unwrap().with_normalization(Some(ChannelNorm {
            mean: vec![0.13],
            std: vec![0.31],
        }));
        let net = Network::<f32>::init(spec, 3).unwrap();
        let x = Tensor::from_fn(&[1, 28, 28], |i| ((i * 31) % 17) as f32 / 17.0).unwrap();
        let logits = net.forward(&x).unwrap();
        let fi = net.forward_interval(&input_interval(&x, 0.0, Some((0.0, 1.0))).unwrap()).unwrap();
        assert_eq!(fi.logits.lower(), &logits);
        assert_eq!(fi.logits.upper(), &logits);
    }

    #[test]
    fn layer_spec_text_round_trip() {
        for l in [LayerSpec::conv(3, 8, 3, 2), LayerSpec::dense(5), LayerSpec::relu(), LayerSpec::Activation(Activation::Sigmoid), LayerSpec::Flatten] {
            assert_eq!(l.to_string().parse::<LayerSpec>().unwrap(), l);
        }
        assert!("conv2d 1 2".parse::<LayerSpec>().is_err());
        assert!("tanh".parse::<LayerSpec>().is_err());
    }

    #[test]
    fn final_layer_must_match_classes() {
        let spec = NetworkSpec::new([2, 1, 1], vec![LayerSpec::Flatten, LayerSpec::dense(3)], 2);
        assert!(spec.validate().is_err());
        let spec = NetworkSpec::new([2, 1, 1], vec![LayerSpec::dense(2)], 2);
        assert!(spec.validate().is_err(), "dense needs a flattened input");
    }
}
