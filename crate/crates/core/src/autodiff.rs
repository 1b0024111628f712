//! Reverse-mode differentiation over tensor primitives.
//!
//! A [`Graph`] records every primitive applied to its variables. Calling
//! [`Graph::backward`] on a single-element result walks the record in
//! reverse and returns the gradient of that result with respect to every
//! variable that was created with [`Graph::param`] (and everything computed
//! from one).
//!
//! ```
//! use ibp::autodiff::Graph;
//! use ibp::Tensor;
//!
//! let g = Graph::<f64>::new();
//! let x = g.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
//! let y = g.sum(g.square(x));
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```
//!
//! Subgradient conventions: `relu'(0) = 0`, `abs'(0) = 0`.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward, conv2d_forward, gemm, sign, ConvGeom, Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ChannelAffine {
        x: Var,
        scale: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    WorstCase {
        lower: Var,
        upper: Var,
        labels: Vec<usize>,
    },
}

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records tensor computations for reverse-mode differentiation.
///
/// A graph is single-threaded and meant to live for one forward/backward
/// pass; build a fresh one per batch.
pub struct Graph<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` does not depend on any parameter.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    fn unary(&self, a: Var, f: impl Fn(&Tensor<T>) -> Tensor<T>, op: Op<T>) -> Var {
        let value = f(&self.value(a));
        let needs = self.needs(&[a]);
        self.push(value, op, needs)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), self.needs(&[a, b])))
    }

    /// `x · wᵀ + b` for a batch `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ndim() != 2 || wv.ndim() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(mismatch("linear", &xv, &wv));
        }
        let (batch, inp, out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut y = vec![T::zero(); batch * out];
        gemm(false, true, batch, out, inp, xv.data(), wv.data(), T::zero(), &mut y);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [out] {
                return Err(mismatch("linear bias", &bv, &wv));
            }
            for row in y.chunks_mut(out) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v = *v + bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs(&deps);
        Ok(self.push(Tensor::from_parts(vec![batch, out], y), Op::Linear { x, w, b }, needs))
    }

    /// Batched cross-correlation: `x: [B, C_in, H, W]`, `k: [C_out, C_in, k, k]`.
    pub fn conv2d(&self, x: Var, k: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        let geom = ConvGeom::new(xv.shape(), kv.shape(), stride, padding)?;
        let bv = b.map(|b| self.value(b));
        if let Some(bv) = &bv {
            if bv.shape() != [geom.c_out] {
                return Err(mismatch("conv2d bias", bv, &kv));
            }
        }
        let (out, cols) = conv2d_forward(&geom, xv.data(), kv.data(), bv.as_ref().map(|b| b.data()));
        let mut deps = vec![x, k];
        deps.extend(b);
        let needs = self.needs(&deps);
        let cols = if needs { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::from_parts(geom.output_shape(), out),
            Op::Conv { x, k, b, geom, cols },
            needs,
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(&self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(&self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), self.needs(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(&self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b), self.needs(&[a, b])))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary(a, |t| t.scale(c), Op::Scale(a, c))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Tensor::relu, Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Tensor::sigmoid, Op::Sigmoid(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Tensor::abs, Op::Abs(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Tensor::square, Op::Square(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |t| Tensor::scalar(t.sum()), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        self.unary(a, |t| Tensor::scalar(t.mean()), Op::Mean(a))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), self.needs(&[a])))
    }

    /// Per-channel `x * scale[c] + shift[c]` on `[B, C, H, W]`.
    pub fn channel_affine(&self, x: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 4 || xv.shape()[1] != scale.len() || scale.len() != shift.len() {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                lhs: xv.shape().to_vec(),
                rhs: vec![scale.len(), shift.len()],
            });
        }
        let c = scale.len();
        let plane = xv.shape()[2] * xv.shape()[3];
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                v * scale[ch] + shift[ch]
            })
            .collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let op = Op::ChannelAffine {
            x,
            scale: scale.to_vec(),
        };
        Ok(self.push(value, op, self.needs(&[x])))
    }

    /// Softmax cross-entropy of `[B, N]` logits, averaged over the batch.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        check_labels(&lv, labels)?;
        let n = lv.shape()[1];
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for (b, (row, p)) in lv.data().chunks(n).zip(probs.chunks_mut(n)).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - max).exp();
                z = z + *pi;
            }
            for pi in p.iter_mut() {
                *pi = *pi / z;
            }
            total = total + (z.ln() + max - row[labels[b]]);
        }
        let batch = T::from_usize(labels.len()).unwrap();
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(total / batch), op, self.needs(&[logits])))
    }

    /// Worst-case logits: the true class takes its lower bound, every other
    /// class its upper bound.
    pub fn worst_case_logits(&self, lower: Var, upper: Var, labels: &[usize]) -> Result<Var> {
        let (lv, uv) = (self.value(lower), self.value(upper));
        if lv.shape() != uv.shape() {
            return Err(mismatch("worst_case_logits", &lv, &uv));
        }
        check_labels(&lv, labels)?;
        let n = lv.shape()[1];
        let mut data = uv.data().to_vec();
        for (b, &y) in labels.iter().enumerate() {
            data[b * n + y] = lv.data()[b * n + y];
        }
        let op = Op::WorstCase {
            lower,
            upper,
            labels: labels.to_vec(),
        };
        Ok(self.push(
            Tensor::from_parts(lv.shape().to_vec(), data),
            op,
            self.needs(&[lower, upper]),
        ))
    }

    /// Gradients of the single-element `root` with respect to every
    /// parameter-dependent variable.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a single-element output, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[root.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::from_parts(root_value.shape().to_vec(), vec![T::one()]));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let mut acc = |v: Var, t: Tensor<T>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                let slot = &mut grads[v.0];
                match slot {
                    Some(existing) => {
                        for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                            *e = *e + *x;
                        }
                    }
                    None => *slot = Some(t),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if needs(*a) {
                        let mut da = vec![T::zero(); m * k];
                        gemm(false, true, m, k, n, g.data(), bv.data(), T::zero(), &mut da);
                        acc(*a, Tensor::from_parts(vec![m, k], da));
                    }
                    if needs(*b) {
                        let mut db = vec![T::zero(); k * n];
                        gemm(true, false, k, n, m, av.data(), g.data(), T::zero(), &mut db);
                        acc(*b, Tensor::from_parts(vec![k, n], db));
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (batch, inp, out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                    if needs(*x) {
                        let mut dx = vec![T::zero(); batch * inp];
                        gemm(false, false, batch, inp, out, g.data(), wv.data(), T::zero(), &mut dx);
                        acc(*x, Tensor::from_parts(vec![batch, inp], dx));
                    }
                    if needs(*w) {
                        let mut dw = vec![T::zero(); out * inp];
                        gemm(true, false, out, inp, batch, g.data(), xv.data(), T::zero(), &mut dw);
                        acc(*w, Tensor::from_parts(vec![out, inp], dw));
                    }
                    if let Some(b) = b {
                        if needs(*b) {
                            let mut db = vec![T::zero(); out];
                            for row in g.data().chunks(out) {
                                for (d, &r) in db.iter_mut().zip(row) {
                                    *d = *d + r;
                                }
                            }
                            acc(*b, Tensor::from_parts(vec![out], db));
                        }
                    }
                }
                Op::Conv { x, k, b, geom, cols } => {
                    let need = [needs(*x), needs(*k), b.is_some_and(needs)];
                    let cg = conv2d_backward(geom, cols, val(*k).data(), g.data(), need);
                    if let Some(dx) = cg.input {
                        acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
                    }
                    if let Some(dk) = cg.kernel {
                        acc(*k, Tensor::from_parts(val(*k).shape().to_vec(), dk));
                    }
                    if let (Some(b), Some(db)) = (b, cg.bias) {
                        acc(*b, Tensor::from_parts(vec![geom.c_out], db));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.scale(-T::one()));
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, g.mul(val(*b))?);
                    }
                    if needs(*b) {
                        acc(*b, g.mul(val(*a))?);
                    }
                }
                Op::Scale(a, c) => acc(*a, g.scale(*c)),
                Op::Relu(a) => {
                    let d = g.zip_map(val(*a), "relu'", |g, x| if x > T::zero() { g } else { T::zero() })?;
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, "sigmoid'", |g, s| g * s * (T::one() - s))?;
                    acc(*a, d);
                }
                Op::Abs(a) => {
                    let d = g.zip_map(val(*a), "abs'", |g, x| g * sign(x))?;
                    acc(*a, d);
                }
                Op::Square(a) => {
                    let two = T::one() + T::one();
                    let d = g.zip_map(val(*a), "square'", |g, x| g * two * x)?;
                    acc(*a, d);
                }
                Op::Sum(a) => {
                    let av = val(*a);
                    acc(*a, Tensor::from_parts(av.shape().to_vec(), vec![g.item(); av.len()]));
                }
                Op::Mean(a) => {
                    let av = val(*a);
                    let gi = g.item() / T::from_usize(av.len()).unwrap();
                    acc(*a, Tensor::from_parts(av.shape().to_vec(), vec![gi; av.len()]));
                }
                Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
                Op::ChannelAffine { x, scale } => {
                    let xv = val(*x);
                    let plane = xv.shape()[2] * xv.shape()[3];
                    let c = scale.len();
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * scale[(i / plane) % c])
                        .collect();
                    acc(*x, Tensor::from_parts(xv.shape().to_vec(), d));
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let lv = val(*logits);
                    let n = lv.shape()[1];
                    let coef = g.item() / T::from_usize(labels.len()).unwrap();
                    let mut d: Vec<T> = probs.iter().map(|&p| p * coef).collect();
                    for (b, &y) in labels.iter().enumerate() {
                        d[b * n + y] = d[b * n + y] - coef;
                    }
                    acc(*logits, Tensor::from_parts(lv.shape().to_vec(), d));
                }
                Op::WorstCase { lower, upper, labels } => {
                    let n = g.shape()[1];
                    let mut dl = vec![T::zero(); g.len()];
                    let mut du = g.data().to_vec();
                    for (b, &y) in labels.iter().enumerate() {
                        dl[b * n + y] = du[b * n + y];
                        du[b * n + y] = T::zero();
                    }
                    acc(*lower, Tensor::from_parts(g.shape().to_vec(), dl));
                    acc(*upper, Tensor::from_parts(g.shape().to_vec(), du));
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn check_labels<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<()> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "logits vs labels",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let n = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::invalid(format!("class index {bad} out of range for {n} classes")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abs_gradient_is_zero_at_zero() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![0.0, 0.0, -1.0, 2.0]));
        let y = g.sum(g.abs(x));
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, -1.0, 1.0]);
    }

    #[test]
    fn relu_gradient_is_zero_at_zero() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.sum(g.relu(x));
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let p = g.param(Tensor::from_vec(vec![3.0, 4.0]));
        let y = g.sum(g.mul(c, p).unwrap());
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_stable() {
        let g = Graph::<f64>::new();
        let z = g.param(Tensor::new(&[1, 10], vec![0.3; 10]).unwrap());
        let ce = g.cross_entropy(z, &[4]).unwrap();
        assert!((g.value(ce).item() - 10f64.ln()).abs() < 1e-12);

        let z = g.param(Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap());
        let ce = g.cross_entropy(z, &[0]).unwrap();
        let v = g.value(ce).item();
        assert!(v.is_finite() && v.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let g = Graph::<f64>::new();
        let raw = vec![0.5, -1.0, 2.0];
        let z = g.param(Tensor::new(&[1, 3], raw.clone()).unwrap());
        let ce = g.cross_entropy(z, &[1]).unwrap();
        let grads = g.backward(ce).unwrap();
        let zs: f64 = raw.iter().map(|v| v.exp()).sum();
        for (i, (&gv, &r)) in grads.get(z).unwrap().data().iter().zip(&raw).enumerate() {
            let expected = r.exp() / zs - if i == 1 { 1.0 } else { 0.0 };
            assert!((gv - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_range_label() {
        let g = Graph::<f32>::new();
        let z = g.constant(Tensor::new(&[1, 3], vec![0.0; 3]).unwrap());
        assert!(g.cross_entropy(z, &[3]).is_err());
        assert!(g.worst_case_logits(z, z, &[5]).is_err());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let g = Graph::<f32>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }
}
