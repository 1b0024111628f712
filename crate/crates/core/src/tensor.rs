//! Dense row-major tensors and the numeric kernels behind every layer.
//!
//! Tensors are plain values: every operation returns a new tensor and never
//! mutates its operands. There is no implicit broadcasting; the only mixed
//! operation is scaling by a scalar. Binary operations on tensors of
//! different shapes fail with [`Error::ShapeMismatch`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type. Training runs in `f32`; gradient checks and
/// exactness oracles run in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices that do not alias `c`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any float")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major GEMM on slices: `c = op(a) * op(b) + beta * c`.
///
/// `a` holds `m x k` (or `k x m` when `trans_a`), `b` holds `k x n` (or
/// `n x k` when `trans_b`). With `beta == 0` the previous content of `c` is
/// ignored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths are checked above and `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense tensor with shape metadata.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} elements]", self.shape, self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!(
            "tensor shape must be a non-empty list of positive sizes, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor from data already known to match `shape`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        let n = data.len();
        assert!(n > 0, "from_vec needs at least one element");
        Self::from_parts(vec![n], data)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn full(shape: &[usize], v: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self::from_parts(shape.to_vec(), vec![v; n]))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect()))
    }

    /// The `n x n` identity matrix.
    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    pub fn relu(&self) -> Self {
        self.map(relu)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn abs(&self) -> Self {
        self.map(|v| v.abs())
    }

    /// Elementwise sign with `sign(0) == 0`.
    pub fn sign(&self) -> Self {
        self.map(sign)
    }

    pub fn square(&self) -> Self {
        self.map(|v| v * v)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len()).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, n, k, &self.data, &other.data, T::zero(), &mut out);
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// Matrix-vector product of `[m, n]` and `[n]`.
    pub fn matvec(&self, v: &Self) -> Result<Self> {
        if self.ndim() != 2 || v.ndim() != 1 || self.shape[1] != v.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: self.shape.clone(),
                rhs: v.shape.clone(),
            });
        }
        let out = self.matmul(&v.reshape(&[v.len(), 1])?)?;
        out.reshape(&[self.shape[0]])
    }

    /// Cross-correlation of `[C_in, H, W]` (or a batch `[B, C_in, H, W]`)
    /// with a `[C_out, C_in, k, k]` kernel, plus an optional per-channel bias.
    pub fn conv2d(
        &self,
        kernel: &Self,
        bias: Option<&Self>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let batched = self.ndim() == 4;
        let x = if batched {
            self.clone()
        } else if self.ndim() == 3 {
            let mut s = vec![1];
            s.extend_from_slice(&self.shape);
            self.reshape(&s)?
        } else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape.clone(),
                rhs: kernel.shape.clone(),
            });
        };
        let geom = ConvGeom::new(x.shape(), kernel.shape(), stride, padding)?;
        if let Some(b) = bias {
            if b.shape() != [geom.c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: b.shape.clone(),
                    rhs: vec![geom.c_out],
                });
            }
        }
        let (out, _) = conv2d_forward(&geom, x.data(), kernel.data(), bias.map(|b| b.data()));
        let out = Self::from_parts(geom.output_shape(), out);
        if batched {
            Ok(out)
        } else {
            out.reshape(&out.shape[1..])
        }
    }
}

#[inline]
pub(crate) fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[inline]
pub(crate) fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Geometry of a batched 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// `floor((size + 2 * padding - kernel) / stride) + 1`, or `None` when no
/// window fits.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        };
        if input.len() != 4 || kernel.len() != 4 || kernel[2] != kernel[3] || input[1] != kernel[1] {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let k = kernel[2];
        let (oh, ow) = match (
            conv_output_size(input[2], k, stride, pad),
            conv_output_size(input[3], k, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::invalid(format!(
                    "conv2d output would be empty: input {:?}, kernel {:?}, stride {stride}, padding {pad}",
                    input, kernel
                )))
            }
        };
        Ok(Self {
            batch: input[0],
            c_in: input[1],
            h: input[2],
            w: input[3],
            c_out: kernel[0],
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.oh, self.ow]
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate for output position `o` and kernel offset `ki`.
    #[inline]
    fn source(&self, o: usize, ki: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + ki) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

/// Unfolds input patches into a `[C_in*k*k, B*OH*OW]` matrix.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let cols_n = g.batch * g.positions();
    let mut cols = vec![T::zero(); g.patch_len() * cols_n];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.batch {
                    let plane = &x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = g.source(oy, ki, g.h) else { continue };
                        let base = b * g.positions() + oy * g.ow;
                        for ox in 0..g.ow {
                            if let Some(ix) = g.source(ox, kj, g.w) {
                                dst[base + ox] = plane[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T]) -> Vec<T> {
    let cols_n = g.batch * g.positions();
    let mut x = vec![T::zero(); g.batch * g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.batch {
                    let plane = &mut x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = g.source(oy, ki, g.h) else { continue };
                        let base = b * g.positions() + oy * g.ow;
                        for ox in 0..g.ow {
                            if let Some(ix) = g.source(ox, kj, g.w) {
                                plane[iy * g.w + ix] = plane[iy * g.w + ix] + src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Returns the `[B, C_out, OH, OW]` output and the unfolded input columns
/// (kept for the backward pass).
pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(g, x);
    let cols_n = g.batch * g.positions();
    let mut out_mat = vec![T::zero(); g.c_out * cols_n];
    gemm(false, false, g.c_out, cols_n, g.patch_len(), kernel, &cols, T::zero(), &mut out_mat);
    let p = g.positions();
    let mut out = vec![T::zero(); g.batch * g.c_out * p];
    for o in 0..g.c_out {
        let bo = bias.map_or(T::zero(), |b| b[o]);
        for b in 0..g.batch {
            let src = &out_mat[o * cols_n + b * p..][..p];
            let dst = &mut out[(b * g.c_out + o) * p..][..p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bo;
            }
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    cols: &[T],
    kernel: &[T],
    grad_out: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let p = g.positions();
    let cols_n = g.batch * p;
    // [B, O, P] -> [O, B*P]
    let mut dmat = vec![T::zero(); g.c_out * cols_n];
    for o in 0..g.c_out {
        for b in 0..g.batch {
            dmat[o * cols_n + b * p..][..p].copy_from_slice(&grad_out[(b * g.c_out + o) * p..][..p]);
        }
    }
    let input = need[0].then(|| {
        let mut dcols = vec![T::zero(); g.patch_len() * cols_n];
        gemm(true, false, g.patch_len(), cols_n, g.c_out, kernel, &dmat, T::zero(), &mut dcols);
        col2im(g, &dcols)
    });
    let kernel_grad = need[1].then(|| {
        let mut dk = vec![T::zero(); g.c_out * g.patch_len()];
        gemm(false, true, g.c_out, g.patch_len(), cols_n, &dmat, cols, T::zero(), &mut dk);
        dk
    });
    let bias = need[2].then(|| {
        (0..g.c_out)
            .map(|o| dmat[o * cols_n..(o + 1) * cols_n].iter().copied().sum())
            .collect()
    });
    ConvGrads {
        input,
        kernel: kernel_grad,
        bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let a = Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Tensor::eye(2).unwrap().matmul(&a).unwrap(), a);
    }

    #[test]
    fn column_selection() {
        let a = Tensor::<f64>::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let e = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&e).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn conv_window_sum() {
        let x = Tensor::<f32>::ones(&[1, 3, 3]).unwrap();
        let k = Tensor::<f32>::ones(&[1, 1, 3, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[1]).unwrap();
        let y = x.conv2d(&k, Some(&b), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f32>::from_fn(&[1, 4, 5], |i| i as f32 * 0.5 - 3.0).unwrap();
        let k = Tensor::<f32>::ones(&[1, 1, 1, 1]).unwrap();
        assert_eq!(x.conv2d(&k, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_rejects_empty_output() {
        let x = Tensor::<f32>::ones(&[1, 2, 2]).unwrap();
        let k = Tensor::<f32>::ones(&[1, 1, 3, 3]).unwrap();
        assert!(matches!(x.conv2d(&k, None, 1, 0), Err(Error::InvalidArgument(_))));
        assert!(x.conv2d(&k, None, 1, 1).is_ok());
    }

    #[test]
    fn elementwise_definitions() {
        let x = Tensor::<f32>::from_vec(vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(Tensor::<f32>::from_vec(vec![-3.0, 3.0]).abs().data(), &[3.0, 3.0]);
        assert_eq!(Tensor::<f32>::from_vec(vec![1.0, 2.0, 3.0]).square().sum(), 14.0);
        assert_eq!(x.sign().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn binary_ops_reject_mismatched_shapes() {
        let a = Tensor::<f32>::zeros(&[3]).unwrap();
        let b = Tensor::<f32>::zeros(&[1, 3]).unwrap();
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { op: "add", .. })));
        assert!(a.sub(&b).is_err());
        assert!(a.mul(&b).is_err());
    }

    #[test]
    fn shape_validation() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::zeros(&[0]).is_err());
        assert!(Tensor::<f32>::zeros(&[]).is_err());
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(conv_output_size(28, 4, 2, 0), Some(13));
        assert_eq!(conv_output_size(13, 4, 1, 0), Some(10));
        assert_eq!(conv_output_size(8, 3, 2, 1), Some(4));
        assert_eq!(conv_output_size(2, 3, 1, 0), None);
    }
}
