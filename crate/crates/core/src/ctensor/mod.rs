//! Complex dense tensors with a reverse-mode autodiff tape.
//!
//! A [`ComplexTensor`] carries two equally-shaped real planes (`re`, `im`)
//! plus an optional tape node handle. All differentiable operations live on
//! [`Tape`]; the real and imaginary planes are treated as independent real
//! parameters, so for a real-valued loss the stored gradients are the plain
//! partials d loss / d re and d loss / d im.
//!
//! Real-valued intermediates (magnitudes, attention weights, waveforms)
//! are represented as tensors whose `im` plane is identically zero.

mod attn;
mod conv;
mod gradcheck;
mod matmul;
mod ops;
mod ops_nn;
mod tape;

pub use attn::RelTerms;
pub use conv::ConvGeom;
pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, random_ct, FiniteDiffReport};
pub use tape::{Grads, NodeId, ParamId, Tape};

use ndarray::{ArcArray, ArrayD, IxDyn};
use num_traits::{Float, NumAssign};
use std::fmt;
use std::iter::Sum;

use crate::error::{Error, Result};

/// Scalar type the whole stack is generic over: `f32` for training and
/// inference, `f64` for finite-difference verification.
pub trait Real:
    Float
    + NumAssign
    + Sum
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Stabilizer inside `sqrt(re^2 + im^2 + EPS_MAG)` so magnitudes stay
    /// differentiable at the origin.
    fn eps_mag() -> Self {
        Self::from_f64(1e-12)
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense complex tensor: paired real/imaginary planes of identical shape.
///
/// Planes are reference-counted (`ArcArray`), so clones are cheap and values
/// are effectively immutable once built. `id` is set when the tensor was
/// produced by (or registered on) a tape.
#[derive(Clone)]
pub struct ComplexTensor<T: Real> {
    re: ArcArray<T, IxDyn>,
    im: ArcArray<T, IxDyn>,
    id: Option<NodeId>,
}

impl<T: Real> ComplexTensor<T> {
    pub fn from_parts(re: ArrayD<T>, im: ArrayD<T>) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::dim(
                "from_parts",
                format!("re shape {:?} != im shape {:?}", re.shape(), im.shape()),
            ));
        }
        Ok(Self { re: re.into_shared(), im: im.into_shared(), id: None })
    }

    /// Real-plane constructor; the imaginary plane is all zeros.
    pub fn from_re(re: ArrayD<T>) -> Self {
        let im = ArrayD::zeros(re.raw_dim());
        Self { re: re.into_shared(), im: im.into_shared(), id: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let re = ArrayD::zeros(IxDyn(shape));
        let im = ArrayD::zeros(IxDyn(shape));
        Self { re: re.into_shared(), im: im.into_shared(), id: None }
    }

    pub fn scalar(re: T, im: T) -> Self {
        let sh: &[usize] = &[];
        Self {
            re: ArrayD::from_elem(IxDyn(sh), re).into_shared(),
            im: ArrayD::from_elem(IxDyn(sh), im).into_shared(),
            id: None,
        }
    }

    /// Build from row-major element slices.
    pub fn from_slices(shape: &[usize], re: &[T], im: &[T]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(Error::dim(
                "from_slices",
                format!("shape {:?} wants {} elements, got re {} / im {}", shape, n, re.len(), im.len()),
            ));
        }
        let re = ArrayD::from_shape_vec(IxDyn(shape), re.to_vec()).expect("checked length");
        let im = ArrayD::from_shape_vec(IxDyn(shape), im.to_vec()).expect("checked length");
        Self::from_parts(re, im)
    }

    pub fn re(&self) -> &ArcArray<T, IxDyn> {
        &self.re
    }

    pub fn im(&self) -> &ArcArray<T, IxDyn> {
        &self.im
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn ndim(&self) -> usize {
        self.re.ndim()
    }

    pub fn numel(&self) -> usize {
        self.re.len()
    }

    pub fn id(&self) -> Option<NodeId> {
        self.id
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Same values, no tape handle. Gradients stop here.
    pub fn detach(&self) -> Self {
        Self { re: self.re.clone(), im: self.im.clone(), id: None }
    }

    pub(crate) fn with_id(mut self, id: Option<NodeId>) -> Self {
        self.id = id;
        self
    }

    /// Value of a one-element tensor's real plane.
    pub fn re_scalar(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "re_scalar needs a one-element tensor, shape is {:?}",
                self.shape()
            )));
        }
        Ok(*self.re.iter().next().expect("one element"))
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().all(|v| v.is_finite()) && self.im.iter().all(|v| v.is_finite())
    }

    /// Largest absolute value over both planes.
    pub fn max_abs(&self) -> T {
        let m1 = self.re.iter().fold(T::zero(), |a, v| a.max(v.abs()));
        let m2 = self.im.iter().fold(T::zero(), |a, v| a.max(v.abs()));
        m1.max(m2)
    }

    /// Max absolute elementwise difference over both planes.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        debug_assert_eq!(self.shape(), other.shape());
        let d1 = self
            .re
            .iter()
            .zip(other.re.iter())
            .fold(T::zero(), |a, (x, y)| a.max((*x - *y).abs()));
        let d2 = self
            .im
            .iter()
            .zip(other.im.iter())
            .fold(T::zero(), |a, (x, y)| a.max((*x - *y).abs()));
        d1.max(d2)
    }

    /// Lossy precision cast used by checkpoints and the gradcheck harness.
    pub fn cast<U: Real>(&self) -> ComplexTensor<U> {
        let re = self.re.mapv(|v| U::from_f64(v.to_f64()));
        let im = self.im.mapv(|v| U::from_f64(v.to_f64()));
        ComplexTensor { re: re.into_shared(), im: im.into_shared(), id: None }
    }
}

impl<T: Real> fmt::Debug for ComplexTensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ComplexTensor")
            .field("shape", &self.shape())
            .field("tracked", &self.is_tracked())
            .finish()
    }
}

/// Trailing-dimension broadcast of two shapes (NumPy rules).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::dim(op, format!("cannot broadcast {:?} with {:?}", a, b)));
        }
    }
    Ok(out)
}

/// Sum `grad` down to `target` shape, undoing a trailing-dimension broadcast.
pub(crate) fn reduce_to_shape<T: Real>(grad: &ArrayD<T>, target: &[usize]) -> ArrayD<T> {
    let mut g = grad.to_owned();
    while g.ndim() > target.len() {
        g = g.sum_axis(ndarray::Axis(0));
    }
    for (ax, (&gd, &td)) in g.shape().to_vec().iter().zip(target.iter()).enumerate() {
        if gd != td {
            debug_assert_eq!(td, 1, "reduce_to_shape: incompatible target");
            let summed = g.sum_axis(ndarray::Axis(ax));
            g = summed.insert_axis(ndarray::Axis(ax));
        }
    }
    g
}

#[cfg(test)]
mod basic_tests {
    use super::*;

    #[test]
    fn from_parts_rejects_mismatched_planes() {
        let re = ArrayD::<f32>::zeros(IxDyn(&[2, 3]));
        let im = ArrayD::<f32>::zeros(IxDyn(&[3, 2]));
        assert!(matches!(ComplexTensor::from_parts(re, im), Err(Error::Dim { .. })));
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[4, 1, 5], &[2, 5]).unwrap(), vec![4, 2, 5]);
        assert!(broadcast_shape("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn reduce_undoes_broadcast() {
        let g = ArrayD::from_elem(IxDyn(&[2, 3]), 1.0f64);
        let r = reduce_to_shape(&g, &[3]);
        assert_eq!(r.shape(), &[3]);
        assert_eq!(r[[0]], 2.0);
        let r = reduce_to_shape(&g, &[2, 1]);
        assert_eq!(r.shape(), &[2, 1]);
        assert_eq!(r[[0, 0]], 3.0);
    }
}
