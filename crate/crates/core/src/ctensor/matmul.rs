//! Batched matrix products over the trailing two axes.
//!
//! `cmatmul` expands the complex product into four real products
//! (`(Ar Br - Ai Bi) + j(Ar Bi + Ai Br)`); `rmatmul` and `mix_real` are the
//! real-only and real-times-complex specializations used by the relative
//! positional encoding and by attention application.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayViewD, Axis, Ix2, IxDyn};
use smallvec::{smallvec, SmallVec};

use super::tape::{NodeId, Tape};
use super::{broadcast_shape, ComplexTensor, Real};
use crate::error::{Error, Result};

type Ids = SmallVec<[Option<NodeId>; 3]>;

/// `[.., m, k] x [.., k, n] -> [.., m, n]` with broadcastable leading dims.
pub(crate) fn bmm<T: Real>(op: &'static str, a: &ArrayViewD<'_, T>, b: &ArrayViewD<'_, T>) -> Result<ArrayD<T>> {
    let (nda, ndb) = (a.ndim(), b.ndim());
    if nda < 2 || ndb < 2 {
        return Err(Error::dim(op, "operands need at least 2 dims"));
    }
    let (m, k) = (a.shape()[nda - 2], a.shape()[nda - 1]);
    let (k2, n) = (b.shape()[ndb - 2], b.shape()[ndb - 1]);
    if k != k2 {
        return Err(Error::dim(
            op,
            format!("inner dimensions disagree: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let batch = broadcast_shape(op, &a.shape()[..nda - 2], &b.shape()[..ndb - 2])?;
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);

    // Common case: plain weight multiply, batch dims all on the left operand.
    if ndb == 2 {
        let rows = a.len() / k;
        let a_std = a.as_standard_layout();
        let a2 = a_std.to_shape((rows, k)).expect("contiguous reshape");
        let b2 = b.view().into_dimensionality::<Ix2>().expect("2-d operand");
        let mut out = Array2::<T>::zeros((rows, n));
        general_mat_mul(T::one(), &a2, &b2, T::zero(), &mut out);
        return Ok(out
            .into_dyn()
            .into_shape_with_order(IxDyn(&out_shape))
            .expect("rows*n elements"));
    }

    let mut out = ArrayD::<T>::zeros(IxDyn(&out_shape));
    for idx in ndarray::indices(IxDyn(&batch)) {
        let idx: Vec<usize> = (0..batch.len()).map(|d| idx[d]).collect();
        let a2 = lead_view(a, &idx);
        let b2 = lead_view(b, &idx);
        let mut o = out.view_mut();
        for &i in &idx {
            o = o.index_axis_move(Axis(0), i);
        }
        let mut o2 = o.into_dimensionality::<Ix2>().expect("trailing matrix");
        general_mat_mul(T::one(), &a2, &b2, T::zero(), &mut o2);
    }
    Ok(out)
}

/// Select the `[m, k]` slice of `x` for a broadcast batch index.
fn lead_view<'s, T: Real>(x: &'s ArrayViewD<'_, T>, idx: &[usize]) -> ndarray::ArrayView2<'s, T> {
    let lead = x.ndim() - 2;
    let offset = idx.len() - lead;
    let mut v = x.view();
    for &i in idx.iter().skip(offset) {
        let extent = v.shape()[0];
        v = v.index_axis_move(Axis(0), if extent == 1 { 0 } else { i });
    }
    v.into_dimensionality::<Ix2>().expect("trailing matrix")
}

/// Swap the trailing two axes.
fn swap_t<T: Real>(x: &ArrayD<T>) -> ArrayD<T> {
    let nd = x.ndim();
    let mut axes: Vec<usize> = (0..nd).collect();
    axes.swap(nd - 2, nd - 1);
    x.view().permuted_axes(IxDyn(&axes)).to_owned()
}

/// Sum a batched gradient down to an operand's shape (matrix dims kept).
fn reduce_batch<T: Real>(g: ArrayD<T>, target: &[usize]) -> ArrayD<T> {
    super::reduce_to_shape(&g, target)
}

impl<T: Real> Tape<T> {
    /// Complex matrix product over the trailing two axes.
    pub fn cmatmul(&mut self, a: &ComplexTensor<T>, b: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let rr = bmm("cmatmul", &a.re().view(), &b.re().view())?;
        let ii = bmm("cmatmul", &a.im().view(), &b.im().view())?;
        let ri = bmm("cmatmul", &a.re().view(), &b.im().view())?;
        let ir = bmm("cmatmul", &a.im().view(), &b.re().view())?;
        let out = ComplexTensor::from_parts(rr - ii, ri + ir)?;
        let (av, bv) = (a.detach(), b.detach());
        let ids: Ids = smallvec![a.id(), b.id()];
        self.record(
            "cmatmul",
            ids,
            out,
            Box::new(move |g| {
                let bt_re = swap_t(&bv.re().to_owned());
                let bt_im = swap_t(&bv.im().to_owned());
                let at_re = swap_t(&av.re().to_owned());
                let at_im = swap_t(&av.im().to_owned());
                let gr = g.re().view();
                let gi = g.im().view();
                let dar = bmm("cmatmul", &gr, &bt_re.view()).expect("fwd shapes")
                    + bmm("cmatmul", &gi, &bt_im.view()).expect("fwd shapes");
                let dai = bmm("cmatmul", &gi, &bt_re.view()).expect("fwd shapes")
                    - bmm("cmatmul", &gr, &bt_im.view()).expect("fwd shapes");
                let dbr = bmm("cmatmul", &at_re.view(), &gr).expect("fwd shapes")
                    + bmm("cmatmul", &at_im.view(), &gi).expect("fwd shapes");
                let dbi = bmm("cmatmul", &at_re.view(), &gi).expect("fwd shapes")
                    - bmm("cmatmul", &at_im.view(), &gr).expect("fwd shapes");
                let da = ComplexTensor::from_parts(
                    reduce_batch(dar, av.shape()),
                    reduce_batch(dai, av.shape()),
                )
                .expect("reduced to operand shape");
                let db = ComplexTensor::from_parts(
                    reduce_batch(dbr, bv.shape()),
                    reduce_batch(dbi, bv.shape()),
                )
                .expect("reduced to operand shape");
                smallvec![Some(da), Some(db)]
            }),
        )
    }

    /// Real matrix product of the re planes; output im plane is zero.
    pub fn rmatmul(&mut self, a: &ComplexTensor<T>, b: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let out = bmm("rmatmul", &a.re().view(), &b.re().view())?;
        let (av, bv) = (a.detach(), b.detach());
        let ids: Ids = smallvec![a.id(), b.id()];
        self.record(
            "rmatmul",
            ids,
            ComplexTensor::from_re(out),
            Box::new(move |g| {
                let bt = swap_t(&bv.re().to_owned());
                let at = swap_t(&av.re().to_owned());
                let dar = reduce_batch(bmm("rmatmul", &g.re().view(), &bt.view()).expect("fwd shapes"), av.shape());
                let dbr = reduce_batch(bmm("rmatmul", &at.view(), &g.re().view()).expect("fwd shapes"), bv.shape());
                let da = ComplexTensor::from_re(dar);
                let db = ComplexTensor::from_re(dbr);
                smallvec![Some(da), Some(db)]
            }),
        )
    }

    /// Apply a real mixing matrix (attention weights) to complex values:
    /// `out.re = A v.re`, `out.im = A v.im` with `A = a.re`.
    pub fn mix_real(&mut self, a: &ComplexTensor<T>, v: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let re = bmm("mix_real", &a.re().view(), &v.re().view())?;
        let im = bmm("mix_real", &a.re().view(), &v.im().view())?;
        let (av, vv) = (a.detach(), v.detach());
        let ids: Ids = smallvec![a.id(), v.id()];
        self.record(
            "mix_real",
            ids,
            ComplexTensor::from_parts(re, im)?,
            Box::new(move |g| {
                let vt_re = swap_t(&vv.re().to_owned());
                let vt_im = swap_t(&vv.im().to_owned());
                let at = swap_t(&av.re().to_owned());
                let dar = bmm("mix_real", &g.re().view(), &vt_re.view()).expect("fwd shapes")
                    + bmm("mix_real", &g.im().view(), &vt_im.view()).expect("fwd shapes");
                let dvr = bmm("mix_real", &at.view(), &g.re().view()).expect("fwd shapes");
                let dvi = bmm("mix_real", &at.view(), &g.im().view()).expect("fwd shapes");
                let da = ComplexTensor::from_re(reduce_batch(dar, av.shape()));
                let dv = ComplexTensor::from_parts(
                    reduce_batch(dvr, vv.shape()),
                    reduce_batch(dvi, vv.shape()),
                )
                .expect("reduced to operand shape");
                smallvec![Some(da), Some(dv)]
            }),
        )
    }
}
