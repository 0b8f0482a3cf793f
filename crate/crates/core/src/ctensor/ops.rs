//! Forward rules and their backward closures for every tape operation
//! except matrix products (`matmul.rs`) and 2-D convolutions (`conv.rs`).

use ndarray::{ArrayD, Axis, IxDyn, Slice, Zip};
use smallvec::{smallvec, SmallVec};

use super::tape::{InputGrads, NodeId, Tape};
use super::{broadcast_shape, reduce_to_shape, ComplexTensor, Real};
use crate::error::{Error, Result};

type Ids = SmallVec<[Option<NodeId>; 3]>;

fn bc_apply<T: Real>(
    op: &'static str,
    a: &ComplexTensor<T>,
    b: &ComplexTensor<T>,
    f_re: impl Fn(T, T, T, T) -> T,
    f_im: impl Fn(T, T, T, T) -> T,
) -> Result<(ArrayD<T>, ArrayD<T>)> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let dim = IxDyn(&shape);
    let ar = a.re().broadcast(dim.clone()).ok_or_else(|| Error::dim(op, "broadcast failed"))?;
    let ai = a.im().broadcast(dim.clone()).ok_or_else(|| Error::dim(op, "broadcast failed"))?;
    let br = b.re().broadcast(dim.clone()).ok_or_else(|| Error::dim(op, "broadcast failed"))?;
    let bi = b.im().broadcast(dim.clone()).ok_or_else(|| Error::dim(op, "broadcast failed"))?;
    let mut out_re = ArrayD::zeros(dim.clone());
    let mut out_im = ArrayD::zeros(dim);
    Zip::from(&mut out_re).and(&ar).and(&ai).and(&br).and(&bi).for_each(|o, &xr, &xi, &yr, &yi| {
        *o = f_re(xr, xi, yr, yi);
    });
    Zip::from(&mut out_im).and(&ar).and(&ai).and(&br).and(&bi).for_each(|o, &xr, &xi, &yr, &yi| {
        *o = f_im(xr, xi, yr, yi);
    });
    Ok((out_re, out_im))
}

fn grad_pair<T: Real>(re: ArrayD<T>, im: ArrayD<T>) -> ComplexTensor<T> {
    ComplexTensor::from_parts(re, im).expect("grad planes share a shape")
}

impl<T: Real> Tape<T> {
    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(&mut self, a: &ComplexTensor<T>, b: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let (re, im) = bc_apply("add", a, b, |xr, _, yr, _| xr + yr, |_, xi, _, yi| xi + yi)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let ids: Ids = smallvec![a.id(), b.id()];
        self.record(
            "add",
            ids,
            ComplexTensor::from_parts(re, im)?,
            Box::new(move |g| {
                let da = grad_pair(reduce_to_shape(&g.re().to_owned(), &sa), reduce_to_shape(&g.im().to_owned(), &sa));
                let db = grad_pair(reduce_to_shape(&g.re().to_owned(), &sb), reduce_to_shape(&g.im().to_owned(), &sb));
                smallvec![Some(da), Some(db)]
            }),
        )
    }

    /// Elementwise difference `a - b` with broadcasting.
    pub fn sub(&mut self, a: &ComplexTensor<T>, b: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let (re, im) = bc_apply("sub", a, b, |xr, _, yr, _| xr - yr, |_, xi, _, yi| xi - yi)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let ids: Ids = smallvec![a.id(), b.id()];
        self.record(
            "sub",
            ids,
            ComplexTensor::from_parts(re, im)?,
            Box::new(move |g| {
                let da = grad_pair(reduce_to_shape(&g.re().to_owned(), &sa), reduce_to_shape(&g.im().to_owned(), &sa));
                let db = grad_pair(
                    reduce_to_shape(&g.re().mapv(|v| -v), &sb),
                    reduce_to_shape(&g.im().mapv(|v| -v), &sb),
                );
                smallvec![Some(da), Some(db)]
            }),
        )
    }

    /// Elementwise complex product with broadcasting:
    /// `out = (ar*br - ai*bi) + j(ar*bi + ai*br)`.
    pub fn cmul(&mut self, a: &ComplexTensor<T>, b: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let (re, im) = bc_apply(
            "cmul",
            a,
            b,
            |xr, xi, yr, yi| xr * yr - xi * yi,
            |xr, xi, yr, yi| xr * yi + xi * yr,
        )?;
        let (av, bv) = (a.detach(), b.detach());
        let ids: Ids = smallvec![a.id(), b.id()];
        self.record(
            "cmul",
            ids,
            ComplexTensor::from_parts(re, im)?,
            Box::new(move |g| {
                let dim = IxDyn(g.shape());
                let br = bv.re().broadcast(dim.clone()).expect("forward broadcast succeeded");
                let bi = bv.im().broadcast(dim.clone()).expect("forward broadcast succeeded");
                let ar = av.re().broadcast(dim.clone()).expect("forward broadcast succeeded");
                let ai = av.im().broadcast(dim.clone()).expect("forward broadcast succeeded");
                let gr = g.re();
                let gi = g.im();
                let mut dar = ArrayD::zeros(dim.clone());
                let mut dai = ArrayD::zeros(dim.clone());
                let mut dbr = ArrayD::zeros(dim.clone());
                let mut dbi = ArrayD::zeros(dim);
                Zip::from(&mut dar).and(gr).and(gi).and(&br).and(&bi).for_each(|o, &r, &i, &y, &z| *o = r * y + i * z);
                Zip::from(&mut dai).and(gr).and(gi).and(&br).and(&bi).for_each(|o, &r, &i, &y, &z| *o = -r * z + i * y);
                Zip::from(&mut dbr).and(gr).and(gi).and(&ar).and(&ai).for_each(|o, &r, &i, &x, &w| *o = r * x + i * w);
                Zip::from(&mut dbi).and(gr).and(gi).and(&ar).and(&ai).for_each(|o, &r, &i, &x, &w| *o = -r * w + i * x);
                let da = grad_pair(reduce_to_shape(&dar, av.shape()), reduce_to_shape(&dai, av.shape()));
                let db = grad_pair(reduce_to_shape(&dbr, bv.shape()), reduce_to_shape(&dbi, bv.shape()));
                smallvec![Some(da), Some(db)]
            }),
        )
    }

    /// Multiply both planes by a real constant.
    pub fn scale(&mut self, x: &ComplexTensor<T>, s: T) -> Result<ComplexTensor<T>> {
        let re = x.re().mapv(|v| v * s);
        let im = x.im().mapv(|v| v * s);
        let ids: Ids = smallvec![x.id()];
        self.record(
            "scale",
            ids,
            ComplexTensor::from_parts(re, im)?,
            Box::new(move |g| {
                smallvec![Some(grad_pair(g.re().mapv(|v| v * s), g.im().mapv(|v| v * s)))]
            }),
        )
    }

    /// Real plane of `z` as a real tensor (imaginary plane zeroed).
    pub fn re_part(&mut self, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let ids: Ids = smallvec![z.id()];
        self.record(
            "re_part",
            ids,
            ComplexTensor::from_re(z.re().to_owned()),
            Box::new(move |g| {
                let zero = ArrayD::zeros(g.re().raw_dim());
                smallvec![Some(grad_pair(g.re().to_owned(), zero))]
            }),
        )
    }

    /// Imaginary plane of `z` as a real tensor.
    pub fn im_part(&mut self, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let ids: Ids = smallvec![z.id()];
        self.record(
            "im_part",
            ids,
            ComplexTensor::from_re(z.im().to_owned()),
            Box::new(move |g| {
                let zero = ArrayD::zeros(g.re().raw_dim());
                smallvec![Some(grad_pair(zero, g.re().to_owned()))]
            }),
        )
    }

    /// Assemble a complex tensor from the real planes of two real tensors.
    pub fn combine(&mut self, re: &ComplexTensor<T>, im: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        if re.shape() != im.shape() {
            return Err(Error::dim("combine", format!("{:?} vs {:?}", re.shape(), im.shape())));
        }
        let ids: Ids = smallvec![re.id(), im.id()];
        self.record(
            "combine",
            ids,
            ComplexTensor::from_parts(re.re().to_owned(), im.re().to_owned())?,
            Box::new(move |g| {
                let zero = ArrayD::zeros(g.re().raw_dim());
                let dre = grad_pair(g.re().to_owned(), zero.clone());
                let dim_ = grad_pair(g.im().to_owned(), zero);
                smallvec![Some(dre), Some(dim_)]
            }),
        )
    }

    /// Sum of all elements (complex), producing a 0-d tensor.
    pub fn sum_all(&mut self, x: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let shape = x.shape().to_vec();
        let value = ComplexTensor::scalar(x.re().sum(), x.im().sum());
        let ids: Ids = smallvec![x.id()];
        self.record(
            "sum_all",
            ids,
            value,
            Box::new(move |g| {
                let gr = *g.re().iter().next().expect("scalar");
                let gi = *g.im().iter().next().expect("scalar");
                let re = ArrayD::from_elem(IxDyn(&shape), gr);
                let im = ArrayD::from_elem(IxDyn(&shape), gi);
                smallvec![Some(grad_pair(re, im))]
            }),
        )
    }

    /// Mean of all elements (complex), producing a 0-d tensor.
    pub fn mean_all(&mut self, x: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let n = T::from_f64(x.numel() as f64);
        let s = self.sum_all(x)?;
        self.scale(&s, T::one() / n)
    }

    /// Stabilized magnitude `sqrt(re^2 + im^2 + eps_mag)`; output is real.
    pub fn magnitude(&mut self, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let eps = T::eps_mag();
        let mut mag = ArrayD::zeros(z.re().raw_dim());
        Zip::from(&mut mag).and(z.re()).and(z.im()).for_each(|o, &r, &i| {
            *o = (r * r + i * i + eps).sqrt();
        });
        let zv = z.detach();
        let mag_saved = mag.clone();
        let ids: Ids = smallvec![z.id()];
        self.record(
            "magnitude",
            ids,
            ComplexTensor::from_re(mag),
            Box::new(move |g| {
                let gr = g.re();
                let mut dre = ArrayD::zeros(gr.raw_dim());
                let mut dim_ = ArrayD::zeros(gr.raw_dim());
                Zip::from(&mut dre).and(gr).and(zv.re()).and(&mag_saved).for_each(|o, &gv, &r, &m| *o = gv * r / m);
                Zip::from(&mut dim_).and(gr).and(zv.im()).and(&mag_saved).for_each(|o, &gv, &i, &m| *o = gv * i / m);
                smallvec![Some(grad_pair(dre, dim_))]
            }),
        )
    }

    /// Elementwise power of the real plane; the input must be nonnegative
    /// (magnitudes). Output is real.
    pub fn pow_re(&mut self, x: &ComplexTensor<T>, p: T) -> Result<ComplexTensor<T>> {
        let out = x.re().mapv(|v| v.powf(p));
        let xv = x.detach();
        let ids: Ids = smallvec![x.id()];
        self.record(
            "pow_re",
            ids,
            ComplexTensor::from_re(out),
            Box::new(move |g| {
                let mut dre = ArrayD::zeros(g.re().raw_dim());
                Zip::from(&mut dre).and(g.re()).and(xv.re()).for_each(|o, &gv, &v| {
                    *o = gv * p * v.powf(p - T::one());
                });
                let zero = ArrayD::zeros(dre.raw_dim());
                smallvec![Some(grad_pair(dre, zero))]
            }),
        )
    }

    /// Elementwise absolute value of the real plane. Subgradient 0 at 0.
    pub fn abs_re(&mut self, x: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let out = x.re().mapv(|v| v.abs());
        let xv = x.detach();
        let ids: Ids = smallvec![x.id()];
        self.record(
            "abs_re",
            ids,
            ComplexTensor::from_re(out),
            Box::new(move |g| {
                let mut dre = ArrayD::zeros(g.re().raw_dim());
                Zip::from(&mut dre).and(g.re()).and(xv.re()).for_each(|o, &gv, &v| {
                    *o = if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    };
                });
                let zero = ArrayD::zeros(dre.raw_dim());
                smallvec![Some(grad_pair(dre, zero))]
            }),
        )
    }

    /// Row-stochastic softmax over the last axis of the real plane, with
    /// max-subtraction stabilization.
    pub fn softmax_lastdim(&mut self, x: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let nd = x.ndim();
        if nd == 0 || x.shape()[nd - 1] == 0 {
            return Err(Error::dim("softmax_lastdim", "last axis must have extent >= 1"));
        }
        let mut y = x.re().to_owned();
        for mut row in y.rows_mut() {
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let y_saved = y.clone();
        let ids: Ids = smallvec![x.id()];
        self.record(
            "softmax_lastdim",
            ids,
            ComplexTensor::from_re(y),
            Box::new(move |g| {
                let mut dx = g.re().to_owned();
                Zip::from(dx.rows_mut()).and(y_saved.rows()).for_each(|mut drow, yrow| {
                    let dot: T = drow.iter().zip(yrow.iter()).map(|(&d, &yv)| d * yv).sum();
                    for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                        *d = yv * (*d - dot);
                    }
                });
                let zero = ArrayD::zeros(dx.raw_dim());
                smallvec![Some(grad_pair(dx, zero))]
            }),
        )
    }

    /// Reinterpret the element order under a new shape (row-major).
    pub fn reshape(&mut self, x: &ComplexTensor<T>, shape: &[usize]) -> Result<ComplexTensor<T>> {
        let n: usize = shape.iter().product();
        if n != x.numel() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} ({} elems) cannot become {:?} ({} elems)", x.shape(), x.numel(), shape, n),
            ));
        }
        let re = reshape_plane(x.re().view(), shape);
        let im = reshape_plane(x.im().view(), shape);
        let old = x.shape().to_vec();
        let ids: Ids = smallvec![x.id()];
        self.record(
            "reshape",
            ids,
            ComplexTensor::from_parts(re, im)?,
            Box::new(move |g| {
                let re = reshape_plane(g.re().view(), &old);
                let im = reshape_plane(g.im().view(), &old);
                smallvec![Some(grad_pair(re, im))]
            }),
        )
    }

    /// Permute axes; `axes` must be a permutation of `0..ndim`.
    pub fn permute(&mut self, x: &ComplexTensor<T>, axes: &[usize]) -> Result<ComplexTensor<T>> {
        let nd = x.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", format!("{:?} is not a permutation of 0..{}", axes, nd)));
        }
        let re = x.re().view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        let im = x.im().view().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
        let mut inverse = vec![0usize; nd];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let ids: Ids = smallvec![x.id()];
        self.record(
            "permute",
            ids,
            ComplexTensor::from_parts(re, im)?,
            Box::new(move |g| {
                let re = g.re().view().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned();
                let im = g.im().view().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned();
                smallvec![Some(grad_pair(re, im))]
            }),
        )
    }

    /// Concatenate along `axis`. Used for the encoder skip concatenation.
    pub fn concat(&mut self, xs: &[&ComplexTensor<T>], axis: usize) -> Result<ComplexTensor<T>> {
        if xs.is_empty() {
            return Err(Error::dim("concat", "no inputs"));
        }
        let res: Vec<_> = xs.iter().map(|t| t.re().view()).collect();
        let ims: Vec<_> = xs.iter().map(|t| t.im().view()).collect();
        let re = ndarray::concatenate(Axis(axis), &res)
            .map_err(|e| Error::dim("concat", e.to_string()))?;
        let im = ndarray::concatenate(Axis(axis), &ims)
            .map_err(|e| Error::dim("concat", e.to_string()))?;
        let extents: Vec<usize> = xs.iter().map(|t| t.shape()[axis]).collect();
        let ids: Ids = xs.iter().map(|t| t.id()).collect();
        self.record(
            "concat",
            ids,
            ComplexTensor::from_parts(re, im)?,
            Box::new(move |g| {
                let mut grads: InputGrads<T> = SmallVec::new();
                let mut start = 0usize;
                for &len in &extents {
                    let re = g
                        .re()
                        .slice_axis(Axis(axis), Slice::from(start..start + len))
                        .to_owned();
                    let im = g
                        .im()
                        .slice_axis(Axis(axis), Slice::from(start..start + len))
                        .to_owned();
                    grads.push(Some(grad_pair(re, im)));
                    start += len;
                }
                grads
            }),
        )
    }

    /// Contiguous slice `start..start+len` along one axis.
    pub fn slice_axis(
        &mut self,
        x: &ComplexTensor<T>,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<ComplexTensor<T>> {
        if axis >= x.ndim() || start + len > x.shape()[axis] {
            return Err(Error::dim(
                "slice_axis",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, x.shape()),
            ));
        }
        let re = x.re().slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        let im = x.im().slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        let full = x.shape().to_vec();
        let ids: Ids = smallvec![x.id()];
        self.record(
            "slice_axis",
            ids,
            ComplexTensor::from_parts(re, im)?,
            Box::new(move |g| {
                let mut re = ArrayD::zeros(IxDyn(&full));
                let mut im = ArrayD::zeros(IxDyn(&full));
                re.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(g.re());
                im.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(g.im());
                smallvec![Some(grad_pair(re, im))]
            }),
        )
    }

    /// Split into consecutive parts along `axis`; inverse of [`Tape::concat`].
    pub fn split(
        &mut self,
        x: &ComplexTensor<T>,
        axis: usize,
        parts: &[usize],
    ) -> Result<Vec<ComplexTensor<T>>> {
        let total: usize = parts.iter().sum();
        if axis >= x.ndim() || total != x.shape()[axis] {
            return Err(Error::dim(
                "split",
                format!("parts {:?} do not cover axis {} of {:?}", parts, axis, x.shape()),
            ));
        }
        let mut out = Vec::with_capacity(parts.len());
        let mut start = 0usize;
        for &len in parts {
            out.push(self.slice_axis(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }
}

fn reshape_plane<T: Real>(v: ndarray::ArrayViewD<'_, T>, shape: &[usize]) -> ArrayD<T> {
    v.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("element count checked by caller")
}
