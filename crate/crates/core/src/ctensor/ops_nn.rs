//! Activation, normalization, and sequence-structured tape ops.
//!
//! Parameterless activations follow the per-plane convention: the real
//! function is applied to the re and im planes independently.

use ndarray::{ArrayD, ArrayViewD, IxDyn, Zip};
use smallvec::{smallvec, SmallVec};

use super::tape::{NodeId, Tape};
use super::{ComplexTensor, Real};
use crate::error::{Error, Result};

type Ids = SmallVec<[Option<NodeId>; 3]>;

fn grad_pair<T: Real>(re: ArrayD<T>, im: ArrayD<T>) -> ComplexTensor<T> {
    ComplexTensor::from_parts(re, im).expect("grad planes share a shape")
}

#[derive(Clone, Copy)]
enum Unary {
    Tanh,
    LeakyRelu,
    Swish,
}

impl Unary {
    fn eval<T: Real>(self, x: T, slope: T) -> T {
        match self {
            // IEEE tanh rounds to exactly +-1 for large arguments; clamp
            // one ulp inside so the open-interval bound holds for any input.
            Unary::Tanh => {
                let lim = T::one() - T::epsilon();
                x.tanh().min(lim).max(-lim)
            }
            Unary::LeakyRelu => {
                if x >= T::zero() {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Swish => x * sigmoid(x),
        }
    }

    fn deriv<T: Real>(self, x: T, slope: T) -> T {
        match self {
            Unary::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Unary::LeakyRelu => {
                if x >= T::zero() {
                    T::one()
                } else {
                    slope
                }
            }
            Unary::Swish => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    fn per_plane_unary(
        &mut self,
        kind: &'static str,
        op: Unary,
        slope: T,
        z: &ComplexTensor<T>,
    ) -> Result<ComplexTensor<T>> {
        let re = z.re().mapv(|v| op.eval(v, slope));
        let im = z.im().mapv(|v| op.eval(v, slope));
        let zv = z.detach();
        let ids: Ids = smallvec![z.id()];
        self.record(
            kind,
            ids,
            ComplexTensor::from_parts(re, im)?,
            Box::new(move |g| {
                let mut dre = ArrayD::zeros(g.re().raw_dim());
                let mut dim_ = ArrayD::zeros(g.im().raw_dim());
                Zip::from(&mut dre).and(g.re()).and(zv.re()).for_each(|o, &gv, &x| *o = gv * op.deriv(x, slope));
                Zip::from(&mut dim_).and(g.im()).and(zv.im()).for_each(|o, &gv, &x| *o = gv * op.deriv(x, slope));
                smallvec![Some(grad_pair(dre, dim_))]
            }),
        )
    }

    /// tanh on each plane; bounds both planes to (-1, 1).
    pub fn ctanh(&mut self, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        self.per_plane_unary("tanh", Unary::Tanh, T::zero(), z)
    }

    /// LeakyReLU on each plane.
    pub fn leaky_relu(&mut self, z: &ComplexTensor<T>, slope: T) -> Result<ComplexTensor<T>> {
        self.per_plane_unary("leaky_relu", Unary::LeakyRelu, slope, z)
    }

    /// Swish `x * sigmoid(x)` on each plane.
    pub fn swish(&mut self, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        self.per_plane_unary("swish", Unary::Swish, T::zero(), z)
    }

    /// PReLU with one learnable real slope per channel, shared by both
    /// planes. `slope` is a real tensor of shape `[C]`; `channel_axis`
    /// locates C in `z`.
    pub fn prelu(
        &mut self,
        z: &ComplexTensor<T>,
        slope: &ComplexTensor<T>,
        channel_axis: usize,
    ) -> Result<ComplexTensor<T>> {
        let nd = z.ndim();
        if channel_axis >= nd || slope.numel() != z.shape()[channel_axis] {
            return Err(Error::dim(
                "prelu",
                format!("slope [{}] vs axis {} of {:?}", slope.numel(), channel_axis, z.shape()),
            ));
        }
        // Shape the slope so it broadcasts along the channel axis.
        let mut bshape = vec![1usize; nd];
        bshape[channel_axis] = slope.numel();
        let a = slope
            .re()
            .to_owned()
            .into_shape_with_order(IxDyn(&bshape))
            .expect("slope is 1-d");
        let ab = a.broadcast(IxDyn(z.shape())).expect("channel broadcast");

        let apply = |x: ArrayViewD<'_, T>| -> ArrayD<T> {
            let mut out = ArrayD::zeros(x.raw_dim());
            Zip::from(&mut out).and(&x).and(&ab).for_each(|o, &v, &s| {
                *o = if v >= T::zero() { v } else { s * v };
            });
            out
        };
        let re = apply(z.re().view());
        let im = apply(z.im().view());

        let zv = z.detach();
        let slope_shape = slope.shape().to_vec();
        let bshape_saved = bshape.clone();
        let a_saved = a.clone();
        let ids: Ids = smallvec![z.id(), slope.id()];
        self.record(
            "prelu",
            ids,
            ComplexTensor::from_parts(re, im)?,
            Box::new(move |g| {
                let ab = a_saved.broadcast(IxDyn(g.shape())).expect("channel broadcast");
                let mut dre = ArrayD::zeros(g.re().raw_dim());
                let mut dim_ = ArrayD::zeros(g.im().raw_dim());
                Zip::from(&mut dre).and(g.re()).and(zv.re()).and(&ab).for_each(|o, &gv, &v, &s| {
                    *o = if v >= T::zero() { gv } else { gv * s };
                });
                Zip::from(&mut dim_).and(g.im()).and(zv.im()).and(&ab).for_each(|o, &gv, &v, &s| {
                    *o = if v >= T::zero() { gv } else { gv * s };
                });
                // Slope gradient: sum of g * min(x, 0) over both planes.
                let mut ds = ArrayD::zeros(g.re().raw_dim());
                Zip::from(&mut ds).and(g.re()).and(zv.re()).for_each(|o, &gv, &v| {
                    *o = if v < T::zero() { gv * v } else { T::zero() };
                });
                Zip::from(&mut ds).and(g.im()).and(zv.im()).for_each(|o, &gv, &v| {
                    if v < T::zero() {
                        *o += gv * v;
                    }
                });
                let ds_c = super::reduce_to_shape(&ds, &bshape_saved)
                    .into_shape_with_order(IxDyn(&slope_shape))
                    .expect("slope reduce");
                let dslope = grad_pair(ds_c.clone(), ArrayD::zeros(ds_c.raw_dim()));
                smallvec![Some(grad_pair(dre, dim_)), Some(dslope)]
            }),
        )
    }

    /// Phase-preserving GLU gate: `out = sigmoid(|gate|) * content`, the
    /// real gate scaling both planes of the content.
    pub fn glu_mag(
        &mut self,
        content: &ComplexTensor<T>,
        gate: &ComplexTensor<T>,
    ) -> Result<ComplexTensor<T>> {
        if content.shape() != gate.shape() {
            return Err(Error::dim(
                "glu_mag",
                format!("content {:?} vs gate {:?}", content.shape(), gate.shape()),
            ));
        }
        let eps = T::eps_mag();
        let mut mag = ArrayD::zeros(gate.re().raw_dim());
        Zip::from(&mut mag).and(gate.re()).and(gate.im()).for_each(|o, &r, &i| {
            *o = (r * r + i * i + eps).sqrt();
        });
        let g_act = mag.mapv(sigmoid);
        let re = &content.re().to_owned() * &g_act;
        let im = &content.im().to_owned() * &g_act;

        let (cv, gv_t) = (content.detach(), gate.detach());
        let ids: Ids = smallvec![content.id(), gate.id()];
        self.record(
            "glu_mag",
            ids,
            ComplexTensor::from_parts(re, im)?,
            Box::new(move |g| {
                let dcr = &g.re().to_owned() * &g_act;
                let dci = &g.im().to_owned() * &g_act;
                // Gate gradient folds sigmoid'(m) = s(1-s) through
                // d|z|/d(re,im) = (re, im)/|z|. Two passes because Zip
                // handles at most six arrays.
                let mut dgr = ArrayD::zeros(g.re().raw_dim());
                let mut dgi = ArrayD::zeros(g.re().raw_dim());
                ndarray::azip!((or in &mut dgr, oi in &mut dgi,
                                &gr in g.re(), &gi in g.im(),
                                &cr in cv.re(), &ci in cv.im()) {
                    let ds = gr * cr + gi * ci;
                    *or = ds;
                    *oi = ds;
                });
                ndarray::azip!((or in &mut dgr, oi in &mut dgi,
                                &s in &g_act, &m in &mag,
                                &zr in gv_t.re(), &zi in gv_t.im()) {
                    let dm = *or * s * (T::one() - s);
                    *or = dm * zr / m;
                    *oi = dm * zi / m;
                });
                smallvec![Some(grad_pair(dcr, dci)), Some(grad_pair(dgr, dgi))]
            }),
        )
    }

    /// Standardize each plane to zero mean / unit variance over `axes`
    /// (per remaining index), with `eps` inside the square root.
    pub fn standardize(
        &mut self,
        x: &ComplexTensor<T>,
        axes: &[usize],
        eps: T,
    ) -> Result<ComplexTensor<T>> {
        let nd = x.ndim();
        if axes.is_empty() || axes.iter().any(|&a| a >= nd) {
            return Err(Error::dim("standardize", format!("axes {:?} for ndim {}", axes, nd)));
        }
        let n: usize = axes.iter().map(|&a| x.shape()[a]).product();
        if n < 1 {
            return Err(Error::dim("standardize", "empty reduction"));
        }
        let nt = T::from_f64(n as f64);

        let norm_plane = |v: &ArrayD<T>| -> (ArrayD<T>, ArrayD<T>) {
            let mu = keepdims_mean(v, axes, nt);
            let mut xc = v.clone();
            xc -= &mu.broadcast(v.raw_dim()).expect("keepdims broadcast");
            let sq = xc.mapv(|u| u * u);
            let var = keepdims_mean(&sq, axes, nt);
            let inv = var.mapv(|u| T::one() / (u + eps).sqrt());
            let y = &xc * &inv.broadcast(v.raw_dim()).expect("keepdims broadcast");
            (y, inv)
        };
        let (y_re, inv_re) = norm_plane(&x.re().to_owned());
        let (y_im, inv_im) = norm_plane(&x.im().to_owned());

        let axes_v = axes.to_vec();
        let (yr_s, yi_s) = (y_re.clone(), y_im.clone());
        let ids: Ids = smallvec![x.id()];
        self.record(
            "standardize",
            ids,
            ComplexTensor::from_parts(y_re, y_im)?,
            Box::new(move |g| {
                let back = |dy: &ArrayD<T>, y: &ArrayD<T>, inv: &ArrayD<T>| -> ArrayD<T> {
                    let m_dy = keepdims_mean(dy, &axes_v, nt);
                    let dyy = dy * y;
                    let m_dyy = keepdims_mean(&dyy, &axes_v, nt);
                    let mut dx = dy.clone();
                    dx -= &m_dy.broadcast(dy.raw_dim()).expect("keepdims broadcast");
                    dx -= &(y * &m_dyy.broadcast(dy.raw_dim()).expect("keepdims broadcast"));
                    dx *= &inv.broadcast(dy.raw_dim()).expect("keepdims broadcast");
                    dx
                };
                let dre = back(&g.re().to_owned(), &yr_s, &inv_re);
                let dim_ = back(&g.im().to_owned(), &yi_s, &inv_im);
                smallvec![Some(grad_pair(dre, dim_))]
            }),
        )
    }

    /// Relative-position skew: input `[.., L, 2L-1]` (column c holding
    /// relative offset L-1-c) becomes `[.., L, L]` with
    /// `out[.., i, j] = in[.., i, L-1-i+j]`.
    pub fn rel_shift(&mut self, x: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let nd = x.ndim();
        if nd < 2 {
            return Err(Error::dim("rel_shift", "needs at least 2 dims"));
        }
        let l = x.shape()[nd - 2];
        let w = x.shape()[nd - 1];
        if w != 2 * l - 1 {
            return Err(Error::dim(
                "rel_shift",
                format!("last axis {} != 2*{} - 1", w, l),
            ));
        }
        let mut out_shape = x.shape().to_vec();
        out_shape[nd - 1] = l;

        let gather = |src: ArrayViewD<'_, T>| -> ArrayD<T> {
            let mut out = ArrayD::zeros(IxDyn(&out_shape));
            let s = src.as_standard_layout();
            let sflat = s.as_slice().expect("standard layout");
            let oflat = out.as_slice_mut().expect("freshly allocated");
            let lead = sflat.len() / (l * w);
            for b in 0..lead {
                for i in 0..l {
                    let src_row = &sflat[(b * l + i) * w..(b * l + i + 1) * w];
                    let dst_row = &mut oflat[(b * l + i) * l..(b * l + i + 1) * l];
                    for (j, d) in dst_row.iter_mut().enumerate() {
                        *d = src_row[l - 1 - i + j];
                    }
                }
            }
            out
        };
        let re = gather(x.re().view());
        let im = gather(x.im().view());

        let in_shape = x.shape().to_vec();
        let ids: Ids = smallvec![x.id()];
        self.record(
            "rel_shift",
            ids,
            ComplexTensor::from_parts(re, im)?,
            Box::new(move |g| {
                let scatter = |gv: ArrayViewD<'_, T>| -> ArrayD<T> {
                    let mut out = ArrayD::zeros(IxDyn(&in_shape));
                    let gs = gv.as_standard_layout();
                    let gflat = gs.as_slice().expect("standard layout");
                    let oflat = out.as_slice_mut().expect("freshly allocated");
                    let lead = gflat.len() / (l * l);
                    for b in 0..lead {
                        for i in 0..l {
                            let src_row = &gflat[(b * l + i) * l..(b * l + i + 1) * l];
                            let dst_row = &mut oflat[(b * l + i) * w..(b * l + i + 1) * w];
                            for (j, &gval) in src_row.iter().enumerate() {
                                dst_row[l - 1 - i + j] += gval;
                            }
                        }
                    }
                    out
                };
                let re = scatter(g.re().view());
                let im = scatter(g.im().view());
                smallvec![Some(grad_pair(re, im))]
            }),
        )
    }

    /// Depthwise complex 1-D convolution along the second-to-last axis
    /// (channels last): `out[.., f, c] = sum_tau taps[c, tau+l_before] *
    /// x[.., f+tau, c]` with zero padding. This is both the FSMN memory
    /// block and the conformer depthwise convolution.
    pub fn cdw_conv1d(
        &mut self,
        x: &ComplexTensor<T>,
        taps: &ComplexTensor<T>,
        l_before: usize,
        l_after: usize,
    ) -> Result<ComplexTensor<T>> {
        let nd = x.ndim();
        if nd < 2 {
            return Err(Error::dim("cdw_conv1d", "needs at least [F, C] dims"));
        }
        let f_len = x.shape()[nd - 2];
        let c = x.shape()[nd - 1];
        let k = l_before + l_after + 1;
        if taps.shape() != [c, k] {
            return Err(Error::dim(
                "cdw_conv1d",
                format!("taps {:?}, expected [{}, {}]", taps.shape(), c, k),
            ));
        }

        let xr = std_flat(x.re().view());
        let xi = std_flat(x.im().view());
        let tr = std_flat(taps.re().view());
        let ti = std_flat(taps.im().view());
        let lead = x.numel() / (f_len * c);
        let mut out_re = vec![T::zero(); x.numel()];
        let mut out_im = vec![T::zero(); x.numel()];
        for b in 0..lead {
            for j in 0..k {
                let tau = j as isize - l_before as isize;
                let (f0, f1) = overlap(f_len, tau);
                for f in f0..f1 {
                    let src = (b * f_len + (f as isize + tau) as usize) * c;
                    let dst = (b * f_len + f) * c;
                    for ch in 0..c {
                        let (wr, wi) = (tr[ch * k + j], ti[ch * k + j]);
                        let (sr, si) = (xr[src + ch], xi[src + ch]);
                        out_re[dst + ch] += sr * wr - si * wi;
                        out_im[dst + ch] += sr * wi + si * wr;
                    }
                }
            }
        }
        let out_re = ArrayD::from_shape_vec(IxDyn(x.shape()), out_re).expect("same numel");
        let out_im = ArrayD::from_shape_vec(IxDyn(x.shape()), out_im).expect("same numel");

        let (xv, tv) = (x.detach(), taps.detach());
        let ids: Ids = smallvec![x.id(), taps.id()];
        self.record(
            "cdw_conv1d",
            ids,
            ComplexTensor::from_parts(out_re, out_im)?,
            Box::new(move |g| {
                let gr = std_flat(g.re().view());
                let gi = std_flat(g.im().view());
                let xr = std_flat(xv.re().view());
                let xi = std_flat(xv.im().view());
                let tr = std_flat(tv.re().view());
                let ti = std_flat(tv.im().view());
                let n = gr.len();
                let lead = n / (f_len * c);
                let mut dxr = vec![T::zero(); n];
                let mut dxi = vec![T::zero(); n];
                let mut dtr = vec![T::zero(); c * k];
                let mut dti = vec![T::zero(); c * k];
                for b in 0..lead {
                    for j in 0..k {
                        let tau = j as isize - l_before as isize;
                        let (f0, f1) = overlap(f_len, tau);
                        for f in f0..f1 {
                            let src = (b * f_len + (f as isize + tau) as usize) * c;
                            let dst = (b * f_len + f) * c;
                            for ch in 0..c {
                                let (wr, wi) = (tr[ch * k + j], ti[ch * k + j]);
                                let (r, i) = (gr[dst + ch], gi[dst + ch]);
                                dxr[src + ch] += r * wr + i * wi;
                                dxi[src + ch] += -r * wi + i * wr;
                                let (sr, si) = (xr[src + ch], xi[src + ch]);
                                dtr[ch * k + j] += r * sr + i * si;
                                dti[ch * k + j] += -r * si + i * sr;
                            }
                        }
                    }
                }
                let shape = IxDyn(g.shape());
                let dx = grad_pair(
                    ArrayD::from_shape_vec(shape.clone(), dxr).expect("same numel"),
                    ArrayD::from_shape_vec(shape, dxi).expect("same numel"),
                );
                let dt = grad_pair(
                    ArrayD::from_shape_vec(IxDyn(&[c, k]), dtr).expect("c*k"),
                    ArrayD::from_shape_vec(IxDyn(&[c, k]), dti).expect("c*k"),
                );
                smallvec![Some(dx), Some(dt)]
            }),
        )
    }

    /// Test fixture: forward multiplies by 2, backward deliberately uses
    /// 1.9. Exists so the finite-difference harness can prove it detects
    /// wrong backward rules.
    #[doc(hidden)]
    pub fn fixture_bad_scale(&mut self, x: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let two = T::from_f64(2.0);
        let wrong = T::from_f64(1.9);
        let re = x.re().mapv(|v| v * two);
        let im = x.im().mapv(|v| v * two);
        let ids: Ids = smallvec![x.id()];
        self.record(
            "fixture_bad_scale",
            ids,
            ComplexTensor::from_parts(re, im)?,
            Box::new(move |g| {
                smallvec![Some(grad_pair(g.re().mapv(|v| v * wrong), g.im().mapv(|v| v * wrong)))]
            }),
        )
    }
}

fn overlap(f_len: usize, tau: isize) -> (usize, usize) {
    let f0 = if tau < 0 { (-tau) as usize } else { 0 };
    let f1 = if tau > 0 { f_len.saturating_sub(tau as usize) } else { f_len };
    (f0.min(f_len), f1)
}

/// Row-major copy of a view as a flat vector.
fn std_flat<T: Real>(v: ArrayViewD<'_, T>) -> Vec<T> {
    v.as_standard_layout().iter().copied().collect()
}

/// Keep-dims mean over `axes`.
fn keepdims_mean<T: Real>(x: &ArrayD<T>, axes: &[usize], n: T) -> ArrayD<T> {
    let mut acc = x.clone();
    for &ax in axes {
        let summed = acc.sum_axis(ndarray::Axis(ax));
        acc = summed.insert_axis(ndarray::Axis(ax));
    }
    acc.mapv(|v| v / n)
}
