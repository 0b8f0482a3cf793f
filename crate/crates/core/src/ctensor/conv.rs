//! Complex 2-D convolution tape ops.
//!
//! The four real products of the complex combination are packed into one
//! block matmul per batch item,
//! `[[Wr, -Wi], [Wi, Wr]] [col_re; col_im] = [out_re; out_im]`,
//! which keeps matrixmultiply well fed even at small channel counts.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayViewD, Axis, IxDyn};
use smallvec::{smallvec, SmallVec};

use super::tape::{NodeId, Tape};
use super::{ComplexTensor, Real};
use crate::error::{Error, Result};

type Ids = SmallVec<[Option<NodeId>; 3]>;

/// Geometry of a 2-D convolution. Padding is (before, after) per spatial
/// axis with a constant zero fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub pad_h: (usize, usize),
    pub pad_w: (usize, usize),
}

impl ConvGeom {
    pub fn unit() -> Self {
        Self { stride: (1, 1), dilation: (1, 1), pad_h: (0, 0), pad_w: (0, 0) }
    }

    /// Output spatial extents of the forward convolution.
    pub fn out_hw(&self, in_hw: (usize, usize), k: (usize, usize)) -> Result<(usize, usize)> {
        let span_h = self.dilation.0 * (k.0 - 1) + 1;
        let span_w = self.dilation.1 * (k.1 - 1) + 1;
        let full_h = in_hw.0 + self.pad_h.0 + self.pad_h.1;
        let full_w = in_hw.1 + self.pad_w.0 + self.pad_w.1;
        if full_h < span_h || full_w < span_w {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?} smaller than kernel span ({}, {})", in_hw, span_h, span_w),
            ));
        }
        Ok(((full_h - span_h) / self.stride.0 + 1, (full_w - span_w) / self.stride.1 + 1))
    }

    /// Spatial extents a transposed convolution produces from `in_hw`,
    /// i.e. the unique size whose forward conv maps back onto `in_hw`
    /// without remainder.
    pub fn transpose_out_hw(&self, in_hw: (usize, usize), k: (usize, usize)) -> Result<(usize, usize)> {
        let h = (in_hw.0 - 1) * self.stride.0 + self.dilation.0 * (k.0 - 1) + 1;
        let w = (in_hw.1 - 1) * self.stride.1 + self.dilation.1 * (k.1 - 1) + 1;
        let (ph, pw) = (self.pad_h.0 + self.pad_h.1, self.pad_w.0 + self.pad_w.1);
        if h <= ph || w <= pw {
            return Err(Error::dim(
                "cconv_transpose2d",
                format!("padding ({}, {}) swallows the raw output ({}, {})", ph, pw, h, w),
            ));
        }
        Ok((h - ph, w - pw))
    }
}

fn std_vec<T: Real>(v: ArrayViewD<'_, T>) -> Vec<T> {
    v.as_standard_layout().iter().copied().collect()
}

/// Gather one plane of the windowed input into the given half of
/// `col2[(half*ci + c)*kh*kw + ...]`.
#[allow(clippy::too_many_arguments)]
fn im2col_half<T: Real>(
    x: &[T],
    (ci, h, w): (usize, usize, usize),
    k: (usize, usize),
    g: &ConvGeom,
    (ho, wo): (usize, usize),
    col2: &mut Array2<T>,
    half: usize,
) {
    let cols = ho * wo;
    let base_row = half * ci * k.0 * k.1;
    let cs = col2.as_slice_mut().expect("standard layout");
    for c in 0..ci {
        for ki in 0..k.0 {
            for kj in 0..k.1 {
                let row = base_row + (c * k.0 + ki) * k.1 + kj;
                let base = row * cols;
                for oh in 0..ho {
                    let ih = (oh * g.stride.0 + ki * g.dilation.0) as isize - g.pad_h.0 as isize;
                    if ih < 0 || ih >= h as isize {
                        cs[base + oh * wo..base + (oh + 1) * wo].fill(T::zero());
                        continue;
                    }
                    let xrow = (c * h + ih as usize) * w;
                    if g.stride.1 == 1 && g.dilation.1 == 1 {
                        // contiguous span: iw = ow + kj - pad, valid for
                        // ow in [pad-kj, w-1+pad-kj] clipped to the row
                        let shift = kj as isize - g.pad_w.0 as isize;
                        let lo = (-shift).clamp(0, wo as isize) as usize;
                        let hi = (w as isize - shift).clamp(0, wo as isize) as usize;
                        let row = &mut cs[base + oh * wo..base + (oh + 1) * wo];
                        row[..lo].fill(T::zero());
                        row[hi..].fill(T::zero());
                        if lo < hi {
                            let start = (lo as isize + shift) as usize;
                            row[lo..hi].copy_from_slice(&x[xrow + start..xrow + start + (hi - lo)]);
                        }
                    } else {
                        for ow in 0..wo {
                            let iw = (ow * g.stride.1 + kj * g.dilation.1) as isize
                                - g.pad_w.0 as isize;
                            cs[base + oh * wo + ow] = if iw >= 0 && iw < w as isize {
                                x[xrow + iw as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the adjoint of [`im2col_half`].
#[allow(clippy::too_many_arguments)]
fn col2im_half<T: Real>(
    col2: &Array2<T>,
    (ci, h, w): (usize, usize, usize),
    k: (usize, usize),
    g: &ConvGeom,
    (ho, wo): (usize, usize),
    dx: &mut [T],
    half: usize,
) {
    let cs = col2.as_slice().expect("standard layout");
    let cols = ho * wo;
    let base_row = half * ci * k.0 * k.1;
    for c in 0..ci {
        for ki in 0..k.0 {
            for kj in 0..k.1 {
                let row = base_row + (c * k.0 + ki) * k.1 + kj;
                let base = row * cols;
                for oh in 0..ho {
                    let ih = (oh * g.stride.0 + ki * g.dilation.0) as isize - g.pad_h.0 as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xrow = (c * h + ih as usize) * w;
                    if g.stride.1 == 1 && g.dilation.1 == 1 {
                        let shift = kj as isize - g.pad_w.0 as isize;
                        let lo = (-shift).clamp(0, wo as isize) as usize;
                        let hi = (w as isize - shift).clamp(0, wo as isize) as usize;
                        if lo < hi {
                            let start = (lo as isize + shift) as usize;
                            let src = &cs[base + oh * wo + lo..base + oh * wo + hi];
                            let dst = &mut dx[xrow + start..xrow + start + (hi - lo)];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    } else {
                        for ow in 0..wo {
                            let iw = (ow * g.stride.1 + kj * g.dilation.1) as isize
                                - g.pad_w.0 as isize;
                            if iw >= 0 && iw < w as isize {
                                dx[xrow + iw as usize] += cs[base + oh * wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Complex weight as a real block matrix. `conj` flips the sign quadrants:
/// standard `[[Wr, -Wi], [Wi, Wr]]`, conjugate `[[Wr, Wi], [-Wi, Wr]]`.
fn w_block<T: Real>(w_re: &[T], w_im: &[T], rows: usize, cols: usize, conj: bool) -> Array2<T> {
    let mut b = Array2::<T>::zeros((2 * rows, 2 * cols));
    let sign = if conj { -T::one() } else { T::one() };
    for r in 0..rows {
        for c in 0..cols {
            let (re, im) = (w_re[r * cols + c], w_im[r * cols + c]);
            b[[r, c]] = re;
            b[[r + rows, c + cols]] = re;
            b[[r, c + cols]] = -sign * im;
            b[[r + rows, c]] = sign * im;
        }
    }
    b
}

/// Stack the planes of a `[C, H*W]` complex map into `[2C, H*W]`.
fn stack_planes<T: Real>(re: &[T], im: &[T], rows: usize, cols: usize) -> Array2<T> {
    let mut m = Array2::<T>::zeros((2 * rows, cols));
    m.as_slice_mut().expect("standard layout")[..rows * cols].copy_from_slice(re);
    m.as_slice_mut().expect("standard layout")[rows * cols..].copy_from_slice(im);
    m
}

fn dims4<T: Real>(op: &'static str, x: &ComplexTensor<T>) -> Result<(usize, usize, usize, usize)> {
    if x.ndim() != 4 {
        return Err(Error::dim(op, format!("expected 4 dims, got {:?}", x.shape())));
    }
    let sh = x.shape();
    Ok((sh[0], sh[1], sh[2], sh[3]))
}

/// Sum a `[B,C,H,W]` gradient over batch and space, yielding `[C]`.
fn bias_reduce<T: Real>(g: &ArrayD<T>) -> ArrayD<T> {
    g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0))
}

fn add_channel_bias<T: Real>(out: &mut ArrayD<T>, bias: &ndarray::ArcArray<T, IxDyn>) {
    let bs = bias.as_slice().expect("1-d bias");
    for (c, mut lane) in out.axis_iter_mut(Axis(1)).enumerate() {
        lane.mapv_inplace(|v| v + bs[c]);
    }
}

impl<T: Real> Tape<T> {
    /// Complex 2-D convolution per the paired-real-layer rule, with an
    /// optional complex bias per output channel.
    pub fn cconv2d(
        &mut self,
        z: &ComplexTensor<T>,
        w: &ComplexTensor<T>,
        bias: Option<&ComplexTensor<T>>,
        geom: ConvGeom,
    ) -> Result<ComplexTensor<T>> {
        let (b, ci, h, wd) = dims4("cconv2d", z)?;
        let (co, ci_w, kh, kw) = dims4("cconv2d", w)?;
        if ci != ci_w {
            return Err(Error::dim("cconv2d", format!("input channels {ci} != kernel {ci_w}")));
        }
        if let Some(bt) = bias {
            if bt.shape() != [co] {
                return Err(Error::dim("cconv2d", format!("bias {:?}, expected [{co}]", bt.shape())));
            }
        }
        let k = (kh, kw);
        let (ho, wo) = geom.out_hw((h, wd), k)?;
        let cik = ci * kh * kw;

        let zre = std_vec(z.re().view());
        let zim = std_vec(z.im().view());
        let wb = w_block(
            &std_vec(w.re().view()),
            &std_vec(w.im().view()),
            co,
            cik,
            false,
        );
        let mut col2 = Array2::<T>::zeros((2 * cik, ho * wo));
        let mut y2 = Array2::<T>::zeros((2 * co, ho * wo));
        let mut out_re = ArrayD::<T>::zeros(IxDyn(&[b, co, ho, wo]));
        let mut out_im = ArrayD::<T>::zeros(IxDyn(&[b, co, ho, wo]));
        {
            let ore = out_re.as_slice_mut().expect("standard layout");
            let oim = out_im.as_slice_mut().expect("standard layout");
            let in_plane = ci * h * wd;
            let out_plane = co * ho * wo;
            for bi in 0..b {
                im2col_half(&zre[bi * in_plane..(bi + 1) * in_plane], (ci, h, wd), k, &geom, (ho, wo), &mut col2, 0);
                im2col_half(&zim[bi * in_plane..(bi + 1) * in_plane], (ci, h, wd), k, &geom, (ho, wo), &mut col2, 1);
                general_mat_mul(T::one(), &wb, &col2, T::zero(), &mut y2);
                let ys = y2.as_slice().expect("standard layout");
                ore[bi * out_plane..(bi + 1) * out_plane].copy_from_slice(&ys[..out_plane]);
                oim[bi * out_plane..(bi + 1) * out_plane].copy_from_slice(&ys[out_plane..]);
            }
        }
        if let Some(bt) = bias {
            add_channel_bias(&mut out_re, bt.re());
            add_channel_bias(&mut out_im, bt.im());
        }

        let (zv, wv) = (z.detach(), w.detach());
        let has_bias = bias.is_some();
        let ids: Ids = match bias {
            Some(bt) => smallvec![z.id(), w.id(), bt.id()],
            None => smallvec![z.id(), w.id()],
        };
        self.record(
            "cconv2d",
            ids,
            ComplexTensor::from_parts(out_re, out_im)?,
            Box::new(move |g| {
                let zre = std_vec(zv.re().view());
                let zim = std_vec(zv.im().view());
                let gre = std_vec(g.re().view());
                let gim = std_vec(g.im().view());
                let wb = w_block(&std_vec(wv.re().view()), &std_vec(wv.im().view()), co, cik, false);
                let in_plane = ci * h * wd;
                let out_plane = co * ho * wo;
                let mut col2 = Array2::<T>::zeros((2 * cik, ho * wo));
                let mut colg2 = Array2::<T>::zeros((2 * cik, ho * wo));
                let mut dw2 = Array2::<T>::zeros((2 * co, 2 * cik));
                let mut dz_re = vec![T::zero(); b * in_plane];
                let mut dz_im = vec![T::zero(); b * in_plane];
                for bi in 0..b {
                    let dy2 = stack_planes(
                        &gre[bi * out_plane..(bi + 1) * out_plane],
                        &gim[bi * out_plane..(bi + 1) * out_plane],
                        co,
                        ho * wo,
                    );
                    // weight gradient accumulates over the batch
                    im2col_half(&zre[bi * in_plane..(bi + 1) * in_plane], (ci, h, wd), k, &geom, (ho, wo), &mut col2, 0);
                    im2col_half(&zim[bi * in_plane..(bi + 1) * in_plane], (ci, h, wd), k, &geom, (ho, wo), &mut col2, 1);
                    general_mat_mul(T::one(), &dy2, &col2.t(), T::one(), &mut dw2);
                    // input gradient
                    general_mat_mul(T::one(), &wb.t(), &dy2, T::zero(), &mut colg2);
                    col2im_half(&colg2, (ci, h, wd), k, &geom, (ho, wo), &mut dz_re[bi * in_plane..(bi + 1) * in_plane], 0);
                    col2im_half(&colg2, (ci, h, wd), k, &geom, (ho, wo), &mut dz_im[bi * in_plane..(bi + 1) * in_plane], 1);
                }
                // dWr = TL + BR, dWi = BL - TR
                let mut dw_re = vec![T::zero(); co * cik];
                let mut dw_im = vec![T::zero(); co * cik];
                for r in 0..co {
                    for c in 0..cik {
                        dw_re[r * cik + c] = dw2[[r, c]] + dw2[[r + co, c + cik]];
                        dw_im[r * cik + c] = dw2[[r + co, c]] - dw2[[r, c + cik]];
                    }
                }
                let dz = ComplexTensor::from_parts(
                    ArrayD::from_shape_vec(IxDyn(&[b, ci, h, wd]), dz_re).expect("numel"),
                    ArrayD::from_shape_vec(IxDyn(&[b, ci, h, wd]), dz_im).expect("numel"),
                )
                .expect("plane shapes");
                let dw = ComplexTensor::from_parts(
                    ArrayD::from_shape_vec(IxDyn(&[co, ci, kh, kw]), dw_re).expect("numel"),
                    ArrayD::from_shape_vec(IxDyn(&[co, ci, kh, kw]), dw_im).expect("numel"),
                )
                .expect("plane shapes");
                let mut grads: super::tape::InputGrads<T> = smallvec![Some(dz), Some(dw)];
                if has_bias {
                    let db = ComplexTensor::from_parts(
                        bias_reduce(&g.re().to_owned()),
                        bias_reduce(&g.im().to_owned()),
                    )
                    .expect("plane shapes");
                    grads.push(Some(db));
                }
                grads
            }),
        )
    }

    /// Complex transposed 2-D convolution: the exact adjoint of
    /// [`Tape::cconv2d`] in each real plane. Weight layout is
    /// `[C_in, C_out, kh, kw]`; `geom` describes the underlying forward
    /// convolution.
    pub fn cconv_transpose2d(
        &mut self,
        z: &ComplexTensor<T>,
        w: &ComplexTensor<T>,
        bias: Option<&ComplexTensor<T>>,
        geom: ConvGeom,
    ) -> Result<ComplexTensor<T>> {
        let (b, cin, h, wd) = dims4("cconv_transpose2d", z)?;
        let (cin_w, cout, kh, kw) = dims4("cconv_transpose2d", w)?;
        if cin != cin_w {
            return Err(Error::dim(
                "cconv_transpose2d",
                format!("input channels {cin} != kernel C_in {cin_w}"),
            ));
        }
        if let Some(bt) = bias {
            if bt.shape() != [cout] {
                return Err(Error::dim(
                    "cconv_transpose2d",
                    format!("bias {:?}, expected [{cout}]", bt.shape()),
                ));
            }
        }
        let k = (kh, kw);
        let out_hw = geom.transpose_out_hw((h, wd), k)?;
        debug_assert_eq!(geom.out_hw(out_hw, k)?, (h, wd));
        let cok = cout * kh * kw;

        let zre = std_vec(z.re().view());
        let zim = std_vec(z.im().view());
        // underlying conv weight view: [Co_c = C_in, Ci_c*k = C_out*k]
        let wc = w_block(&std_vec(w.re().view()), &std_vec(w.im().view()), cin, cok, true);
        let mut colg2 = Array2::<T>::zeros((2 * cok, h * wd));
        let mut out_re = ArrayD::<T>::zeros(IxDyn(&[b, cout, out_hw.0, out_hw.1]));
        let mut out_im = ArrayD::<T>::zeros(IxDyn(&[b, cout, out_hw.0, out_hw.1]));
        {
            let in_plane = cin * h * wd;
            let out_plane = cout * out_hw.0 * out_hw.1;
            let ore = out_re.as_slice_mut().expect("standard layout");
            let oim = out_im.as_slice_mut().expect("standard layout");
            for bi in 0..b {
                let z2 = stack_planes(
                    &zre[bi * in_plane..(bi + 1) * in_plane],
                    &zim[bi * in_plane..(bi + 1) * in_plane],
                    cin,
                    h * wd,
                );
                general_mat_mul(T::one(), &wc.t(), &z2, T::zero(), &mut colg2);
                col2im_half(&colg2, (cout, out_hw.0, out_hw.1), k, &geom, (h, wd), &mut ore[bi * out_plane..(bi + 1) * out_plane], 0);
                col2im_half(&colg2, (cout, out_hw.0, out_hw.1), k, &geom, (h, wd), &mut oim[bi * out_plane..(bi + 1) * out_plane], 1);
            }
        }
        if let Some(bt) = bias {
            add_channel_bias(&mut out_re, bt.re());
            add_channel_bias(&mut out_im, bt.im());
        }

        let (zv, wv) = (z.detach(), w.detach());
        let has_bias = bias.is_some();
        let ids: Ids = match bias {
            Some(bt) => smallvec![z.id(), w.id(), bt.id()],
            None => smallvec![z.id(), w.id()],
        };
        self.record(
            "cconv_transpose2d",
            ids,
            ComplexTensor::from_parts(out_re, out_im)?,
            Box::new(move |g| {
                let zre = std_vec(zv.re().view());
                let zim = std_vec(zv.im().view());
                let gre = std_vec(g.re().view());
                let gim = std_vec(g.im().view());
                let wc = w_block(&std_vec(wv.re().view()), &std_vec(wv.im().view()), cin, cok, true);
                let in_plane = cin * h * wd;
                let out_plane = cout * out_hw.0 * out_hw.1;
                let mut colg2 = Array2::<T>::zeros((2 * cok, h * wd));
                let mut dz2 = Array2::<T>::zeros((2 * cin, h * wd));
                let mut d2 = Array2::<T>::zeros((2 * cin, 2 * cok));
                let mut dz_re = vec![T::zero(); b * in_plane];
                let mut dz_im = vec![T::zero(); b * in_plane];
                for bi in 0..b {
                    // im2col of the output-side gradient (conv input role)
                    im2col_half(&gre[bi * out_plane..(bi + 1) * out_plane], (cout, out_hw.0, out_hw.1), k, &geom, (h, wd), &mut colg2, 0);
                    im2col_half(&gim[bi * out_plane..(bi + 1) * out_plane], (cout, out_hw.0, out_hw.1), k, &geom, (h, wd), &mut colg2, 1);
                    // dz = Wc . colg2
                    general_mat_mul(T::one(), &wc, &colg2, T::zero(), &mut dz2);
                    let ds = dz2.as_slice().expect("standard layout");
                    dz_re[bi * in_plane..(bi + 1) * in_plane].copy_from_slice(&ds[..in_plane]);
                    dz_im[bi * in_plane..(bi + 1) * in_plane].copy_from_slice(&ds[in_plane..]);
                    // dW blocks: z2 . colg2^T
                    let z2 = stack_planes(
                        &zre[bi * in_plane..(bi + 1) * in_plane],
                        &zim[bi * in_plane..(bi + 1) * in_plane],
                        cin,
                        h * wd,
                    );
                    general_mat_mul(T::one(), &z2, &colg2.t(), T::one(), &mut d2);
                }
                // dWr = TL + BR, dWi = TR - BL
                let mut dw_re = vec![T::zero(); cin * cok];
                let mut dw_im = vec![T::zero(); cin * cok];
                for r in 0..cin {
                    for c in 0..cok {
                        dw_re[r * cok + c] = d2[[r, c]] + d2[[r + cin, c + cok]];
                        dw_im[r * cok + c] = d2[[r, c + cok]] - d2[[r + cin, c]];
                    }
                }
                let dz = ComplexTensor::from_parts(
                    ArrayD::from_shape_vec(IxDyn(&[b, cin, h, wd]), dz_re).expect("numel"),
                    ArrayD::from_shape_vec(IxDyn(&[b, cin, h, wd]), dz_im).expect("numel"),
                )
                .expect("plane shapes");
                let dw = ComplexTensor::from_parts(
                    ArrayD::from_shape_vec(IxDyn(&[cin, cout, kh, kw]), dw_re).expect("numel"),
                    ArrayD::from_shape_vec(IxDyn(&[cin, cout, kh, kw]), dw_im).expect("numel"),
                )
                .expect("plane shapes");
                let mut grads: super::tape::InputGrads<T> = smallvec![Some(dz), Some(dw)];
                if has_bias {
                    let db = ComplexTensor::from_parts(
                        bias_reduce(&g.re().to_owned()),
                        bias_reduce(&g.im().to_owned()),
                    )
                    .expect("plane shapes");
                    grads.push(Some(db));
                }
                grads
            }),
        )
    }
}
