//! Fused magnitude-softmax attention.
//!
//! Computes `softmax(|Q K^T (+ pos)| / sqrt(d)) V` slice by slice over
//! (batch, head) so the `[B, H, L, L]` logit tensor never materializes.
//! The backward pass keeps only the attention matrices and recomputes the
//! logits per slice.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};
use smallvec::{smallvec, SmallVec};

use super::tape::{InputGrads, NodeId, Tape};
use super::{ComplexTensor, Real};
use crate::error::{Error, Result};

type Ids = SmallVec<[Option<NodeId>; 3]>;

/// Relative-position operands: per-head projected sinusoid table
/// `[H, 2L-1, D]` plus the per-plane query biases `[H, D]`.
pub struct RelTerms<'a, T: Real> {
    pub proj: &'a ComplexTensor<T>,
    pub u_re: &'a ComplexTensor<T>,
    pub u_im: &'a ComplexTensor<T>,
}

fn std_flat<T: Real>(x: &ComplexTensor<T>, plane: usize) -> Vec<T> {
    let arr = if plane == 0 { x.re() } else { x.im() };
    arr.as_standard_layout().iter().copied().collect()
}

fn mat<'a, T: Real>(flat: &'a [T], idx: usize, rows: usize, cols: usize) -> ArrayView2<'a, T> {
    ArrayView2::from_shape((rows, cols), &flat[idx * rows * cols..(idx + 1) * rows * cols])
        .expect("contiguous slice")
}

/// Reusable per-slice buffers.
struct Scratch<T: Real> {
    lre: Array2<T>,
    lim: Array2<T>,
    s_pos: Array2<T>,
    qb: Array2<T>,
}

impl<T: Real> Scratch<T> {
    fn new(l: usize, d: usize) -> Self {
        Self {
            lre: Array2::zeros((l, l)),
            lim: Array2::zeros((l, l)),
            s_pos: Array2::zeros((l, 2 * l - 1)),
            qb: Array2::zeros((l, d)),
        }
    }
}

/// Content + positional logits for one slice, written into `sc.lre/lim`.
#[allow(clippy::too_many_arguments)]
fn slice_logits<T: Real>(
    sc: &mut Scratch<T>,
    qre: &ArrayView2<'_, T>,
    qim: &ArrayView2<'_, T>,
    kre: &ArrayView2<'_, T>,
    kim: &ArrayView2<'_, T>,
    rel: Option<(&ArrayView2<'_, T>, &[T], &[T])>,
) {
    general_mat_mul(T::one(), qre, &kre.t(), T::zero(), &mut sc.lre);
    general_mat_mul(-T::one(), qim, &kim.t(), T::one(), &mut sc.lre);
    general_mat_mul(T::one(), qre, &kim.t(), T::zero(), &mut sc.lim);
    general_mat_mul(T::one(), qim, &kre.t(), T::one(), &mut sc.lim);
    if let Some((proj, u_re, u_im)) = rel {
        add_pos_scores(sc, qre, proj, u_re, false);
        add_pos_scores(sc, qim, proj, u_im, true);
    }
}

/// `plane_scores += rel_shift((q_plane + u) proj^T)`: row i of the shifted
/// matrix reads source column `L-1-i+j`.
fn add_pos_scores<T: Real>(
    sc: &mut Scratch<T>,
    q_plane: &ArrayView2<'_, T>,
    proj: &ArrayView2<'_, T>,
    u: &[T],
    imag: bool,
) {
    let l = q_plane.nrows();
    sc.qb.assign(q_plane);
    for mut row in sc.qb.rows_mut() {
        for (v, &b) in row.iter_mut().zip(u) {
            *v += b;
        }
    }
    general_mat_mul(T::one(), &sc.qb, &proj.t(), T::zero(), &mut sc.s_pos);
    let scores = if imag { &mut sc.lim } else { &mut sc.lre };
    let os = scores.as_slice_mut().expect("standard layout");
    let ss = sc.s_pos.as_slice().expect("standard layout");
    let w = 2 * l - 1;
    for i in 0..l {
        let srow = &ss[i * w..(i + 1) * w];
        let orow = &mut os[i * l..(i + 1) * l];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += srow[l - 1 - i + j];
        }
    }
}

/// Depth-1 fast path: logits rows are rank-1 in the keys plus a shifted
/// window of the positional vector, so everything streams row by row
/// through L-sized scratch instead of L x L matrices.
#[allow(clippy::too_many_arguments)]
fn d1_forward<T: Real>(
    q_re: &[T],
    q_im: &[T],
    k_re: &[T],
    k_im: &[T],
    v_re: &[T],
    v_im: &[T],
    rel: Option<(&[T], T, T)>, // (proj [2L-1], u_re, u_im)
    scale: T,
    att: &mut [T],
    out_re: &mut [T],
    out_im: &mut [T],
) {
    let l = q_re.len();
    let eps = T::eps_mag();
    for i in 0..l {
        let (qr, qi) = (q_re[i], q_im[i]);
        let row = &mut att[i * l..(i + 1) * l];
        let mut mx = T::neg_infinity();
        match rel {
            Some((proj, ur, ui)) => {
                let win = &proj[l - 1 - i..2 * l - 1 - i];
                let (br, bi) = (qr + ur, qi + ui);
                for j in 0..l {
                    let lre = qr * k_re[j] - qi * k_im[j] + br * win[j];
                    let lim = qr * k_im[j] + qi * k_re[j] + bi * win[j];
                    let m = (lre * lre + lim * lim + eps).sqrt() * scale;
                    row[j] = m;
                    mx = mx.max(m);
                }
            }
            None => {
                for j in 0..l {
                    let lre = qr * k_re[j] - qi * k_im[j];
                    let lim = qr * k_im[j] + qi * k_re[j];
                    let m = (lre * lre + lim * lim + eps).sqrt() * scale;
                    row[j] = m;
                    mx = mx.max(m);
                }
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let (mut ore, mut oim) = (T::zero(), T::zero());
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v / sum;
            ore += *v * v_re[j];
            oim += *v * v_im[j];
        }
        out_re[i] = ore;
        out_im[i] = oim;
    }
}

/// Depth-1 backward: stream rows, accumulating key/value/positional
/// gradients without any L x L temporaries beyond the saved attention.
#[allow(clippy::too_many_arguments)]
fn d1_backward<T: Real>(
    q_re: &[T],
    q_im: &[T],
    k_re: &[T],
    k_im: &[T],
    v_re: &[T],
    v_im: &[T],
    rel: Option<(&[T], T, T)>,
    scale: T,
    att: &[T],
    go_re: &[T],
    go_im: &[T],
    dq_re: &mut [T],
    dq_im: &mut [T],
    dk_re: &mut [T],
    dk_im: &mut [T],
    dv_re: &mut [T],
    dv_im: &mut [T],
    drel: Option<(&mut [T], &mut T, &mut T)>, // (dproj, du_re, du_im)
) {
    let l = q_re.len();
    let eps = T::eps_mag();
    let mut drel = drel;
    for i in 0..l {
        let (qr, qi) = (q_re[i], q_im[i]);
        let (gr, gi) = (go_re[i], go_im[i]);
        let arow = &att[i * l..(i + 1) * l];
        // dv and the softmax row dot in one pass
        let mut dot = T::zero();
        for j in 0..l {
            let da = gr * v_re[j] + gi * v_im[j];
            dot += arow[j] * da;
            dv_re[j] += arow[j] * gr;
            dv_im[j] += arow[j] * gi;
        }
        let winpos = l - 1 - i;
        let (mut dqr, mut dqi) = (T::zero(), T::zero());
        for j in 0..l {
            let da = gr * v_re[j] + gi * v_im[j];
            let dsc = arow[j] * (da - dot) * scale;
            let (mut lre, mut lim) = (qr * k_re[j] - qi * k_im[j], qr * k_im[j] + qi * k_re[j]);
            if let Some((proj, ur, ui)) = rel {
                let p = proj[winpos + j];
                lre += (qr + ur) * p;
                lim += (qi + ui) * p;
            }
            let m = (lre * lre + lim * lim + eps).sqrt();
            let dl_re = dsc * lre / m;
            let dl_im = dsc * lim / m;
            dqr += dl_re * k_re[j] + dl_im * k_im[j];
            dqi += dl_im * k_re[j] - dl_re * k_im[j];
            dk_re[j] += dl_re * qr + dl_im * qi;
            dk_im[j] += dl_im * qr - dl_re * qi;
            if let Some((proj, ur, ui)) = rel {
                let p = proj[winpos + j];
                dqr += dl_re * p;
                dqi += dl_im * p;
                if let Some((dproj, du_re, du_im)) = drel.as_mut() {
                    dproj[winpos + j] += dl_re * (qr + ur) + dl_im * (qi + ui);
                    **du_re += dl_re * p;
                    **du_im += dl_im * p;
                }
            }
        }
        dq_re[i] += dqr;
        dq_im[i] += dqi;
    }
}

/// Magnitude + scaled softmax over `lre/lim`, written into `att`.
fn slice_attention<T: Real>(sc: &Scratch<T>, scale: T, att: &mut [T]) {
    let eps = T::eps_mag();
    let l = sc.lre.nrows();
    let lre = sc.lre.as_slice().expect("standard layout");
    let lim = sc.lim.as_slice().expect("standard layout");
    for i in 0..l {
        let row = &mut att[i * l..(i + 1) * l];
        let mut mx = T::neg_infinity();
        for (o, (&r, &im)) in row.iter_mut().zip(lre[i * l..].iter().zip(&lim[i * l..])) {
            let m = (r * r + im * im + eps).sqrt() * scale;
            *o = m;
            mx = mx.max(m);
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

impl<T: Real> Tape<T> {
    /// Fused attention over `[B, H, L, D]` operands. `rel` carries the
    /// positional projection and per-plane biases; gradients flow into all
    /// tracked inputs (q, k, v, proj, u_re, u_im).
    pub fn fused_attention(
        &mut self,
        q: &ComplexTensor<T>,
        k: &ComplexTensor<T>,
        v: &ComplexTensor<T>,
        rel: Option<RelTerms<'_, T>>,
    ) -> Result<ComplexTensor<T>> {
        if q.ndim() != 4 || q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(Error::dim(
                "fused_attention",
                format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
            ));
        }
        let (b, h, l, d) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
        if let Some(r) = &rel {
            if r.proj.shape() != [h, 2 * l - 1, d] || r.u_re.shape() != [h, d] || r.u_im.shape() != [h, d] {
                return Err(Error::dim(
                    "fused_attention",
                    format!(
                        "relpos shapes proj {:?} u_re {:?} u_im {:?} for H={h}, L={l}, D={d}",
                        r.proj.shape(),
                        r.u_re.shape(),
                        r.u_im.shape()
                    ),
                ));
            }
        }
        let scale = T::one() / T::from_f64(d as f64).sqrt();
        let slices = b * h;

        let qre = std_flat(q, 0);
        let qim = std_flat(q, 1);
        let kre = std_flat(k, 0);
        let kim = std_flat(k, 1);
        let vre = std_flat(v, 0);
        let vim = std_flat(v, 1);
        let rel_flat = rel
            .as_ref()
            .map(|r| (std_flat(r.proj, 0), std_flat(r.u_re, 0), std_flat(r.u_im, 0)));

        let mut att_all = vec![T::zero(); slices * l * l];
        let mut out_re = vec![T::zero(); slices * l * d];
        let mut out_im = vec![T::zero(); slices * l * d];
        let mut sc = Scratch::new(l, d);
        for s in 0..slices {
            let hi = s % h;
            if d == 1 {
                let rel_slice = rel_flat.as_ref().map(|(p, ur, ui)| {
                    (&p[hi * (2 * l - 1)..(hi + 1) * (2 * l - 1)], ur[hi], ui[hi])
                });
                d1_forward(
                    &qre[s * l..(s + 1) * l],
                    &qim[s * l..(s + 1) * l],
                    &kre[s * l..(s + 1) * l],
                    &kim[s * l..(s + 1) * l],
                    &vre[s * l..(s + 1) * l],
                    &vim[s * l..(s + 1) * l],
                    rel_slice,
                    scale,
                    &mut att_all[s * l * l..(s + 1) * l * l],
                    &mut out_re[s * l..(s + 1) * l],
                    &mut out_im[s * l..(s + 1) * l],
                );
                continue;
            }
            let rel_slice = rel_flat.as_ref().map(|(p, ur, ui)| {
                (mat(p, hi, 2 * l - 1, d), &ur[hi * d..(hi + 1) * d], &ui[hi * d..(hi + 1) * d])
            });
            slice_logits(
                &mut sc,
                &mat(&qre, s, l, d),
                &mat(&qim, s, l, d),
                &mat(&kre, s, l, d),
                &mat(&kim, s, l, d),
                rel_slice.as_ref().map(|(p, ur, ui)| (p, *ur, *ui)),
            );
            let att = &mut att_all[s * l * l..(s + 1) * l * l];
            slice_attention(&sc, scale, att);
            let att_m = ArrayView2::from_shape((l, l), &*att).expect("contiguous");
            let mut ore = ndarray::ArrayViewMut2::from_shape(
                (l, d),
                &mut out_re[s * l * d..(s + 1) * l * d],
            )
            .expect("contiguous");
            general_mat_mul(T::one(), &att_m, &mat(&vre, s, l, d), T::zero(), &mut ore);
            let mut oim = ndarray::ArrayViewMut2::from_shape(
                (l, d),
                &mut out_im[s * l * d..(s + 1) * l * d],
            )
            .expect("contiguous");
            general_mat_mul(T::one(), &att_m, &mat(&vim, s, l, d), T::zero(), &mut oim);
        }
        let shape = IxDyn(&[b, h, l, d]);
        let value = ComplexTensor::from_parts(
            ArrayD::from_shape_vec(shape.clone(), out_re).expect("numel"),
            ArrayD::from_shape_vec(shape, out_im).expect("numel"),
        )?;

        let (qv, kv, vv) = (q.detach(), k.detach(), v.detach());
        let relv = rel.as_ref().map(|r| (r.proj.detach(), r.u_re.detach(), r.u_im.detach()));
        let ids: Ids = match &rel {
            Some(r) => {
                let mut ids: Ids = smallvec![q.id(), k.id(), v.id()];
                ids.push(r.proj.id());
                ids.push(r.u_re.id());
                ids.push(r.u_im.id());
                ids
            }
            None => smallvec![q.id(), k.id(), v.id()],
        };
        let has_rel = rel.is_some();
        self.record(
            "fused_attention",
            ids,
            value,
            Box::new(move |g| {
                let qre = std_flat(&qv, 0);
                let qim = std_flat(&qv, 1);
                let kre = std_flat(&kv, 0);
                let kim = std_flat(&kv, 1);
                let vre = std_flat(&vv, 0);
                let vim = std_flat(&vv, 1);
                let rel_flat = relv
                    .as_ref()
                    .map(|(p, ur, ui)| (std_flat(p, 0), std_flat(ur, 0), std_flat(ui, 0)));
                let gre = std_flat(g, 0);
                let gim = std_flat(g, 1);

                let mut dq_re = vec![T::zero(); slices * l * d];
                let mut dq_im = vec![T::zero(); slices * l * d];
                let mut dk_re = vec![T::zero(); slices * l * d];
                let mut dk_im = vec![T::zero(); slices * l * d];
                let mut dv_re = vec![T::zero(); slices * l * d];
                let mut dv_im = vec![T::zero(); slices * l * d];
                let mut dproj = vec![T::zero(); h * (2 * l - 1) * d];
                let mut du_re = vec![T::zero(); h * d];
                let mut du_im = vec![T::zero(); h * d];

                let mut sc = Scratch::new(l, d);
                let mut da = Array2::<T>::zeros((l, l));
                let mut dl_re = Array2::<T>::zeros((l, l));
                let mut dl_im = Array2::<T>::zeros((l, l));
                let mut ds_re = Array2::<T>::zeros((l, 2 * l - 1));
                let mut ds_im = Array2::<T>::zeros((l, 2 * l - 1));
                let mut tmp_ld = Array2::<T>::zeros((l, d));

                for s in 0..slices {
                    let hi = s % h;
                    if d == 1 {
                        let rel_slice = rel_flat.as_ref().map(|(p, ur, ui)| {
                            (&p[hi * (2 * l - 1)..(hi + 1) * (2 * l - 1)], ur[hi], ui[hi])
                        });
                        let drel = if has_rel {
                            let dp = &mut dproj[hi * (2 * l - 1)..(hi + 1) * (2 * l - 1)];
                            Some((dp, &mut du_re[hi], &mut du_im[hi]))
                        } else {
                            None
                        };
                        d1_backward(
                            &qre[s * l..(s + 1) * l],
                            &qim[s * l..(s + 1) * l],
                            &kre[s * l..(s + 1) * l],
                            &kim[s * l..(s + 1) * l],
                            &vre[s * l..(s + 1) * l],
                            &vim[s * l..(s + 1) * l],
                            rel_slice,
                            scale,
                            &att_all[s * l * l..(s + 1) * l * l],
                            &gre[s * l..(s + 1) * l],
                            &gim[s * l..(s + 1) * l],
                            &mut dq_re[s * l..(s + 1) * l],
                            &mut dq_im[s * l..(s + 1) * l],
                            &mut dk_re[s * l..(s + 1) * l],
                            &mut dk_im[s * l..(s + 1) * l],
                            &mut dv_re[s * l..(s + 1) * l],
                            &mut dv_im[s * l..(s + 1) * l],
                            drel,
                        );
                        continue;
                    }
                    let rel_slice = rel_flat.as_ref().map(|(p, ur, ui)| {
                        (mat(p, hi, 2 * l - 1, d), &ur[hi * d..(hi + 1) * d], &ui[hi * d..(hi + 1) * d])
                    });
                    // recompute logits (cheap matmuls; no exp)
                    slice_logits(
                        &mut sc,
                        &mat(&qre, s, l, d),
                        &mat(&qim, s, l, d),
                        &mat(&kre, s, l, d),
                        &mat(&kim, s, l, d),
                        rel_slice.as_ref().map(|(p, ur, ui)| (p, *ur, *ui)),
                    );
                    let att = mat(&att_all, s, l, l);
                    let go_re = mat(&gre, s, l, d);
                    let go_im = mat(&gim, s, l, d);

                    // values
                    let mut dvm = ndarray::ArrayViewMut2::from_shape(
                        (l, d),
                        &mut dv_re[s * l * d..(s + 1) * l * d],
                    )
                    .expect("contiguous");
                    general_mat_mul(T::one(), &att.t(), &go_re, T::zero(), &mut dvm);
                    let mut dvm = ndarray::ArrayViewMut2::from_shape(
                        (l, d),
                        &mut dv_im[s * l * d..(s + 1) * l * d],
                    )
                    .expect("contiguous");
                    general_mat_mul(T::one(), &att.t(), &go_im, T::zero(), &mut dvm);

                    // attention-matrix gradient, then softmax + |.|/sqrt(d)
                    general_mat_mul(T::one(), &go_re, &mat(&vre, s, l, d).t(), T::zero(), &mut da);
                    general_mat_mul(T::one(), &go_im, &mat(&vim, s, l, d).t(), T::one(), &mut da);
                    {
                        let eps = T::eps_mag();
                        let att_s = att.as_slice().expect("contiguous");
                        let da_s = da.as_slice().expect("standard layout");
                        let lre_s = sc.lre.as_slice().expect("standard layout");
                        let lim_s = sc.lim.as_slice().expect("standard layout");
                        let dre_s = dl_re.as_slice_mut().expect("standard layout");
                        let dim_s = dl_im.as_slice_mut().expect("standard layout");
                        for i in 0..l {
                            let r = i * l..(i + 1) * l;
                            let arow = &att_s[r.clone()];
                            let darow = &da_s[r.clone()];
                            let mut dot = T::zero();
                            for (&a, &dda) in arow.iter().zip(darow) {
                                dot += a * dda;
                            }
                            for j in 0..l {
                                let dsc = arow[j] * (darow[j] - dot) * scale;
                                let (lr, li) = (lre_s[i * l + j], lim_s[i * l + j]);
                                let m = (lr * lr + li * li + eps).sqrt();
                                dre_s[i * l + j] = dsc * lr / m;
                                dim_s[i * l + j] = dsc * li / m;
                            }
                        }
                    }

                    // content terms
                    let mut dqm = ndarray::ArrayViewMut2::from_shape(
                        (l, d),
                        &mut dq_re[s * l * d..(s + 1) * l * d],
                    )
                    .expect("contiguous");
                    general_mat_mul(T::one(), &dl_re, &mat(&kre, s, l, d), T::zero(), &mut dqm);
                    general_mat_mul(T::one(), &dl_im, &mat(&kim, s, l, d), T::one(), &mut dqm);
                    let mut dqm = ndarray::ArrayViewMut2::from_shape(
                        (l, d),
                        &mut dq_im[s * l * d..(s + 1) * l * d],
                    )
                    .expect("contiguous");
                    general_mat_mul(T::one(), &dl_im, &mat(&kre, s, l, d), T::zero(), &mut dqm);
                    general_mat_mul(-T::one(), &dl_re, &mat(&kim, s, l, d), T::one(), &mut dqm);
                    let mut dkm = ndarray::ArrayViewMut2::from_shape(
                        (l, d),
                        &mut dk_re[s * l * d..(s + 1) * l * d],
                    )
                    .expect("contiguous");
                    general_mat_mul(T::one(), &dl_re.t(), &mat(&qre, s, l, d), T::zero(), &mut dkm);
                    general_mat_mul(T::one(), &dl_im.t(), &mat(&qim, s, l, d), T::one(), &mut dkm);
                    let mut dkm = ndarray::ArrayViewMut2::from_shape(
                        (l, d),
                        &mut dk_im[s * l * d..(s + 1) * l * d],
                    )
                    .expect("contiguous");
                    general_mat_mul(T::one(), &dl_im.t(), &mat(&qre, s, l, d), T::zero(), &mut dkm);
                    general_mat_mul(-T::one(), &dl_re.t(), &mat(&qim, s, l, d), T::one(), &mut dkm);

                    if let Some((proj, u_re_s, u_im_s)) = rel_slice {
                        // scatter dl into relative coordinates
                        let w = 2 * l - 1;
                        ds_re.fill(T::zero());
                        ds_im.fill(T::zero());
                        {
                            let dre_s = dl_re.as_slice().expect("standard layout");
                            let dim_s = dl_im.as_slice().expect("standard layout");
                            let sre = ds_re.as_slice_mut().expect("standard layout");
                            let sim = ds_im.as_slice_mut().expect("standard layout");
                            for i in 0..l {
                                for j in 0..l {
                                    sre[i * w + l - 1 - i + j] += dre_s[i * l + j];
                                    sim[i * w + l - 1 - i + j] += dim_s[i * l + j];
                                }
                            }
                        }
                        // d(q_plane + u) = ds . proj
                        let mut dqm = ndarray::ArrayViewMut2::from_shape(
                            (l, d),
                            &mut dq_re[s * l * d..(s + 1) * l * d],
                        )
                        .expect("contiguous");
                        general_mat_mul(T::one(), &ds_re, &proj, T::zero(), &mut tmp_ld);
                        dqm += &tmp_ld;
                        for row in tmp_ld.rows() {
                            for (j, &vv) in row.iter().enumerate() {
                                du_re[hi * d + j] += vv;
                            }
                        }
                        let mut dqm = ndarray::ArrayViewMut2::from_shape(
                            (l, d),
                            &mut dq_im[s * l * d..(s + 1) * l * d],
                        )
                        .expect("contiguous");
                        general_mat_mul(T::one(), &ds_im, &proj, T::zero(), &mut tmp_ld);
                        dqm += &tmp_ld;
                        for row in tmp_ld.rows() {
                            for (j, &vv) in row.iter().enumerate() {
                                du_im[hi * d + j] += vv;
                            }
                        }
                        // projection gradient: ds^T (q_plane + u)
                        sc.qb.assign(&mat(&qre, s, l, d));
                        for mut row in sc.qb.rows_mut() {
                            for (vv, &bb) in row.iter_mut().zip(u_re_s) {
                                *vv += bb;
                            }
                        }
                        let mut dpm = ndarray::ArrayViewMut2::from_shape(
                            (2 * l - 1, d),
                            &mut dproj[hi * (2 * l - 1) * d..(hi + 1) * (2 * l - 1) * d],
                        )
                        .expect("contiguous");
                        general_mat_mul(T::one(), &ds_re.t(), &sc.qb, T::one(), &mut dpm);
                        sc.qb.assign(&mat(&qim, s, l, d));
                        for mut row in sc.qb.rows_mut() {
                            for (vv, &bb) in row.iter_mut().zip(u_im_s) {
                                *vv += bb;
                            }
                        }
                        general_mat_mul(T::one(), &ds_im.t(), &sc.qb, T::one(), &mut dpm);
                    }
                }

                let shape = IxDyn(&[b, h, l, d]);
                let pack = |re: Vec<T>, im: Vec<T>, sh: IxDyn| {
                    ComplexTensor::from_parts(
                        ArrayD::from_shape_vec(sh.clone(), re).expect("numel"),
                        ArrayD::from_shape_vec(sh, im).expect("numel"),
                    )
                    .expect("plane shapes")
                };
                let dq = pack(dq_re, dq_im, shape.clone());
                let dk = pack(dk_re, dk_im, shape.clone());
                let dv = pack(dv_re, dv_im, shape);
                let mut grads: InputGrads<T> = smallvec![Some(dq), Some(dk), Some(dv)];
                if has_rel {
                    let zero_p = vec![T::zero(); h * (2 * l - 1) * d];
                    let zero_u = vec![T::zero(); h * d];
                    grads.push(Some(pack(dproj, zero_p, IxDyn(&[h, 2 * l - 1, d]))));
                    grads.push(Some(pack(du_re, zero_u.clone(), IxDyn(&[h, d]))));
                    grads.push(Some(pack(du_im, zero_u, IxDyn(&[h, d]))));
                }
                grads
            }),
        )
    }
}
