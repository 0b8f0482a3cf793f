//! Complex multi-head self-attention with magnitude softmax.
//!
//! Logits are the complex matrix product `Q K^T` expanded over real planes;
//! attention weights are `softmax(|logits| / sqrt(d_k))` — real, row
//! stochastic — applied to both planes of V. Relative sinusoidal positional
//! terms are added to the re and im logit planes separately
//! (Transformer-XL-style shift, shared sinusoid table, one real learned
//! projection, per-plane learned head biases).

use ndarray::{ArrayD, IxDyn};
use rand::rngs::StdRng;

use crate::ctensor::{ComplexTensor, Real, RelTerms, Tape};
use crate::error::{Error, Result};
use crate::layers::{init_real_uniform, join, zeros_ct, ComplexLinear, Param, Parameterized};

/// Learned pieces of the relative positional encoding.
pub struct RelPos<T: Real> {
    /// Real projection of the sinusoid table, `[C, C]`, split per head.
    pub w_pos: Param<T>,
    /// Bias added to Q's re plane for the positional term, `[heads, d_k]`.
    pub u_re: Param<T>,
    /// Bias added to Q's im plane for the positional term, `[heads, d_k]`.
    pub u_im: Param<T>,
}

impl<T: Real> RelPos<T> {
    pub fn new(c: usize, heads: usize, rng: &mut StdRng) -> Self {
        let bound = (3.0 / c as f64).sqrt();
        Self {
            w_pos: Param::real(init_real_uniform(&[c, c], bound, rng)),
            u_re: Param::real(zeros_ct(&[heads, c / heads])),
            u_im: Param::real(zeros_ct(&[heads, c / heads])),
        }
    }
}

impl<T: Real> Parameterized<T> for RelPos<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "w_pos"), &mut self.w_pos);
        f(&join(prefix, "u_re"), &mut self.u_re);
        f(&join(prefix, "u_im"), &mut self.u_im);
    }
}

/// QKV/output projections plus positional parameters.
pub struct ComplexAttentionParams<T: Real> {
    pub w_q: ComplexLinear<T>,
    pub w_k: ComplexLinear<T>,
    pub w_v: ComplexLinear<T>,
    pub w_o: ComplexLinear<T>,
    pub relpos: RelPos<T>,
    pub heads: usize,
    pub d_k: usize,
}

impl<T: Real> ComplexAttentionParams<T> {
    pub fn new(c: usize, heads: usize, rng: &mut StdRng) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::Contract(format!("C={c} not divisible by heads={heads}")));
        }
        Ok(Self {
            w_q: ComplexLinear::new(c, c, false, rng),
            w_k: ComplexLinear::new(c, c, false, rng),
            w_v: ComplexLinear::new(c, c, false, rng),
            w_o: ComplexLinear::new(c, c, false, rng),
            relpos: RelPos::new(c, heads, rng),
            heads,
            d_k: c / heads,
        })
    }
}

impl<T: Real> Parameterized<T> for ComplexAttentionParams<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.w_q.visit_params(&join(prefix, "w_q"), f);
        self.w_k.visit_params(&join(prefix, "w_k"), f);
        self.w_v.visit_params(&join(prefix, "w_v"), f);
        self.w_o.visit_params(&join(prefix, "w_o"), f);
        self.relpos.visit_params(&join(prefix, "relpos"), f);
    }
}

/// Deterministic sinusoid table over relative offsets `L-1 .. -(L-1)`
/// (row r encodes offset L-1-r), shape `[2L-1, C]`.
pub fn sinusoid_table<T: Real>(l: usize, c: usize) -> ComplexTensor<T> {
    let rows = 2 * l - 1;
    let mut re = ArrayD::zeros(IxDyn(&[rows, c]));
    for r in 0..rows {
        let p = (l as f64 - 1.0) - r as f64;
        for i in 0..c / 2 {
            let omega = 1.0 / 10_000f64.powf(2.0 * i as f64 / c as f64);
            re[[r, 2 * i]] = T::from_f64((p * omega).sin());
            re[[r, 2 * i + 1]] = T::from_f64((p * omega).cos());
        }
    }
    ComplexTensor::from_re(re)
}

/// Project a sequence into per-head queries, keys, and values:
/// `[B', L, C] -> 3 x [B', heads, L, d_k]`.
pub fn project_qkv<T: Real>(
    tape: &mut Tape<T>,
    z: &ComplexTensor<T>,
    p: &ComplexAttentionParams<T>,
) -> Result<(ComplexTensor<T>, ComplexTensor<T>, ComplexTensor<T>)> {
    if z.ndim() != 3 || z.shape()[2] != p.heads * p.d_k {
        return Err(Error::dim(
            "project_qkv",
            format!("expected [B', L, {}], got {:?}", p.heads * p.d_k, z.shape()),
        ));
    }
    let (b, l) = (z.shape()[0], z.shape()[1]);
    let split = |lin: &ComplexLinear<T>, tape: &mut Tape<T>| -> Result<ComplexTensor<T>> {
        let y = lin.forward(tape, z)?;
        let y = tape.reshape(&y, &[b, l, p.heads, p.d_k])?;
        tape.permute(&y, &[0, 2, 1, 3])
    };
    let q = split(&p.w_q, tape)?;
    let k = split(&p.w_k, tape)?;
    let v = split(&p.w_v, tape)?;
    Ok((q, k, v))
}

/// Row-stochastic attention weights `softmax(|Q K^T (+ pos)| / sqrt(d_k))`.
///
/// `relpos`, when given, supplies the learned positional parameters and the
/// shared sinusoid table for the sequence length.
pub fn attention_matrix<T: Real>(
    tape: &mut Tape<T>,
    q: &ComplexTensor<T>,
    k: &ComplexTensor<T>,
    relpos: Option<(&RelPos<T>, &ComplexTensor<T>)>,
) -> Result<ComplexTensor<T>> {
    let nd = q.ndim();
    if nd != 4 {
        return Err(Error::dim("complex_attention", format!("expected [B', H, L, d_k], got {:?}", q.shape())));
    }
    let (heads, l, d_k) = (q.shape()[1], q.shape()[2], q.shape()[3]);
    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let mut logits = tape.cmatmul(q, &kt)?;

    if let Some((rp, table)) = relpos {
        let c = heads * d_k;
        if table.shape() != [2 * l - 1, c] {
            return Err(Error::dim(
                "complex_attention",
                format!("sinusoid table {:?}, expected [{}, {}]", table.shape(), 2 * l - 1, c),
            ));
        }
        let w_pos = tape.param(&rp.w_pos);
        let proj = tape.rmatmul(table, &w_pos)?; // [2L-1, C]
        let proj = tape.reshape(&proj, &[2 * l - 1, heads, d_k])?;
        let proj = tape.permute(&proj, &[1, 0, 2])?; // [H, 2L-1, d_k]
        let proj_t = tape.permute(&proj, &[0, 2, 1])?; // [H, d_k, 2L-1]

        let pos_plane = |plane_of_q: ComplexTensor<T>,
                             bias: &Param<T>,
                             tape: &mut Tape<T>|
         -> Result<ComplexTensor<T>> {
            let u = tape.param(bias);
            let u = tape.reshape(&u, &[heads, 1, d_k])?;
            let qb = tape.add(&plane_of_q, &u)?;
            let scores = tape.rmatmul(&qb, &proj_t)?; // [B', H, L, 2L-1]
            tape.rel_shift(&scores)
        };
        let q_re = tape.re_part(q)?;
        let q_im = tape.im_part(q)?;
        let pos_re = pos_plane(q_re, &rp.u_re, tape)?;
        let pos_im = pos_plane(q_im, &rp.u_im, tape)?;

        let lre = tape.re_part(&logits)?;
        let lim = tape.im_part(&logits)?;
        let lre = tape.add(&lre, &pos_re)?;
        let lim = tape.add(&lim, &pos_im)?;
        logits = tape.combine(&lre, &lim)?;
    }

    let mag = tape.magnitude(&logits)?;
    let scaled = tape.scale(&mag, T::one() / T::from_f64(d_k as f64).sqrt())?;
    tape.softmax_lastdim(&scaled)
}

/// Single-head complex attention (Eq. 4 path): weights applied to both
/// planes of V with the same real matrix.
pub fn complex_attention<T: Real>(
    tape: &mut Tape<T>,
    q: &ComplexTensor<T>,
    k: &ComplexTensor<T>,
    v: &ComplexTensor<T>,
    relpos: Option<(&RelPos<T>, &ComplexTensor<T>)>,
) -> Result<ComplexTensor<T>> {
    let a = attention_matrix(tape, q, k, relpos)?;
    tape.mix_real(&a, v)
}

/// Full multi-head self-attention block: project, attend per head,
/// concatenate on depth, project out. The residual is added by the caller.
///
/// Attention itself runs through the fused slice-wise kernel so the
/// `[B', H, L, L]` logit tensor never materializes; the fused path is
/// verified against the composable Eq. 4 ops in the ctensor tests.
pub fn multi_head<T: Real>(
    tape: &mut Tape<T>,
    z: &ComplexTensor<T>,
    p: &ComplexAttentionParams<T>,
    use_relpos: bool,
) -> Result<ComplexTensor<T>> {
    let (b, l) = (z.shape()[0], z.shape()[1]);
    let c = p.heads * p.d_k;
    let (q, k, v) = project_qkv(tape, z, p)?;
    let att = if use_relpos {
        let table = sinusoid_table::<T>(l, c);
        let w_pos = tape.param(&p.relpos.w_pos);
        let proj = tape.rmatmul(&table, &w_pos)?;
        let proj = tape.reshape(&proj, &[2 * l - 1, p.heads, p.d_k])?;
        let proj = tape.permute(&proj, &[1, 0, 2])?;
        let u_re = tape.param(&p.relpos.u_re);
        let u_im = tape.param(&p.relpos.u_im);
        tape.fused_attention(&q, &k, &v, Some(RelTerms { proj: &proj, u_re: &u_re, u_im: &u_im }))?
    } else {
        tape.fused_attention(&q, &k, &v, None)?
    };
    let merged = tape.permute(&att, &[0, 2, 1, 3])?;
    let merged = tape.reshape(&merged, &[b, l, c])?;
    p.w_o.forward(tape, &merged)
}

#[cfg(test)]
mod tests;
