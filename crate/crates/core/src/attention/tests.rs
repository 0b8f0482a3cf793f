//! Attention oracles: direct scalar evaluation of the magnitude-softmax
//! attention, invariance properties, gradients.

use ndarray::{ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::SeedableRng;

use super::*;
use crate::ctensor::{finite_diff_check, random_ct};
use crate::layers::Param;

fn identity_linear(c: usize) -> ComplexLinear<f64> {
    let mut re = ArrayD::zeros(IxDyn(&[c, c]));
    for i in 0..c {
        re[[i, i]] = 1.0;
    }
    ComplexLinear { w: Param::complex(ComplexTensor::from_re(re)), b: None }
}

fn params(c: usize, heads: usize, seed: u64) -> ComplexAttentionParams<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut p = ComplexAttentionParams::new(c, heads, &mut rng).unwrap();
    crate::layers::index_params(&mut p);
    p
}

fn identity_params(c: usize, heads: usize) -> ComplexAttentionParams<f64> {
    let mut rng = StdRng::seed_from_u64(0);
    let mut p = ComplexAttentionParams {
        w_q: identity_linear(c),
        w_k: identity_linear(c),
        w_v: identity_linear(c),
        w_o: identity_linear(c),
        relpos: RelPos::new(c, heads, &mut rng),
        heads,
        d_k: c / heads,
    };
    crate::layers::index_params(&mut p);
    p
}

#[test]
fn identity_projection_returns_input_per_head() {
    let p = identity_params(4, 2);
    let z = random_ct(&[2, 3, 4], &mut StdRng::seed_from_u64(1));
    let mut t = Tape::<f64>::no_grad();
    let (q, k, v) = project_qkv(&mut t, &z, &p).unwrap();
    assert_eq!(q.shape(), &[2, 2, 3, 2]);
    for b in 0..2 {
        for h in 0..2 {
            for l in 0..3 {
                for d in 0..2 {
                    let c = h * 2 + d;
                    for (proj, _name) in [(&q, "q"), (&k, "k"), (&v, "v")] {
                        assert_eq!(proj.re()[[b, h, l, d]], z.re()[[b, l, c]]);
                        assert_eq!(proj.im()[[b, h, l, d]], z.im()[[b, l, c]]);
                    }
                }
            }
        }
    }
}

#[test]
fn zero_input_projects_to_zero() {
    let p = params(8, 4, 2);
    let z = ComplexTensor::zeros(&[1, 5, 8]);
    let mut t = Tape::<f64>::no_grad();
    let (q, k, v) = project_qkv(&mut t, &z, &p).unwrap();
    assert_eq!(q.max_abs(), 0.0);
    assert_eq!(k.max_abs(), 0.0);
    assert_eq!(v.max_abs(), 0.0);
}

#[test]
fn per_head_slices_match_unsplit_projection_oracle() {
    let p = params(8, 4, 3);
    let z = random_ct(&[2, 5, 8], &mut StdRng::seed_from_u64(4));
    let mut t = Tape::<f64>::no_grad();
    let (q, _, _) = project_qkv(&mut t, &z, &p).unwrap();
    let wq = t.param(&p.w_q.w);
    let full = t.cmatmul(&z, &wq).unwrap(); // [2, 5, 8] unsplit
    for b in 0..2 {
        for h in 0..4 {
            for l in 0..5 {
                for d in 0..2 {
                    assert!((q.re()[[b, h, l, d]] - full.re()[[b, l, h * 2 + d]]).abs() < 1e-12);
                    assert!((q.im()[[b, h, l, d]] - full.im()[[b, l, h * 2 + d]]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn single_position_attention_returns_values() {
    let mut rng = StdRng::seed_from_u64(5);
    let q = random_ct(&[1, 2, 1, 3], &mut rng);
    let k = random_ct(&[1, 2, 1, 3], &mut rng);
    let v = random_ct(&[1, 2, 1, 3], &mut rng);
    let mut t = Tape::<f64>::no_grad();
    let out = complex_attention(&mut t, &q, &k, &v, None).unwrap();
    assert!(out.max_abs_diff(&v) < 1e-12);
}

#[test]
fn equal_magnitude_logits_average_the_values() {
    // Both keys identical: every row of |QK^T| is constant, so A = 1/2.
    let mut rng = StdRng::seed_from_u64(6);
    let q = random_ct(&[1, 1, 2, 2], &mut rng);
    let k_row = random_ct(&[2], &mut rng);
    let mut kre = ArrayD::zeros(IxDyn(&[1, 1, 2, 2]));
    let mut kim = ArrayD::zeros(IxDyn(&[1, 1, 2, 2]));
    for l in 0..2 {
        for d in 0..2 {
            kre[[0, 0, l, d]] = k_row.re()[[d]];
            kim[[0, 0, l, d]] = k_row.im()[[d]];
        }
    }
    let k = ComplexTensor::from_parts(kre, kim).unwrap();
    let v = random_ct(&[1, 1, 2, 2], &mut rng);
    let mut t = Tape::<f64>::no_grad();
    let out = complex_attention(&mut t, &q, &k, &v, None).unwrap();
    for d in 0..2 {
        let mean_re = (v.re()[[0, 0, 0, d]] + v.re()[[0, 0, 1, d]]) / 2.0;
        let mean_im = (v.im()[[0, 0, 0, d]] + v.im()[[0, 0, 1, d]]) / 2.0;
        for l in 0..2 {
            assert!((out.re()[[0, 0, l, d]] - mean_re).abs() < 1e-12);
            assert!((out.im()[[0, 0, l, d]] - mean_im).abs() < 1e-12);
        }
    }
}

/// Scalar evaluation of the magnitude-softmax attention definition.
fn attention_oracle(
    q: &ComplexTensor<f64>,
    k: &ComplexTensor<f64>,
    v: &ComplexTensor<f64>,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let (b, h, l, dk) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    let mut out_re = ArrayD::zeros(IxDyn(&[b, h, l, dk]));
    let mut out_im = ArrayD::zeros(IxDyn(&[b, h, l, dk]));
    for bi in 0..b {
        for hi in 0..h {
            // complex logits row by row
            for i in 0..l {
                let mut mags = vec![0.0f64; l];
                for (j, m) in mags.iter_mut().enumerate() {
                    let (mut lr, mut li) = (0.0, 0.0);
                    for d in 0..dk {
                        let (qr, qi) = (q.re()[[bi, hi, i, d]], q.im()[[bi, hi, i, d]]);
                        let (kr, ki) = (k.re()[[bi, hi, j, d]], k.im()[[bi, hi, j, d]]);
                        lr += qr * kr - qi * ki;
                        li += qr * ki + qi * kr;
                    }
                    *m = (lr * lr + li * li + 1e-12).sqrt() / (dk as f64).sqrt();
                }
                let mx = mags.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let exps: Vec<f64> = mags.iter().map(|&m| (m - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for d in 0..dk {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for j in 0..l {
                        let a = exps[j] / z;
                        sr += a * v.re()[[bi, hi, j, d]];
                        si += a * v.im()[[bi, hi, j, d]];
                    }
                    out_re[[bi, hi, i, d]] = sr;
                    out_im[[bi, hi, i, d]] = si;
                }
            }
        }
    }
    (out_re, out_im)
}

#[test]
fn attention_matches_scalar_oracle() {
    let mut rng = StdRng::seed_from_u64(7);
    let q = random_ct(&[2, 1, 3, 2], &mut rng);
    let k = random_ct(&[2, 1, 3, 2], &mut rng);
    let v = random_ct(&[2, 1, 3, 2], &mut rng);
    let mut t = Tape::<f64>::no_grad();
    let out = complex_attention(&mut t, &q, &k, &v, None).unwrap();
    let (ore, oim) = attention_oracle(&q, &k, &v);
    let expect = ComplexTensor::from_parts(ore, oim).unwrap();
    assert!(out.max_abs_diff(&expect) <= 1e-5);
}

#[test]
fn attention_rows_are_stochastic() {
    let mut rng = StdRng::seed_from_u64(8);
    let q = random_ct(&[2, 4, 6, 3], &mut rng);
    let k = random_ct(&[2, 4, 6, 3], &mut rng);
    let mut t = Tape::<f64>::no_grad();
    let a = attention_matrix(&mut t, &q, &k, None).unwrap();
    assert_eq!(a.im().iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);
    assert!(a.re().iter().all(|&v| v >= 0.0));
    for row in a.re().rows() {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn global_phase_on_q_leaves_weights_unchanged() {
    let mut rng = StdRng::seed_from_u64(9);
    let q = random_ct(&[1, 2, 4, 3], &mut rng);
    let k = random_ct(&[1, 2, 4, 3], &mut rng);
    let mut t = Tape::<f64>::no_grad();
    let a0 = attention_matrix(&mut t, &q, &k, None).unwrap();
    for theta in [0.3f64, 1.2, -2.5] {
        let phase = ComplexTensor::scalar(theta.cos(), theta.sin());
        let qp = t.cmul(&q, &phase).unwrap();
        let a1 = attention_matrix(&mut t, &qp, &k, None).unwrap();
        assert!(a0.max_abs_diff(&a1) <= 1e-6, "theta {theta}");
    }
}

#[test]
fn permutation_equivariance_without_relpos() {
    let p = params(4, 2, 10);
    let z = random_ct(&[1, 5, 4], &mut StdRng::seed_from_u64(11));
    let mut t = Tape::<f64>::no_grad();
    let out = multi_head(&mut t, &z, &p, false).unwrap();
    // reverse the sequence
    let perm: Vec<usize> = (0..5).rev().collect();
    let mut zre = ArrayD::zeros(IxDyn(&[1, 5, 4]));
    let mut zim = ArrayD::zeros(IxDyn(&[1, 5, 4]));
    for (dst, &src) in perm.iter().enumerate() {
        for c in 0..4 {
            zre[[0, dst, c]] = z.re()[[0, src, c]];
            zim[[0, dst, c]] = z.im()[[0, src, c]];
        }
    }
    let zp = ComplexTensor::from_parts(zre, zim).unwrap();
    let outp = multi_head(&mut t, &zp, &p, false).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        for c in 0..4 {
            assert!((outp.re()[[0, dst, c]] - out.re()[[0, src, c]]).abs() <= 1e-6);
            assert!((outp.im()[[0, dst, c]] - out.im()[[0, src, c]]).abs() <= 1e-6);
        }
    }
}

#[test]
fn batch_permutation_permutes_outputs() {
    let p = params(4, 4, 12);
    let z = random_ct(&[3, 4, 4], &mut StdRng::seed_from_u64(13));
    let mut t = Tape::<f64>::no_grad();
    let out = multi_head(&mut t, &z, &p, true).unwrap();
    let order = [2usize, 0, 1];
    let mut zre = ArrayD::zeros(IxDyn(&[3, 4, 4]));
    let mut zim = ArrayD::zeros(IxDyn(&[3, 4, 4]));
    for (dst, &src) in order.iter().enumerate() {
        for l in 0..4 {
            for c in 0..4 {
                zre[[dst, l, c]] = z.re()[[src, l, c]];
                zim[[dst, l, c]] = z.im()[[src, l, c]];
            }
        }
    }
    let zp = ComplexTensor::from_parts(zre, zim).unwrap();
    let outp = multi_head(&mut t, &zp, &p, true).unwrap();
    for (dst, &src) in order.iter().enumerate() {
        for l in 0..4 {
            for c in 0..4 {
                assert!((outp.re()[[dst, l, c]] - out.re()[[src, l, c]]).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn one_head_equals_manual_single_head_path() {
    let p = params(4, 1, 14);
    let z = random_ct(&[2, 3, 4], &mut StdRng::seed_from_u64(15));
    let mut t = Tape::<f64>::no_grad();
    let out = multi_head(&mut t, &z, &p, false).unwrap();

    let wq = t.param(&p.w_q.w);
    let wk = t.param(&p.w_k.w);
    let wv = t.param(&p.w_v.w);
    let q = t.cmatmul(&z, &wq).unwrap();
    let q = t.reshape(&q, &[2, 1, 3, 4]).unwrap();
    let k = t.cmatmul(&z, &wk).unwrap();
    let k = t.reshape(&k, &[2, 1, 3, 4]).unwrap();
    let v = t.cmatmul(&z, &wv).unwrap();
    let v = t.reshape(&v, &[2, 1, 3, 4]).unwrap();
    let att = complex_attention(&mut t, &q, &k, &v, None).unwrap();
    let att = t.reshape(&att, &[2, 3, 4]).unwrap();
    let expect = p.w_o.forward(&mut t, &att).unwrap();
    assert!(out.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn four_heads_keep_model_depth() {
    let c = 32;
    let p = params(c, 4, 16);
    assert_eq!(p.d_k, 8);
    let z = random_ct(&[1, 6, c], &mut StdRng::seed_from_u64(17));
    let mut t = Tape::<f64>::no_grad();
    let out = multi_head(&mut t, &z, &p, true).unwrap();
    assert_eq!(out.shape(), &[1, 6, c]);
}

#[test]
fn attention_path_passes_finite_differences() {
    // full Eq. 4 path through magnitude-softmax and relpos, checking the
    // input gradient and every parameter gradient of the real impl
    for use_relpos in [false, true] {
        let z = random_ct(&[1, 3, 4], &mut StdRng::seed_from_u64(19));
        let err = finite_diff_check(
            |t, xs| {
                let p = params(4, 2, 18);
                let y = multi_head(t, &xs[0], &p, use_relpos)?;
                let m = t.magnitude(&y)?;
                t.mean_all(&m)
            },
            &[z.detach()],
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-4, "input grad, relpos={use_relpos}: rel err {err}");

        let mut p = params(4, 2, 18);
        let err = crate::verify::param_finite_diff(
            &mut p,
            |t, p| {
                let zz = t.leaf(z.detach());
                let y = multi_head(t, &zz, p, use_relpos)?;
                let m = t.magnitude(&y)?;
                t.mean_all(&m)
            },
            1e-4,
            usize::MAX,
            20,
        )
        .unwrap();
        assert!(err <= 1e-4, "param grads, relpos={use_relpos}: rel err {err}");
    }
}
