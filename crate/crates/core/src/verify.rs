//! Gradient-verification suite: finite-difference checks for every op,
//! every layer, the attention path, one dual-path block, and the
//! end-to-end toy model. 64-bit only.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::ctensor::{finite_diff_check, random_ct, ComplexTensor, FiniteDiffReport, Tape};
use crate::error::Result;
use crate::layers::{index_params, Parameterized};

/// Verify analytic parameter gradients of `f(model)` against central
/// finite differences, probing at most `max_per_param` elements of each
/// parameter (all when `usize::MAX`). Returns the worst relative error.
pub fn param_finite_diff<M, F>(
    model: &mut M,
    f: F,
    step: f64,
    max_per_param: usize,
    seed: u64,
) -> Result<f64>
where
    M: Parameterized<f64>,
    F: Fn(&mut Tape<f64>, &mut M) -> Result<ComplexTensor<f64>>,
{
    // Analytic pass.
    let mut tape = Tape::new().check_finite(true);
    let loss = f(&mut tape, model)?;
    let grads = tape.backward(&loss)?;

    // Enumerate parameters.
    struct Meta {
        name: String,
        pid: usize,
        numel: usize,
        real_only: bool,
    }
    let mut metas = Vec::new();
    model.visit_params("", &mut |name, p| {
        metas.push(Meta {
            name: name.to_string(),
            pid: p.id(),
            numel: p.value.numel(),
            real_only: p.is_real_only(),
        });
    });

    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for meta in &metas {
        let picks: Vec<usize> = if meta.numel <= max_per_param {
            (0..meta.numel).collect()
        } else {
            (0..max_per_param).map(|_| rng.gen_range(0..meta.numel)).collect()
        };
        let planes = if meta.real_only { 1 } else { 2 };
        for plane in 0..planes {
            for &flat in &picks {
                let analytic = match grads.param(meta.pid) {
                    Some(g) => {
                        let arr = if plane == 0 { g.re() } else { g.im() };
                        *arr.iter().nth(flat).expect("flat index in range")
                    }
                    None => 0.0,
                };
                let mut eval_at = |delta: f64| -> Result<f64> {
                    mutate_param(model, &meta.name, plane, flat, delta);
                    let mut t = Tape::no_grad().check_finite(true);
                    let l = f(&mut t, model);
                    mutate_param(model, &meta.name, plane, flat, -delta);
                    l?.re_scalar()
                };
                let plus = eval_at(step)?;
                let minus = eval_at(-step)?;
                let cd = (plus - minus) / (2.0 * step);
                let rel = (analytic - cd).abs() / analytic.abs().max(cd.abs()).max(1e-8);
                if rel > worst {
                    worst = rel;
                    worst_at = format!("{} plane {} elem {} a={:.6e} cd={:.6e}", meta.name, plane, flat, analytic, cd);
                }
            }
        }
    }
    if worst > 1e-5 && std::env::var_os("D2_FD_DEBUG").is_some() {
        eprintln!("param_finite_diff worst: {worst:.3e} at {worst_at}");
    }
    Ok(worst)
}

/// Move every parameter to a generic point: symmetry at initialization
/// (zero biases, mean-zero normalized features) makes some true gradients
/// exactly zero, where finite differences compare noise against the
/// 1e-8 floor.
pub fn jitter_params<M: Parameterized<f64>>(m: &mut M, scale: f64, seed: u64) {
    let mut rng = StdRng::seed_from_u64(seed);
    m.visit_params("", &mut |_, p| {
        let re = p.value.re().mapv(|v| v + rng.gen_range(-scale..scale));
        let im = if p.is_real_only() {
            p.value.im().to_owned()
        } else {
            p.value.im().mapv(|v| v + rng.gen_range(-scale..scale))
        };
        p.value = ComplexTensor::from_parts(re, im).expect("plane shapes");
    });
}

fn mutate_param<M: Parameterized<f64>>(model: &mut M, name: &str, plane: usize, flat: usize, delta: f64) {
    model.visit_params("", &mut |n, p| {
        if n == name {
            let mut re = p.value.re().to_owned();
            let mut im = p.value.im().to_owned();
            {
                let target = if plane == 0 { &mut re } else { &mut im };
                *target.iter_mut().nth(flat).expect("flat index in range") += delta;
            }
            p.value = ComplexTensor::from_parts(re, im).expect("plane shapes");
        }
    });
}

/// One named check over a fresh small model.
pub struct NamedCheck {
    pub name: &'static str,
    pub tol: f64,
}

/// Run the whole verification suite; used by `gradcheck` and the
/// acceptance tests. `inject_fault` adds a fixture with a deliberately
/// wrong backward rule, which must fail.
pub fn run_suite(inject_fault: bool) -> Result<Vec<FiniteDiffReport>> {
    let mut reports = Vec::new();
    let step = 1e-4;

    // --- primitive ops ---------------------------------------------------
    let mut rng = StdRng::seed_from_u64(1);
    let op_checks: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, &[ComplexTensor<f64>]) -> Result<ComplexTensor<f64>>>, Vec<ComplexTensor<f64>>)> = vec![
        (
            "op.cmul",
            Box::new(|t, xs| {
                let y = t.cmul(&xs[0], &xs[1])?;
                let m = t.magnitude(&y)?;
                t.mean_all(&m)
            }),
            vec![random_ct(&[2, 3], &mut rng), random_ct(&[2, 3], &mut rng)],
        ),
        (
            "op.cmatmul",
            Box::new(|t, xs| {
                let y = t.cmatmul(&xs[0], &xs[1])?;
                let m = t.magnitude(&y)?;
                t.mean_all(&m)
            }),
            vec![random_ct(&[3, 4], &mut rng), random_ct(&[4, 2], &mut rng)],
        ),
        (
            "op.magnitude_softmax",
            Box::new(|t, xs| {
                let m = t.magnitude(&xs[0])?;
                let a = t.softmax_lastdim(&m)?;
                let sq = t.cmul(&a, &a)?;
                t.mean_all(&sq)
            }),
            vec![random_ct(&[3, 5], &mut rng)],
        ),
        (
            "op.reshape_permute_concat_split",
            Box::new(|t, xs| {
                let parts = t.split(&xs[0], 1, &[2, 2])?;
                let refs: Vec<&ComplexTensor<f64>> = parts.iter().collect();
                let c = t.concat(&refs, 1)?;
                let p = t.permute(&c, &[1, 0])?;
                let r = t.reshape(&p, &[2, 6])?;
                let m = t.magnitude(&r)?;
                t.mean_all(&m)
            }),
            vec![random_ct(&[3, 4], &mut rng)],
        ),
        (
            "op.activations",
            Box::new(|t, xs| {
                let a = t.ctanh(&xs[0])?;
                let b = t.leaky_relu(&a, 0.01)?;
                let c = t.swish(&b)?;
                let m = t.magnitude(&c)?;
                t.mean_all(&m)
            }),
            vec![random_ct(&[4, 4], &mut rng)],
        ),
        (
            "op.glu_mag",
            Box::new(|t, xs| {
                let y = t.glu_mag(&xs[0], &xs[1])?;
                let m = t.magnitude(&y)?;
                t.mean_all(&m)
            }),
            vec![random_ct(&[3, 4], &mut rng), random_ct(&[3, 4], &mut rng)],
        ),
        (
            "op.standardize",
            Box::new(|t, xs| {
                let y = t.standardize(&xs[0], &[1], 1e-5)?;
                let c = t.cmul(&y, &xs[0])?;
                let m = t.magnitude(&c)?;
                t.mean_all(&m)
            }),
            vec![random_ct(&[2, 6, 3], &mut rng)],
        ),
        (
            "op.cdw_conv1d",
            Box::new(|t, xs| {
                let y = t.cdw_conv1d(&xs[0], &xs[1], 1, 1)?;
                let m = t.magnitude(&y)?;
                t.mean_all(&m)
            }),
            vec![random_ct(&[2, 5, 2], &mut rng), random_ct(&[2, 3], &mut rng)],
        ),
        (
            "op.rel_shift",
            Box::new(|t, xs| {
                let y = t.rel_shift(&xs[0])?;
                let m = t.magnitude(&y)?;
                t.mean_all(&m)
            }),
            vec![random_ct(&[2, 4, 7], &mut rng)],
        ),
        (
            "op.conv2d",
            Box::new(|t, xs| {
                let g = crate::ctensor::ConvGeom {
                    stride: (1, 2),
                    dilation: (2, 1),
                    pad_h: (2, 0),
                    pad_w: (1, 1),
                };
                let y = t.cconv2d(&xs[0], &xs[1], Some(&xs[2]), g)?;
                let m = t.magnitude(&y)?;
                t.mean_all(&m)
            }),
            vec![random_ct(&[1, 2, 4, 5], &mut rng), random_ct(&[2, 2, 2, 3], &mut rng), random_ct(&[2], &mut rng)],
        ),
        (
            "op.conv_transpose2d",
            Box::new(|t, xs| {
                let g = crate::ctensor::ConvGeom {
                    stride: (1, 2),
                    dilation: (1, 1),
                    pad_h: (0, 0),
                    pad_w: (1, 1),
                };
                let y = t.cconv_transpose2d(&xs[0], &xs[1], Some(&xs[2]), g)?;
                let m = t.magnitude(&y)?;
                t.mean_all(&m)
            }),
            vec![random_ct(&[1, 2, 3, 5], &mut rng), random_ct(&[2, 2, 1, 3], &mut rng), random_ct(&[2], &mut rng)],
        ),
        (
            "op.istft",
            Box::new(|t, xs| {
                let cfg = crate::signal::StftConfig::hamming(8, 4, 8);
                let y = t.istft_op(&xs[0], &cfg, 14)?;
                let sq = t.cmul(&y, &y)?;
                t.mean_all(&sq)
            }),
            vec![random_ct(&[1, 4, 5], &mut rng)],
        ),
        (
            "op.losses",
            Box::new(|t, xs| {
                let m = t.magnitude(&xs[0])?;
                let shift = t.leaf(ComplexTensor::scalar(1.5, 0.0));
                let m = t.add(&m, &shift)?;
                let p = t.pow_re(&m, 0.3)?;
                let a = t.abs_re(&p)?;
                let s = t.sum_all(&a)?;
                t.scale(&s, 0.125)
            }),
            vec![random_ct(&[2, 4], &mut rng)],
        ),
    ];
    for (name, f, inputs) in &op_checks {
        let err = finite_diff_check(f.as_ref(), inputs, step)?;
        reports.push(FiniteDiffReport {
            component: name.to_string(),
            max_rel_err: err,
            checked_elems: inputs.iter().map(|t| t.numel() * 2).sum(),
        });
    }

    // --- layers ------------------------------------------------------------
    reports.extend(layer_checks(step)?);

    // --- attention path (Eq. 4), relpos off and on --------------------------
    for (label, use_relpos) in [("attention.eq4", false), ("attention.relpos", true)] {
        let mut rng = StdRng::seed_from_u64(40);
        let mut p = crate::attention::ComplexAttentionParams::<f64>::new(4, 2, &mut rng)?;
        index_params(&mut p);
        jitter_params(&mut p, 0.05, 99);
        let z = random_ct(&[1, 3, 4], &mut rng);
        let err = param_finite_diff(
            &mut p,
            |t, p| {
                let zz = t.leaf(z.detach());
                let y = crate::attention::multi_head(t, &zz, p, use_relpos)?;
                let m = t.magnitude(&y)?;
                let sq = t.cmul(&m, &m)?;
                t.mean_all(&sq)
            },
            step,
            usize::MAX,
            7,
        )?;
        reports.push(FiniteDiffReport { component: label.to_string(), max_rel_err: err, checked_elems: 0 });
    }

    // --- one dual-path block (tiny dims) ------------------------------------
    {
        let mut rng = StdRng::seed_from_u64(50);
        let mut blk = crate::conformer::DualPathBlock::<f64>::new(4, 2, 7, 2, &mut rng)?;
        index_params(&mut blk);
        jitter_params(&mut blk, 0.05, 98);
        let x = random_ct(&[1, 4, 3, 5], &mut rng);
        let err = param_finite_diff(
            &mut blk,
            |t, blk| {
                let xx = t.leaf(x.detach());
                let y = blk.forward(t, &xx)?;
                let m = t.magnitude(&y)?;
                let sq = t.cmul(&m, &m)?;
                t.mean_all(&sq)
            },
            step,
            6,
            8,
        )?;
        reports.push(FiniteDiffReport {
            component: "conformer.dual_path_block".to_string(),
            max_rel_err: err,
            checked_elems: 0,
        });
    }

    // --- end-to-end toy model -------------------------------------------------
    {
        let cfg = crate::model::D2FormerConfig::gradcheck_dims();
        let mut model = crate::model::D2Former::<f64>::new(&cfg, 3)?;
        jitter_params(&mut model, 0.02, 97);
        let mut rng = StdRng::seed_from_u64(60);
        let n = 40usize;
        let noisy = crate::signal::Waveform::new(
            (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect(),
            crate::signal::MODEL_SAMPLE_RATE,
        );
        let clean = crate::signal::Waveform::new(
            (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect(),
            crate::signal::MODEL_SAMPLE_RATE,
        );
        let weights = crate::training::LossWeights::paper();
        let err = param_finite_diff(
            &mut model,
            |t, m| crate::training::batch_loss(t, m, &[(&noisy, &clean)], &weights, None),
            1e-5,
            2,
            9,
        )?;
        reports.push(FiniteDiffReport {
            component: "model.end_to_end_toy".to_string(),
            max_rel_err: err,
            checked_elems: 0,
        });
    }

    if inject_fault {
        let mut rng = StdRng::seed_from_u64(70);
        let x = random_ct(&[3], &mut rng);
        let err = finite_diff_check(
            |t, xs| {
                let y = t.fixture_bad_scale(&xs[0])?;
                let m = t.magnitude(&y)?;
                t.mean_all(&m)
            },
            &[x],
            step,
        )?;
        reports.push(FiniteDiffReport {
            component: "fixture.bad_backward".to_string(),
            max_rel_err: err,
            checked_elems: 6,
        });
    }

    Ok(reports)
}

fn layer_checks(step: f64) -> Result<Vec<FiniteDiffReport>> {
    use crate::ctensor::ConvGeom;
    use crate::layers::*;
    let mut reports = Vec::new();
    let mut rng = StdRng::seed_from_u64(30);

    // linear
    {
        let mut lin = ComplexLinear::<f64>::new(3, 2, true, &mut rng);
        index_params(&mut lin);
        jitter_params(&mut lin, 0.05, 90);
        let z = random_ct(&[2, 4, 3], &mut rng);
        let err = param_finite_diff(
            &mut lin,
            |t, lin| {
                let zz = t.leaf(z.detach());
                let y = lin.forward(t, &zz)?;
                let m = t.magnitude(&y)?;
                let sq = t.cmul(&m, &m)?;
                t.mean_all(&sq)
            },
            step,
            usize::MAX,
            1,
        )?;
        reports.push(FiniteDiffReport { component: "layer.linear".into(), max_rel_err: err, checked_elems: 0 });
    }
    // conv2d layer
    {
        let geom = ConvGeom { stride: (1, 1), dilation: (2, 1), pad_h: (2, 0), pad_w: (1, 1) };
        let mut conv = ComplexConv2d::<f64>::new(2, 3, (2, 3), geom, &mut rng);
        index_params(&mut conv);
        jitter_params(&mut conv, 0.05, 91);
        let z = random_ct(&[1, 2, 4, 5], &mut rng);
        let err = param_finite_diff(
            &mut conv,
            |t, conv| {
                let zz = t.leaf(z.detach());
                let y = conv.forward(t, &zz)?;
                let m = t.magnitude(&y)?;
                let sq = t.cmul(&m, &m)?;
                t.mean_all(&sq)
            },
            step,
            usize::MAX,
            2,
        )?;
        reports.push(FiniteDiffReport { component: "layer.conv2d".into(), max_rel_err: err, checked_elems: 0 });
    }
    // transposed conv layer
    {
        let geom = ConvGeom { stride: (1, 2), dilation: (1, 1), pad_h: (0, 0), pad_w: (1, 1) };
        let mut conv = ComplexConvTranspose2d::<f64>::new(2, 2, (1, 3), geom, &mut rng);
        index_params(&mut conv);
        jitter_params(&mut conv, 0.05, 92);
        let z = random_ct(&[1, 2, 3, 5], &mut rng);
        let err = param_finite_diff(
            &mut conv,
            |t, conv| {
                let zz = t.leaf(z.detach());
                let y = conv.forward(t, &zz)?;
                let m = t.magnitude(&y)?;
                let sq = t.cmul(&m, &m)?;
                t.mean_all(&sq)
            },
            step,
            usize::MAX,
            3,
        )?;
        reports.push(FiniteDiffReport { component: "layer.conv_transpose2d".into(), max_rel_err: err, checked_elems: 0 });
    }
    // instance norm (both layouts)
    for (label, layout, shape) in [
        ("layer.instance_norm_nctf", NormLayout::Nctf, vec![2usize, 3, 4, 5]),
        ("layer.instance_norm_seq", NormLayout::SeqLast, vec![2, 5, 3]),
    ] {
        let mut norm = ComplexInstanceNorm::<f64>::new(3, layout);
        index_params(&mut norm);
        jitter_params(&mut norm, 0.05, 93);
        let z = random_ct(&shape, &mut rng);
        let err = param_finite_diff(
            &mut norm,
            |t, norm| {
                let zz = t.leaf(z.detach());
                let y = norm.forward(t, &zz)?;
                let w = t.cmul(&y, &zz)?;
                let m = t.magnitude(&w)?;
                let sq = t.cmul(&m, &m)?;
                t.mean_all(&sq)
            },
            step,
            usize::MAX,
            4,
        )?;
        reports.push(FiniteDiffReport { component: label.into(), max_rel_err: err, checked_elems: 0 });
    }
    // prelu
    {
        let mut act = ComplexPRelu::<f64>::new(3, 1);
        index_params(&mut act);
        jitter_params(&mut act, 0.05, 94);
        let z = random_ct(&[2, 3, 4], &mut rng);
        let err = param_finite_diff(
            &mut act,
            |t, act| {
                let zz = t.leaf(z.detach());
                let y = act.forward(t, &zz)?;
                let m = t.magnitude(&y)?;
                let sq = t.cmul(&m, &m)?;
                t.mean_all(&sq)
            },
            step,
            usize::MAX,
            5,
        )?;
        reports.push(FiniteDiffReport { component: "layer.prelu".into(), max_rel_err: err, checked_elems: 0 });
    }
    // cfsmn
    {
        let mut fsmn = Cfsmn::<f64>::new(3, 2, 2, &mut rng);
        index_params(&mut fsmn);
        jitter_params(&mut fsmn, 0.05, 95);
        let z = random_ct(&[2, 6, 3], &mut rng);
        let err = param_finite_diff(
            &mut fsmn,
            |t, fsmn| {
                let zz = t.leaf(z.detach());
                let y = fsmn.forward(t, &zz)?;
                let m = t.magnitude(&y)?;
                let sq = t.cmul(&m, &m)?;
                t.mean_all(&sq)
            },
            step,
            usize::MAX,
            6,
        )?;
        reports.push(FiniteDiffReport { component: "layer.cfsmn".into(), max_rel_err: err, checked_elems: 0 });
    }
    Ok(reports)
}
