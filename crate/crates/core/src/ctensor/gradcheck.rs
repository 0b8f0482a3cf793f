//! Central finite-difference verification of backward rules.
//!
//! Runs in 64-bit only; 32-bit finite differences are too noisy to
//! distinguish a wrong rule from round-off.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::{ComplexTensor, Tape};
use crate::error::{Error, Result};

/// Outcome of checking one component.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub component: String,
    pub max_rel_err: f64,
    pub checked_elems: usize,
}

impl FiniteDiffReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare analytic gradients of a scalar-valued function against central
/// finite differences over every element of every input, returning the
/// worst relative error `|analytic - cd| / max(|analytic|, |cd|, 1e-8)`.
///
/// `f` must be deterministic. Inputs are registered as tape leaves; the
/// function may add its own parameters as constants but only leaf
/// gradients are verified here.
pub fn finite_diff_check<F>(f: F, inputs: &[ComplexTensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[ComplexTensor<f64>]) -> Result<ComplexTensor<f64>>,
{
    finite_diff_check_sampled(f, inputs, step, usize::MAX, 0)
}

/// Like [`finite_diff_check`] but probing at most `max_per_input`
/// randomly chosen elements per input (seeded; deterministic).
pub fn finite_diff_check_sampled<F>(
    f: F,
    inputs: &[ComplexTensor<f64>],
    step: f64,
    max_per_input: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[ComplexTensor<f64>]) -> Result<ComplexTensor<f64>>,
{
    if step <= 0.0 {
        return Err(Error::Contract("finite_diff_check: step must be > 0".into()));
    }

    // Analytic pass.
    let mut tape = Tape::new().check_finite(true);
    let leaves: Vec<ComplexTensor<f64>> = inputs.iter().map(|t| tape.leaf(t.detach())).collect();
    let loss = f(&mut tape, &leaves)?;
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check: f must return a scalar, got {:?}",
            loss.shape()
        )));
    }
    let grads = tape.backward(&loss)?;

    let eval = |probe: &[ComplexTensor<f64>]| -> Result<f64> {
        let mut t = Tape::no_grad().check_finite(true);
        let leaves: Vec<ComplexTensor<f64>> = probe.iter().map(|v| t.leaf(v.detach())).collect();
        let l = f(&mut t, &leaves)?;
        l.re_scalar()
    };

    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut probe: Vec<ComplexTensor<f64>> = inputs.iter().map(|t| t.detach()).collect();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let analytic = grads.of(&leaves[i]);
        let picks: Vec<usize> = if n <= max_per_input {
            (0..n).collect()
        } else {
            (0..max_per_input).map(|_| rng.gen_range(0..n)).collect()
        };
        for plane in 0..2 {
            for &flat in &picks {
                let a = match analytic {
                    Some(g) => {
                        let arr = if plane == 0 { g.re() } else { g.im() };
                        *arr.iter().nth(flat).expect("flat index in range")
                    }
                    None => 0.0,
                };
                let base = if plane == 0 {
                    *input.re().iter().nth(flat).expect("flat index in range")
                } else {
                    *input.im().iter().nth(flat).expect("flat index in range")
                };

                let mut shifted = |delta: f64| -> Result<f64> {
                    let mut re = input.re().to_owned();
                    let mut im = input.im().to_owned();
                    {
                        let target = if plane == 0 { &mut re } else { &mut im };
                        *target.iter_mut().nth(flat).expect("flat index in range") = base + delta;
                    }
                    probe[i] = ComplexTensor::from_parts(re, im)?;
                    eval(&probe)
                };
                let plus = shifted(step)?;
                let minus = shifted(-step)?;
                probe[i] = input.detach();
                let cd = (plus - minus) / (2.0 * step);
                let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
                if rel > worst {
                    worst = rel;
                }
            }
        }
    }
    Ok(worst)
}

/// Deterministic random tensor for checks and tests.
pub fn random_ct(shape: &[usize], rng: &mut StdRng) -> ComplexTensor<f64> {
    let n: usize = shape.iter().product();
    let re: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let im: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ComplexTensor::from_slices(shape, &re, &im).expect("matching lengths")
}
