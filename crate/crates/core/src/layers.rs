//! Complex-valued parameterized layers: linear, 2-D (transposed)
//! convolution, instance norm, activations, and the CFSMN
//! frequency-recurrence block.

use ndarray::{ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::Rng;

use crate::ctensor::{ComplexTensor, ConvGeom, ParamId, Real, Tape};
use crate::error::{Error, Result};

const UNASSIGNED: ParamId = ParamId::MAX;

/// A trainable tensor. Complex parameters train their re and im planes as
/// independent real values; real-only parameters (PReLU slopes, positional
/// projections) keep a zero im plane that is neither counted nor stored.
pub struct Param<T: Real> {
    pub value: ComplexTensor<T>,
    id: ParamId,
    real_only: bool,
}

impl<T: Real> Param<T> {
    pub fn complex(value: ComplexTensor<T>) -> Self {
        Self { value, id: UNASSIGNED, real_only: false }
    }

    pub fn real(value: ComplexTensor<T>) -> Self {
        Self { value, id: UNASSIGNED, real_only: true }
    }

    pub fn id(&self) -> ParamId {
        assert_ne!(self.id, UNASSIGNED, "parameter used before index_params()");
        self.id
    }

    pub fn is_real_only(&self) -> bool {
        self.real_only
    }

    /// Number of trainable real scalars (re and im counted separately for
    /// complex parameters).
    pub fn scalar_count(&self) -> usize {
        self.value.numel() * if self.real_only { 1 } else { 2 }
    }
}

/// Anything holding parameters exposes them through a named visitor walk.
/// The traversal order is deterministic and defines parameter ids.
pub trait Parameterized<T: Real> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

/// Assign sequential ids in traversal order; returns the id -> name table.
pub fn index_params<T: Real, M: Parameterized<T> + ?Sized>(m: &mut M) -> Vec<String> {
    let mut names = Vec::new();
    m.visit_params("", &mut |name, p| {
        p.id = names.len();
        names.push(name.to_string());
    });
    names
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Uniform(-b, b) per plane with b = sqrt(3 / fan_in) / sqrt(2), so the
/// complex value's variance matches the usual real fan-in scaling.
pub fn init_complex<T: Real>(shape: &[usize], fan_in: usize, rng: &mut StdRng) -> ComplexTensor<T> {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt() / std::f64::consts::SQRT_2;
    let n: usize = shape.iter().product();
    let mut gen = |_: usize| T::from_f64(rng.gen_range(-bound..bound));
    let re: Vec<T> = (0..n).map(&mut gen).collect();
    let im: Vec<T> = (0..n).map(&mut gen).collect();
    ComplexTensor::from_slices(shape, &re, &im).expect("matching lengths")
}

pub fn init_real_uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut StdRng) -> ComplexTensor<T> {
    let n: usize = shape.iter().product();
    let re: Vec<T> = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    let im = vec![T::zero(); n];
    ComplexTensor::from_slices(shape, &re, &im).expect("matching lengths")
}

pub fn zeros_ct<T: Real>(shape: &[usize]) -> ComplexTensor<T> {
    ComplexTensor::zeros(shape)
}

fn const_re<T: Real>(shape: &[usize], v: T) -> ComplexTensor<T> {
    let re = ArrayD::from_elem(IxDyn(shape), v);
    ComplexTensor::from_re(re)
}

// ---------------------------------------------------------------------------
// complex_apply: the generic paired-real-layer rule
// ---------------------------------------------------------------------------

/// Apply the complex composition rule
/// `H(z) = [Hr(zr) - Hi(zi)] + j[Hr(zi) + Hi(zr)]`
/// for two structurally identical real operators given as tape closures
/// over real tensors.
pub fn complex_apply<T: Real>(
    tape: &mut Tape<T>,
    h_r: &dyn Fn(&mut Tape<T>, &ComplexTensor<T>) -> Result<ComplexTensor<T>>,
    h_i: &dyn Fn(&mut Tape<T>, &ComplexTensor<T>) -> Result<ComplexTensor<T>>,
    z: &ComplexTensor<T>,
) -> Result<ComplexTensor<T>> {
    let zr = tape.re_part(z)?;
    let zi = tape.im_part(z)?;
    let rr = h_r(tape, &zr)?;
    let ii = h_i(tape, &zi)?;
    let ri = h_r(tape, &zi)?;
    let ir = h_i(tape, &zr)?;
    if rr.shape() != ii.shape() || ri.shape() != ir.shape() || rr.shape() != ri.shape() {
        return Err(Error::dim("complex_apply", "operators disagree on output shape"));
    }
    let re = tape.sub(&rr, &ii)?;
    let im = tape.add(&ri, &ir)?;
    tape.combine(&re, &im)
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Complex linear map on the trailing axis: `z [.., C_in] -> [.., C_out]`.
pub struct ComplexLinear<T: Real> {
    pub w: Param<T>,
    pub b: Option<Param<T>>,
}

impl<T: Real> ComplexLinear<T> {
    pub fn new(c_in: usize, c_out: usize, bias: bool, rng: &mut StdRng) -> Self {
        Self {
            w: Param::complex(init_complex(&[c_in, c_out], c_in, rng)),
            b: bias.then(|| Param::complex(zeros_ct(&[c_out]))),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let w = tape.param(&self.w);
        let y = tape.cmatmul(z, &w)?;
        match &self.b {
            Some(b) => {
                let bv = tape.param(b);
                tape.add(&y, &bv)
            }
            None => Ok(y),
        }
    }
}

impl<T: Real> Parameterized<T> for ComplexLinear<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&join(prefix, "b"), b);
        }
    }
}

// ---------------------------------------------------------------------------
// Conv2D modules
// ---------------------------------------------------------------------------

/// Parameters of a complex 2-D convolution (`[B, C, T, F]` maps).
/// Convolutions feeding straight into an instance norm should skip the
/// bias: the norm removes any per-channel constant exactly, leaving a
/// parameter with an identically zero gradient.
pub struct ComplexConv2d<T: Real> {
    pub w: Param<T>,
    pub b: Option<Param<T>>,
    pub geom: ConvGeom,
}

impl<T: Real> ComplexConv2d<T> {
    pub fn new(c_in: usize, c_out: usize, k: (usize, usize), geom: ConvGeom, rng: &mut StdRng) -> Self {
        Self::with_bias(c_in, c_out, k, geom, true, rng)
    }

    pub fn with_bias(
        c_in: usize,
        c_out: usize,
        k: (usize, usize),
        geom: ConvGeom,
        bias: bool,
        rng: &mut StdRng,
    ) -> Self {
        let fan_in = c_in * k.0 * k.1;
        Self {
            w: Param::complex(init_complex(&[c_out, c_in, k.0, k.1], fan_in, rng)),
            b: bias.then(|| Param::complex(zeros_ct(&[c_out]))),
            geom,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let w = tape.param(&self.w);
        match &self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.cconv2d(z, &w, Some(&b), self.geom)
            }
            None => tape.cconv2d(z, &w, None, self.geom),
        }
    }
}

impl<T: Real> Parameterized<T> for ComplexConv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&join(prefix, "b"), b);
        }
    }
}

/// Complex transposed 2-D convolution; recovers the frequency grid in the
/// decoders (101 -> 201 at stride (1, 2)).
pub struct ComplexConvTranspose2d<T: Real> {
    pub w: Param<T>,
    pub b: Option<Param<T>>,
    pub geom: ConvGeom,
}

impl<T: Real> ComplexConvTranspose2d<T> {
    pub fn new(c_in: usize, c_out: usize, k: (usize, usize), geom: ConvGeom, rng: &mut StdRng) -> Self {
        Self::with_bias(c_in, c_out, k, geom, true, rng)
    }

    pub fn with_bias(
        c_in: usize,
        c_out: usize,
        k: (usize, usize),
        geom: ConvGeom,
        bias: bool,
        rng: &mut StdRng,
    ) -> Self {
        let fan_in = c_in * k.0 * k.1;
        Self {
            w: Param::complex(init_complex(&[c_in, c_out, k.0, k.1], fan_in, rng)),
            b: bias.then(|| Param::complex(zeros_ct(&[c_out]))),
            geom,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let w = tape.param(&self.w);
        match &self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.cconv_transpose2d(z, &w, Some(&b), self.geom)
            }
            None => tape.cconv_transpose2d(z, &w, None, self.geom),
        }
    }
}

impl<T: Real> Parameterized<T> for ComplexConvTranspose2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&join(prefix, "b"), b);
        }
    }
}

// ---------------------------------------------------------------------------
// Instance norm
// ---------------------------------------------------------------------------

/// Where the channel axis sits, which also fixes the reduction axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormLayout {
    /// `[B, C, T, F]`: standardize over (T, F) per (B, C).
    Nctf,
    /// `[B', L, C]`: standardize over L per (B', C).
    SeqLast,
}

/// Complex instance norm: planes standardized separately (the parameterless
/// rule), then a complex affine `gamma (*) y + beta`.
pub struct ComplexInstanceNorm<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: T,
    pub layout: NormLayout,
    channels: usize,
}

impl<T: Real> ComplexInstanceNorm<T> {
    pub fn new(channels: usize, layout: NormLayout) -> Self {
        Self {
            gamma: Param::complex(const_re(&[channels], T::one())),
            beta: Param::complex(zeros_ct(&[channels])),
            eps: T::from_f64(1e-5),
            layout,
            channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let axes: &[usize] = match self.layout {
            NormLayout::Nctf => &[2, 3],
            NormLayout::SeqLast => &[1],
        };
        let y = tape.standardize(z, axes, self.eps)?;
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        let (g, b) = match self.layout {
            NormLayout::Nctf => (
                tape.reshape(&gamma, &[self.channels, 1, 1])?,
                tape.reshape(&beta, &[self.channels, 1, 1])?,
            ),
            NormLayout::SeqLast => (gamma, beta),
        };
        let scaled = tape.cmul(&y, &g)?;
        tape.add(&scaled, &b)
    }
}

impl<T: Real> Parameterized<T> for ComplexInstanceNorm<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Complex PReLU: one learnable real slope per channel (init 0.25), shared
/// by the re and im planes, each plane activated independently.
pub struct ComplexPRelu<T: Real> {
    pub slope: Param<T>,
    pub channel_axis: usize,
}

impl<T: Real> ComplexPRelu<T> {
    pub fn new(channels: usize, channel_axis: usize) -> Self {
        Self {
            slope: Param::real(const_re(&[channels], T::from_f64(0.25))),
            channel_axis,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let a = tape.param(&self.slope);
        tape.prelu(z, &a, self.channel_axis)
    }
}

impl<T: Real> Parameterized<T> for ComplexPRelu<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "slope"), &mut self.slope);
    }
}

/// Parameterless complex LeakyReLU, slope 0.01 per plane.
pub fn complex_leaky_relu<T: Real>(tape: &mut Tape<T>, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    tape.leaky_relu(z, T::from_f64(0.01))
}

/// Parameterless complex tanh; bounds each plane to (-1, 1).
pub fn complex_tanh<T: Real>(tape: &mut Tape<T>, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    tape.ctanh(z)
}

// ---------------------------------------------------------------------------
// CFSMN
// ---------------------------------------------------------------------------

/// Complex FSMN over the frequency axis: a linear projection feeds a
/// finite-tap memory (offsets -l_before ..= l_after, tap 0 on the current
/// bin) whose output is added back onto the input.
///
/// Layout: `[.., F, C]` (channels last).
pub struct Cfsmn<T: Real> {
    pub proj: ComplexLinear<T>,
    pub taps: Param<T>,
    pub l_before: usize,
    pub l_after: usize,
}

impl<T: Real> Cfsmn<T> {
    pub fn new(channels: usize, l_before: usize, l_after: usize, rng: &mut StdRng) -> Self {
        let k = l_before + l_after + 1;
        Self {
            proj: ComplexLinear::new(channels, channels, true, rng),
            taps: Param::complex(init_complex(&[channels, k], k, rng)),
            l_before,
            l_after,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, h: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let g = self.proj.forward(tape, h)?;
        let taps = tape.param(&self.taps);
        let mem = tape.cdw_conv1d(&g, &taps, self.l_before, self.l_after)?;
        tape.add(h, &mem)
    }
}

impl<T: Real> Parameterized<T> for Cfsmn<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.proj.visit_params(&join(prefix, "proj"), f);
        f(&join(prefix, "taps"), &mut self.taps);
    }
}
