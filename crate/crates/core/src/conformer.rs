//! Complex conformer block (feed-forward pair, MHSA, convolution module)
//! and the alternating time/frequency dual-path arrangement.
//!
//! Residual chain: `z1 = z + 0.5 ffn1(z)`, `z2 = z1 + mhsa(z1)`,
//! `z3 = z2 + conv(z2)`, `out = z3 + 0.5 ffn2(z3)`. With all sublayer
//! outputs forced to zero the block is exactly the identity, which the
//! dual-path stack's residual-skeleton checks rely on.

use rand::rngs::StdRng;

use crate::attention::{multi_head, ComplexAttentionParams};
use crate::ctensor::{ComplexTensor, Real, Tape};
use crate::error::{Error, Result};
use crate::layers::{join, ComplexInstanceNorm, ComplexLinear, NormLayout, Param, Parameterized};

/// Pre-norm feed-forward `C -> mult*C -> C` with per-plane Swish.
pub struct ComplexFeedForward<T: Real> {
    pub norm: ComplexInstanceNorm<T>,
    pub w1: ComplexLinear<T>,
    pub w2: ComplexLinear<T>,
}

impl<T: Real> ComplexFeedForward<T> {
    pub fn new(c: usize, mult: usize, rng: &mut StdRng) -> Self {
        Self {
            norm: ComplexInstanceNorm::new(c, NormLayout::SeqLast),
            w1: ComplexLinear::new(c, c * mult, true, rng),
            w2: ComplexLinear::new(c * mult, c, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let y = self.norm.forward(tape, z)?;
        let y = self.w1.forward(tape, &y)?;
        let y = tape.swish(&y)?;
        self.w2.forward(tape, &y)
    }
}

impl<T: Real> Parameterized<T> for ComplexFeedForward<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.w1.visit_params(&join(prefix, "w1"), f);
        self.w2.visit_params(&join(prefix, "w2"), f);
    }
}

/// Conformer convolution module with a phase-preserving GLU gate: the
/// pointwise expansion splits into content and gate halves, the gate being
/// the real sigmoid of the gate half's magnitude.
pub struct ConvModule<T: Real> {
    pub norm_in: ComplexInstanceNorm<T>,
    pub pointwise_in: ComplexLinear<T>,
    pub depthwise: Param<T>,
    pub kernel: usize,
    pub norm_mid: ComplexInstanceNorm<T>,
    pub pointwise_out: ComplexLinear<T>,
}

impl<T: Real> ConvModule<T> {
    pub fn new(c: usize, kernel: usize, rng: &mut StdRng) -> Self {
        Self {
            norm_in: ComplexInstanceNorm::new(c, NormLayout::SeqLast),
            pointwise_in: ComplexLinear::new(c, 2 * c, true, rng),
            depthwise: Param::complex(crate::layers::init_complex(&[c, kernel], kernel, rng)),
            kernel,
            norm_mid: ComplexInstanceNorm::new(c, NormLayout::SeqLast),
            pointwise_out: ComplexLinear::new(c, c, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let c = z.shape()[z.ndim() - 1];
        let y = self.norm_in.forward(tape, z)?;
        let y = self.pointwise_in.forward(tape, &y)?;
        let halves = tape.split(&y, y.ndim() - 1, &[c, c])?;
        let y = tape.glu_mag(&halves[0], &halves[1])?;
        let taps = tape.param(&self.depthwise);
        let before = (self.kernel - 1) / 2;
        let y = tape.cdw_conv1d(&y, &taps, before, self.kernel - 1 - before)?;
        let y = self.norm_mid.forward(tape, &y)?;
        let y = tape.swish(&y)?;
        self.pointwise_out.forward(tape, &y)
    }
}

impl<T: Real> Parameterized<T> for ConvModule<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm_in.visit_params(&join(prefix, "norm_in"), f);
        self.pointwise_in.visit_params(&join(prefix, "pw_in"), f);
        f(&join(prefix, "depthwise"), &mut self.depthwise);
        self.norm_mid.visit_params(&join(prefix, "norm_mid"), f);
        self.pointwise_out.visit_params(&join(prefix, "pw_out"), f);
    }
}

/// One complex conformer over a `[B', L, C]` sequence.
pub struct ComplexConformerParams<T: Real> {
    pub ffn1: ComplexFeedForward<T>,
    pub mhsa_norm: ComplexInstanceNorm<T>,
    pub mhsa: ComplexAttentionParams<T>,
    pub conv: ConvModule<T>,
    pub ffn2: ComplexFeedForward<T>,
}

impl<T: Real> ComplexConformerParams<T> {
    pub fn new(c: usize, heads: usize, conv_kernel: usize, ffn_mult: usize, rng: &mut StdRng) -> Result<Self> {
        Ok(Self {
            ffn1: ComplexFeedForward::new(c, ffn_mult, rng),
            mhsa_norm: ComplexInstanceNorm::new(c, NormLayout::SeqLast),
            mhsa: ComplexAttentionParams::new(c, heads, rng)?,
            conv: ConvModule::new(c, conv_kernel, rng),
            ffn2: ComplexFeedForward::new(c, ffn_mult, rng),
        })
    }
}

impl<T: Real> Parameterized<T> for ComplexConformerParams<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.ffn1.visit_params(&join(prefix, "ffn1"), f);
        self.mhsa_norm.visit_params(&join(prefix, "mhsa_norm"), f);
        self.mhsa.visit_params(&join(prefix, "mhsa"), f);
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.ffn2.visit_params(&join(prefix, "ffn2"), f);
    }
}

/// Half-step FFN pair around MHSA and the conv module, all residual.
pub fn conformer_block<T: Real>(
    tape: &mut Tape<T>,
    z: &ComplexTensor<T>,
    p: &ComplexConformerParams<T>,
) -> Result<ComplexTensor<T>> {
    let half = T::from_f64(0.5);
    let f1 = p.ffn1.forward(tape, z)?;
    let f1 = tape.scale(&f1, half)?;
    let z1 = tape.add(z, &f1)?;

    let n = p.mhsa_norm.forward(tape, &z1)?;
    let a = multi_head(tape, &n, &p.mhsa, true)?;
    let z2 = tape.add(&z1, &a)?;

    let c = p.conv.forward(tape, &z2)?;
    let z3 = tape.add(&z2, &c)?;

    let f2 = p.ffn2.forward(tape, &z3)?;
    let f2 = tape.scale(&f2, half)?;
    tape.add(&z3, &f2)
}

/// A time conformer and a frequency conformer applied alternately over the
/// two sequence views of a `[B, C, T, F2]` map.
pub struct DualPathBlock<T: Real> {
    pub time: ComplexConformerParams<T>,
    pub freq: ComplexConformerParams<T>,
}

impl<T: Real> DualPathBlock<T> {
    pub fn new(c: usize, heads: usize, conv_kernel: usize, ffn_mult: usize, rng: &mut StdRng) -> Result<Self> {
        Ok(Self {
            time: ComplexConformerParams::new(c, heads, conv_kernel, ffn_mult, rng)?,
            freq: ComplexConformerParams::new(c, heads, conv_kernel, ffn_mult, rng)?,
        })
    }

    /// Sub-band modeling along T per frequency bin, then full-band modeling
    /// along F2 per frame. Exactly shape preserving.
    pub fn forward(&self, tape: &mut Tape<T>, x: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        if x.ndim() != 4 {
            return Err(Error::dim("dual_path_block", format!("expected [B, C, T, F2], got {:?}", x.shape())));
        }
        let (b, c, t_len, f2) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);

        // time view: [B*F2, T, C]
        let y = tape.permute(x, &[0, 3, 2, 1])?;
        let y = tape.reshape(&y, &[b * f2, t_len, c])?;
        let y = conformer_block(tape, &y, &self.time)?;
        let y = tape.reshape(&y, &[b, f2, t_len, c])?;
        let y = tape.permute(&y, &[0, 3, 2, 1])?;

        // frequency view: [B*T, F2, C]
        let y2 = tape.permute(&y, &[0, 2, 3, 1])?;
        let y2 = tape.reshape(&y2, &[b * t_len, f2, c])?;
        let y2 = conformer_block(tape, &y2, &self.freq)?;
        let y2 = tape.reshape(&y2, &[b, t_len, f2, c])?;
        tape.permute(&y2, &[0, 3, 1, 2])
    }
}

impl<T: Real> Parameterized<T> for DualPathBlock<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.time.visit_params(&join(prefix, "time"), f);
        self.freq.visit_params(&join(prefix, "freq"), f);
    }
}

/// N dual-path blocks applied in sequence.
pub fn conformer_stack<T: Real>(
    tape: &mut Tape<T>,
    x: &ComplexTensor<T>,
    blocks: &[DualPathBlock<T>],
) -> Result<ComplexTensor<T>> {
    if blocks.is_empty() {
        return Err(Error::Contract("conformer_stack: N must be >= 1".into()));
    }
    let mut y = x.clone();
    for blk in blocks {
        y = blk.forward(tape, &y)?;
    }
    Ok(y)
}
