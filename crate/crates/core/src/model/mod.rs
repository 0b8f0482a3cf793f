//! Full network assembly: complex dual-path encoder, conformer stack,
//! masking and spectral decoders, weighted fusion, parameter accounting,
//! and checkpoint I/O.

mod checkpoint;

pub use checkpoint::{checkpoint_info, load_checkpoint, load_checkpoint_into, save_checkpoint, CheckpointInfo};

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::conformer::{conformer_stack, DualPathBlock};
use crate::ctensor::{ComplexTensor, ConvGeom, Real, Tape};
use crate::error::{Error, Result};
use crate::layers::{
    complex_leaky_relu, complex_tanh, index_params, join, Cfsmn, ComplexConv2d,
    ComplexConvTranspose2d, ComplexInstanceNorm, ComplexPRelu, NormLayout, Param, Parameterized,
};
use crate::signal::{stft, StftConfig, Waveform, MODEL_SAMPLE_RATE};

/// Architecture hyperparameters. `full()` is the paper configuration,
/// `toy()` the desk-scale one, `gradcheck_dims()` a miniature for
/// finite-difference verification.
#[derive(Debug, Clone, PartialEq)]
pub struct D2FormerConfig {
    /// Feature channels C.
    pub channels: usize,
    /// Dual-path conformer blocks N.
    pub blocks: usize,
    /// Attention heads.
    pub heads: usize,
    /// DPBlock dilation factors (time axis).
    pub dilations: Vec<usize>,
    /// Kernel of the two encoder Conv2D modules.
    pub kernel_enc: (usize, usize),
    /// Kernel of the dilated DPBlock convolutions.
    pub kernel_dp: (usize, usize),
    /// Kernel of the decoder transposed convolution.
    pub kernel_up: (usize, usize),
    /// Conformer depthwise-conv kernel length.
    pub conv_kernel: usize,
    /// Conformer feed-forward expansion factor.
    pub ffn_mult: usize,
    /// CFSMN memory taps before/after the current bin.
    pub cfsmn_l: (usize, usize),
    /// Fusion weight on the masking path.
    pub alpha: f64,
    /// Fusion weight on the spectral-mapping path.
    pub beta: f64,
    pub window_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl D2FormerConfig {
    /// Paper configuration: C=32, N=3, 4 heads, dilations {1,2,4,8},
    /// F=201, best-operating-point fusion 0.75/0.25.
    pub fn full() -> Self {
        Self {
            channels: 32,
            blocks: 3,
            heads: 4,
            dilations: vec![1, 2, 4, 8],
            kernel_enc: (3, 3),
            kernel_dp: (3, 5),
            kernel_up: (1, 3),
            conv_kernel: 7,
            ffn_mult: 4,
            cfsmn_l: (8, 8),
            alpha: 0.75,
            beta: 0.25,
            window_len: 400,
            hop: 100,
            fft_size: 400,
        }
    }

    /// Desk-scale configuration on the real signal grid (F=201).
    pub fn toy() -> Self {
        Self { channels: 4, blocks: 1, cfsmn_l: (4, 4), ..Self::full() }
    }

    /// Miniature grid for gradient checks (F=9, short frames).
    pub fn gradcheck_dims() -> Self {
        Self {
            channels: 4,
            blocks: 1,
            dilations: vec![1, 2],
            cfsmn_l: (2, 2),
            conv_kernel: 3,
            ffn_mult: 2,
            window_len: 16,
            hop: 8,
            fft_size: 16,
            ..Self::full()
        }
    }

    /// One-sided bins F = fft_size/2 + 1.
    pub fn f_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Halved frequency grid F2 = ceil(F / 2).
    pub fn f2(&self) -> usize {
        self.f_bins().div_ceil(2)
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig::hamming(self.window_len, self.hop, self.fft_size)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!("channels {} must be divisible by heads {}", self.channels, self.heads));
        }
        if self.channels % 2 != 0 {
            return fail(format!("channels {} must be even (sinusoid table pairs)", self.channels));
        }
        if self.blocks == 0 {
            return fail("blocks must be >= 1".into());
        }
        if self.dilations.is_empty() {
            return fail("dilations must be non-empty".into());
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return fail(format!("fusion weights must be nonnegative, got {} / {}", self.alpha, self.beta));
        }
        if self.fft_size % 4 != 0 {
            return fail(format!("fft_size {} must be a multiple of 4 so F is odd", self.fft_size));
        }
        if self.window_len > self.fft_size || self.hop == 0 || self.hop > self.window_len {
            return fail(format!(
                "stft geometry window {} hop {} fft {}",
                self.window_len, self.hop, self.fft_size
            ));
        }
        let (kt, kf) = self.kernel_dp;
        if kt == 0 || kf == 0 || self.kernel_enc.0 == 0 || self.kernel_enc.1 == 0 {
            return fail("kernels must be >= 1".into());
        }
        if self.conv_kernel == 0 || self.ffn_mult == 0 {
            return fail("conv_kernel and ffn_mult must be >= 1".into());
        }
        Ok(())
    }
}

/// Padding that preserves an axis under stride 1: total k-1, split evenly.
fn same_pad(k: usize) -> (usize, usize) {
    ((k - 1) / 2, k - 1 - (k - 1) / 2)
}

/// Complex Conv2D module: convolution + instance norm + complex PReLU.
struct ConvBlock<T: Real> {
    conv: ComplexConv2d<T>,
    norm: ComplexInstanceNorm<T>,
    act: ComplexPRelu<T>,
}

impl<T: Real> ConvBlock<T> {
    fn new(c_in: usize, c_out: usize, k: (usize, usize), geom: ConvGeom, rng: &mut StdRng) -> Self {
        Self {
            // the norm removes a per-channel constant, so no bias here
            conv: ComplexConv2d::with_bias(c_in, c_out, k, geom, false, rng),
            norm: ComplexInstanceNorm::new(c_out, NormLayout::Nctf),
            act: ComplexPRelu::new(c_out, 1),
        }
    }

    fn forward(&self, tape: &mut Tape<T>, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let y = self.conv.forward(tape, z)?;
        let y = self.norm.forward(tape, &y)?;
        self.act.forward(tape, &y)
    }
}

impl<T: Real> Parameterized<T> for ConvBlock<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.act.visit_params(&join(prefix, "prelu"), f);
    }
}

/// DPBlock: causal-in-time dilated Conv2D module + CFSMN over frequency.
struct DpBlock<T: Real> {
    conv: ConvBlock<T>,
    cfsmn: Cfsmn<T>,
}

impl<T: Real> DpBlock<T> {
    fn new(cfg: &D2FormerConfig, dilation: usize, rng: &mut StdRng) -> Self {
        let (kt, kf) = cfg.kernel_dp;
        let geom = ConvGeom {
            stride: (1, 1),
            dilation: (dilation, 1),
            pad_h: (dilation * (kt - 1), 0),
            pad_w: same_pad(kf),
        };
        Self {
            conv: ConvBlock::new(cfg.channels, cfg.channels, cfg.kernel_dp, geom, rng),
            cfsmn: Cfsmn::new(cfg.channels, cfg.cfsmn_l.0, cfg.cfsmn_l.1, rng),
        }
    }

    fn forward(&self, tape: &mut Tape<T>, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let y = self.conv.forward(tape, z)?;
        // CFSMN runs channels-last over the frequency axis.
        let y = tape.permute(&y, &[0, 2, 3, 1])?;
        let y = self.cfsmn.forward(tape, &y)?;
        tape.permute(&y, &[0, 3, 1, 2])
    }
}

impl<T: Real> Parameterized<T> for DpBlock<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.cfsmn.visit_params(&join(prefix, "cfsmn"), f);
    }
}

/// Dilated DPBlock stack; every block after the first concatenates its
/// input onto its output (channel axis) and re-projects back to C with a
/// 1x1 complex conv to keep the budget flat.
struct DpDilated<T: Real> {
    blocks: Vec<DpBlock<T>>,
    reproj: Vec<ComplexConv2d<T>>,
}

impl<T: Real> DpDilated<T> {
    fn new(cfg: &D2FormerConfig, rng: &mut StdRng) -> Self {
        let blocks: Vec<DpBlock<T>> = cfg.dilations.iter().map(|&d| DpBlock::new(cfg, d, rng)).collect();
        let reproj = (1..cfg.dilations.len())
            .map(|_| ComplexConv2d::new(2 * cfg.channels, cfg.channels, (1, 1), ConvGeom::unit(), rng))
            .collect();
        Self { blocks, reproj }
    }

    fn forward(&self, tape: &mut Tape<T>, z: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        let mut x = z.clone();
        for (i, blk) in self.blocks.iter().enumerate() {
            let y = blk.forward(tape, &x)?;
            x = if i == 0 {
                y
            } else {
                let cat = tape.concat(&[&x, &y], 1)?;
                self.reproj[i - 1].forward(tape, &cat)?
            };
        }
        Ok(x)
    }
}

impl<T: Real> Parameterized<T> for DpDilated<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), f);
        }
        for (i, r) in self.reproj.iter_mut().enumerate() {
            r.visit_params(&join(prefix, &format!("reproj{i}")), f);
        }
    }
}

/// Complex dual-path encoder: channel expansion, dilated dual-path module,
/// frequency halving.
struct Encoder<T: Real> {
    conv_in: ConvBlock<T>,
    dp: DpDilated<T>,
    conv_down: ConvBlock<T>,
}

impl<T: Real> Encoder<T> {
    fn new(cfg: &D2FormerConfig, rng: &mut StdRng) -> Self {
        let k = cfg.kernel_enc;
        let geom_in = ConvGeom { stride: (1, 1), dilation: (1, 1), pad_h: same_pad(k.0), pad_w: same_pad(k.1) };
        // stride-2 frequency with pad k-1 lands on ceil(F/2) for odd F
        let geom_down = ConvGeom { stride: (1, 2), dilation: (1, 1), pad_h: same_pad(k.0), pad_w: same_pad(k.1) };
        Self {
            conv_in: ConvBlock::new(1, cfg.channels, k, geom_in, rng),
            dp: DpDilated::new(cfg, rng),
            conv_down: ConvBlock::new(cfg.channels, cfg.channels, k, geom_down, rng),
        }
    }

    fn forward(&self, tape: &mut Tape<T>, y: &ComplexTensor<T>, cfg: &D2FormerConfig) -> Result<ComplexTensor<T>> {
        if y.ndim() != 4 || y.shape()[1] != 1 || y.shape()[3] != cfg.f_bins() {
            return Err(Error::dim(
                "encoder_forward",
                format!("expected [B, 1, T, {}], got {:?}", cfg.f_bins(), y.shape()),
            ));
        }
        let x = self.conv_in.forward(tape, y)?;
        let x = self.dp.forward(tape, &x)?;
        self.conv_down.forward(tape, &x)
    }
}

impl<T: Real> Parameterized<T> for Encoder<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv_in.visit_params(&join(prefix, "conv_in"), f);
        self.dp.visit_params(&join(prefix, "dp"), f);
        self.conv_down.visit_params(&join(prefix, "conv_down"), f);
    }
}

fn upsampler<T: Real>(cfg: &D2FormerConfig, rng: &mut StdRng) -> ComplexConvTranspose2d<T> {
    let (kt, kf) = cfg.kernel_up;
    // (F2-1)*2 + kf - pad_total lands exactly on F when pad_total = kf - 1
    // (F odd); time axis is stride-1 "same".
    let geom = ConvGeom { stride: (1, 2), dilation: (1, 1), pad_h: same_pad(kt), pad_w: same_pad(kf) };
    ComplexConvTranspose2d::new(cfg.channels, cfg.channels, (kt, kf), geom, rng)
}

/// Masking-decoder variant: the path into the norm is linear, so the bias
/// would be exactly normalized away.
fn upsampler_no_bias<T: Real>(cfg: &D2FormerConfig, rng: &mut StdRng) -> ComplexConvTranspose2d<T> {
    let (kt, kf) = cfg.kernel_up;
    let geom = ConvGeom { stride: (1, 2), dilation: (1, 1), pad_h: same_pad(kt), pad_w: same_pad(kf) };
    ComplexConvTranspose2d::with_bias(cfg.channels, cfg.channels, (kt, kf), geom, false, rng)
}

fn check_recovered_f<T: Real>(out: &ComplexTensor<T>, cfg: &D2FormerConfig) -> Result<()> {
    let f = out.shape()[3];
    if f != cfg.f_bins() {
        return Err(Error::dim(
            "decoder_upsample",
            format!(
                "transposed conv recovers F={f} from F2={}, but the target is F={}; adjust kernel_up/padding",
                cfg.f2(),
                cfg.f_bins()
            ),
        ));
    }
    Ok(())
}

/// Masking decoder: dilated module, frequency recovery, channel squeeze,
/// norm + LeakyReLU, output projection bounded by tanh.
struct MaskingDecoder<T: Real> {
    dp: DpDilated<T>,
    up: ComplexConvTranspose2d<T>,
    squeeze: ComplexConv2d<T>,
    norm: ComplexInstanceNorm<T>,
    proj: ComplexConv2d<T>,
}

impl<T: Real> MaskingDecoder<T> {
    fn new(cfg: &D2FormerConfig, rng: &mut StdRng) -> Self {
        Self {
            dp: DpDilated::new(cfg, rng),
            up: upsampler_no_bias(cfg, rng),
            squeeze: ComplexConv2d::with_bias(cfg.channels, 1, (1, 1), ConvGeom::unit(), false, rng),
            norm: ComplexInstanceNorm::new(1, NormLayout::Nctf),
            proj: ComplexConv2d::new(1, 1, (1, 1), ConvGeom::unit(), rng),
        }
    }

    fn forward(&self, tape: &mut Tape<T>, feat: &ComplexTensor<T>, cfg: &D2FormerConfig) -> Result<ComplexTensor<T>> {
        let y = self.dp.forward(tape, feat)?;
        let y = self.up.forward(tape, &y)?;
        check_recovered_f(&y, cfg)?;
        let y = self.squeeze.forward(tape, &y)?;
        let y = self.norm.forward(tape, &y)?;
        let y = complex_leaky_relu(tape, &y)?;
        let y = self.proj.forward(tape, &y)?;
        complex_tanh(tape, &y)
    }
}

impl<T: Real> Parameterized<T> for MaskingDecoder<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.dp.visit_params(&join(prefix, "dp"), f);
        self.up.visit_params(&join(prefix, "up"), f);
        self.squeeze.visit_params(&join(prefix, "squeeze"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
    }
}

/// Spectral decoder: dilated module, frequency recovery, PReLU + norm,
/// channel squeeze. No output activation.
struct SpectralDecoder<T: Real> {
    dp: DpDilated<T>,
    up: ComplexConvTranspose2d<T>,
    act: ComplexPRelu<T>,
    norm: ComplexInstanceNorm<T>,
    squeeze: ComplexConv2d<T>,
}

impl<T: Real> SpectralDecoder<T> {
    fn new(cfg: &D2FormerConfig, rng: &mut StdRng) -> Self {
        Self {
            dp: DpDilated::new(cfg, rng),
            up: upsampler(cfg, rng),
            act: ComplexPRelu::new(cfg.channels, 1),
            norm: ComplexInstanceNorm::new(cfg.channels, NormLayout::Nctf),
            squeeze: ComplexConv2d::new(cfg.channels, 1, (1, 1), ConvGeom::unit(), rng),
        }
    }

    fn forward(&self, tape: &mut Tape<T>, feat: &ComplexTensor<T>, cfg: &D2FormerConfig) -> Result<ComplexTensor<T>> {
        let y = self.dp.forward(tape, feat)?;
        let y = self.up.forward(tape, &y)?;
        check_recovered_f(&y, cfg)?;
        let y = self.act.forward(tape, &y)?;
        let y = self.norm.forward(tape, &y)?;
        self.squeeze.forward(tape, &y)
    }
}

impl<T: Real> Parameterized<T> for SpectralDecoder<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.dp.visit_params(&join(prefix, "dp"), f);
        self.up.visit_params(&join(prefix, "up"), f);
        self.act.visit_params(&join(prefix, "prelu"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.squeeze.visit_params(&join(prefix, "squeeze"), f);
    }
}

/// Decoder outputs plus the fused spectrogram, all `[B, 1, T, F]`.
pub struct ModelOutputs<T: Real> {
    pub mask: ComplexTensor<T>,
    pub spectral: ComplexTensor<T>,
    pub fused: ComplexTensor<T>,
}

/// The assembled network.
pub struct D2Former<T: Real> {
    pub cfg: D2FormerConfig,
    encoder: Encoder<T>,
    stack: Vec<DualPathBlock<T>>,
    masking: MaskingDecoder<T>,
    spectral: SpectralDecoder<T>,
    param_names: Vec<String>,
}

impl<T: Real> D2Former<T> {
    pub fn new(cfg: &D2FormerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let encoder = Encoder::new(cfg, &mut rng);
        let stack = (0..cfg.blocks)
            .map(|_| DualPathBlock::new(cfg.channels, cfg.heads, cfg.conv_kernel, cfg.ffn_mult, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let masking = MaskingDecoder::new(cfg, &mut rng);
        let spectral = SpectralDecoder::new(cfg, &mut rng);
        let mut model = Self {
            cfg: cfg.clone(),
            encoder,
            stack,
            masking,
            spectral,
            param_names: Vec::new(),
        };
        model.param_names = index_params(&mut model);
        Ok(model)
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    /// Encoder feature map `[B, C, T, F2]` from a spectrogram `[B, 1, T, F]`.
    pub fn encoder_forward(&self, tape: &mut Tape<T>, y: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        self.encoder.forward(tape, y, &self.cfg)
    }

    pub fn masking_decoder_forward(&self, tape: &mut Tape<T>, feat: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        self.masking.forward(tape, feat, &self.cfg)
    }

    pub fn spectral_decoder_forward(&self, tape: &mut Tape<T>, feat: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
        self.spectral.forward(tape, feat, &self.cfg)
    }

    /// Whole network over a batched spectrogram.
    pub fn forward_spectrogram(&self, tape: &mut Tape<T>, y: &ComplexTensor<T>) -> Result<ModelOutputs<T>> {
        let feat = self.encoder.forward(tape, y, &self.cfg)?;
        let feat = conformer_stack(tape, &feat, &self.stack)?;
        let mask = self.masking.forward(tape, &feat, &self.cfg)?;
        let spectral = self.spectral.forward(tape, &feat, &self.cfg)?;
        let fused = fuse(tape, &mask, &spectral, y, T::from_f64(self.cfg.alpha), T::from_f64(self.cfg.beta))?;
        Ok(ModelOutputs { mask, spectral, fused })
    }

    /// Waveform-to-waveform enhancement; output length equals input length.
    pub fn forward(&self, noisy: &Waveform) -> Result<Waveform> {
        self.forward_with_fusion(noisy, self.cfg.alpha, self.cfg.beta)
    }

    /// Enhancement with explicit fusion weights overriding the config.
    pub fn forward_with_fusion(&self, noisy: &Waveform, alpha: f64, beta: f64) -> Result<Waveform> {
        if noisy.sample_rate != MODEL_SAMPLE_RATE {
            return Err(Error::Contract(format!(
                "model input must be {} Hz mono, got {} Hz",
                MODEL_SAMPLE_RATE, noisy.sample_rate
            )));
        }
        let stft_cfg = self.cfg.stft();
        let spec = stft::<T>(noisy, &stft_cfg)?;
        let (t_len, f) = (spec.frames(), spec.bins());
        let mut tape = Tape::no_grad();
        let y = tape.reshape(&spec.data, &[1, 1, t_len, f])?;
        let feat = self.encoder.forward(&mut tape, &y, &self.cfg)?;
        let feat = conformer_stack(&mut tape, &feat, &self.stack)?;
        let mask = self.masking.forward(&mut tape, &feat, &self.cfg)?;
        let spectral = self.spectral.forward(&mut tape, &feat, &self.cfg)?;
        let fused = fuse(&mut tape, &mask, &spectral, &y, T::from_f64(alpha), T::from_f64(beta))?;
        let flat = tape.reshape(&fused, &[1, t_len, f])?;
        let out = tape.istft_op(&flat, &stft_cfg, noisy.len())?;
        let samples: Vec<f32> = out.re().iter().map(|&v| v.to_f64() as f32).collect();
        Ok(Waveform::new(samples, MODEL_SAMPLE_RATE))
    }

    /// Trainable real scalars per top-level module, plus the total.
    pub fn count_params(&mut self) -> (usize, BTreeMap<String, usize>) {
        let mut by_module: BTreeMap<String, usize> = BTreeMap::new();
        let mut total = 0usize;
        self.visit_params("", &mut |name, p| {
            let n = p.scalar_count();
            total += n;
            let top = name.split('.').next().unwrap_or("other").to_string();
            *by_module.entry(top).or_insert(0) += n;
        });
        (total, by_module)
    }
}

impl<T: Real> Parameterized<T> for D2Former<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        for (i, b) in self.stack.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("conformer{i}")), f);
        }
        self.masking.visit_params(&join(prefix, "masking_decoder"), f);
        self.spectral.visit_params(&join(prefix, "spectral_decoder"), f);
    }
}

/// Weighted dual-decoder fusion: `S = alpha (M (*) Y) + beta S''` with the
/// elementwise complex product for the masking path.
pub fn fuse<T: Real>(
    tape: &mut Tape<T>,
    mask: &ComplexTensor<T>,
    spectral: &ComplexTensor<T>,
    noisy: &ComplexTensor<T>,
    alpha: T,
    beta: T,
) -> Result<ComplexTensor<T>> {
    if mask.shape() != spectral.shape() || mask.shape() != noisy.shape() {
        return Err(Error::dim(
            "fuse",
            format!("mask {:?}, spectral {:?}, noisy {:?}", mask.shape(), spectral.shape(), noisy.shape()),
        ));
    }
    let masked = tape.cmul(mask, noisy)?;
    let a = tape.scale(&masked, alpha)?;
    let b = tape.scale(spectral, beta)?;
    tape.add(&a, &b)
}

/// Parameter count for a configuration (re and im planes counted
/// separately; real-only parameters once).
pub fn count_params(cfg: &D2FormerConfig) -> Result<(usize, BTreeMap<String, usize>)> {
    let mut model = D2Former::<f32>::new(cfg, 0)?;
    Ok(model.count_params())
}

/// The paper's parameter budget and the acceptance band reflecting its
/// unspecified kernel sizes.
pub const PARAM_BUDGET: usize = 870_000;
pub const PARAM_BAND: (usize, usize) = (700_000, 1_050_000);
