//! Waveform <-> spectrogram conversion, magnitude compression, WAV I/O,
//! and synthetic mixture generation.
//!
//! Analysis: 25 ms periodic Hamming window, 6.25 ms hop, 400-point FFT at
//! 16 kHz (F = 201). Framing is center-padded by reflection with
//! `T = ceil(len / hop)` frames; synthesis is weighted overlap-add with
//! squared-window normalization, which inverts exactly for any hop.

mod wav;

pub use wav::{read_wav, resample_to_16k, write_wav};

use ndarray::{ArrayD, IxDyn};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use smallvec::smallvec;

use crate::ctensor::{ComplexTensor, Real, Tape};
use crate::error::{Error, Result};

pub const MODEL_SAMPLE_RATE: u32 = 16_000;

/// Mono audio buffer. Samples are dimensionless amplitudes, nominally in
/// [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let p: f64 = self.samples.iter().map(|&v| v as f64 * v as f64).sum();
        (p / self.samples.len() as f64).sqrt()
    }

    /// Mean power (RMS squared).
    pub fn power(&self) -> f64 {
        let r = self.rms();
        r * r
    }
}

/// Complex time-frequency representation, `[T, F]`.
#[derive(Debug, Clone)]
pub struct Spectrogram<T: Real> {
    pub data: ComplexTensor<T>,
    pub frame_hop: usize,
    pub fft_size: usize,
}

impl<T: Real> Spectrogram<T> {
    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Analysis/synthesis configuration.
#[derive(Debug, Clone)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: Vec<f64>,
}

impl StftConfig {
    /// Periodic Hamming window `0.54 - 0.46 cos(2 pi n / N)`.
    pub fn hamming(window_len: usize, hop: usize, fft_size: usize) -> Self {
        let window = (0..window_len)
            .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / window_len as f64).cos())
            .collect();
        Self { window_len, hop, fft_size, window }
    }

    /// The paper configuration: 400-sample window, 100-sample hop,
    /// 400-point FFT (25 ms / 6.25 ms at 16 kHz), F = 201.
    pub fn speech_16k() -> Self {
        Self::hamming(400, 100, 400)
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.window_len || self.fft_size < self.window_len {
            return Err(Error::Contract(format!(
                "stft config: hop {} window {} fft {}",
                self.hop, self.window_len, self.fft_size
            )));
        }
        if self.window.len() != self.window_len {
            return Err(Error::Contract("stft config: window length mismatch".into()));
        }
        Ok(())
    }
}

/// Reflected index into `[0, len)` (numpy-style, edge not repeated).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

fn fwd_fft_f64(frame: &[f64], fft_size: usize, bins: usize, planner: &mut FftPlanner<f64>) -> Vec<(f64, f64)> {
    let fft = planner.plan_fft_forward(fft_size);
    let mut buf: Vec<Complex<f64>> = frame.iter().map(|&v| Complex::new(v, 0.0)).collect();
    buf.resize(fft_size, Complex::new(0.0, 0.0));
    fft.process(&mut buf);
    buf[..bins].iter().map(|c| (c.re, c.im)).collect()
}

/// Real part of the inverse FFT of a one-sided spectrum. The imaginary
/// parts of the DC and Nyquist bins do not influence the result.
fn inv_fft_f64(bins_ri: &[(f64, f64)], fft_size: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let bins = bins_ri.len();
    let ifft = planner.plan_fft_inverse(fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for (k, &(re, im)) in bins_ri.iter().enumerate() {
        buf[k] = Complex::new(re, im);
    }
    for k in 1..bins - 1 {
        buf[fft_size - k] = Complex::new(bins_ri[k].0, -bins_ri[k].1);
    }
    // DC and Nyquist contribute their real parts only.
    buf[0] = Complex::new(bins_ri[0].0, 0.0);
    if fft_size % 2 == 0 {
        buf[fft_size / 2] = Complex::new(bins_ri[bins - 1].0, 0.0);
    }
    ifft.process(&mut buf);
    buf.iter().map(|c| c.re / fft_size as f64).collect()
}

/// Center-padded short-time Fourier transform; `T = ceil(len / hop)` frames
/// of `F = fft_size/2 + 1` bins.
pub fn stft<T: Real>(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram<T>> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(Error::Contract("stft: empty waveform".into()));
    }
    let len = w.len();
    let frames = cfg.frames_for(len);
    let bins = cfg.bins();
    let half = cfg.window_len / 2;
    let mut planner = FftPlanner::new();
    let mut re = Vec::with_capacity(frames * bins);
    let mut im = Vec::with_capacity(frames * bins);
    let mut frame = vec![0.0f64; cfg.window_len];
    for t in 0..frames {
        let start = (t * cfg.hop) as isize - half as isize;
        for (n, f) in frame.iter_mut().enumerate() {
            let idx = reflect(start + n as isize, len);
            *f = w.samples[idx] as f64 * cfg.window[n];
        }
        for (r, i) in fwd_fft_f64(&frame, cfg.fft_size, bins, &mut planner) {
            re.push(T::from_f64(r));
            im.push(T::from_f64(i));
        }
    }
    let data = ComplexTensor::from_slices(&[frames, bins], &re, &im)?;
    Ok(Spectrogram { data, frame_hop: cfg.hop, fft_size: cfg.fft_size })
}

/// Squared-window overlap-add coverage on the padded synthesis grid.
fn wola_denominator(cfg: &StftConfig, frames: usize) -> Vec<f64> {
    let grid = (frames - 1) * cfg.hop + cfg.window_len;
    let mut den = vec![0.0f64; grid];
    for t in 0..frames {
        for (n, &wv) in cfg.window.iter().enumerate() {
            den[t * cfg.hop + n] += wv * wv;
        }
    }
    den
}

/// Weighted overlap-add inverse STFT, trimmed or zero-padded to `out_len`.
pub fn istft<T: Real>(s: &Spectrogram<T>, cfg: &StftConfig, out_len: usize) -> Result<Waveform> {
    cfg.validate()?;
    let (frames, bins) = (s.frames(), s.bins());
    if bins != cfg.bins() || frames == 0 {
        return Err(Error::dim("istft", format!("spectrogram {:?} vs config bins {}", s.data.shape(), cfg.bins())));
    }
    let half = cfg.window_len / 2;
    let den = wola_denominator(cfg, frames);
    let mut acc = vec![0.0f64; den.len()];
    let mut planner = FftPlanner::new();
    let re = s.data.re();
    let im = s.data.im();
    let mut row = vec![(0.0f64, 0.0f64); bins];
    for t in 0..frames {
        for k in 0..bins {
            row[k] = (re[[t, k]].to_f64(), im[[t, k]].to_f64());
        }
        let y = inv_fft_f64(&row, cfg.fft_size, &mut planner);
        for (n, &wv) in cfg.window.iter().enumerate() {
            acc[t * cfg.hop + n] += wv * y[n];
        }
    }
    let mut out = vec![0.0f32; out_len];
    for (n, o) in out.iter_mut().enumerate() {
        let g = half + n;
        if g < acc.len() {
            if den[g] < 1e-8 {
                return Err(Error::Windowing { index: n });
            }
            *o = (acc[g] / den[g]) as f32;
        }
    }
    Ok(Waveform::new(out, MODEL_SAMPLE_RATE))
}

/// `|S|^P` with the stabilized magnitude; `P` must lie in (0, 1].
pub fn compress_magnitude<T: Real>(s: &ComplexTensor<T>, p: f64) -> Result<ArrayD<T>> {
    if !(0.0..=1.0).contains(&p) || p == 0.0 {
        return Err(Error::Contract(format!("compression exponent {p} outside (0, 1]")));
    }
    let eps = T::eps_mag();
    let pt = T::from_f64(p);
    let mut out = ArrayD::zeros(IxDyn(s.shape()));
    ndarray::azip!((o in &mut out, &r in s.re(), &i in s.im()) {
        *o = (r * r + i * i + eps).sqrt().powf(pt);
    });
    Ok(out)
}

/// Scale `noise` so the clean-to-noise power ratio is `snr_db`, looping or
/// truncating the noise to the clean length first. Returns (noisy, clean).
pub fn synth_mixture(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, Waveform)> {
    if clean.rms() <= 1e-6 || noise.rms() <= 1e-6 {
        return Err(Error::Contract("synth_mixture: silent input".into()));
    }
    let n = clean.len();
    let looped: Vec<f32> = (0..n).map(|i| noise.samples[i % noise.len()]).collect();
    let p_clean = clean.power();
    let p_noise: f64 = looped.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / n as f64;
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let noisy: Vec<f32> = clean
        .samples
        .iter()
        .zip(&looped)
        .map(|(&c, &v)| c + (v as f64 * gain) as f32)
        .collect();
    Ok((Waveform::new(noisy, clean.sample_rate), clean.clone()))
}

/// Measured SNR between a clean component and a noise component, in dB.
pub fn component_snr_db(clean: &Waveform, noise: &[f32]) -> f64 {
    let p_c = clean.power();
    let p_n: f64 = noise.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / noise.len() as f64;
    10.0 * (p_c / p_n).log10()
}

/// One-sided spectral energy with conjugate-symmetry correction, for the
/// Parseval-style consistency check.
pub fn spectral_energy<T: Real>(s: &Spectrogram<T>) -> f64 {
    let re = s.data.re();
    let im = s.data.im();
    let bins = s.bins();
    let mut total = 0.0f64;
    for t in 0..s.frames() {
        for k in 0..bins {
            let p = re[[t, k]].to_f64().powi(2) + im[[t, k]].to_f64().powi(2);
            let c = if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
            total += c * p;
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Differentiable iSTFT (tape op)
// ---------------------------------------------------------------------------

impl<T: Real> Tape<T> {
    /// iSTFT as a tape op over a batched spectrogram `[B, T, F]`, producing
    /// a real tensor `[B, out_len]`. Linear, so the backward pass is the
    /// exact adjoint: scatter through the WOLA normalization, then a
    /// forward FFT with one-sided weighting.
    pub fn istft_op(
        &mut self,
        s: &ComplexTensor<T>,
        cfg: &StftConfig,
        out_len: usize,
    ) -> Result<ComplexTensor<T>> {
        cfg.validate()?;
        if s.ndim() != 3 || s.shape()[2] != cfg.bins() {
            return Err(Error::dim(
                "istft_op",
                format!("expected [B, T, {}], got {:?}", cfg.bins(), s.shape()),
            ));
        }
        let (b, frames, bins) = (s.shape()[0], s.shape()[1], s.shape()[2]);
        let half = cfg.window_len / 2;
        let den = wola_denominator(cfg, frames);
        for (n, &d) in den.iter().enumerate().take((half + out_len).min(den.len())).skip(half) {
            if d < 1e-8 {
                return Err(Error::Windowing { index: n - half });
            }
        }
        let mut planner = FftPlanner::new();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, out_len]));
        let re = s.re();
        let im = s.im();
        let mut row = vec![(0.0f64, 0.0f64); bins];
        for bi in 0..b {
            let mut acc = vec![0.0f64; den.len()];
            for t in 0..frames {
                for k in 0..bins {
                    row[k] = (re[[bi, t, k]].to_f64(), im[[bi, t, k]].to_f64());
                }
                let y = inv_fft_f64(&row, cfg.fft_size, &mut planner);
                for (n, &wv) in cfg.window.iter().enumerate() {
                    acc[t * cfg.hop + n] += wv * y[n];
                }
            }
            for n in 0..out_len {
                let g = half + n;
                if g < acc.len() {
                    out[[bi, n]] = T::from_f64(acc[g] / den[g]);
                }
            }
        }

        let cfg_c = cfg.clone();
        let shape = s.shape().to_vec();
        let ids = smallvec![s.id()];
        self.record(
            "istft_op",
            ids,
            ComplexTensor::from_re(out),
            Box::new(move |g| {
                let den = wola_denominator(&cfg_c, shape[1]);
                let mut planner = FftPlanner::new();
                let bins = cfg_c.bins();
                let n_fft = cfg_c.fft_size as f64;
                let mut dre = ArrayD::<T>::zeros(IxDyn(&shape));
                let mut dim_ = ArrayD::<T>::zeros(IxDyn(&shape));
                let gr = g.re();
                for bi in 0..shape[0] {
                    // Scatter the output gradient back onto the padded grid.
                    let mut dacc = vec![0.0f64; den.len()];
                    for n in 0..g.shape()[1] {
                        let grid = cfg_c.window_len / 2 + n;
                        if grid < dacc.len() {
                            dacc[grid] = gr[[bi, n]].to_f64() / den[grid];
                        }
                    }
                    let mut dy = vec![0.0f64; cfg_c.fft_size];
                    for t in 0..shape[1] {
                        dy.fill(0.0);
                        for (n, &wv) in cfg_c.window.iter().enumerate() {
                            dy[n] = wv * dacc[t * cfg_c.hop + n];
                        }
                        let spec = fwd_fft_f64(&dy, cfg_c.fft_size, bins, &mut planner);
                        for (k, &(sr, si)) in spec.iter().enumerate() {
                            let c = if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
                            dre[[bi, t, k]] = T::from_f64(c * sr / n_fft);
                            // DC/Nyquist imaginary parts never reach the output.
                            if k != 0 && k != bins - 1 {
                                dim_[[bi, t, k]] = T::from_f64(c * si / n_fft);
                            }
                        }
                    }
                }
                smallvec![Some(
                    ComplexTensor::from_parts(dre, dim_).expect("plane shapes")
                )]
            }),
        )
    }
}

#[cfg(test)]
mod tests;
