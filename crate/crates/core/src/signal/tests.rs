//! Signal-module oracles: direct DFT, round trips, power ratios.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::*;
use crate::ctensor::finite_diff_check;

fn noise(len: usize, seed: u64) -> Waveform {
    let mut rng = StdRng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.gen_range(-0.5f32..0.5)).collect(), MODEL_SAMPLE_RATE)
}

fn sine(freq: f64, len: usize, amp: f32) -> Waveform {
    let samples = (0..len)
        .map(|n| amp * (2.0 * std::f64::consts::PI * freq * n as f64 / MODEL_SAMPLE_RATE as f64).sin() as f32)
        .collect();
    Waveform::new(samples, MODEL_SAMPLE_RATE)
}

#[test]
fn stft_two_seconds_makes_320_by_201() {
    let w = noise(32_000, 1);
    let s: Spectrogram<f32> = stft(&w, &StftConfig::speech_16k()).unwrap();
    assert_eq!(s.data.shape(), &[320, 201]);
}

#[test]
fn stft_of_zero_is_zero() {
    let w = Waveform::new(vec![0.0; 5000], MODEL_SAMPLE_RATE);
    let s: Spectrogram<f64> = stft(&w, &StftConfig::speech_16k()).unwrap();
    assert_eq!(s.data.max_abs(), 0.0);
}

#[test]
fn stft_empty_waveform_is_contract_error() {
    let w = Waveform::new(vec![], MODEL_SAMPLE_RATE);
    assert!(matches!(stft::<f32>(&w, &StftConfig::speech_16k()), Err(crate::Error::Contract(_))));
}

#[test]
fn sine_400hz_peaks_at_bin_10_and_matches_direct_dft() {
    let cfg = StftConfig::speech_16k();
    let w = sine(400.0, 32_000, 1.0);
    let s: Spectrogram<f64> = stft(&w, &cfg).unwrap();
    // interior frame away from edge padding
    let t = 100usize;
    let re = s.data.re();
    let im = s.data.im();
    let mags: Vec<f64> = (0..201).map(|k| re[[t, k]].hypot(im[[t, k]])).collect();
    let argmax = mags.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(argmax, 10); // 400 Hz * 400 / 16000

    // direct O(N^2) DFT oracle of the same windowed frame
    let start = (t * cfg.hop) as isize - 200;
    let frame: Vec<f64> = (0..400)
        .map(|n| {
            let idx = super::reflect(start + n as isize, w.len());
            w.samples[idx] as f64 * cfg.window[n]
        })
        .collect();
    for k in (0..201).step_by(25) {
        let (mut sr, mut si) = (0.0f64, 0.0f64);
        for (n, &x) in frame.iter().enumerate() {
            let th = -2.0 * std::f64::consts::PI * (k * n) as f64 / 400.0;
            sr += x * th.cos();
            si += x * th.sin();
        }
        assert!((re[[t, k]] - sr).abs() < 1e-8, "bin {k}");
        assert!((im[[t, k]] - si).abs() < 1e-8, "bin {k}");
    }
}

#[test]
fn istft_inverts_stft_for_two_seconds() {
    let cfg = StftConfig::speech_16k();
    let w = noise(32_000, 2);
    let s: Spectrogram<f64> = stft(&w, &cfg).unwrap();
    let back = istft(&s, &cfg, w.len()).unwrap();
    let err = w
        .samples
        .iter()
        .zip(&back.samples)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(err <= 1e-6, "max err {err}");
}

#[test]
fn istft_of_zero_is_zero() {
    let cfg = StftConfig::speech_16k();
    let s = Spectrogram::<f32> {
        data: ComplexTensor::zeros(&[10, 201]),
        frame_hop: cfg.hop,
        fft_size: cfg.fft_size,
    };
    let w = istft(&s, &cfg, 1000).unwrap();
    assert!(w.samples.iter().all(|&v| v == 0.0));
}

#[test]
fn single_frame_round_trip() {
    let cfg = StftConfig::speech_16k();
    for len in [64usize, 100, 399, 400] {
        let w = noise(len, 3 + len as u64);
        let s: Spectrogram<f64> = stft(&w, &cfg).unwrap();
        let back = istft(&s, &cfg, len).unwrap();
        let err = w
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 1e-6, "len {len} max err {err}");
    }
}

#[test]
fn round_trip_identity_over_random_lengths() {
    let cfg = StftConfig::speech_16k();
    let mut rng = StdRng::seed_from_u64(99);
    for _ in 0..20 {
        let len = rng.gen_range(100..=48_000);
        let w = noise(len, rng.gen());
        let s: Spectrogram<f64> = stft(&w, &cfg).unwrap();
        let back = istft(&s, &cfg, len).unwrap();
        let err = w
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 1e-6, "len {len} max err {err}");
    }
}

#[test]
fn stft_is_linear() {
    let cfg = StftConfig::speech_16k();
    let x = noise(4000, 5);
    let y = noise(4000, 6);
    let (a, b) = (0.7f32, -1.3f32);
    let mixed = Waveform::new(
        x.samples.iter().zip(&y.samples).map(|(&u, &v)| a * u + b * v).collect(),
        MODEL_SAMPLE_RATE,
    );
    let sx: Spectrogram<f64> = stft(&x, &cfg).unwrap();
    let sy: Spectrogram<f64> = stft(&y, &cfg).unwrap();
    let sm: Spectrogram<f64> = stft(&mixed, &cfg).unwrap();
    let combo_re = sx.data.re().mapv(|v| v * a as f64) + &sy.data.re().mapv(|v| v * b as f64);
    let combo_im = sx.data.im().mapv(|v| v * a as f64) + &sy.data.im().mapv(|v| v * b as f64);
    let combo = ComplexTensor::from_parts(combo_re, combo_im).unwrap();
    assert!(sm.data.max_abs_diff(&combo) <= 1e-6);
}

#[test]
fn parseval_ratio_is_stable_across_signals() {
    let cfg = StftConfig::speech_16k();
    let mut ratios = Vec::new();
    for seed in 10..16 {
        let w = noise(32_000, seed);
        let s: Spectrogram<f64> = stft(&w, &cfg).unwrap();
        let wave_energy: f64 = w.samples.iter().map(|&v| (v as f64).powi(2)).sum();
        ratios.push(spectral_energy(&s) / wave_energy);
    }
    let mean: f64 = ratios.iter().sum::<f64>() / ratios.len() as f64;
    for r in &ratios {
        assert!((r / mean - 1.0).abs() <= 0.01, "ratio {r} vs mean {mean}");
    }
    // window-gain correction: fft_size * sum(w^2) / hop frames per sample
    let wsq: f64 = cfg.window.iter().map(|v| v * v).sum();
    let gain = cfg.fft_size as f64 * wsq / cfg.hop as f64;
    for r in &ratios {
        assert!((r / gain - 1.0).abs() <= 0.02, "corrected ratio {}", r / gain);
    }
}

#[test]
fn compress_magnitude_examples() {
    let one = ComplexTensor::<f64>::from_slices(&[1], &[0.6], &[0.8]).unwrap();
    for p in [0.3, 0.5, 1.0] {
        let c = compress_magnitude(&one, p).unwrap();
        assert!((c[[0]] - 1.0).abs() < 1e-9, "unit magnitude fixed point at P={p}");
    }
    let four = ComplexTensor::<f64>::from_slices(&[1], &[4.0], &[0.0]).unwrap();
    let c = compress_magnitude(&four, 0.3).unwrap();
    assert!((c[[0]] - 1.515717).abs() < 1e-5);
    let z = ComplexTensor::<f64>::from_slices(&[1], &[3.0], &[4.0]).unwrap();
    let c1 = compress_magnitude(&z, 1.0).unwrap();
    assert!((c1[[0]] - 5.0).abs() < 1e-6);
    assert!(compress_magnitude(&z, 0.0).is_err());
    assert!(compress_magnitude(&z, 1.5).is_err());
}

#[test]
fn wav_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tone.wav");
    let w = sine(440.0, 16_000, 0.8);
    write_wav(&path, &w).unwrap();
    let back = read_wav(&path).unwrap();
    assert_eq!(back.sample_rate, MODEL_SAMPLE_RATE);
    assert_eq!(back.len(), w.len());
    let err = w
        .samples
        .iter()
        .zip(&back.samples)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(err <= 1.0 / 32768.0, "max err {err}");
}

#[test]
fn truncated_wav_is_parse_error_not_panic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.wav");
    let w = sine(440.0, 4000, 0.5);
    write_wav(&path, &w).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..40]).unwrap();
    match read_wav(&path) {
        Err(crate::Error::Parse { offset, .. }) => assert!(offset > 0),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn unsupported_encoding_is_explicit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("u.wav");
    let w = sine(440.0, 400, 0.5);
    write_wav(&path, &w).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[20] = 0xFE; // format tag -> 0xFFFE (extensible)
    bytes[21] = 0xFF;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_wav(&path), Err(crate::Error::Unsupported(_))));
}

#[test]
fn resampler_length_matches_rounding_oracle() {
    let src = Waveform::new(vec![0.25; 48_000], 48_000);
    let out = resample_to_16k(src);
    assert_eq!(out.len(), (48_000f64 * 16_000.0 / 48_000.0).round() as usize);
    assert_eq!(out.sample_rate, MODEL_SAMPLE_RATE);
    let src = Waveform::new(vec![0.1; 44_100], 44_100);
    let out = resample_to_16k(src);
    assert_eq!(out.len(), (44_100f64 * 16_000.0 / 44_100.0).round() as usize);
}

#[test]
fn mixture_hits_requested_snr() {
    let clean = sine(300.0, 16_000, 0.5);
    let nse = noise(16_000, 20);
    for target in [0.0, 10.0] {
        let (noisy, c) = synth_mixture(&clean, &nse, target).unwrap();
        let diff: Vec<f32> = noisy.samples.iter().zip(&c.samples).map(|(n, c)| n - c).collect();
        let got = component_snr_db(&c, &diff);
        assert!((got - target).abs() <= 0.01, "target {target} got {got}");
    }
}

#[test]
fn mixture_scaling_law() {
    let clean = sine(300.0, 8_000, 0.5);
    let nse = noise(8_000, 21);
    let (n0, _) = synth_mixture(&clean, &nse, 0.0).unwrap();
    let (n15, _) = synth_mixture(&clean, &nse, 15.0).unwrap();
    let a0 = n0.samples[5] - clean.samples[5];
    let a15 = n15.samples[5] - clean.samples[5];
    let ratio = (a15 / a0) as f64;
    assert!((ratio - 10f64.powf(-15.0 / 20.0)).abs() < 1e-3, "ratio {ratio}");
}

#[test]
fn mixture_rejects_silence() {
    let clean = sine(300.0, 1000, 0.5);
    let silent = Waveform::new(vec![0.0; 1000], MODEL_SAMPLE_RATE);
    assert!(matches!(synth_mixture(&silent, &clean, 0.0), Err(crate::Error::Contract(_))));
    assert!(matches!(synth_mixture(&clean, &silent, 0.0), Err(crate::Error::Contract(_))));
}

#[test]
fn istft_op_matches_value_istft_and_finite_differences() {
    let cfg = StftConfig::hamming(8, 4, 8);
    let out_len = 14usize;
    let mut rng = StdRng::seed_from_u64(30);
    let s = crate::ctensor::random_ct(&[1, 4, 5], &mut rng);

    // against the value-path istft
    let mut t = Tape::<f64>::no_grad();
    let y = t.istft_op(&s, &cfg, out_len).unwrap();
    let spec = Spectrogram::<f64> {
        data: ComplexTensor::from_parts(
            s.re().to_owned().into_shape_with_order(ndarray::IxDyn(&[4, 5])).unwrap(),
            s.im().to_owned().into_shape_with_order(ndarray::IxDyn(&[4, 5])).unwrap(),
        )
        .unwrap(),
        frame_hop: cfg.hop,
        fft_size: cfg.fft_size,
    };
    let w = istft(&spec, &cfg, out_len).unwrap();
    for n in 0..out_len {
        assert!((y.re()[[0, n]] - w.samples[n] as f64).abs() < 1e-6);
    }

    // exact adjoint: linear op, finite differences agree tightly
    let cfg2 = cfg.clone();
    let err = finite_diff_check(
        move |t, xs| {
            let y = t.istft_op(&xs[0], &cfg2, out_len)?;
            let sq = t.cmul(&y, &y)?;
            t.mean_all(&sq)
        },
        &[s],
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-6, "linear op should check out tightly, got {err}");
}

#[test]
fn degenerate_window_raises_windowing_error() {
    let mut cfg = StftConfig::hamming(8, 4, 8);
    cfg.window = vec![0.0; 8];
    let s = Spectrogram::<f64> {
        data: ComplexTensor::zeros(&[3, 5]),
        frame_hop: cfg.hop,
        fft_size: cfg.fft_size,
    };
    assert!(matches!(istft(&s, &cfg, 10), Err(crate::Error::Windowing { .. })));
}
