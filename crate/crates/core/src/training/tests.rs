//! Loss oracles, optimizer hand-checks, schedule behavior, SI-SNR
//! construction oracles, dataset plumbing.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::*;
use crate::ctensor::random_ct;
use crate::model::D2FormerConfig;
use crate::signal::write_wav;

fn noise_wave(len: usize, seed: u64) -> Waveform {
    let mut rng = StdRng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.gen_range(-0.5f32..0.5)).collect(), MODEL_SAMPLE_RATE)
}

fn sine_wave(freq: f64, len: usize, amp: f32) -> Waveform {
    Waveform::new(
        (0..len)
            .map(|n| amp * (2.0 * std::f64::consts::PI * freq * n as f64 / 16000.0).sin() as f32)
            .collect(),
        MODEL_SAMPLE_RATE,
    )
}

// -- losses -------------------------------------------------------------

#[test]
fn loss_tf_is_zero_for_a_perfect_estimate() {
    let s = random_ct(&[3, 5], &mut StdRng::seed_from_u64(1));
    let mut t = Tape::<f64>::no_grad();
    let l = loss_tf(&mut t, &s, &s.detach(), &LossWeights::paper()).unwrap();
    assert!(l.re_scalar().unwrap().abs() < 1e-12);
}

#[test]
fn loss_tf_zero_reference_matches_epsilon_oracle() {
    // S = 0, S_hat with unit-magnitude entries, gamma3 = 0:
    // mean((sqrt(1+eps)^0.3 - sqrt(eps)^0.3)^2), which is ~1
    let n = 12usize;
    let mut rng = StdRng::seed_from_u64(2);
    let (re, im): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|_| {
            let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (th.cos(), th.sin())
        })
        .unzip();
    let s_hat = ComplexTensor::from_slices(&[3, 4], &re, &im).unwrap();
    let s = ComplexTensor::zeros(&[3, 4]);
    let w = LossWeights { gamma3: 0.0, ..LossWeights::paper() };
    let mut t = Tape::<f64>::no_grad();
    let l = loss_tf(&mut t, &s, &s_hat, &w).unwrap().re_scalar().unwrap();
    let eps = 1e-12f64;
    let oracle = ((1.0 + eps).sqrt().powf(0.3) - eps.sqrt().powf(0.3)).powi(2);
    assert!((l - oracle).abs() < 1e-9, "{l} vs {oracle}");
    assert!((l - 1.0).abs() < 0.05, "close to 1, got {l}");
}

#[test]
fn loss_tf_is_linear_in_gamma3() {
    let mut rng = StdRng::seed_from_u64(3);
    let s = random_ct(&[4, 4], &mut rng);
    let s_hat = random_ct(&[4, 4], &mut rng);
    let mut t = Tape::<f64>::no_grad();
    let mut at = |g3: f64| {
        let w = LossWeights { gamma3: g3, ..LossWeights::paper() };
        loss_tf(&mut t, &s, &s_hat, &w).unwrap().re_scalar().unwrap()
    };
    let (l0, l1, l2) = (at(0.0), at(0.1), at(0.2));
    assert!(((l2 - l1) - (l1 - l0)).abs() < 1e-9, "gamma3 scales only the plane term");
}

#[test]
fn loss_time_examples() {
    let s = noise_wave(100, 4);
    let s_t = ComplexTensor::<f64>::from_slices(
        &[100],
        &s.samples.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        &vec![0.0; 100],
    )
    .unwrap();
    let mut t = Tape::<f64>::no_grad();
    let zero = loss_time(&mut t, &s_t, &s_t.detach()).unwrap();
    assert_eq!(zero.re_scalar().unwrap(), 0.0);

    let shifted = ComplexTensor::from_parts(s_t.re().mapv(|v| v + 0.1), s_t.im().to_owned()).unwrap();
    let l = loss_time(&mut t, &s_t, &shifted).unwrap().re_scalar().unwrap();
    assert!((l - 0.1).abs() < 1e-9);

    // loop oracle on a random pair
    let a = random_ct(&[64], &mut StdRng::seed_from_u64(5));
    let b = random_ct(&[64], &mut StdRng::seed_from_u64(6));
    let l = loss_time(&mut t, &a, &b).unwrap().re_scalar().unwrap();
    let oracle: f64 = a
        .re()
        .iter()
        .zip(b.re().iter())
        .map(|(x, y)| (y - x).abs())
        .sum::<f64>()
        / 64.0;
    assert!((l - oracle).abs() <= 1e-7);

    let short = random_ct(&[32], &mut StdRng::seed_from_u64(7));
    assert!(matches!(loss_time(&mut t, &a, &short), Err(crate::Error::Contract(_))));
}

#[test]
fn total_loss_composition() {
    let mut rng = StdRng::seed_from_u64(8);
    let s = random_ct(&[3, 5], &mut rng);
    let s_hat = random_ct(&[3, 5], &mut rng);
    let wave = random_ct(&[40], &mut rng);
    let wave_hat = random_ct(&[40], &mut rng);
    let mut t = Tape::<f64>::no_grad();

    // perfect estimate -> 0
    let w = LossWeights::paper();
    let zero = total_loss(&mut t, &s, &s.detach(), &wave, &wave.detach(), &w, None).unwrap();
    assert!(zero.re_scalar().unwrap().abs() < 1e-12);

    // gamma1 = 0 reduces to loss_tf
    let w0 = LossWeights { gamma1: 0.0, ..LossWeights::paper() };
    let l = total_loss(&mut t, &s, &s_hat, &wave, &wave_hat, &w0, None).unwrap().re_scalar().unwrap();
    let tf = loss_tf(&mut t, &s, &s_hat, &w0).unwrap().re_scalar().unwrap();
    assert!((l - tf).abs() < 1e-12);

    // paper weighting with the default-disabled hook vs an enabled one
    let base = total_loss(&mut t, &s, &s_hat, &wave, &wave_hat, &w, None).unwrap().re_scalar().unwrap();
    let hook: Box<QnetHook<f64>> = Box::new(|t, _cr, _ch| Ok(t.leaf(ComplexTensor::scalar(1.0, 0.0))));
    let with_hook = total_loss(&mut t, &s, &s_hat, &wave, &wave_hat, &w, Some(hook.as_ref()))
        .unwrap()
        .re_scalar()
        .unwrap();
    assert!((with_hook - base - w.gamma2).abs() < 1e-12, "hook adds gamma2 * 1");
}

// -- AdamW ----------------------------------------------------------------

struct OneParam {
    p: crate::layers::Param<f64>,
}

impl Parameterized<f64> for OneParam {
    fn visit_params(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut crate::layers::Param<f64>)) {
        f("p", &mut self.p);
    }
}

#[test]
fn adamw_first_step_matches_hand_evaluated_update() {
    let mut m = OneParam { p: crate::layers::Param::complex(ComplexTensor::scalar(1.0, 0.0)) };
    crate::layers::index_params(&mut m);
    // loss = re(p) so the gradient is exactly 1
    let mut tape = Tape::new();
    let p = tape.param(&m.p);
    let r = tape.re_part(&p).unwrap();
    let loss = tape.sum_all(&r).unwrap();
    let grads = tape.backward(&loss).unwrap();
    let mut opt = AdamW::<f64>::new(5e-4, 0.01, None);
    opt.step(&mut m, &grads);
    let got = m.p.value.re_scalar().unwrap();
    // m_hat = 1, v_hat = 1: p' = 1 - lr/(1+1e-8) - lr*wd*1
    let expect = 1.0 - 5e-4 * (1.0 / (1.0 + 1e-8)) - 5e-4 * 0.01;
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    assert!((got - 0.999495).abs() < 1e-8);
}

#[test]
fn adamw_zero_gradient_zero_decay_is_identity() {
    let mut m = OneParam { p: crate::layers::Param::complex(ComplexTensor::scalar(0.7, -0.4)) };
    crate::layers::index_params(&mut m);
    let mut tape = Tape::new();
    let p = tape.param(&m.p);
    let zero = ComplexTensor::zeros(&[]);
    let prod = tape.cmul(&p, &zero).unwrap();
    let r = tape.re_part(&prod).unwrap();
    let loss = tape.sum_all(&r).unwrap();
    let grads = tape.backward(&loss).unwrap();
    let mut opt = AdamW::<f64>::new(1e-3, 0.0, None);
    opt.step(&mut m, &grads);
    assert_eq!(m.p.value.re_scalar().unwrap(), 0.7);
    assert_eq!(*m.p.value.im().iter().next().unwrap(), -0.4);
}

#[test]
fn adamw_skips_non_finite_gradients() {
    let mut m = OneParam { p: crate::layers::Param::complex(ComplexTensor::scalar(1.0, 0.0)) };
    crate::layers::index_params(&mut m);
    let mut tape = Tape::new();
    let p = tape.param(&m.p);
    let huge = ComplexTensor::scalar(f64::INFINITY, 0.0);
    let prod = tape.cmul(&p, &huge).unwrap();
    let r = tape.re_part(&prod).unwrap();
    let loss = tape.sum_all(&r).unwrap();
    let grads = tape.backward(&loss).unwrap();
    let mut opt = AdamW::<f64>::new(1e-3, 0.01, None);
    opt.step(&mut m, &grads);
    assert_eq!(opt.skipped, 1);
    assert_eq!(m.p.value.re_scalar().unwrap(), 1.0, "step skipped, parameter untouched");
}

#[test]
fn adamw_runs_are_bitwise_reproducible() {
    let run = || -> Vec<f32> {
        let cfg = D2FormerConfig::gradcheck_dims();
        let mut model = crate::model::D2Former::<f32>::new(&cfg, 42).unwrap();
        let mut opt = AdamW::<f32>::new(1e-3, 0.01, Some(5.0));
        let noisy = noise_wave(40, 1);
        let clean = noise_wave(40, 2);
        for _ in 0..10 {
            let mut tape = Tape::new();
            let loss = batch_loss(&mut tape, &model, &[(&noisy, &clean)], &LossWeights::paper(), None).unwrap();
            let grads = tape.backward(&loss).unwrap();
            opt.step(&mut model, &grads);
        }
        let mut out = Vec::new();
        model.visit_params("", &mut |_, p| {
            out.extend(p.value.re().iter().map(|&v| v));
            out.extend(p.value.im().iter().map(|&v| v));
        });
        out
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "bitwise identical");
}

// -- LR schedule -----------------------------------------------------------

#[test]
fn lr_holds_then_halves_on_plateau() {
    let mut sched = LrSchedule::paper();
    // improving losses through the hold period
    let mut lr = sched.initial;
    for epoch in 0..30 {
        lr = sched.end_epoch(epoch, 10.0 - epoch as f64 * 0.1);
        if epoch == 10 {
            assert_eq!(lr, 5e-4, "epoch 10 still holds the initial rate");
        }
    }
    assert_eq!(lr, 5e-4);
    // epochs 30 and 31 fail to improve -> halved for epoch 32
    let lr = sched.end_epoch(30, 100.0);
    assert_eq!(lr, 5e-4, "patience covers one bad epoch");
    let lr = sched.end_epoch(31, 100.0);
    assert_eq!(lr, 2.5e-4, "second consecutive plateau halves the rate");
}

#[test]
fn lr_never_decays_while_improving() {
    let mut sched = LrSchedule::paper();
    let mut lr = sched.initial;
    for epoch in 0..200 {
        lr = sched.end_epoch(epoch, 1000.0 - epoch as f64);
    }
    assert_eq!(lr, 5e-4);
}

#[test]
fn lr_sequence_is_non_increasing_powers_of_two() {
    let mut sched = LrSchedule::paper();
    let mut rng = StdRng::seed_from_u64(9);
    let mut prev = sched.initial;
    for epoch in 0..300 {
        let lr = sched.end_epoch(epoch, rng.gen_range(0.0..1.0));
        assert!(lr <= prev);
        let k = (5e-4 / lr).log2().round();
        assert!((lr * 2f64.powf(k) - 5e-4).abs() < 1e-18, "lr {lr} is 5e-4 / 2^k");
        prev = lr;
    }
}

// -- datasets ----------------------------------------------------------------

#[test]
fn paired_dataset_loads_and_reports_missing_partners() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("clean")).unwrap();
    std::fs::create_dir_all(dir.path().join("noisy")).unwrap();
    for stem in ["a", "b"] {
        write_wav(dir.path().join("clean").join(format!("{stem}.wav")), &sine_wave(300.0, 4000, 0.5)).unwrap();
        write_wav(dir.path().join("noisy").join(format!("{stem}.wav")), &noise_wave(4000, 3)).unwrap();
    }
    let ds = Dataset::from_paired_dir(dir.path()).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.items[0].stem, "a");

    write_wav(dir.path().join("clean").join("orphan.wav"), &sine_wave(200.0, 4000, 0.5)).unwrap();
    match Dataset::from_paired_dir(dir.path()) {
        Err(crate::Error::Contract(msg)) => assert!(msg.contains("orphan")),
        other => panic!("expected contract error, got {:?}", other.err()),
    }
}

#[test]
fn synthetic_dataset_mixes_at_grid_snrs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("clean")).unwrap();
    std::fs::create_dir_all(dir.path().join("noise")).unwrap();
    for (i, f) in [220.0, 330.0, 440.0].iter().enumerate() {
        write_wav(dir.path().join("clean").join(format!("c{i}.wav")), &sine_wave(*f, 8000, 0.4)).unwrap();
    }
    write_wav(dir.path().join("noise").join("n.wav"), &noise_wave(8000, 5)).unwrap();
    let spec = DatasetSpec { snr_grid: vec![5.0], ..DatasetSpec::default() };
    let ds = Dataset::from_synthetic(&dir.path().join("clean"), &dir.path().join("noise"), &spec, 7).unwrap();
    assert_eq!(ds.len(), 3);
    for item in &ds.items {
        let diff: Vec<f32> = item.noisy.samples.iter().zip(&item.clean.samples).map(|(n, c)| n - c).collect();
        let got = crate::signal::component_snr_db(&item.clean, &diff);
        assert!((got - 5.0).abs() <= 0.01, "{got}");
    }
}

#[test]
fn holdout_split_rules() {
    let mk = |n: usize| Dataset {
        items: (0..n)
            .map(|i| DataItem {
                stem: format!("{i}"),
                clean: sine_wave(300.0, 100, 0.5),
                noisy: noise_wave(100, i as u64),
            })
            .collect(),
    };
    let (tr, va) = mk(3).holdout_split();
    assert_eq!((tr.len(), va.len()), (3, 0), "tiny sets keep everything for training");
    let (tr, va) = mk(10).holdout_split();
    assert_eq!((tr.len(), va.len()), (9, 1));
    let (tr, va) = mk(40).holdout_split();
    assert_eq!((tr.len(), va.len()), (36, 4));
}

// -- training loop -------------------------------------------------------------

fn tiny_training_dataset() -> Dataset {
    // short tonal items + white noise at 5 dB
    let items = [440.0, 660.0, 880.0]
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let clean = sine_wave(f, 8000, 0.4);
            let noise = noise_wave(8000, 100 + i as u64);
            let (noisy, clean) = crate::signal::synth_mixture(&clean, &noise, 5.0).unwrap();
            DataItem { stem: format!("t{i}"), clean, noisy }
        })
        .collect();
    Dataset { items }
}

#[test]
fn training_loss_decreases_over_50_steps() {
    let data = tiny_training_dataset();
    let cfg = D2FormerConfig::toy();
    let mut model = crate::model::D2Former::<f32>::new(&cfg, 0).unwrap();
    let settings = TrainSettings {
        lr: 2e-3,
        batch: 2,
        segment_seconds: 0.5,
        seed: 0,
        ..TrainSettings::default()
    };
    let weights = LossWeights::paper();
    let mut opt = AdamW::<f32>::new(settings.lr, settings.weight_decay, settings.clip_norm);
    let mut rng = StdRng::seed_from_u64(settings.seed);
    let idx: Vec<usize> = (0..data.len()).collect();
    let segment = (settings.segment_seconds * 16000.0) as usize;
    let mut losses = Vec::new();
    for _ in 0..50 {
        let batch = data.sample_batch(&mut rng, settings.batch, segment);
        let refs: Vec<(&Waveform, &Waveform)> = batch.iter().map(|(n, c)| (n, c)).collect();
        let mut tape = Tape::new();
        let (loss, terms) = batch_loss_terms(&mut tape, &model, &refs, &weights, None).unwrap();
        let grads = tape.backward(&loss).unwrap();
        opt.step(&mut model, &grads);
        losses.push(terms.total);
    }
    let _ = idx;
    let window = |r: std::ops::Range<usize>| losses[r].iter().sum::<f64>() / 10.0;
    let first = window(0..10);
    let mid = window(20..30);
    let last = window(40..50);
    assert!(mid < first, "mid {mid} vs first {first}");
    assert!(last < mid, "last {last} vs mid {mid}");
    assert_eq!(opt.skipped, 0);
}

#[test]
fn train_epoch_traces_are_seed_reproducible() {
    let data = tiny_training_dataset();
    let cfg = D2FormerConfig::toy();
    let weights = LossWeights::paper();
    let settings = TrainSettings { lr: 1e-3, segment_seconds: 0.5, ..TrainSettings::default() };
    let run = || -> (Vec<u8>, f64) {
        let mut model = crate::model::D2Former::<f32>::new(&cfg, 11).unwrap();
        let mut opt = AdamW::<f32>::new(settings.lr, settings.weight_decay, settings.clip_norm);
        let mut rng = StdRng::seed_from_u64(5);
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut log = Vec::new();
        let stats = train_epoch(&mut model, &data, &idx, &mut opt, &weights, &settings, &mut rng, 0, Some(&mut log))
            .unwrap();
        (log, stats.mean_loss)
    };
    let (log_a, loss_a) = run();
    let (log_b, loss_b) = run();
    assert_eq!(log_a, log_b, "identical seed, identical trace");
    assert_eq!(loss_a.to_bits(), loss_b.to_bits());
    let text = String::from_utf8(log_a).unwrap();
    assert!(text.lines().all(|l| l.contains("loss=") && l.contains("lr=")), "key=value log lines");
}

#[test]
fn eval_loss_runs_on_whole_items() {
    let data = tiny_training_dataset();
    let cfg = D2FormerConfig::toy();
    let model = crate::model::D2Former::<f32>::new(&cfg, 12).unwrap();
    let v = eval_loss(&model, &data, &[0, 1], &LossWeights::paper()).unwrap();
    assert!(v.is_finite() && v > 0.0);
}

// -- SI-SNR -------------------------------------------------------------------

#[test]
fn si_snr_perfect_and_scaled_hit_the_cap() {
    let r = sine_wave(440.0, 8000, 0.5);
    assert_eq!(si_snr(&r, &r).unwrap(), 60.0);
    let half = Waveform::new(r.samples.iter().map(|v| v * 0.5).collect(), MODEL_SAMPLE_RATE);
    assert_eq!(si_snr(&r, &half).unwrap(), 60.0, "scale invariance");
    let double = Waveform::new(r.samples.iter().map(|v| v * 2.0).collect(), MODEL_SAMPLE_RATE);
    assert_eq!(si_snr(&r, &double).unwrap(), 60.0);
}

#[test]
fn si_snr_matches_orthogonal_construction_oracle() {
    // est = ref + e with e orthogonal to ref at a 10 dB power ratio
    let len = 16_000usize;
    let r = sine_wave(440.0, len, 0.5);
    let mut rng = StdRng::seed_from_u64(13);
    let raw: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let rs: Vec<f64> = r.samples.iter().map(|&v| v as f64).collect();
    let mean_r = rs.iter().sum::<f64>() / len as f64;
    let rz: Vec<f64> = rs.iter().map(|v| v - mean_r).collect();
    let dot: f64 = raw.iter().zip(&rz).map(|(a, b)| a * b).sum();
    let rr: f64 = rz.iter().map(|v| v * v).sum();
    let mut e: Vec<f64> = raw.iter().zip(&rz).map(|(a, b)| a - dot / rr * b).collect();
    let me = e.iter().sum::<f64>() / len as f64;
    for v in &mut e {
        *v -= me; // zero-mean, still orthogonal to rz up to the mean shift
    }
    let dot2: f64 = e.iter().zip(&rz).map(|(a, b)| a * b).sum();
    let rr2: f64 = rz.iter().map(|v| v * v).sum();
    for (v, b) in e.iter_mut().zip(&rz) {
        *v -= dot2 / rr2 * b;
    }
    let pe: f64 = e.iter().map(|v| v * v).sum();
    let target = rr / pe / 10.0; // want Pr/Pe = 10 dB
    let g = target.sqrt();
    let est = Waveform::new(
        rz.iter().zip(&e).map(|(a, b)| (a + g * b) as f32).collect(),
        MODEL_SAMPLE_RATE,
    );
    let refz = Waveform::new(rz.iter().map(|&v| v as f32).collect(), MODEL_SAMPLE_RATE);
    let got = si_snr(&refz, &est).unwrap();
    assert!((got - 10.0).abs() <= 0.1, "{got}");
}

#[test]
fn si_snr_contract_errors() {
    let r = sine_wave(440.0, 1000, 0.5);
    let silent = Waveform::new(vec![0.0; 1000], MODEL_SAMPLE_RATE);
    assert!(matches!(si_snr(&silent, &r), Err(crate::Error::Contract(_))));
    let short = sine_wave(440.0, 999, 0.5);
    assert!(matches!(si_snr(&r, &short), Err(crate::Error::Contract(_))));
}

#[test]
fn batch_loss_masks_padded_items() {
    let cfg = D2FormerConfig::toy();
    let model = crate::model::D2Former::<f32>::new(&cfg, 14).unwrap();
    let w = LossWeights::paper();
    let long_n = noise_wave(4000, 20);
    let long_c = noise_wave(4000, 21);
    let short_n = noise_wave(2500, 22);
    let short_c = noise_wave(2500, 23);
    let mut tape = Tape::no_grad();
    let (_, mixed) = batch_loss_terms(&mut tape, &model, &[(&long_n, &long_c), (&short_n, &short_c)], &w, None).unwrap();
    assert!(mixed.total.is_finite() && mixed.total > 0.0);
}
