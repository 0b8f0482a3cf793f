//! End-to-end CLI contract tests: exit codes, determinism, file formats.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use d2former::signal::{read_wav, write_wav, Waveform, MODEL_SAMPLE_RATE};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_d2former")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn sine(freq: f64, len: usize, amp: f32) -> Waveform {
    Waveform::new(
        (0..len)
            .map(|n| amp * (2.0 * std::f64::consts::PI * freq * n as f64 / 16000.0).sin() as f32)
            .collect(),
        MODEL_SAMPLE_RATE,
    )
}

fn noise(len: usize, seed: u64) -> Waveform {
    use rand::{Rng, SeedableRng};
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.gen_range(-0.4f32..0.4)).collect(), MODEL_SAMPLE_RATE)
}

/// Minimal mini-model config (tiny grid; fast to train in tests).
fn mini_config(dir: &Path) -> PathBuf {
    let path = dir.join("mini.cfg");
    fs::write(
        &path,
        "model.channels = 4\n\
         model.blocks = 1\n\
         model.dilations = 1,2\n\
         model.cfsmn_before = 2\n\
         model.cfsmn_after = 2\n\
         model.conv_kernel = 3\n\
         model.ffn_mult = 2\n\
         stft.window_len = 64\n\
         stft.hop = 32\n\
         stft.fft_size = 64\n\
         train.lr = 0.001\n\
         train.batch = 2\n\
         train.epochs = 2\n\
         data.segment_seconds = 0.1\n",
    )
    .unwrap();
    path
}

fn write_dataset(dir: &Path, n_items: usize, len: usize) {
    fs::create_dir_all(dir.join("clean")).unwrap();
    fs::create_dir_all(dir.join("noisy")).unwrap();
    for i in 0..n_items {
        let clean = sine(300.0 + 100.0 * i as f64, len, 0.4);
        let noisy = Waveform::new(
            clean
                .samples
                .iter()
                .zip(noise(len, i as u64).samples.iter())
                .map(|(c, n)| c + n)
                .collect(),
            MODEL_SAMPLE_RATE,
        );
        write_wav(dir.join("clean").join(format!("item{i}.wav")), &clean).unwrap();
        write_wav(dir.join("noisy").join(format!("item{i}.wav")), &noisy).unwrap();
    }
}

#[test]
fn missing_dataset_dir_exits_2_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = mini_config(tmp.path());
    let out = run(&[
        "train",
        "--data",
        "/nonexistent/dataset",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("m.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/dataset"), "{err}");
}

#[test]
fn unknown_config_key_exits_2_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "model.chanels = 8\n").unwrap();
    let out = run(&["info", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.chanels"));
}

#[test]
fn train_writes_checkpoint_and_log_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data, 3, 2400);
    let cfg = mini_config(tmp.path());
    let run_once = |name: &str| -> (Vec<u8>, Vec<u8>) {
        let ckpt = tmp.path().join(name);
        let out = run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--seed",
            "7",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        (
            fs::read(&ckpt).unwrap(),
            fs::read(ckpt.with_extension("log")).unwrap(),
        )
    };
    let (ckpt_a, log_a) = run_once("a.ckpt");
    let (ckpt_b, log_b) = run_once("b.ckpt");
    assert_eq!(ckpt_a, ckpt_b, "same seed, byte-identical checkpoints");
    assert_eq!(log_a, log_b, "same seed, identical loss traces");
    let text = String::from_utf8(log_a).unwrap();
    assert!(text.lines().any(|l| l.contains("loss=") && l.contains("lr=")));
}

#[test]
fn enhance_preserves_length_and_fusion_weights_matter() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data, 2, 2400);
    let cfg = mini_config(tmp.path());
    let ckpt = tmp.path().join("m.ckpt");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--epochs",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let input = tmp.path().join("in.wav");
    let mixed = Waveform::new(
        sine(300.0, 3000, 0.4)
            .samples
            .iter()
            .zip(noise(3000, 9).samples.iter())
            .map(|(c, n)| c + n)
            .collect(),
        MODEL_SAMPLE_RATE,
    );
    write_wav(&input, &mixed).unwrap();

    let enhance = |name: &str, extra: &[&str]| -> Waveform {
        let outp = tmp.path().join(name);
        let mut args = vec![
            "enhance",
            "--model",
            ckpt.to_str().unwrap(),
            "--in",
            input.to_str().unwrap(),
            "--out",
            outp.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        let out = run(&args);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        read_wav(&outp).unwrap()
    };
    let masked = enhance("mask.wav", &["--alpha", "1", "--beta", "0"]);
    let mapped = enhance("map.wav", &["--alpha", "0", "--beta", "1"]);
    assert_eq!(masked.len(), 3000, "output duration equals input duration");
    assert_eq!(mapped.len(), 3000);
    let l2: f64 = masked
        .samples
        .iter()
        .zip(&mapped.samples)
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum();
    assert!(l2 > 0.0, "the two decoder paths must differ on a trained model");
}

#[test]
fn enhancing_silence_stays_near_silent() {
    let tmp = tempfile::tempdir().unwrap();
    // fresh (untrained) model: zero-initialized biases keep the bias path flat
    let cfg = mini_config(tmp.path());
    let data = tmp.path().join("data");
    write_dataset(&data, 2, 2400);
    let ckpt = tmp.path().join("m.ckpt");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let input = tmp.path().join("silence.wav");
    write_wav(&input, &Waveform::new(vec![0.0; 2000], MODEL_SAMPLE_RATE)).unwrap();
    let outp = tmp.path().join("still.wav");
    let out = run(&[
        "enhance",
        "--model",
        ckpt.to_str().unwrap(),
        "--in",
        input.to_str().unwrap(),
        "--out",
        outp.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let w = read_wav(&outp).unwrap();
    assert!(w.rms() <= 1e-3, "rms {}", w.rms());
}

#[test]
fn gradcheck_detects_an_injected_fault_and_names_it() {
    let out = run(&["gradcheck", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("fixture.bad_backward"), "{text}");
    assert!(text.contains("offending components"), "{text}");
}

#[test]
fn gradcheck_rejects_unsupported_precision() {
    let out = run(&["gradcheck", "--precision", "32"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn info_flags_full_config_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("full.cfg");
    fs::write(&cfg, "# paper defaults\n").unwrap();
    let out = run(&["info", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("in_band=true"), "{text}");

    // toy-scale config: small count, outside the paper band
    let cfg2 = tmp.path().join("toy.cfg");
    fs::write(&cfg2, "model.channels = 4\nmodel.blocks = 1\n").unwrap();
    let out = run(&["info", "--config", cfg2.to_str().unwrap()]);
    let text = String::from_utf8_lossy(&out.stdout);
    let count: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("parameters: "))
        .and_then(|v| v.trim().parse().ok())
        .expect("parameter count line");
    assert!(count < 50_000, "toy config should be small, got {count}");
    assert!(text.contains("in_band=false"));
}

#[test]
fn info_on_checkpoint_matches_info_on_its_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&data, 2, 2400);
    let cfg = mini_config(tmp.path());
    let ckpt = tmp.path().join("m.ckpt");
    let out = run(&[
        "train", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
        "--out", ckpt.to_str().unwrap(), "--epochs", "1",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let count_of = |args: &[&str]| -> usize {
        let out = run(args);
        assert_eq!(out.status.code(), Some(0));
        String::from_utf8_lossy(&out.stdout)
            .lines()
            .find_map(|l| l.strip_prefix("parameters: "))
            .and_then(|v| v.trim().parse().ok())
            .expect("parameter count line")
    };
    let from_ckpt = count_of(&["info", "--model", ckpt.to_str().unwrap()]);
    let from_cfg = count_of(&["info", "--config", cfg.to_str().unwrap()]);
    assert_eq!(from_ckpt, from_cfg);
}

#[test]
fn synth_emits_pairs_per_snr_with_accurate_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let clean_dir = tmp.path().join("clean_src");
    let noise_dir = tmp.path().join("noise_src");
    fs::create_dir_all(&clean_dir).unwrap();
    fs::create_dir_all(&noise_dir).unwrap();
    write_wav(clean_dir.join("a.wav"), &sine(300.0, 8000, 0.4)).unwrap();
    write_wav(clean_dir.join("b.wav"), &sine(500.0, 8000, 0.4)).unwrap();
    write_wav(noise_dir.join("n.wav"), &noise(8000, 3)).unwrap();
    let out_dir = tmp.path().join("mix");
    let args = [
        "synth",
        "--clean",
        clean_dir.to_str().unwrap(),
        "--noise",
        noise_dir.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--snr",
        "0,5,10,15",
        "--seed",
        "3",
    ];
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let count = fs::read_dir(out_dir.join("noisy")).unwrap().count();
    assert_eq!(count, 8, "4 SNR variants per clean file");
    let manifest = fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 8);
    for line in manifest.lines() {
        let requested: f64 = line
            .split_whitespace()
            .find_map(|f| f.strip_prefix("requested_db="))
            .unwrap()
            .parse()
            .unwrap();
        let achieved: f64 = line
            .split_whitespace()
            .find_map(|f| f.strip_prefix("achieved_db="))
            .unwrap()
            .parse()
            .unwrap();
        assert!((requested - achieved).abs() <= 0.01, "{line}");
    }
    // determinism
    let out2_dir = tmp.path().join("mix2");
    let mut args2: Vec<&str> = args.to_vec();
    args2[6] = out2_dir.to_str().unwrap();
    let out2 = run(&args2);
    assert_eq!(out2.status.code(), Some(0));
    assert_eq!(
        fs::read(out_dir.join("noisy").join("a_snr5db.wav")).unwrap(),
        fs::read(out2_dir.join("noisy").join("a_snr5db.wav")).unwrap()
    );
}

#[test]
fn synth_empty_source_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = run(&[
        "synth",
        "--clean",
        empty.to_str().unwrap(),
        "--noise",
        empty.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
        "--snr",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dump_spec_round_trips_through_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let wav = tmp.path().join("t.wav");
    let w = sine(440.0, 1600, 0.5);
    write_wav(&wav, &w).unwrap();
    let csv = tmp.path().join("t.csv");
    let out = run(&["dump-spec", "--in", wav.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(&csv).unwrap();
    let cfg = d2former::signal::StftConfig::speech_16k();
    let spec = d2former::signal::stft::<f32>(&read_wav(&wav).unwrap(), &cfg).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), spec.frames() * spec.bins(), "row count = T * F");
    for line in rows.iter().step_by(997) {
        let parts: Vec<&str> = line.split(',').collect();
        let (t, k): (usize, usize) = (parts[0].parse().unwrap(), parts[1].parse().unwrap());
        let re: f32 = parts[2].parse().unwrap();
        let im: f32 = parts[3].parse().unwrap();
        assert!((re - spec.data.re()[[t, k]]).abs() <= 1e-5_f32.max(re.abs() * 1e-5));
        assert!((im - spec.data.im()[[t, k]]).abs() <= 1e-5_f32.max(im.abs() * 1e-5));
    }

    // all-zero input dumps all-zero values
    let zwav = tmp.path().join("z.wav");
    write_wav(&zwav, &Waveform::new(vec![0.0; 800], MODEL_SAMPLE_RATE)).unwrap();
    let zcsv = tmp.path().join("z.csv");
    let out = run(&["dump-spec", "--in", zwav.to_str().unwrap(), "--out", zcsv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    for line in fs::read_to_string(&zcsv).unwrap().lines() {
        let parts: Vec<&str> = line.split(',').collect();
        assert_eq!(parts[2].parse::<f32>().unwrap(), 0.0);
        assert_eq!(parts[3].parse::<f32>().unwrap(), 0.0);
    }

    let out = run(&["dump-spec", "--in", "/nope.wav", "--out", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
