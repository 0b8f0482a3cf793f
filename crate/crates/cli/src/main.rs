//! Command-line entry point: training, enhancement, gradient
//! verification, mixture synthesis, model inspection, spectrogram dumps.
//!
//! Exit codes: 0 success, 1 verification failure, 2 input/config error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use d2former::config::{self, DataMode, FullConfig};
use d2former::model::{checkpoint_info, count_params, load_checkpoint, save_checkpoint, D2Former, PARAM_BAND};
use d2former::signal::{read_wav, resample_to_16k, stft, synth_mixture, write_wav, Waveform};
use d2former::training::{eval_loss, train_epoch, AdamW, Dataset, DatasetSpec, LrSchedule};
use d2former::{Error, Result};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Parser)]
#[command(name = "d2former", version, about = "Complex dual-path dual-decoder conformer for speech enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory (clean/+noisy/ pairs, or
    /// clean/+noise/ for on-the-fly mixtures).
    Train(TrainArgs),
    /// Enhance a WAV file with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Run the finite-difference gradient verification suite (64-bit).
    Gradcheck(GradcheckArgs),
    /// Print parameter counts and configuration.
    Info(InfoArgs),
    /// Synthesize paired clean/noisy WAVs over an SNR grid.
    Synth(SynthArgs),
    /// Dump a WAV's complex spectrogram as CSV rows `frame,bin,re,im`.
    DumpSpec(DumpSpecArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Key=value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output checkpoint path (metrics log lands next to it as .log).
    #[arg(long)]
    out: PathBuf,
    /// Override the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Input WAV (any rate; processed at 16 kHz).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output WAV.
    #[arg(long = "out")]
    output: PathBuf,
    /// Override the masking-path fusion weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Override the spectral-path fusion weight.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model dims for the end-to-end check (only `toy` is defined).
    #[arg(long, default_value = "toy")]
    dims: String,
    /// Working precision in bits; finite differences need 64.
    #[arg(long, default_value_t = 64)]
    precision: u32,
    /// Include a deliberately corrupted backward rule, which must be
    /// detected (exit 1 naming it).
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct InfoArgs {
    /// Inspect a checkpoint.
    #[arg(long, conflicts_with = "config")]
    model: Option<PathBuf>,
    /// Inspect a configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of clean WAVs.
    #[arg(long)]
    clean: PathBuf,
    /// Directory of noise WAVs.
    #[arg(long)]
    noise: PathBuf,
    /// Output directory (clean/, noisy/, manifest.txt).
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated SNR grid in dB, e.g. "0,5,10,15".
    #[arg(long)]
    snr: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DumpSpecArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Info(a) => cmd_info(a),
        Command::Synth(a) => cmd_synth(a),
        Command::DumpSpec(a) => cmd_dump_spec(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &Path) -> Result<FullConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    config::full_config_from_text(&text)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&a.config)?;
    if let Some(epochs) = a.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.train.seed = a.seed;
    if !a.data.is_dir() {
        return Err(Error::Contract(format!("dataset directory {} does not exist", a.data.display())));
    }
    let spec = DatasetSpec {
        snr_grid: cfg.snr_grid.clone(),
        segment_seconds: cfg.train.segment_seconds,
        ..DatasetSpec::default()
    };
    let data = match cfg.data_mode {
        DataMode::Auto => Dataset::auto(&a.data, &spec, a.seed)?,
        DataMode::Paired => Dataset::from_paired_dir(&a.data)?,
        DataMode::Synthetic => {
            Dataset::from_synthetic(&a.data.join("clean"), &a.data.join("noise"), &spec, a.seed)?
        }
    };
    println!("dataset: {} items", data.len());

    let mut model = D2Former::<f32>::new(&cfg.model, a.seed)?;
    let (total, _) = count_params(&cfg.model)?;
    println!("model: {total} trainable scalars");

    let mut opt = AdamW::<f32>::new(cfg.train.lr, cfg.train.weight_decay, cfg.train.clip_norm);
    let mut sched = LrSchedule::new(
        cfg.train.lr,
        cfg.train.hold_epochs,
        cfg.train.decay_factor,
        cfg.train.patience,
    );
    let (train_idx, val_idx) = data.holdout_split();
    let mut rng = StdRng::seed_from_u64(a.seed);
    let log_path = a.out.with_extension("log");
    let mut log = fs::File::create(&log_path)?;

    for epoch in 0..cfg.train.epochs {
        let stats = train_epoch(
            &mut model,
            &data,
            &train_idx,
            &mut opt,
            &cfg.loss,
            &cfg.train,
            &mut rng,
            epoch,
            Some(&mut log),
        )?;
        let monitored = if val_idx.is_empty() {
            stats.mean_loss
        } else {
            eval_loss(&model, &data, &val_idx, &cfg.loss)?
        };
        let lr = sched.end_epoch(epoch, monitored);
        opt.lr = lr as f32;
        writeln!(
            log,
            "epoch={epoch} summary=1 mean_loss={:.6} val_loss={:.6} grad_norm={:.6} skipped={} lr={:.6e}",
            stats.mean_loss, monitored, stats.mean_grad_norm, stats.skipped_steps, lr
        )?;
        println!(
            "epoch {epoch}: loss {:.5} (val {:.5}) lr {:.2e} skipped {}",
            stats.mean_loss, monitored, lr, stats.skipped_steps
        );
    }
    save_checkpoint(&mut model, &a.out)?;
    println!("checkpoint written to {}", a.out.display());
    println!("metrics log written to {}", log_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_enhance(a: EnhanceArgs) -> Result<ExitCode> {
    let model = load_checkpoint::<f32>(&a.model)?;
    let input = read_wav(&a.input)?; // 16 kHz mono after reading
    let alpha = a.alpha.unwrap_or(model.cfg.alpha);
    let beta = a.beta.unwrap_or(model.cfg.beta);
    let enhanced = model.forward_with_fusion(&input, alpha, beta)?;
    write_wav(&a.output, &enhanced)?;
    println!(
        "enhanced {} -> {} (alpha {alpha}, beta {beta}, {} samples)",
        a.input.display(),
        a.output.display(),
        enhanced.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if a.precision != 64 {
        return Err(Error::Config(format!(
            "precision {} is not supported: finite differences are only reliable in 64-bit",
            a.precision
        )));
    }
    if a.dims != "toy" {
        return Err(Error::Config(format!("unknown dims preset '{}'", a.dims)));
    }
    let tol = 1e-4;
    let reports = d2former::verify::run_suite(a.inject_fault)?;
    let mut offenders = Vec::new();
    for r in &reports {
        let expected_bad = r.component.starts_with("fixture.");
        let pass = r.max_rel_err <= tol;
        let verdict = match (pass, expected_bad) {
            (true, false) => "PASS",
            (false, true) => "DETECTED",
            (true, true) => "MISSED",
            (false, false) => "FAIL",
        };
        println!("{verdict:8} {:<34} max rel err {:.3e}", r.component, r.max_rel_err);
        if pass == expected_bad {
            offenders.push(r.component.clone());
        }
    }
    if offenders.is_empty() {
        println!("gradcheck: all {} components within {tol:.0e}", reports.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck: offending components: {}", offenders.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn cmd_info(a: InfoArgs) -> Result<ExitCode> {
    let cfg = match (&a.model, &a.config) {
        (Some(ckpt), None) => {
            let info = checkpoint_info(ckpt)?;
            println!("checkpoint: {}", ckpt.display());
            println!("tensors: {}", info.tensors.len());
            info.config
        }
        (None, Some(path)) => load_config(path)?.model,
        _ => return Err(Error::Config("pass exactly one of --model or --config".into())),
    };
    let (total, by_module) = count_params(&cfg)?;
    println!("config:");
    for line in config::model_section_text(&cfg).lines() {
        println!("  {line}");
    }
    println!("parameters: {total}");
    for (module, n) in &by_module {
        println!("  {module:<20} {n}");
    }
    let in_band = (PARAM_BAND.0..=PARAM_BAND.1).contains(&total);
    println!("budget: in_band={in_band} (band {} ..= {})", PARAM_BAND.0, PARAM_BAND.1);
    Ok(ExitCode::SUCCESS)
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Contract(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("wav"))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Contract(format!("no .wav files under {}", dir.display())));
    }
    Ok(out)
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let snrs: Vec<f64> = a
        .snr
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad SNR value '{s}'"))))
        .collect::<Result<_>>()?;
    if snrs.is_empty() {
        return Err(Error::Config("empty SNR list".into()));
    }
    let clean_files = wav_files(&a.clean)?;
    let noises: Vec<Waveform> = wav_files(&a.noise)?.iter().map(read_wav).collect::<Result<_>>()?;
    fs::create_dir_all(a.out.join("clean"))?;
    fs::create_dir_all(a.out.join("noisy"))?;
    let mut manifest = fs::File::create(a.out.join("manifest.txt"))?;
    let mut rng = StdRng::seed_from_u64(a.seed);
    let mut pairs = 0usize;
    for cpath in &clean_files {
        let clean = read_wav(cpath)?;
        let stem = cpath.file_stem().and_then(|s| s.to_str()).unwrap_or("clip");
        for &snr in &snrs {
            let noise = &noises[rng.gen_range(0..noises.len())];
            let (noisy, clean_out) = synth_mixture(&clean, noise, snr)?;
            let diff: Vec<f32> = noisy.samples.iter().zip(&clean_out.samples).map(|(n, c)| n - c).collect();
            let achieved = d2former::signal::component_snr_db(&clean_out, &diff);
            let name = format!("{stem}_snr{snr}db.wav");
            write_wav(a.out.join("clean").join(&name), &clean_out)?;
            write_wav(a.out.join("noisy").join(&name), &noisy)?;
            writeln!(manifest, "stem={stem} file={name} requested_db={snr} achieved_db={achieved:.4}")?;
            pairs += 1;
        }
    }
    println!("wrote {pairs} pairs under {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_dump_spec(a: DumpSpecArgs) -> Result<ExitCode> {
    let w = read_wav(&a.input)?;
    let w = resample_to_16k(w);
    let cfg = d2former::signal::StftConfig::speech_16k();
    let spec = stft::<f32>(&w, &cfg)?;
    let mut out = String::with_capacity(spec.frames() * spec.bins() * 24);
    let re = spec.data.re();
    let im = spec.data.im();
    for t in 0..spec.frames() {
        for k in 0..spec.bins() {
            out.push_str(&format!("{t},{k},{:e},{:e}\n", re[[t, k]], im[[t, k]]));
        }
    }
    fs::write(&a.output, out)?;
    println!(
        "wrote {} rows ({} frames x {} bins) to {}",
        spec.frames() * spec.bins(),
        spec.frames(),
        spec.bins(),
        a.output.display()
    );
    Ok(ExitCode::SUCCESS)
}
