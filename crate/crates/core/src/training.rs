//! Loss computation, AdamW, reduce-on-plateau LR scheduling, dataset
//! ingestion/synthesis, the training loop, and SI-SNR evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::ctensor::{ComplexTensor, Grads, Real, Tape};
use crate::error::{Error, Result};
use crate::layers::Parameterized;
use crate::model::D2Former;
use crate::signal::{read_wav, stft, synth_mixture, Waveform, MODEL_SAMPLE_RATE};

/// Loss weighting: `L = L_TF + gamma1 L_Time + gamma2 L_QNet`, with
/// `L_TF = MSE(|S|^P, |S_hat|^P) + gamma3 [MSE(S_R, S_hat_R) + MSE(S_I, S_hat_I)]`.
/// The QNet term is a pluggable hook, disabled by default.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub p: f64,
}

impl LossWeights {
    pub fn paper() -> Self {
        Self { gamma1: 0.2, gamma2: 0.05, gamma3: 0.1, p: 0.3 }
    }
}

/// Optional quality-net hook receiving the compressed magnitudes
/// `(|S|^P, |S_hat|^P)` and returning a scalar loss on the tape.
pub type QnetHook<T> =
    dyn Fn(&mut Tape<T>, &ComplexTensor<T>, &ComplexTensor<T>) -> Result<ComplexTensor<T>>;

fn mse_real<T: Real>(
    tape: &mut Tape<T>,
    a: &ComplexTensor<T>,
    b: &ComplexTensor<T>,
) -> Result<ComplexTensor<T>> {
    let d = tape.sub(a, b)?;
    let sq = tape.cmul(&d, &d)?;
    tape.mean_all(&sq)
}

/// TF-domain loss of Eq-style compressed magnitudes plus plane MSEs.
/// `s_ref` may be an untracked constant.
pub fn loss_tf<T: Real>(
    tape: &mut Tape<T>,
    s_ref: &ComplexTensor<T>,
    s_hat: &ComplexTensor<T>,
    w: &LossWeights,
) -> Result<ComplexTensor<T>> {
    if s_ref.shape() != s_hat.shape() {
        return Err(Error::dim("loss_tf", format!("{:?} vs {:?}", s_ref.shape(), s_hat.shape())));
    }
    let p = T::from_f64(w.p);
    let mag_ref = tape.magnitude(s_ref)?;
    let comp_ref = tape.pow_re(&mag_ref, p)?;
    let mag_hat = tape.magnitude(s_hat)?;
    let comp_hat = tape.pow_re(&mag_hat, p)?;
    let mag_term = mse_real(tape, &comp_hat, &comp_ref)?;

    let d = tape.sub(s_hat, s_ref)?;
    let dr = tape.re_part(&d)?;
    let di = tape.im_part(&d)?;
    let r2 = tape.cmul(&dr, &dr)?;
    let i2 = tape.cmul(&di, &di)?;
    let mr = tape.mean_all(&r2)?;
    let mi = tape.mean_all(&i2)?;
    let planes = tape.add(&mr, &mi)?;
    let planes = tape.scale(&planes, T::from_f64(w.gamma3))?;
    tape.add(&mag_term, &planes)
}

/// Time-domain loss: mean absolute error over samples.
pub fn loss_time<T: Real>(
    tape: &mut Tape<T>,
    s_ref: &ComplexTensor<T>,
    s_hat: &ComplexTensor<T>,
) -> Result<ComplexTensor<T>> {
    if s_ref.shape() != s_hat.shape() {
        return Err(Error::Contract(format!(
            "loss_time: length mismatch {:?} vs {:?}",
            s_ref.shape(),
            s_hat.shape()
        )));
    }
    let d = tape.sub(s_hat, s_ref)?;
    let a = tape.abs_re(&d)?;
    tape.mean_all(&a)
}

/// Composite loss; the QNet hook contributes 0 when absent.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    s_ref: &ComplexTensor<T>,
    s_hat: &ComplexTensor<T>,
    wave_ref: &ComplexTensor<T>,
    wave_hat: &ComplexTensor<T>,
    w: &LossWeights,
    qnet: Option<&QnetHook<T>>,
) -> Result<ComplexTensor<T>> {
    let tf = loss_tf(tape, s_ref, s_hat, w)?;
    let time = loss_time(tape, wave_ref, wave_hat)?;
    let time = tape.scale(&time, T::from_f64(w.gamma1))?;
    let mut loss = tape.add(&tf, &time)?;
    if let Some(hook) = qnet {
        let p = T::from_f64(w.p);
        let mr = tape.magnitude(s_ref)?;
        let cr = tape.pow_re(&mr, p)?;
        let mh = tape.magnitude(s_hat)?;
        let ch = tape.pow_re(&mh, p)?;
        let q = hook(tape, &cr, &ch)?;
        let q = tape.scale(&q, T::from_f64(w.gamma2))?;
        loss = tape.add(&loss, &q)?;
    }
    Ok(loss)
}

fn pad_to(w: &Waveform, len: usize) -> Waveform {
    let mut s = w.samples.clone();
    s.resize(len, 0.0);
    Waveform::new(s, w.sample_rate)
}

/// Forward + composite loss for a batch of (noisy, clean) pairs. Items are
/// zero-padded to the longest length; both loss terms are masked to each
/// item's true extent.
pub fn batch_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &D2Former<T>,
    items: &[(&Waveform, &Waveform)],
    w: &LossWeights,
    qnet: Option<&QnetHook<T>>,
) -> Result<ComplexTensor<T>> {
    let (loss, _) = batch_loss_terms(tape, model, items, w, qnet)?;
    Ok(loss)
}

/// Loss component values for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub tf: f64,
    pub time: f64,
}

pub fn batch_loss_terms<T: Real>(
    tape: &mut Tape<T>,
    model: &D2Former<T>,
    items: &[(&Waveform, &Waveform)],
    w: &LossWeights,
    qnet: Option<&QnetHook<T>>,
) -> Result<(ComplexTensor<T>, LossBreakdown)> {
    if items.is_empty() {
        return Err(Error::Contract("batch_loss: empty batch".into()));
    }
    for (noisy, clean) in items {
        if noisy.len() != clean.len() {
            return Err(Error::Contract("batch_loss: pair length mismatch".into()));
        }
        if noisy.is_empty() {
            return Err(Error::Contract("batch_loss: empty item".into()));
        }
    }
    let stft_cfg = model.cfg.stft();
    let b = items.len();
    let len = items.iter().map(|(n, _)| n.len()).max().expect("non-empty");
    let frames = stft_cfg.frames_for(len);
    let bins = stft_cfg.bins();

    // Stack constants: noisy/clean spectrograms and padded time signals.
    let mut y_re = Vec::with_capacity(b * frames * bins);
    let mut y_im = Vec::with_capacity(b * frames * bins);
    let mut s_re = Vec::with_capacity(b * frames * bins);
    let mut s_im = Vec::with_capacity(b * frames * bins);
    let mut wave_ref = Vec::with_capacity(b * len);
    let mut t_mask = Vec::with_capacity(b * len);
    let mut f_mask = Vec::with_capacity(b * frames);
    for (noisy, clean) in items {
        let true_len = noisy.len();
        let noisy_p = pad_to(noisy, len);
        let clean_p = pad_to(clean, len);
        let ys = stft::<T>(&noisy_p, &stft_cfg)?;
        let ss = stft::<T>(&clean_p, &stft_cfg)?;
        y_re.extend(ys.data.re().iter().copied());
        y_im.extend(ys.data.im().iter().copied());
        s_re.extend(ss.data.re().iter().copied());
        s_im.extend(ss.data.im().iter().copied());
        wave_ref.extend(clean_p.samples.iter().map(|&v| T::from_f64(v as f64)));
        let valid_frames = stft_cfg.frames_for(true_len);
        t_mask.extend((0..len).map(|n| if n < true_len { T::one() } else { T::zero() }));
        f_mask.extend((0..frames).map(|t| if t < valid_frames { T::one() } else { T::zero() }));
    }
    let y = ComplexTensor::from_slices(&[b, 1, frames, bins], &y_re, &y_im)?;
    let s_ref = ComplexTensor::from_slices(&[b, frames, bins], &s_re, &s_im)?;
    let wave_ref = ComplexTensor::from_re(
        ArrayD::from_shape_vec(IxDyn(&[b, len]), wave_ref).expect("b*len"),
    );
    let time_mask = ComplexTensor::from_re(
        ArrayD::from_shape_vec(IxDyn(&[b, len]), t_mask).expect("b*len"),
    );
    let frame_mask = ComplexTensor::from_re(
        ArrayD::from_shape_vec(IxDyn(&[b, frames, 1]), f_mask).expect("b*frames"),
    );
    let time_count = time_mask.re().sum();
    let frame_count = frame_mask.re().sum() * T::from_f64(bins as f64);

    let out = model.forward_spectrogram(tape, &y)?;
    let s_hat = tape.reshape(&out.fused, &[b, frames, bins])?;

    // masked TF loss
    let p = T::from_f64(w.p);
    let mag_ref = tape.magnitude(&s_ref)?;
    let comp_ref = tape.pow_re(&mag_ref, p)?;
    let mag_hat = tape.magnitude(&s_hat)?;
    let comp_hat = tape.pow_re(&mag_hat, p)?;
    let dmag = tape.sub(&comp_hat, &comp_ref)?;
    let dmag2 = tape.cmul(&dmag, &dmag)?;
    let dmag2 = tape.cmul(&dmag2, &frame_mask)?;
    let msum = tape.sum_all(&dmag2)?;
    let mag_term = tape.scale(&msum, T::one() / frame_count)?;

    let d = tape.sub(&s_hat, &s_ref)?;
    let dr = tape.re_part(&d)?;
    let di = tape.im_part(&d)?;
    let r2 = tape.cmul(&dr, &dr)?;
    let i2 = tape.cmul(&di, &di)?;
    let planes = tape.add(&r2, &i2)?;
    let planes = tape.cmul(&planes, &frame_mask)?;
    let psum = tape.sum_all(&planes)?;
    let plane_term = tape.scale(&psum, T::from_f64(w.gamma3) / frame_count)?;
    let tf = tape.add(&mag_term, &plane_term)?;

    // masked time loss through the differentiable iSTFT
    let wave_hat = tape.istft_op(&s_hat, &stft_cfg, len)?;
    let dt = tape.sub(&wave_hat, &wave_ref)?;
    let at = tape.abs_re(&dt)?;
    let at = tape.cmul(&at, &time_mask)?;
    let tsum = tape.sum_all(&at)?;
    let time_term = tape.scale(&tsum, T::one() / time_count)?;

    let time_w = tape.scale(&time_term, T::from_f64(w.gamma1))?;
    let mut loss = tape.add(&tf, &time_w)?;
    if let Some(hook) = qnet {
        let q = hook(tape, &comp_ref, &comp_hat)?;
        let q = tape.scale(&q, T::from_f64(w.gamma2))?;
        loss = tape.add(&loss, &q)?;
    }
    let breakdown = LossBreakdown {
        total: loss.re_scalar()?.to_f64(),
        tf: tf.re_scalar()?.to_f64(),
        time: time_term.re_scalar()?.to_f64(),
    };
    Ok((loss, breakdown))
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct Moments<T: Real> {
    m_re: ArrayD<T>,
    v_re: ArrayD<T>,
    m_im: ArrayD<T>,
    v_im: ArrayD<T>,
}

/// Decoupled-weight-decay Adam over the independent re/im planes.
pub struct AdamW<T: Real> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    /// Global-norm clip; `None` disables.
    pub clip_norm: Option<T>,
    step: u64,
    moments: Vec<Option<Moments<T>>>,
    /// Steps skipped because a gradient was non-finite.
    pub skipped: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        Self {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            weight_decay: T::from_f64(weight_decay),
            clip_norm: clip_norm.map(T::from_f64),
            step: 0,
            moments: Vec::new(),
            skipped: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Non-finite gradients skip the whole step and bump
    /// the diagnostic counter. Returns the (pre-clip) gradient norm.
    pub fn step<M: Parameterized<T>>(&mut self, model: &mut M, grads: &Grads<T>) -> T {
        let norm = grads.param_grad_norm();
        if !grads.all_params_finite() || !norm.is_finite() {
            self.skipped += 1;
            return norm;
        }
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => T::one(),
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let (b1, b2, eps, lr, wd) = (self.beta1, self.beta2, self.eps, self.lr, self.weight_decay);

        model.visit_params("", &mut |_, p| {
            let pid = p.id();
            let Some(g) = grads.param(pid) else { return };
            if self.moments.len() <= pid {
                self.moments.resize_with(pid + 1, || None);
            }
            let shape = p.value.re().raw_dim();
            let mom = self.moments[pid].get_or_insert_with(|| Moments {
                m_re: ArrayD::zeros(shape.clone()),
                v_re: ArrayD::zeros(shape.clone()),
                m_im: ArrayD::zeros(shape.clone()),
                v_im: ArrayD::zeros(shape.clone()),
            });
            let mut new_re = p.value.re().to_owned();
            update_plane(&mut new_re, &g.re().mapv(|v| v * clip), &mut mom.m_re, &mut mom.v_re, b1, b2, bc1, bc2, eps, lr, wd);
            let mut new_im = p.value.im().to_owned();
            if !p.is_real_only() {
                update_plane(&mut new_im, &g.im().mapv(|v| v * clip), &mut mom.m_im, &mut mom.v_im, b1, b2, bc1, bc2, eps, lr, wd);
            }
            p.value = ComplexTensor::from_parts(new_re, new_im).expect("plane shapes");
        });
        norm
    }
}

#[allow(clippy::too_many_arguments)]
fn update_plane<T: Real>(
    value: &mut ArrayD<T>,
    grad: &ArrayD<T>,
    m: &mut ArrayD<T>,
    v: &mut ArrayD<T>,
    b1: T,
    b2: T,
    bc1: T,
    bc2: T,
    eps: T,
    lr: T,
    wd: T,
) {
    ndarray::azip!((val in value, &g in grad, m in m, v in v) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *val = *val - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * *val;
    });
}

// ---------------------------------------------------------------------------
// LR schedule
// ---------------------------------------------------------------------------

/// Hold, then halve on plateau: the rate is fixed for `hold_epochs`, after
/// which it halves whenever validation fails to improve for more than
/// `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub initial: f64,
    pub hold_epochs: usize,
    pub factor: f64,
    pub patience: usize,
    lr: f64,
    best: f64,
    non_improving: usize,
}

impl LrSchedule {
    pub fn paper() -> Self {
        Self::new(5e-4, 30, 0.5, 1)
    }

    pub fn new(initial: f64, hold_epochs: usize, factor: f64, patience: usize) -> Self {
        Self {
            initial,
            hold_epochs,
            factor,
            patience,
            lr: initial,
            best: f64::INFINITY,
            non_improving: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Observe the epoch's validation loss; returns the rate for the next
    /// epoch. Non-increasing by construction.
    pub fn end_epoch(&mut self, epoch: usize, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.non_improving = 0;
        } else {
            self.non_improving += 1;
        }
        if epoch + 1 > self.hold_epochs && self.non_improving > self.patience {
            self.lr *= self.factor;
            self.non_improving = 0;
        }
        self.lr
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Sampling protocol: SNR grid, segment extent, rate.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub snr_grid: Vec<f64>,
    pub segment_seconds: f64,
    pub sample_rate: u32,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { snr_grid: vec![0.0, 5.0, 10.0, 15.0], segment_seconds: 2.0, sample_rate: MODEL_SAMPLE_RATE }
    }
}

pub struct DataItem {
    pub stem: String,
    pub clean: Waveform,
    pub noisy: Waveform,
}

/// In-memory paired dataset.
pub struct Dataset {
    pub items: Vec<DataItem>,
}

fn wav_stems(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("wav") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

impl Dataset {
    /// `clean/<stem>.wav` paired with `noisy/<stem>.wav` by identical stems.
    pub fn from_paired_dir(dir: &Path) -> Result<Self> {
        let clean = wav_stems(&dir.join("clean"))?;
        let noisy = wav_stems(&dir.join("noisy"))?;
        if clean.is_empty() {
            return Err(Error::Contract(format!("no clean wavs under {}", dir.display())));
        }
        let mut items = Vec::new();
        for (stem, cpath) in &clean {
            let npath = noisy
                .get(stem)
                .ok_or_else(|| Error::Contract(format!("no noisy partner for stem '{stem}'")))?;
            items.push(DataItem {
                stem: stem.clone(),
                clean: read_wav(cpath)?,
                noisy: read_wav(npath)?,
            });
        }
        Ok(Self { items })
    }

    /// Synthesize pairs by mixing each clean file with a noise file at an
    /// SNR drawn from the grid (seeded).
    pub fn from_synthetic(clean_dir: &Path, noise_dir: &Path, spec: &DatasetSpec, seed: u64) -> Result<Self> {
        let clean = wav_stems(clean_dir)?;
        let noise = wav_stems(noise_dir)?;
        if clean.is_empty() || noise.is_empty() {
            return Err(Error::Contract("synthetic mode needs non-empty clean/ and noise dirs".into()));
        }
        let noises: Vec<Waveform> = noise.values().map(read_wav).collect::<Result<_>>()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut items = Vec::new();
        for (stem, cpath) in &clean {
            let c = read_wav(cpath)?;
            let n = &noises[rng.gen_range(0..noises.len())];
            let snr = spec.snr_grid[rng.gen_range(0..spec.snr_grid.len())];
            let (noisy, cl) = synth_mixture(&c, n, snr)?;
            items.push(DataItem { stem: stem.clone(), clean: cl, noisy });
        }
        Ok(Self { items })
    }

    /// Paired when `noisy/` exists, else synthetic from `clean/` + `noise/`.
    pub fn auto(dir: &Path, spec: &DatasetSpec, seed: u64) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Contract(format!("dataset directory {} does not exist", dir.display())));
        }
        if dir.join("noisy").is_dir() {
            Self::from_paired_dir(dir)
        } else if dir.join("clean").is_dir() && dir.join("noise").is_dir() {
            Self::from_synthetic(&dir.join("clean"), &dir.join("noise"), spec, seed)
        } else {
            Err(Error::Contract(format!(
                "{} has neither clean/+noisy/ nor clean/+noise/ layout",
                dir.display()
            )))
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Random segments for one batch: (noisy, clean) pairs of exactly
    /// `segment` samples (zero-padded when the item is shorter; the loss
    /// masks the padding via the items' true lengths).
    pub fn sample_batch(&self, rng: &mut StdRng, batch: usize, segment: usize) -> Vec<(Waveform, Waveform)> {
        (0..batch)
            .map(|_| {
                let item = &self.items[rng.gen_range(0..self.items.len())];
                let len = item.clean.len();
                if len <= segment {
                    (item.noisy.clone(), item.clean.clone())
                } else {
                    let start = rng.gen_range(0..=len - segment);
                    (
                        Waveform::new(item.noisy.samples[start..start + segment].to_vec(), MODEL_SAMPLE_RATE),
                        Waveform::new(item.clean.samples[start..start + segment].to_vec(), MODEL_SAMPLE_RATE),
                    )
                }
            })
            .collect()
    }

    /// Held-out tail for the plateau monitor: last max(1, n/10) items when
    /// n >= 4, otherwise empty (the training loss is monitored instead).
    pub fn holdout_split(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        if n < 4 {
            return ((0..n).collect(), Vec::new());
        }
        let k = (n / 10).max(1);
        ((0..n - k).collect(), (n - k..n).collect())
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub hold_epochs: usize,
    pub decay_factor: f64,
    pub patience: usize,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub segment_seconds: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch: 2,
            epochs: 120,
            hold_epochs: 30,
            decay_factor: 0.5,
            patience: 1,
            weight_decay: 0.01,
            clip_norm: Some(5.0),
            segment_seconds: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub mean_grad_norm: f64,
    pub skipped_steps: u64,
    pub steps: usize,
}

/// One epoch of `ceil(train_items / batch)` steps over random segments.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<T: Real>(
    model: &mut D2Former<T>,
    data: &Dataset,
    train_idx: &[usize],
    opt: &mut AdamW<T>,
    weights: &LossWeights,
    settings: &TrainSettings,
    rng: &mut StdRng,
    epoch: usize,
    mut log: Option<&mut dyn Write>,
) -> Result<EpochStats> {
    if data.is_empty() || train_idx.is_empty() {
        return Err(Error::Contract("train_epoch: empty dataset".into()));
    }
    let segment = (settings.segment_seconds * MODEL_SAMPLE_RATE as f64).round() as usize;
    let steps = train_idx.len().div_ceil(settings.batch);
    let skipped_before = opt.skipped;
    let mut loss_sum = 0.0;
    let mut norm_sum = 0.0;
    for step in 0..steps {
        let batch: Vec<(Waveform, Waveform)> = (0..settings.batch)
            .map(|_| {
                let idx = train_idx[rng.gen_range(0..train_idx.len())];
                let item = &data.items[idx];
                let len = item.clean.len();
                if len <= segment {
                    (item.noisy.clone(), item.clean.clone())
                } else {
                    let start = rng.gen_range(0..=len - segment);
                    (
                        Waveform::new(item.noisy.samples[start..start + segment].to_vec(), MODEL_SAMPLE_RATE),
                        Waveform::new(item.clean.samples[start..start + segment].to_vec(), MODEL_SAMPLE_RATE),
                    )
                }
            })
            .collect();
        // Per-item forward/backward on separate tapes, in parallel; the
        // reduction runs in fixed index order so runs stay bit-identical.
        use rayon::prelude::*;
        let parts: Vec<Result<(Grads<T>, LossBreakdown)>> = batch
            .par_iter()
            .map(|(noisy, clean)| {
                let mut tape = Tape::new();
                let (loss, terms) = batch_loss_terms(&mut tape, model, &[(noisy, clean)], weights, None)?;
                Ok((tape.backward(&loss)?, terms))
            })
            .collect();
        let mut grad_parts = Vec::with_capacity(parts.len());
        let mut terms = LossBreakdown { total: 0.0, tf: 0.0, time: 0.0 };
        let n_items = parts.len() as f64;
        for part in parts {
            let (g, t) = part?;
            grad_parts.push(g);
            terms.total += t.total / n_items;
            terms.tf += t.tf / n_items;
            terms.time += t.time / n_items;
        }
        let grads = Grads::scaled_sum(grad_parts, T::one() / T::from_f64(n_items));
        let norm = opt.step(model, &grads);
        loss_sum += terms.total;
        norm_sum += norm.to_f64();
        if let Some(log) = log.as_deref_mut() {
            writeln!(
                log,
                "epoch={} step={} loss={:.6} loss_tf={:.6} loss_time={:.6} grad_norm={:.6} lr={:.6e}",
                epoch,
                step,
                terms.total,
                terms.tf,
                terms.time,
                norm.to_f64(),
                opt.lr.to_f64(),
            )?;
        }
    }
    Ok(EpochStats {
        mean_loss: loss_sum / steps as f64,
        mean_grad_norm: norm_sum / steps as f64,
        skipped_steps: opt.skipped - skipped_before,
        steps,
    })
}

/// Mean composite loss over whole items (no segmenting), for validation.
pub fn eval_loss<T: Real>(
    model: &D2Former<T>,
    data: &Dataset,
    idx: &[usize],
    weights: &LossWeights,
) -> Result<f64> {
    let mut sum = 0.0;
    for &i in idx {
        let item = &data.items[i];
        let mut tape = Tape::no_grad();
        let (_, terms) =
            batch_loss_terms(&mut tape, model, &[(&item.noisy, &item.clean)], weights, None)?;
        sum += terms.total;
    }
    Ok(sum / idx.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// SI-SNR
// ---------------------------------------------------------------------------

/// Scale-invariant SNR in dB with zero-mean preprocessing, capped at +60.
pub fn si_snr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Contract(format!(
            "si_snr: lengths differ ({} vs {})",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.rms() <= 1e-6 {
        return Err(Error::Contract("si_snr: silent reference".into()));
    }
    let n = reference.len() as f64;
    let mean_r: f64 = reference.samples.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mean_e: f64 = estimate.samples.iter().map(|&v| v as f64).sum::<f64>() / n;
    let r: Vec<f64> = reference.samples.iter().map(|&v| v as f64 - mean_r).collect();
    let e: Vec<f64> = estimate.samples.iter().map(|&v| v as f64 - mean_e).collect();
    let dot: f64 = r.iter().zip(&e).map(|(a, b)| a * b).sum();
    let rr: f64 = r.iter().map(|a| a * a).sum();
    let scale = dot / rr;
    let mut p_target = 0.0;
    let mut p_err = 0.0;
    for (a, b) in r.iter().zip(&e) {
        let t = scale * a;
        p_target += t * t;
        p_err += (b - t) * (b - t);
    }
    if p_err <= 0.0 || p_target <= 0.0 {
        return Ok(60.0);
    }
    Ok((10.0 * (p_target / p_err).log10()).min(60.0))
}

#[cfg(test)]
mod tests;
