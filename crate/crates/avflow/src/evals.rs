//! Evaluation metrics for trained models: cross-modal alignment, validation
//! loss, caption adherence, noise-independence diagnostics, a permutation test
//! against the shuffled-pair null, and the ablation harness.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    ModelConfig, SampleTuple, TrainConfig, TOK_PITCH_DOWN, TOK_PITCH_FLAT, TOK_PITCH_UP,
};
use crate::flow::{resample_matrix, NoiseProvenance, sample_noise_pair, shared_stream_noise};
use crate::infer::{decode_height, decode_pitch, euler_sample, InferError, ModelField, SamplerConfig};
use crate::pipeline::{
    consume_batch, producer_run, AnnotatorMode, PipelineError, SharedBuffer, SourceStore,
};
use crate::rng::{derive_seed_tagged, Stream};
use crate::stitch::FusedModel;
use crate::synthdata::gen_pair;
use crate::tensor::{Mat, TensF32};
use crate::train::{prepare_sample, train_step_with_levels, TrainError, TrainState};

const TAG_EVAL_CLIP: u64 = 0x56;
const TAG_EVAL_VAL: u64 = 0x4C;
const TAG_EVAL_PERM: u64 = 0x51;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Pearson correlation of two equal-length series. Returns `None` when either
/// series has zero variance (the coefficient is undefined there).
///
/// Two shortcuts keep the clean-data oracle exact: if the series are entry-wise
/// identical the result is exactly `1.0`, and if one is an entry-wise mirror of
/// the other around its mean the result is exactly `-1.0`, with no square-root
/// rounding in between.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len(), "series must have equal length");
    assert!(!xs.is_empty(), "series must be non-empty");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    if xs == ys {
        return Some(1.0);
    }
    let mirrored = xs
        .iter()
        .zip(ys)
        .all(|(&x, &y)| (x - mx) == -(y - my));
    if mirrored {
        return Some(-1.0);
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

// ---------------------------------------------------------------------------
// Cross-modal alignment
// ---------------------------------------------------------------------------

/// One clip's height/pitch correlation; a zero-variance series makes the
/// coefficient undefined and is reported as 0 with the flag set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub value: f64,
    pub degenerate: bool,
}

/// Correlation between the decoded vertical trajectory and the decoded pitch
/// track, with the height series resampled to the audio rate when the two
/// differ. Higher is better; the optimum on clean data is exactly 1.
pub fn av_alignment(video: &TensF32, audio: &TensF32, cfg: &ModelConfig) -> Alignment {
    let heights = decode_height(video, cfg);
    let pitches = decode_pitch(audio);
    let heights = resample_series(&heights, pitches.len());
    match pearson(&heights, &pitches) {
        Some(value) => Alignment { value, degenerate: false },
        None => Alignment { value: 0.0, degenerate: true },
    }
}

/// Endpoint-aligned linear resampling of a scalar series; the identity when
/// the length already matches.
fn resample_series(xs: &[f64], len_out: usize) -> Vec<f64> {
    if xs.len() == len_out {
        return xs.to_vec();
    }
    let m = resample_matrix(len_out, xs.len());
    let mut col = Mat::zeros(xs.len(), 1);
    col.data.copy_from_slice(xs);
    crate::tensor::matmul(&m, false, &col, false).data
}

// ---------------------------------------------------------------------------
// Caption adherence
// ---------------------------------------------------------------------------

/// Classifies a decoded pitch track into the three trend classes by comparing
/// its endpoints; `half_bin` absorbs sub-bin noise in generated audio (clean
/// tracks land exactly on bin centers, so any threshold below one bin keeps
/// them exact).
pub fn pitch_trend_token(pitches: &[f64], half_bin: f64) -> u32 {
    assert!(!pitches.is_empty(), "empty pitch series");
    let d = pitches[pitches.len() - 1] - pitches[0];
    if d > half_bin {
        TOK_PITCH_UP
    } else if d < -half_bin {
        TOK_PITCH_DOWN
    } else {
        TOK_PITCH_FLAT
    }
}

/// Fraction of clips whose decoded pitch trend matches the prompted class.
/// Prompts carry the class as the first audio-caption token.
pub fn caption_adherence(clips: &[(TensF32, Vec<u32>)], cfg: &ModelConfig) -> f64 {
    assert!(!clips.is_empty(), "no clips to score");
    let bins = cfg.audio_grid.2;
    let half_bin = 0.5 / (bins - 1) as f64;
    let hits = clips
        .iter()
        .filter(|(audio, prompt)| {
            let decoded = pitch_trend_token(&decode_pitch(audio), half_bin);
            prompt.first() == Some(&decoded)
        })
        .count();
    hits as f64 / clips.len() as f64
}

// ---------------------------------------------------------------------------
// Noise independence diagnostics
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseIndependence {
    /// Largest |Pearson| between paired video/audio noise coordinates.
    pub max_abs_corr: f64,
    /// Whether the audio draw is bitwise unchanged when only the video shape
    /// changes — the property the independent sampler guarantees.
    pub shape_robust: bool,
}

/// Measures the noise sampler the training configuration selects: coordinate
/// correlations over `n_draws` paired draws and the shape-robustness check.
pub fn noise_independence(
    cfg: &ModelConfig,
    shared: bool,
    n_draws: usize,
) -> NoiseIndependence {
    let (c, f, h, w) = cfg.video_grid;
    let (ca, ta, ba) = cfg.audio_grid;
    let draw = |shape_v: &[usize], i: u64| {
        let sv = derive_seed_tagged(cfg.seed_video_noise, TAG_EVAL_CLIP, i);
        let sa = derive_seed_tagged(cfg.seed_audio_noise, TAG_EVAL_CLIP, i);
        if shared {
            shared_stream_noise(shape_v, &[ca, ta, ba], sv)
        } else {
            sample_noise_pair(shape_v, &[ca, ta, ba], sv, sa).expect("distinct derived seeds")
        }
    };
    // a handful of fixed coordinates tracked across draws
    let probes = 4usize;
    let mut vs = vec![Vec::with_capacity(n_draws); probes];
    let mut au = vec![Vec::with_capacity(n_draws); probes];
    let mut shape_robust = true;
    for i in 0..n_draws as u64 {
        let pair = draw(&[c, f, h, w], i);
        for p in 0..probes {
            vs[p].push(pair.eps_video.data[p * 7 % pair.eps_video.data.len()] as f64);
            au[p].push(pair.eps_audio.data[p * 11 % pair.eps_audio.data.len()] as f64);
        }
        if i < 4 {
            let other = draw(&[c, 2 * f, h, w], i);
            if other.eps_audio != pair.eps_audio {
                shape_robust = false;
            }
        }
    }
    let mut max_abs_corr = 0.0f64;
    for p in 0..probes {
        if let Some(r) = pearson(&vs[p], &au[p]) {
            max_abs_corr = max_abs_corr.max(r.abs());
        }
    }
    NoiseIndependence { max_abs_corr, shape_robust }
}

// ---------------------------------------------------------------------------
// Validation loss
// ---------------------------------------------------------------------------

/// Mean flow-matching loss (video + audio terms) of a model over held-out
/// samples at fixed noise levels. Deterministic in its arguments.
pub fn fm_val_loss(
    model: &FusedModel,
    samples: &[SampleTuple],
    levels: &[f64],
    cfg: &ModelConfig,
) -> Result<f64, EvalError> {
    assert!(!samples.is_empty() && !levels.is_empty(), "empty validation setup");
    let mut field = ModelField {
        model,
        video_caption: Vec::new(),
        audio_caption: Vec::new(),
        speech: Vec::new(),
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, sample) in samples.iter().enumerate() {
        field.video_caption = sample.video_caption.clone();
        field.audio_caption = sample.audio_caption.clone();
        field.speech = sample.speech.clone();
        for (j, &s) in levels.iter().enumerate() {
            let counter = derive_seed_tagged(TAG_EVAL_VAL, (i * levels.len() + j) as u64, 0);
            let prep = prepare_sample(sample, s, counter, cfg, 0, false)?;
            let (pv, pa) = crate::infer::VelocityField::eval(
                &mut field,
                &prep.video_xt,
                &prep.audio_xt,
                s,
            )?;
            let lv = crate::flow::fm_loss(&pv, &prep.video_u).map_err(TrainError::from)?;
            let la = crate::flow::fm_loss(&pa, &prep.audio_u).map_err(TrainError::from)?;
            total += lv + la;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Permutation test
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    /// Mean |corr| of the matched pairs.
    pub observed: f64,
    /// Mean over shuffles of the shuffled-pair statistic.
    pub null_mean: f64,
    /// Largest single shuffled-pair statistic seen.
    pub null_max: f64,
    pub p_value: f64,
    pub shuffles: usize,
}

fn mean_abs_alignment(heights: &[Vec<f64>], pitches: &[Vec<f64>], order: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &j) in order.iter().enumerate() {
        let h = resample_series(&heights[i], pitches[j].len());
        total += pearson(&h, &pitches[j]).map_or(0.0, f64::abs);
    }
    total / order.len() as f64
}

/// Tests whether matched pairs align better than chance: the null statistic
/// re-pairs the pitch tracks by a uniform random permutation. One-sided
/// p-value with the +1 correction, deterministic in `seed`.
pub fn alignment_permutation_test(
    heights: &[Vec<f64>],
    pitches: &[Vec<f64>],
    shuffles: usize,
    seed: u64,
) -> PermutationTest {
    assert_eq!(heights.len(), pitches.len(), "one pitch track per height track");
    assert!(heights.len() >= 2, "need at least two clips");
    let n = heights.len();
    let identity: Vec<usize> = (0..n).collect();
    let observed = mean_abs_alignment(heights, pitches, &identity);
    let mut rng = Stream::new(derive_seed_tagged(seed, TAG_EVAL_PERM, 0));
    let mut order = identity;
    let mut at_least = 0usize;
    let mut null_sum = 0.0;
    let mut null_max = f64::NEG_INFINITY;
    for _ in 0..shuffles {
        for i in (1..n).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            order.swap(i, j);
        }
        let stat = mean_abs_alignment(heights, pitches, &order);
        null_sum += stat;
        null_max = null_max.max(stat);
        if stat >= observed {
            at_least += 1;
        }
    }
    PermutationTest {
        observed,
        null_mean: null_sum / shuffles as f64,
        null_max,
        p_value: (1 + at_least) as f64 / (shuffles + 1) as f64,
        shuffles,
    }
}

// ---------------------------------------------------------------------------
// Model evaluation
// ---------------------------------------------------------------------------

/// Summary of a model against the synthetic ground truth. Correlation-based
/// fields are "higher is better"; `fm_val_loss` is "lower is better".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean |corr| between decoded height and pitch over generated clips.
    pub av_alignment: f64,
    /// How many of those clips had a zero-variance decoded series.
    pub degenerate_clips: usize,
    pub fm_val_loss: f64,
    pub noise_independence: NoiseIndependence,
    /// Fraction of generated clips whose decoded pitch trend matches the
    /// prompted class.
    pub caption_adherence: f64,
    /// Stated explicitly because alignment metrics elsewhere are often
    /// distances: here larger alignment is better.
    pub alignment_direction: String,
}

impl EvalReport {
    pub fn table(&self) -> String {
        format!(
            "av_alignment        {:>8.4}  ({} degenerate, {})\n\
             fm_val_loss         {:>8.4}\n\
             noise max |corr|    {:>8.4}  (shape-robust: {})\n\
             caption_adherence   {:>8.4}",
            self.av_alignment,
            self.degenerate_clips,
            self.alignment_direction,
            self.fm_val_loss,
            self.noise_independence.max_abs_corr,
            self.noise_independence.shape_robust,
            self.caption_adherence,
        )
    }
}

/// Sampling/eval effort knobs so tests and the CLI can trade time for power.
#[derive(Clone, Copy, Debug)]
pub struct EvalBudget {
    pub clips: usize,
    pub euler_steps: usize,
    pub val_samples: usize,
    pub noise_draws: usize,
}

impl Default for EvalBudget {
    fn default() -> Self {
        EvalBudget { clips: 50, euler_steps: 50, val_samples: 8, noise_draws: 256 }
    }
}

/// A generated clip with the conditioning that produced it.
pub struct GeneratedClip {
    pub video: TensF32,
    pub audio: TensF32,
    pub video_caption: Vec<u32>,
    pub audio_caption: Vec<u32>,
}

/// Samples `budget.clips` clips from the model, conditioning each on a fresh
/// synthetic sample's reference frame and captions.
pub fn generate_clips(
    model: &FusedModel,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    budget: &EvalBudget,
    seed: u64,
) -> Result<Vec<GeneratedClip>, EvalError> {
    let mut out = Vec::with_capacity(budget.clips);
    for i in 0..budget.clips as u64 {
        let cond = gen_pair(derive_seed_tagged(seed, TAG_EVAL_CLIP, i), cfg);
        let scfg = SamplerConfig {
            steps: budget.euler_steps,
            seed_video: derive_seed_tagged(seed, TAG_EVAL_CLIP, 2 * i + 1_000_003),
            seed_audio: derive_seed_tagged(seed, TAG_EVAL_CLIP, 2 * i + 1_000_004),
            reference: cond.reference.clone(),
            video_caption: cond.video_caption.clone(),
            audio_caption: cond.audio_caption.clone(),
            speech: cond.speech.clone(),
            noise_mode: if tcfg.shared_noise_stream {
                NoiseProvenance::SharedStream
            } else {
                NoiseProvenance::Independent
            },
        };
        let mut field = ModelField {
            model,
            video_caption: cond.video_caption.clone(),
            audio_caption: cond.audio_caption.clone(),
            speech: cond.speech.clone(),
        };
        let (video, audio) = euler_sample(&mut field, &scfg, cfg)?;
        out.push(GeneratedClip {
            video,
            audio,
            video_caption: cond.video_caption,
            audio_caption: cond.audio_caption,
        });
    }
    Ok(out)
}

/// Full evaluation: generate clips, score alignment and caption adherence,
/// measure validation loss and the configured noise sampler.
pub fn evaluate_model(
    model: &FusedModel,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    budget: &EvalBudget,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let clips = generate_clips(model, cfg, tcfg, budget, seed)?;
    let mut align_sum = 0.0;
    let mut degenerate = 0usize;
    for c in &clips {
        let a = av_alignment(&c.video, &c.audio, cfg);
        align_sum += a.value.abs();
        if a.degenerate {
            degenerate += 1;
        }
    }
    let adherence_input: Vec<(TensF32, Vec<u32>)> =
        clips.into_iter().map(|c| (c.audio, c.audio_caption)).collect();
    let val: Vec<SampleTuple> = (0..budget.val_samples as u64)
        .map(|i| gen_pair(derive_seed_tagged(seed, TAG_EVAL_VAL, i), cfg))
        .collect();
    Ok(EvalReport {
        av_alignment: align_sum / adherence_input.len() as f64,
        degenerate_clips: degenerate,
        fm_val_loss: fm_val_loss(model, &val, &[0.25, 0.5, 0.75], cfg)?,
        noise_independence: noise_independence(cfg, tcfg.shared_noise_stream, budget.noise_draws),
        caption_adherence: caption_adherence(&adherence_input, cfg),
        alignment_direction: "higher_is_better".into(),
    })
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

/// The four single-mechanism ablations: coupled noise streams, unmasked
/// low-quality video loss, disabled semantic loss, and whole-source captions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationKind {
    SharedNoise,
    NoLossMask,
    NoSsl,
    OfflineAnnotations,
}

impl AblationKind {
    pub fn all() -> [AblationKind; 4] {
        [
            AblationKind::SharedNoise,
            AblationKind::NoLossMask,
            AblationKind::NoSsl,
            AblationKind::OfflineAnnotations,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationKind::SharedNoise => "shared-noise",
            AblationKind::NoLossMask => "no-loss-mask",
            AblationKind::NoSsl => "no-ssl",
            AblationKind::OfflineAnnotations => "offline-annotations",
        }
    }
}

/// Both arms' reports plus the mechanism-specific deterministic check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub kind: AblationKind,
    pub treatment: EvalReport,
    pub control: EvalReport,
    pub mechanical_pass: bool,
    pub detail: String,
}

/// How much work each ablation arm does.
#[derive(Clone, Copy, Debug)]
pub struct AblationBudget {
    pub train_steps: u64,
    pub eval: EvalBudget,
}

impl Default for AblationBudget {
    fn default() -> Self {
        AblationBudget {
            train_steps: 50,
            eval: EvalBudget { clips: 8, euler_steps: 16, val_samples: 4, noise_draws: 64 },
        }
    }
}

fn train_arm(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    steps: u64,
    data_seed: u64,
) -> Result<TrainState, EvalError> {
    let mut state = TrainState::new(cfg, tcfg);
    let mut cursor = 0u64;
    for _ in 0..steps {
        let batch: Vec<SampleTuple> = (0..tcfg.batch_size as u64)
            .map(|k| gen_pair(derive_seed_tagged(data_seed, 0x44, cursor + k), cfg))
            .collect();
        cursor += tcfg.batch_size as u64;
        crate::train::train_step(&mut state, &batch)?;
    }
    Ok(state)
}

/// Max parameter delta within one namespace after a single pinned-level step
/// on an all-low-quality batch from a fresh model.
fn low_quality_video_delta(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    level: f64,
    seed: u64,
) -> Result<f64, EvalError> {
    let mut t = tcfg.clone();
    t.grad_accum = 1;
    let mut state = TrainState::new(cfg, &t);
    let before = state.model.weights.clone();
    let batch: Vec<SampleTuple> = (0..t.batch_size as u64)
        .map(|k| {
            let s = gen_pair(derive_seed_tagged(seed, 0x5A, k), cfg);
            crate::synthdata::degrade(&s, derive_seed_tagged(seed, 0x5B, k), 0.5)
        })
        .collect();
    let levels = vec![level; batch.len()];
    train_step_with_levels(&mut state, &batch, Some(&levels))?;
    let mut delta = 0.0f64;
    for (name, w) in &state.model.weights {
        if name.starts_with("video.") {
            delta = delta.max(w.max_abs_diff(&before[name]));
        }
    }
    Ok(delta)
}

/// Audit failure fraction over `n_items` windows produced in the given
/// annotator mode, on sources long enough that windows cross caption classes.
pub fn annotation_audit_failure_rate(
    cfg: &ModelConfig,
    mode: AnnotatorMode,
    n_items: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    let store = SourceStore::generate(6, 10 * cfg.video_grid.1, seed, cfg);
    let buffer = SharedBuffer::new(n_items);
    producer_run(&store, &buffer, n_items, derive_seed_tagged(seed, 0x41, 0), mode, 0)?;
    let batch = consume_batch(&buffer, n_items, Duration::from_secs(30), cfg)?;
    Ok(batch.audit_failures as f64 / n_items as f64)
}

/// Trains treatment and control under identical seeds, differing only in the
/// ablated mechanism, and runs the mechanism's deterministic check.
pub fn run_ablation(
    kind: AblationKind,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    budget: &AblationBudget,
) -> Result<AblationOutcome, EvalError> {
    let mut treat_cfg = cfg.clone();
    let mut treat_tcfg = tcfg.clone();
    match kind {
        AblationKind::SharedNoise => treat_tcfg.shared_noise_stream = true,
        AblationKind::NoLossMask => treat_tcfg.use_quality_mask = false,
        AblationKind::NoSsl => treat_cfg.lambda_ssl = 0.0,
        AblationKind::OfflineAnnotations => {}
    }
    let data_seed = derive_seed_tagged(tcfg.seed, 0x42, 0);
    let treat_state = train_arm(&treat_cfg, &treat_tcfg, budget.train_steps, data_seed)?;
    let ctrl_state = train_arm(cfg, tcfg, budget.train_steps, data_seed)?;
    let eval_seed = derive_seed_tagged(tcfg.seed, 0x45, 0);
    let treatment =
        evaluate_model(&treat_state.model, &treat_cfg, &treat_tcfg, &budget.eval, eval_seed)?;
    let control = evaluate_model(&ctrl_state.model, cfg, tcfg, &budget.eval, eval_seed)?;

    let (mechanical_pass, detail) = match kind {
        AblationKind::SharedNoise => {
            let pass = !treatment.noise_independence.shape_robust
                && control.noise_independence.shape_robust;
            (
                pass,
                format!(
                    "shape-robustness: treatment {} / control {}",
                    treatment.noise_independence.shape_robust,
                    control.noise_independence.shape_robust
                ),
            )
        }
        AblationKind::NoLossMask => {
            let dt = low_quality_video_delta(&treat_cfg, &treat_tcfg, 0.7, data_seed)?;
            let dc = low_quality_video_delta(cfg, tcfg, 0.7, data_seed)?;
            (
                dt > 0.0 && dc == 0.0,
                format!("low-noise low-quality video delta: treatment {dt:.3e} / control {dc:.3e}"),
            )
        }
        AblationKind::NoSsl => {
            let mut probe = TrainState::new(&treat_cfg, &treat_tcfg);
            let batch: Vec<SampleTuple> =
                (0..treat_tcfg.batch_size as u64).map(|k| gen_pair(k + 1, &treat_cfg)).collect();
            let m = crate::train::train_step(&mut probe, &batch)?;
            let pass = m.l_ssl.is_none() && m.l_fm.is_finite() && m.l_total.is_finite();
            (
                pass,
                format!(
                    "semantic term present: {}; flow terms finite: {}",
                    m.l_ssl.is_some(),
                    m.l_fm.is_finite()
                ),
            )
        }
        AblationKind::OfflineAnnotations => {
            let seed = derive_seed_tagged(tcfg.seed, 0x4F, 0);
            let off =
                annotation_audit_failure_rate(cfg, AnnotatorMode::OfflineWholeSource, 100, seed)?;
            let on = annotation_audit_failure_rate(cfg, AnnotatorMode::Online, 100, seed)?;
            (
                off >= 0.2 && on == 0.0,
                format!("audit failure rate: offline {off:.2} / online {on:.2}"),
            )
        }
    };
    Ok(AblationOutcome { kind, treatment, control, mechanical_pass, detail })
}
