//! End-to-end training: batches in, one differentiable graph per micro-batch,
//! gradients accumulated across micro-steps, and a decoupled-weight-decay
//! adaptive-moment optimizer applied at each accumulation boundary.
//!
//! All stochasticity is counter-derived: sample i of the run draws its noise
//! level and its two noise seeds from (config seed, i), so a resumed run
//! replays exactly the tail of an uninterrupted one.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::autodiff::{NodeId, Tape};
use crate::config::{ConfigError, ModelConfig, SampleTuple, SubsetTag, TrainConfig};
use crate::experts::{patchify_audio, patchify_video, register_params};
use crate::flow::{
    fm_loss_node, interpolate_path, masked_video_fm_loss_node, sample_noise_pair,
    shared_stream_noise, ssl_loss_node, teacher_features, total_loss_node, velocity_target,
    FlowError, TeacherFeatures,
};
use crate::rng::{derive_seed_tagged, Stream};
use crate::shard::{read_mat_map, write_mat_map, ShardError};
use crate::stitch::{fused_forward, init_fused, FusedModel, StitchError};
use crate::tensor::Mat;

const TAG_MODEL_INIT: u64 = 0x4D;
const TAG_TIMESTEP: u64 = 0x54;
const TAG_TEACHER: u64 = 0x45;
const TAG_NOISE: u64 = 0x4E;

/// Exponential-moving-average decay for the per-term running losses.
const EMA_DECAY: f64 = 0.99;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: {terms}")]
    NonFinite { step: u64, terms: String },
    #[error(transparent)]
    Stitch(#[from] StitchError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("batch source: {0}")]
    BatchSource(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment optimizer with decoupled weight decay. A parameter whose
/// accumulated gradient is exactly zero receives exactly zero update when
/// weight decay is zero — the loss-mask isolation tests rely on this.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    /// One update over every parameter; `t` is the 1-based apply count.
    pub fn update(
        &self,
        t: u64,
        params: &mut BTreeMap<String, Mat>,
        m: &mut BTreeMap<String, Mat>,
        v: &mut BTreeMap<String, Mat>,
        grads: &BTreeMap<String, Mat>,
    ) {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (name, p) in params.iter_mut() {
            let zero = Mat::zeros(p.rows, p.cols);
            let g = grads.get(name).unwrap_or(&zero);
            let ms = m.entry(name.clone()).or_insert_with(|| Mat::zeros(p.rows, p.cols));
            let vs = v.entry(name.clone()).or_insert_with(|| Mat::zeros(p.rows, p.cols));
            for i in 0..p.data.len() {
                let gi = g.data[i];
                ms.data[i] = self.beta1 * ms.data[i] + (1.0 - self.beta1) * gi;
                vs.data[i] = self.beta2 * vs.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = ms.data[i] / bc1;
                let vhat = vs.data[i] / bc2;
                p.data[i] -=
                    self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.data[i]);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// State and metrics
// ---------------------------------------------------------------------------

/// Per-term running means and the full mutable training state.
#[derive(Clone, Debug, Default)]
pub struct EmaLosses {
    pub video: f64,
    pub audio: f64,
    pub ssl: f64,
    pub total: f64,
    pub initialized: bool,
}

impl EmaLosses {
    fn update(&mut self, video: f64, audio: f64, ssl: f64, total: f64) {
        if !self.initialized {
            (self.video, self.audio, self.ssl, self.total) = (video, audio, ssl, total);
            self.initialized = true;
        } else {
            let d = EMA_DECAY;
            self.video = d * self.video + (1.0 - d) * video;
            self.audio = d * self.audio + (1.0 - d) * audio;
            self.ssl = d * self.ssl + (1.0 - d) * ssl;
            self.total = d * self.total + (1.0 - d) * total;
        }
    }
}

pub struct TrainState {
    pub cfg: ModelConfig,
    pub tcfg: TrainConfig,
    pub model: FusedModel,
    pub opt_m: BTreeMap<String, Mat>,
    pub opt_v: BTreeMap<String, Mat>,
    /// Gradients summed since the last optimizer application.
    pub accum: BTreeMap<String, Mat>,
    pub accum_count: usize,
    /// Micro-steps taken (one per batch).
    pub step: u64,
    /// Optimizer applications so far (drives bias correction).
    pub opt_steps: u64,
    /// Samples consumed; the counter every per-sample draw derives from.
    pub sample_counter: u64,
    pub ema: EmaLosses,
    pub seed_timestep: u64,
    pub teacher_seed: u64,
}

impl TrainState {
    /// Fresh state: model initialized from the run seed, empty moments.
    pub fn new(cfg: &ModelConfig, tcfg: &TrainConfig) -> Self {
        let model = init_fused(cfg, derive_seed_tagged(tcfg.seed, TAG_MODEL_INIT, 0));
        TrainState {
            cfg: cfg.clone(),
            tcfg: tcfg.clone(),
            model,
            opt_m: BTreeMap::new(),
            opt_v: BTreeMap::new(),
            accum: BTreeMap::new(),
            accum_count: 0,
            step: 0,
            opt_steps: 0,
            sample_counter: 0,
            ema: EmaLosses::default(),
            seed_timestep: derive_seed_tagged(tcfg.seed, TAG_TIMESTEP, 0),
            teacher_seed: derive_seed_tagged(tcfg.seed, TAG_TEACHER, 0),
        }
    }
}

/// What one micro-step reports.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub step: u64,
    pub l_video: f64,
    pub l_audio: f64,
    /// Absent when the semantic loss is disabled (weight 0).
    pub l_ssl: Option<f64>,
    /// The two flow terms: l_video + l_audio.
    pub l_fm: f64,
    /// Full training objective including the weighted semantic term.
    pub l_total: f64,
    /// Whether this micro-step ended an accumulation cycle.
    pub applied: bool,
    pub wallclock_s: f64,
}

impl Metrics {
    /// One log line; the semantic term is omitted entirely when disabled.
    pub fn line(&self) -> String {
        let ssl = match self.l_ssl {
            Some(v) => format!(" l_ssl={v:.6}"),
            None => String::new(),
        };
        format!(
            "step={} l_video={:.6} l_audio={:.6}{} l_fm={:.6} l_total={:.6} applied={} wall={:.3}",
            self.step, self.l_video, self.l_audio, ssl, self.l_fm, self.l_total, self.applied,
            self.wallclock_s
        )
    }
}

// ---------------------------------------------------------------------------
// Sample preparation
// ---------------------------------------------------------------------------

/// Everything the loss graph needs for one sample: noised inputs in token
/// space (first video frame re-imposed clean), the velocity targets, and the
/// frozen teacher features of the clean audio.
pub struct PreparedSample {
    pub video_xt: Mat,
    pub audio_xt: Mat,
    pub video_u: Mat,
    pub audio_u: Mat,
    pub teachers: TeacherFeatures,
    pub noise_level: f64,
}

/// Builds the training inputs for one sample at noise level `s`, drawing the
/// noise pair from counter-derived seeds.
pub fn prepare_sample(
    sample: &SampleTuple,
    s: f64,
    counter: u64,
    cfg: &ModelConfig,
    teacher_seed: u64,
    shared_noise: bool,
) -> Result<PreparedSample, TrainError> {
    assert!((0.0..=1.0).contains(&s), "noise level out of range: {s}");
    assert_eq!(cfg.video_patch.0, 1, "first-frame conditioning needs a temporal patch of 1");
    let (c, f, h, w) = cfg.video_grid;
    let (ca, ta, ba) = cfg.audio_grid;
    let seed_v = derive_seed_tagged(cfg.seed_video_noise, TAG_NOISE, counter);
    let mut seed_a = derive_seed_tagged(cfg.seed_audio_noise, TAG_NOISE, counter);
    if seed_a == seed_v {
        seed_a = seed_a.wrapping_add(1);
    }
    let noise = if shared_noise {
        shared_stream_noise(&[c, f, h, w], &[ca, ta, ba], seed_v)
    } else {
        sample_noise_pair(&[c, f, h, w], &[ca, ta, ba], seed_v, seed_a)?
    };
    let x0_v = patchify_video(&noise.eps_video, cfg.video_patch)?.tokens;
    let x0_a = patchify_audio(&noise.eps_audio, cfg.audio_patch)?.tokens;
    let x1_v = patchify_video(&sample.video, cfg.video_patch)?.tokens;
    let x1_a = patchify_audio(&sample.audio, cfg.audio_patch)?.tokens;
    let t_path = 1.0 - s;
    let mut video_xt = interpolate_path(&x0_v, &x1_v, t_path)?;
    let audio_xt = interpolate_path(&x0_a, &x1_a, t_path)?;
    // the conditioning frame enters clean at every noise level
    let ref_rows = patchify_video(&sample.reference, cfg.video_patch)?.tokens;
    let n = ref_rows.rows * ref_rows.cols;
    video_xt.data[..n].copy_from_slice(&ref_rows.data);
    Ok(PreparedSample {
        video_xt,
        audio_xt,
        video_u: velocity_target(&x0_v, &x1_v)?,
        audio_u: velocity_target(&x0_a, &x1_a)?,
        teachers: teacher_features(&sample.audio, teacher_seed, cfg),
        noise_level: s,
    })
}

/// The per-sample loss nodes, assembled from existing prediction nodes; shared
/// by the training path and the oracle tests.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss_nodes(
    t: &mut Tape,
    pm: &crate::experts::ParamNodes,
    cfg: &ModelConfig,
    prep: &PreparedSample,
    pred_video: NodeId,
    pred_audio: NodeId,
    ssl_tap: Option<NodeId>,
    subset: SubsetTag,
) -> (NodeId, NodeId, Option<NodeId>, NodeId) {
    let uv = t.constant(prep.video_u.clone());
    let ua = t.constant(prep.audio_u.clone());
    let lv = masked_video_fm_loss_node(
        t,
        pred_video,
        uv,
        subset,
        prep.noise_level,
        cfg.tau_mask,
    );
    let la = fm_loss_node(t, pred_audio, ua);
    match ssl_tap {
        Some(tap) if cfg.lambda_ssl != 0.0 => {
            let ls = ssl_loss_node(t, pm, cfg, tap, &prep.teachers);
            let total = total_loss_node(t, lv, la, ls, cfg.lambda_ssl);
            (lv, la, Some(ls), total)
        }
        _ => {
            let total = t.add(lv, la);
            (lv, la, None, total)
        }
    }
}

// ---------------------------------------------------------------------------
// Training steps
// ---------------------------------------------------------------------------

/// One micro-step with explicit noise levels (used by tests that pin s);
/// `levels` must match the batch length when given.
pub fn train_step_with_levels(
    state: &mut TrainState,
    batch: &[SampleTuple],
    levels: Option<&[f64]>,
) -> Result<Metrics, TrainError> {
    assert!(!batch.is_empty(), "empty batch");
    if let Some(l) = levels {
        assert_eq!(l.len(), batch.len(), "one noise level per sample");
    }
    let t0 = Instant::now();
    let cfg = state.cfg.clone();
    let mut tape = Tape::new();
    let pm = register_params(&mut tape, &state.model.weights, true);

    let mut totals = Vec::with_capacity(batch.len());
    let (mut sum_v, mut sum_a, mut sum_s) = (0.0f64, 0.0f64, 0.0f64);
    for (i, sample) in batch.iter().enumerate() {
        let counter = state.sample_counter + i as u64;
        let s = match levels {
            Some(l) => l[i],
            None => Stream::new(derive_seed_tagged(state.seed_timestep, 0x53, counter)).uniform(),
        };
        let prep = prepare_sample(
            sample,
            s,
            counter,
            &cfg,
            state.teacher_seed,
            state.tcfg.shared_noise_stream,
        )?;
        let xv = tape.constant(prep.video_xt.clone());
        let xa = tape.constant(prep.audio_xt.clone());
        let out = fused_forward(
            &mut tape,
            &pm,
            &cfg,
            xv,
            xa,
            &sample.video_caption,
            &sample.audio_caption,
            &sample.speech,
            s,
        );
        let subset = if state.tcfg.use_quality_mask { sample.subset } else { SubsetTag::HighQuality };
        let (lv, la, ls, total) = sample_loss_nodes(
            &mut tape,
            &pm,
            &cfg,
            &prep,
            out.video_pred,
            out.audio_pred,
            Some(out.ssl_tap),
            subset,
        );
        sum_v += tape.val(lv).data[0];
        sum_a += tape.val(la).data[0];
        if let Some(n) = ls {
            sum_s += tape.val(n).data[0];
        }
        totals.push(total);
    }
    let n = batch.len() as f64;
    let mut acc = totals[0];
    for &t in &totals[1..] {
        acc = tape.add(acc, t);
    }
    let batch_loss = tape.scale(acc, 1.0 / n);

    let (l_video, l_audio) = (sum_v / n, sum_a / n);
    let l_ssl = if cfg.lambda_ssl != 0.0 { Some(sum_s / n) } else { None };
    let l_fm = l_video + l_audio;
    let l_total = tape.val(batch_loss).data[0];
    if !l_total.is_finite() || !l_fm.is_finite() {
        return Err(TrainError::NonFinite {
            step: state.step,
            terms: format!("l_video={l_video} l_audio={l_audio} l_ssl={l_ssl:?}"),
        });
    }

    let grads = tape.backward(batch_loss);
    for (name, &node) in &pm {
        if let Some(g) = &grads[node] {
            match state.accum.get_mut(name) {
                Some(a) => {
                    for (x, y) in a.data.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                }
                None => {
                    state.accum.insert(name.clone(), g.clone());
                }
            }
        }
    }
    state.accum_count += 1;
    state.sample_counter += batch.len() as u64;
    state.step += 1;

    let mut applied = false;
    if state.accum_count >= state.tcfg.grad_accum {
        let scale = 1.0 / state.tcfg.grad_accum as f64;
        let mut mean_grads = std::mem::take(&mut state.accum);
        for g in mean_grads.values_mut() {
            for x in &mut g.data {
                *x *= scale;
            }
        }
        state.opt_steps += 1;
        let opt = AdamW::new(state.tcfg.learning_rate, state.tcfg.weight_decay);
        opt.update(
            state.opt_steps,
            &mut state.model.weights,
            &mut state.opt_m,
            &mut state.opt_v,
            &mean_grads,
        );
        state.accum_count = 0;
        applied = true;
    }

    state.ema.update(l_video, l_audio, l_ssl.unwrap_or(0.0), l_total);
    Ok(Metrics {
        step: state.step,
        l_video,
        l_audio,
        l_ssl,
        l_fm,
        l_total,
        applied,
        wallclock_s: t0.elapsed().as_secs_f64(),
    })
}

/// One micro-step with noise levels drawn uniformly from the run's counter.
pub fn train_step(state: &mut TrainState, batch: &[SampleTuple]) -> Result<Metrics, TrainError> {
    train_step_with_levels(state, batch, None)
}

/// Runs `steps` micro-steps pulling batches from `next_batch`, writing one
/// metrics line per step to `log` when given, and checkpointing periodically.
pub fn train_loop<F>(
    state: &mut TrainState,
    mut next_batch: F,
    steps: u64,
    ckpt_dir: Option<&Path>,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<Metrics>, TrainError>
where
    F: FnMut() -> Result<Vec<SampleTuple>, TrainError>,
{
    let mut all = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let batch = next_batch()?;
        let m = train_step(state, &batch)?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", m.line())?;
        }
        if let Some(dir) = ckpt_dir {
            if state.step % state.tcfg.checkpoint_every as u64 == 0 {
                save_checkpoint(state, &dir.join(format!("ckpt_{:07}.shard", state.step)))?;
            }
        }
        all.push(m);
    }
    if let Some(dir) = ckpt_dir {
        save_checkpoint(state, &dir.join("ckpt_final.shard"))?;
    }
    Ok(all)
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const META_KEY: &str = "meta.scalars";

/// Full-state checkpoint: weights, both moment maps, any pending accumulated
/// gradients, and the scalar counters/EMAs, all in one shard.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), TrainError> {
    let mut map = BTreeMap::new();
    for (k, m) in &state.model.weights {
        map.insert(format!("w.{k}"), m.clone());
    }
    for (k, m) in &state.opt_m {
        map.insert(format!("opt.m.{k}"), m.clone());
    }
    for (k, m) in &state.opt_v {
        map.insert(format!("opt.v.{k}"), m.clone());
    }
    for (k, m) in &state.accum {
        map.insert(format!("acc.{k}"), m.clone());
    }
    let mut meta = Mat::zeros(1, 10);
    meta.data = vec![
        state.step as f64,
        state.opt_steps as f64,
        state.accum_count as f64,
        state.sample_counter as f64,
        state.ema.video,
        state.ema.audio,
        state.ema.ssl,
        state.ema.total,
        if state.ema.initialized { 1.0 } else { 0.0 },
        0.0,
    ];
    map.insert(META_KEY.into(), meta);
    write_mat_map(&map, path)?;
    Ok(())
}

/// Restores a checkpoint written by `save_checkpoint`; the configs must be the
/// ones the run was started with.
pub fn load_checkpoint(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    path: &Path,
) -> Result<TrainState, TrainError> {
    let map = read_mat_map(path)?;
    let meta = map
        .get(META_KEY)
        .ok_or_else(|| TrainError::Checkpoint("missing scalar record".into()))?
        .clone();
    if meta.data.len() != 10 {
        return Err(TrainError::Checkpoint("scalar record has wrong arity".into()));
    }
    let mut state = TrainState::new(cfg, tcfg);
    let expect = state.model.weights.len();
    let mut weights = BTreeMap::new();
    for (k, m) in &map {
        if let Some(name) = k.strip_prefix("w.") {
            weights.insert(name.to_string(), m.clone());
        } else if let Some(name) = k.strip_prefix("opt.m.") {
            state.opt_m.insert(name.to_string(), m.clone());
        } else if let Some(name) = k.strip_prefix("opt.v.") {
            state.opt_v.insert(name.to_string(), m.clone());
        } else if let Some(name) = k.strip_prefix("acc.") {
            state.accum.insert(name.to_string(), m.clone());
        }
    }
    if weights.len() != expect {
        return Err(TrainError::Checkpoint(format!(
            "{} weight tensors, expected {expect}",
            weights.len()
        )));
    }
    for (name, fresh) in &state.model.weights {
        match weights.get(name) {
            Some(m) if (m.rows, m.cols) == (fresh.rows, fresh.cols) => {}
            Some(m) => {
                return Err(TrainError::Checkpoint(format!(
                    "{name}: shape ({},{}), expected ({},{})",
                    m.rows, m.cols, fresh.rows, fresh.cols
                )))
            }
            None => return Err(TrainError::Checkpoint(format!("missing tensor {name}"))),
        }
    }
    state.model.weights = weights;
    state.step = meta.data[0] as u64;
    state.opt_steps = meta.data[1] as u64;
    state.accum_count = meta.data[2] as usize;
    state.sample_counter = meta.data[3] as u64;
    state.ema = EmaLosses {
        video: meta.data[4],
        audio: meta.data[5],
        ssl: meta.data[6],
        total: meta.data[7],
        initialized: meta.data[8] != 0.0,
    };
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{degrade, gen_pair};
    use tempfile::tempdir;

    /// Random-tensor samples sized to `cfg`; the world simulator needs larger
    /// grids than the gradient-check config, and these tests only need shapes.
    fn rand_sample(cfg: &ModelConfig, seed: u64) -> SampleTuple {
        let mut rng = Stream::new(seed);
        let (c, f, h, w) = cfg.video_grid;
        let (ca, ta, ba) = cfg.audio_grid;
        let video = rng.normal_tens_f32(&[c, f, h, w]);
        let reference = crate::config::extract_reference(&video);
        let cap = |rng: &mut Stream, n: usize| -> Vec<u32> {
            (0..n).map(|_| rng.below(crate::config::VOCAB_SIZE as u64) as u32).collect()
        };
        SampleTuple {
            clip_id: seed,
            audio: rng.normal_tens_f32(&[ca, ta, ba]),
            video_caption: cap(&mut rng, 3),
            audio_caption: cap(&mut rng, 2),
            speech: cap(&mut rng, 1),
            subset: SubsetTag::HighQuality,
            video,
            reference,
        }
    }

    fn toy_batch(cfg: &ModelConfig, n: usize, base: u64) -> Vec<SampleTuple> {
        (0..n).map(|i| rand_sample(cfg, base + i as u64)).collect()
    }

    fn world_batch(cfg: &ModelConfig, n: usize, base: u64) -> Vec<SampleTuple> {
        (0..n).map(|i| gen_pair(base + i as u64, cfg)).collect()
    }

    #[test]
    fn oracle_predictions_zero_the_flow_terms() {
        let cfg = ModelConfig::grad_check();
        let sample = rand_sample(&cfg, 1);
        let prep = prepare_sample(&sample, 0.4, 0, &cfg, 5, false).unwrap();
        let mut tape = Tape::new();
        let mut weights = BTreeMap::new();
        let mut rng = Stream::new(2);
        for (k, v) in crate::experts::init_ssl(&cfg, &mut rng) {
            weights.insert(format!("ssl.{k}"), v);
        }
        let pm = register_params(&mut tape, &weights, false);
        let pv = tape.constant(prep.video_u.clone());
        let pa = tape.constant(prep.audio_u.clone());
        let tap = tape.constant(rng.normal_mat(cfg.audio_token_count(), cfg.audio_dim));
        let (lv, la, ls, total) =
            sample_loss_nodes(&mut tape, &pm, &cfg, &prep, pv, pa, Some(tap), sample.subset);
        assert_eq!(tape.val(lv).data[0], 0.0);
        assert_eq!(tape.val(la).data[0], 0.0);
        let ls = ls.expect("semantic term present at nonzero weight");
        let lsv = tape.val(ls).data[0];
        assert_ne!(lsv, 0.0, "semantic term should be the only nonzero one");
        assert_eq!(tape.val(total).data[0], cfg.lambda_ssl * lsv);
    }

    #[test]
    fn optimizer_applies_only_at_accumulation_boundaries() {
        let cfg = ModelConfig::grad_check();
        let mut tcfg = TrainConfig::default();
        tcfg.batch_size = 2;
        tcfg.grad_accum = 2;
        tcfg.seed = 3;
        let mut state = TrainState::new(&cfg, &tcfg);
        let before = state.model.weights.clone();
        let batch = toy_batch(&cfg, 2, 10);
        let m1 = train_step(&mut state, &batch).unwrap();
        assert!(!m1.applied);
        assert_eq!(state.model.weights, before, "no update inside the accumulation window");
        assert_eq!(state.accum_count, 1);
        let m2 = train_step(&mut state, &batch).unwrap();
        assert!(m2.applied);
        assert_ne!(state.model.weights, before, "boundary step must update");
        assert_eq!(state.accum_count, 0);
        assert_eq!(state.opt_steps, 1);
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_loss_sequences() {
        let cfg = ModelConfig::grad_check();
        let mut tcfg = TrainConfig::default();
        tcfg.batch_size = 2;
        tcfg.grad_accum = 2;
        tcfg.seed = 7;
        let run = || {
            let mut state = TrainState::new(&cfg, &tcfg);
            let mut out = Vec::new();
            for k in 0..4 {
                let batch = toy_batch(&cfg, 2, 100 + 2 * k);
                let m = train_step(&mut state, &batch).unwrap();
                out.push((m.l_video, m.l_audio, m.l_ssl, m.l_total));
            }
            (out, state.model.weights)
        };
        let (l1, w1) = run();
        let (l2, w2) = run();
        assert_eq!(l1, l2);
        assert_eq!(w1, w2);
    }

    #[test]
    fn low_noise_low_quality_batches_touch_no_video_parameter() {
        let cfg = ModelConfig::grad_check();
        let mut tcfg = TrainConfig::default();
        tcfg.batch_size = 2;
        tcfg.grad_accum = 1;
        tcfg.seed = 11;
        let batch: Vec<SampleTuple> = toy_batch(&cfg, 2, 40)
            .iter()
            .enumerate()
            .map(|(i, s)| degrade(s, 900 + i as u64, 0.5))
            .collect();

        let mut state = TrainState::new(&cfg, &tcfg);
        let before = state.model.weights.clone();
        train_step_with_levels(&mut state, &batch, Some(&[0.7, 0.7])).unwrap();
        let mut video_delta = 0.0f64;
        let mut audio_delta = 0.0f64;
        for (name, w) in &state.model.weights {
            let d = w.max_abs_diff(&before[name]);
            if name.starts_with("video.") {
                video_delta = video_delta.max(d);
            } else if name.starts_with("audio.") {
                audio_delta = audio_delta.max(d);
            }
        }
        assert_eq!(video_delta, 0.0, "masked video loss must leave the video branch untouched");
        assert!(audio_delta > 0.0, "audio branch must keep training");

        // above the threshold the same batch trains both branches
        let mut state2 = TrainState::new(&cfg, &tcfg);
        let before2 = state2.model.weights.clone();
        train_step_with_levels(&mut state2, &batch, Some(&[0.9, 0.9])).unwrap();
        let moved = state2
            .model
            .weights
            .iter()
            .filter(|(n, w)| n.starts_with("video.") && w.max_abs_diff(&before2[*n]) > 0.0)
            .count();
        assert!(moved > 0, "unmasked low-quality batches must train the video branch");
    }

    #[test]
    fn checkpoint_resume_replays_the_uninterrupted_run() {
        let cfg = ModelConfig::grad_check();
        let mut tcfg = TrainConfig::default();
        tcfg.batch_size = 2;
        tcfg.grad_accum = 2;
        tcfg.seed = 13;
        let batches: Vec<Vec<SampleTuple>> =
            (0..6).map(|k| toy_batch(&cfg, 2, 300 + 2 * k)).collect();

        // uninterrupted run
        let mut full = TrainState::new(&cfg, &tcfg);
        let mut full_losses = Vec::new();
        for b in &batches {
            full_losses.push(train_step(&mut full, b).unwrap().l_total);
        }

        // interrupted at step 3 (mid-accumulation to exercise pending grads)
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.shard");
        let mut head = TrainState::new(&cfg, &tcfg);
        for b in &batches[..3] {
            train_step(&mut head, b).unwrap();
        }
        assert_eq!(head.accum_count, 1, "fixture should stop mid-cycle");
        save_checkpoint(&head, &path).unwrap();
        let mut tail = load_checkpoint(&cfg, &tcfg, &path).unwrap();
        let mut tail_losses = Vec::new();
        for b in &batches[3..] {
            tail_losses.push(train_step(&mut tail, b).unwrap().l_total);
        }
        assert_eq!(tail_losses, full_losses[3..].to_vec());
        assert_eq!(tail.model.weights, full.model.weights);
        assert_eq!(tail.opt_m, full.opt_m);
        assert_eq!(tail.opt_v, full.opt_v);
    }

    #[test]
    fn zero_steps_leave_the_initial_model() {
        let cfg = ModelConfig::grad_check();
        let tcfg = TrainConfig { seed: 17, ..TrainConfig::default() };
        let mut state = TrainState::new(&cfg, &tcfg);
        let init = state.model.weights.clone();
        let out = train_loop(&mut state, || unreachable!("no batch should be pulled"), 0, None, None)
            .unwrap();
        assert!(out.is_empty());
        assert_eq!(state.model.weights, init);
    }

    #[test]
    fn disabled_semantic_weight_drops_the_term_from_metrics() {
        let mut cfg = ModelConfig::grad_check();
        cfg.lambda_ssl = 0.0;
        let mut tcfg = TrainConfig::default();
        tcfg.batch_size = 2;
        tcfg.grad_accum = 1;
        tcfg.seed = 19;
        let mut state = TrainState::new(&cfg, &tcfg);
        let m = train_step(&mut state, &toy_batch(&cfg, 2, 60)).unwrap();
        assert!(m.l_ssl.is_none());
        assert!(!m.line().contains("l_ssl"));
        assert!(m.l_fm.is_finite() && m.l_total.is_finite());
        assert!((m.l_total - m.l_fm).abs() < 1e-15);
    }

    #[test]
    fn five_hundred_steps_halve_the_flow_loss() {
        let cfg = ModelConfig::default();
        let mut tcfg = TrainConfig::default();
        tcfg.seed = 23;
        let data = world_batch(&cfg, 256, 5000);
        let mut state = TrainState::new(&cfg, &tcfg);
        let mut cursor = 0usize;
        let mut fm = Vec::with_capacity(500);
        for _ in 0..500 {
            let mut batch = Vec::with_capacity(tcfg.batch_size);
            for _ in 0..tcfg.batch_size {
                batch.push(data[cursor % data.len()].clone());
                cursor += 1;
            }
            let m = train_step(&mut state, &batch).unwrap();
            assert!(m.l_total.is_finite());
            fm.push(m.l_fm);
        }
        let first: f64 = fm[..50].iter().sum::<f64>() / 50.0;
        let last: f64 = fm[450..].iter().sum::<f64>() / 50.0;
        eprintln!("flow loss: first-50 mean {first:.4}, last-50 mean {last:.4}");
        assert!(
            last < 0.5 * first,
            "flow loss must at least halve: first {first:.4}, last {last:.4}"
        );
    }
}
