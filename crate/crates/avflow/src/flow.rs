//! Flow-path mathematics and the training losses: the linear interpolation
//! path and its constant velocity target, the mean-squared flow loss with the
//! low-quality video mask, the semantic-similarity loss against frozen audio
//! teachers, the total loss, and noise sampling with per-modality generator
//! instances.
//!
//! Conventions: the path parameter t runs from 0 (pure noise) to 1 (data);
//! the noise level s = 1 − t runs the other way, and the low-quality mask is
//! phrased in terms of s ("train low-quality video only at high noise").
//! Noise generators are ChaCha8 streams with 64-bit seeds and Box–Muller
//! normals, so tensors are reproducible bit-for-bit from their recorded seeds.

use thiserror::Error;

use crate::autodiff::{NodeId, Tape};
use crate::config::{ModelConfig, SubsetTag};
use crate::experts::ParamNodes;
use crate::rng::{derive_seed_tagged, Stream};
use crate::tensor::{matmul, Mat, TensF32};

/// Seed tags for the two frozen teacher feature maps.
const TAG_TEACHER_M: u64 = 0x4D;
const TAG_TEACHER_H: u64 = 0x48;

/// Epsilon inside the cosine-similarity norms.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("noise generators must be seeded distinctly (both {0})")]
    SameSeed(u64),
}

// ---------------------------------------------------------------------------
// Path and plain losses
// ---------------------------------------------------------------------------

fn check_same_shape(a: &Mat, b: &Mat, what: &str) -> Result<(), FlowError> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(FlowError::Shape(format!(
            "{what}: ({},{}) vs ({},{})",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// Linear blend x_t = (1−t)·x0 + t·x1; t=1 is data, t=0 is noise. Computed as
/// x0 + t·(x1−x0) with short-circuited endpoints, so t∈{0,1} and x0==x1 are
/// all reproduced bit-exactly.
pub fn interpolate_path(x0: &Mat, x1: &Mat, t: f64) -> Result<Mat, FlowError> {
    assert!((0.0..=1.0).contains(&t), "path parameter out of range: {t}");
    check_same_shape(x0, x1, "interpolate_path")?;
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == 1.0 {
        return Ok(x1.clone());
    }
    let mut out = x0.clone();
    for (o, &b) in out.data.iter_mut().zip(&x1.data) {
        *o += t * (b - *o);
    }
    Ok(out)
}

/// The path's constant velocity, u = x1 − x0.
pub fn velocity_target(x0: &Mat, x1: &Mat) -> Result<Mat, FlowError> {
    check_same_shape(x0, x1, "velocity_target")?;
    let mut out = x1.clone();
    for (o, &a) in out.data.iter_mut().zip(&x0.data) {
        *o -= a;
    }
    Ok(out)
}

/// Mean squared error over all elements.
pub fn fm_loss(pred: &Mat, target: &Mat) -> Result<f64, FlowError> {
    check_same_shape(pred, target, "fm_loss")?;
    let n = pred.numel() as f64;
    let sum: f64 = pred.data.iter().zip(&target.data).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / n)
}

/// Whether the video flow loss applies: always for the high-quality subset,
/// and only above the noise threshold for the low-quality subset.
pub fn video_loss_active(subset: SubsetTag, noise_level: f64, tau: f64) -> bool {
    assert!((0.0..=1.0).contains(&noise_level), "noise level out of range: {noise_level}");
    match subset {
        SubsetTag::HighQuality => true,
        SubsetTag::LowQuality => noise_level > tau,
    }
}

/// Video flow loss with the low-quality mask applied.
pub fn masked_video_fm_loss(
    pred: &Mat,
    target: &Mat,
    subset: SubsetTag,
    noise_level: f64,
    tau: f64,
) -> Result<f64, FlowError> {
    if video_loss_active(subset, noise_level, tau) {
        fm_loss(pred, target)
    } else {
        check_same_shape(pred, target, "masked_video_fm_loss")?;
        Ok(0.0)
    }
}

/// Weighted sum of the three loss terms.
pub fn total_loss(l_video: f64, l_audio: f64, l_ssl: f64, lambda_ssl: f64) -> f64 {
    l_video + l_audio + lambda_ssl * l_ssl
}

// ---------------------------------------------------------------------------
// Differentiable loss nodes
// ---------------------------------------------------------------------------

/// Mean-squared-error node between a prediction and a target node.
pub fn fm_loss_node(t: &mut Tape, pred: NodeId, target: NodeId) -> NodeId {
    let d = t.sub(pred, target);
    let sq = t.mul(d, d);
    t.mean_all(sq)
}

/// Masked video loss as a graph node. When the mask strikes, the result is a
/// fresh constant zero — disconnected from the graph, so every parameter's
/// gradient from this term is exactly zero, not merely small.
pub fn masked_video_fm_loss_node(
    t: &mut Tape,
    pred: NodeId,
    target: NodeId,
    subset: SubsetTag,
    noise_level: f64,
    tau: f64,
) -> NodeId {
    if video_loss_active(subset, noise_level, tau) {
        fm_loss_node(t, pred, target)
    } else {
        t.constant(Mat::zeros(1, 1))
    }
}

/// l_video + l_audio + λ·l_ssl as a graph node.
pub fn total_loss_node(
    t: &mut Tape,
    l_video: NodeId,
    l_audio: NodeId,
    l_ssl: NodeId,
    lambda_ssl: f64,
) -> NodeId {
    let s = t.add(l_video, l_audio);
    let ws = t.scale(l_ssl, lambda_ssl);
    t.add(s, ws)
}

// ---------------------------------------------------------------------------
// Teacher features and the semantic-similarity loss
// ---------------------------------------------------------------------------

/// Frozen-teacher feature streams at two frame rates with a fixed 3:2 ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherFeatures {
    pub h_m: Mat,
    pub h_h: Mat,
    /// Frames per clip of each stream; their ratio is 3:2.
    pub rate_m: f64,
    pub rate_h: f64,
}

/// Endpoint-aligned linear time-resampling matrix: row i of the result blends
/// the source rows around position i·(t_in−1)/(t_out−1).
pub fn resample_matrix(t_out: usize, t_in: usize) -> Mat {
    assert!(t_out >= 1 && t_in >= 1, "resampling needs nonempty axes");
    let mut r = Mat::zeros(t_out, t_in);
    for i in 0..t_out {
        let pos = if t_out == 1 || t_in == 1 {
            0.0
        } else {
            i as f64 * (t_in - 1) as f64 / (t_out - 1) as f64
        };
        let lo = (pos.floor() as usize).min(t_in - 1);
        let frac = pos - lo as f64;
        if frac == 0.0 || lo + 1 >= t_in {
            *r.at_mut(i, lo) = 1.0;
        } else {
            *r.at_mut(i, lo) = 1.0 - frac;
            *r.at_mut(i, lo + 1) = frac;
        }
    }
    r
}

/// Flattens an audio latent (C, T, B) into a per-step matrix (T, C·B).
fn flatten_audio_steps(audio: &TensF32) -> Mat {
    assert_eq!(audio.shape.len(), 3, "audio latent must be rank 3");
    let (c, steps, bins) = (audio.shape[0], audio.shape[1], audio.shape[2]);
    let mut m = Mat::zeros(steps, c * bins);
    for ch in 0..c {
        for s in 0..steps {
            for b in 0..bins {
                *m.at_mut(s, ch * bins + b) = audio.data[audio.idx3(ch, s, b)] as f64;
            }
        }
    }
    m
}

/// Applies the two frozen random linear maps (seeded once per run) to the
/// per-step flattened clean audio, then resamples each stream to its frame
/// count. Bias-free maps: zero audio yields zero features.
pub fn teacher_features(clean_audio: &TensF32, teacher_seed: u64, cfg: &ModelConfig) -> TeacherFeatures {
    let flat = flatten_audio_steps(clean_audio);
    let in_dim = flat.cols;
    let mut rng_m = Stream::new(derive_seed_tagged(teacher_seed, TAG_TEACHER_M, 0));
    let mut rng_h = Stream::new(derive_seed_tagged(teacher_seed, TAG_TEACHER_H, 0));
    let w_m = rng_m.normal_mat_scaled(in_dim, cfg.ssl_dim_m, 0.2);
    let w_h = rng_h.normal_mat_scaled(in_dim, cfg.ssl_dim_h, 0.2);
    let f_m = matmul(&flat, false, &w_m, false);
    let f_h = matmul(&flat, false, &w_h, false);
    TeacherFeatures {
        h_m: matmul(&resample_matrix(cfg.ssl_steps_m, flat.rows), false, &f_m, false),
        h_h: matmul(&resample_matrix(cfg.ssl_steps_h, flat.rows), false, &f_h, false),
        rate_m: cfg.ssl_steps_m as f64,
        rate_h: cfg.ssl_steps_h as f64,
    }
}

/// Mean over rows of the cosine similarity between matching rows of x and y.
pub fn cosine_rows_mean(t: &mut Tape, x: NodeId, y: NodeId) -> NodeId {
    let xy = t.mul(x, y);
    let sxy = t.sum_cols(xy);
    let xx = t.mul(x, x);
    let sxx = t.sum_cols(xx);
    let yy = t.mul(y, y);
    let syy = t.sum_cols(yy);
    let nx = t.sqrt_eps(sxx, COSINE_EPS);
    let ny = t.sqrt_eps(syy, COSINE_EPS);
    let denom = t.mul(nx, ny);
    let cos = t.div(sxy, denom);
    t.mean_all(cos)
}

/// Projects the tapped audio hidden state into the two student feature
/// streams: average over frequency patches per time patch, apply each head,
/// and resample time to the teacher frame counts.
pub fn student_features(
    t: &mut Tape,
    pm: &ParamNodes,
    cfg: &ModelConfig,
    tap: NodeId,
) -> (NodeId, NodeId) {
    let (_, steps, bins) = cfg.audio_grid;
    let (pa_t, pa_f) = cfg.audio_patch;
    let (nt, nb) = (steps / pa_t, bins / pa_f);
    // token row = time_patch · nb + bin_patch ⇒ frequency pooling is a fixed
    // averaging matrix
    let mut pool = Mat::zeros(nt, nt * nb);
    for tp in 0..nt {
        for bp in 0..nb {
            *pool.at_mut(tp, tp * nb + bp) = 1.0 / nb as f64;
        }
    }
    let pool_n = t.constant(pool);
    let pooled = t.matmul(pool_n, false, tap, false);
    let head_m = crate::experts::param(pm, "ssl.", "pi_m.w");
    let head_h = crate::experts::param(pm, "ssl.", "pi_h.w");
    let proj_m = t.matmul(pooled, false, head_m, false);
    let proj_h = t.matmul(pooled, false, head_h, false);
    let rm = t.constant(resample_matrix(cfg.ssl_steps_m, nt));
    let rh = t.constant(resample_matrix(cfg.ssl_steps_h, nt));
    (t.matmul(rm, false, proj_m, false), t.matmul(rh, false, proj_h, false))
}

/// Negative mean cosine similarity between the student streams and the frozen
/// teachers, averaged over the two streams: −0.5·(cos_m + cos_h) ∈ [−1, 1].
pub fn ssl_loss_node(
    t: &mut Tape,
    pm: &ParamNodes,
    cfg: &ModelConfig,
    tap: NodeId,
    teachers: &TeacherFeatures,
) -> NodeId {
    let (stu_m, stu_h) = student_features(t, pm, cfg, tap);
    let tm = t.constant(teachers.h_m.clone());
    let th = t.constant(teachers.h_h.clone());
    let cm = cosine_rows_mean(t, stu_m, tm);
    let ch = cosine_rows_mean(t, stu_h, th);
    let s = t.add(cm, ch);
    t.scale(s, -0.5)
}

// ---------------------------------------------------------------------------
// Noise sampling
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseProvenance {
    Independent,
    SharedStream,
}

/// A pair of noise tensors with the seeds that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePair {
    pub eps_video: TensF32,
    pub eps_audio: TensF32,
    pub seed_video: u64,
    pub seed_audio: u64,
    pub provenance: NoiseProvenance,
}

/// Draws the two noise tensors from two generator instances with distinct
/// seeds, so each tensor is a pure function of its own (seed, shape) and the
/// pair carries no cross-modal coupling.
pub fn sample_noise_pair(
    shape_v: &[usize],
    shape_a: &[usize],
    seed_v: u64,
    seed_a: u64,
) -> Result<NoisePair, FlowError> {
    if seed_v == seed_a {
        return Err(FlowError::SameSeed(seed_v));
    }
    let eps_video = Stream::new(seed_v).normal_tens_f32(shape_v);
    let eps_audio = Stream::new(seed_a).normal_tens_f32(shape_a);
    Ok(NoisePair {
        eps_video,
        eps_audio,
        seed_video: seed_v,
        seed_audio: seed_a,
        provenance: NoiseProvenance::Independent,
    })
}

/// The coupled alternative kept for ablation: both tensors drawn sequentially
/// from one generator, so the audio draw depends on how much the video draw
/// consumed.
pub fn shared_stream_noise(shape_v: &[usize], shape_a: &[usize], seed: u64) -> NoisePair {
    let mut rng = Stream::new(seed);
    let eps_video = rng.normal_tens_f32(shape_v);
    let eps_audio = rng.normal_tens_f32(shape_a);
    NoisePair {
        eps_video,
        eps_audio,
        seed_video: seed,
        seed_audio: seed,
        provenance: NoiseProvenance::SharedStream,
    }
}
