//! Sampling from a trained velocity field and decoding generated latents back
//! to interpretable trajectories.
//!
//! Generation integrates dx/dt = v(x, t, c) with uniform explicit Euler steps
//! from t=0 (noise) to t=1 (data). Before every field evaluation the video
//! token rows of the first frame are overwritten with the blend of their
//! initial noise and the clean reference frame at the current path position,
//! so the conditioning frame travels the clean-data path; at t=1 the first
//! frame is the reference exactly.

use thiserror::Error;

use crate::autodiff::Tape;
use crate::config::{ConfigError, ModelConfig};
use crate::experts::{patchify_audio, patchify_video, register_params, unpatchify_audio, unpatchify_video};
use crate::flow::{interpolate_path, sample_noise_pair, shared_stream_noise, FlowError, NoisePair, NoiseProvenance};
use crate::stitch::{fused_forward, FusedModel};
use crate::tensor::{Mat, TensF32};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("invalid sampler configuration: {0}")]
    InvalidSampler(String),
    #[error("non-finite field value at integration step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Everything one sampling job needs besides the model: step count, the two
/// noise seeds, the clean reference frame, and the three caption sequences.
#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed_video: u64,
    pub seed_audio: u64,
    pub reference: TensF32,
    pub video_caption: Vec<u32>,
    pub audio_caption: Vec<u32>,
    pub speech: Vec<u32>,
    /// Noise source; the coupled variant exists only for ablation runs.
    pub noise_mode: NoiseProvenance,
}

impl SamplerConfig {
    fn validate(&self) -> Result<(), InferError> {
        if self.steps == 0 {
            return Err(InferError::InvalidSampler("steps must be ≥ 1".into()));
        }
        if self.noise_mode == NoiseProvenance::Independent && self.seed_video == self.seed_audio {
            return Err(InferError::InvalidSampler(format!(
                "noise seeds must differ (both {})",
                self.seed_video
            )));
        }
        Ok(())
    }
}

/// The velocity field the sampler integrates: token matrices in, per-token
/// velocities out, at a given noise level s = 1 − t.
pub trait VelocityField {
    fn eval(
        &mut self,
        video_tokens: &Mat,
        audio_tokens: &Mat,
        noise_level: f64,
    ) -> Result<(Mat, Mat), InferError>;
}

/// A fused model plus fixed captions, evaluated by a fresh forward pass per
/// integration step.
pub struct ModelField<'a> {
    pub model: &'a FusedModel,
    pub video_caption: Vec<u32>,
    pub audio_caption: Vec<u32>,
    pub speech: Vec<u32>,
}

impl VelocityField for ModelField<'_> {
    fn eval(
        &mut self,
        video_tokens: &Mat,
        audio_tokens: &Mat,
        noise_level: f64,
    ) -> Result<(Mat, Mat), InferError> {
        let mut t = Tape::new();
        let pm = register_params(&mut t, &self.model.weights, false);
        let vt = t.constant(video_tokens.clone());
        let at = t.constant(audio_tokens.clone());
        let out = fused_forward(
            &mut t,
            &pm,
            &self.model.cfg,
            vt,
            at,
            &self.video_caption,
            &self.audio_caption,
            &self.speech,
            noise_level,
        );
        Ok((t.val(out.video_pred).clone(), t.val(out.audio_pred).clone()))
    }
}

/// The noise tensors a sampling job starts from; exposed so tests can assert
/// the initial audio noise is untouched by video-shape changes.
pub fn initial_noise(scfg: &SamplerConfig, cfg: &ModelConfig) -> Result<NoisePair, InferError> {
    scfg.validate()?;
    let (c, f, h, w) = cfg.video_grid;
    let (ca, ta, ba) = cfg.audio_grid;
    let pair = match scfg.noise_mode {
        NoiseProvenance::Independent => {
            sample_noise_pair(&[c, f, h, w], &[ca, ta, ba], scfg.seed_video, scfg.seed_audio)?
        }
        NoiseProvenance::SharedStream => {
            shared_stream_noise(&[c, f, h, w], &[ca, ta, ba], scfg.seed_video)
        }
    };
    Ok(pair)
}

fn overwrite_rows(dst: &mut Mat, src: &Mat, n: usize) {
    assert_eq!(dst.cols, src.cols);
    assert!(src.rows >= n && dst.rows >= n);
    dst.data[..n * dst.cols].copy_from_slice(&src.data[..n * src.cols]);
}

/// Generates one paired clip: Euler integration of the field from noise to
/// data with the reference first frame re-imposed before every evaluation and
/// once more at the endpoint. Deterministic given (field, configs).
pub fn euler_sample<F: VelocityField>(
    field: &mut F,
    scfg: &SamplerConfig,
    cfg: &ModelConfig,
) -> Result<(TensF32, TensF32), InferError> {
    scfg.validate()?;
    assert_eq!(cfg.video_patch.0, 1, "first-frame conditioning needs a temporal patch of 1");
    let noise = initial_noise(scfg, cfg)?;
    let vts = patchify_video(&noise.eps_video, cfg.video_patch)?;
    let ats = patchify_audio(&noise.eps_audio, cfg.audio_patch)?;
    let mut video = vts.tokens;
    let mut audio = ats.tokens;

    let ref_rows = patchify_video(&scfg.reference, cfg.video_patch)?.tokens;
    let tokens_per_frame = cfg.video_token_count() / cfg.video_token_frames();
    if ref_rows.rows != tokens_per_frame || ref_rows.cols != video.cols {
        return Err(InferError::InvalidSampler(format!(
            "reference tokens ({}, {}) do not match a video frame ({}, {})",
            ref_rows.rows, ref_rows.cols, tokens_per_frame, video.cols
        )));
    }
    let mut eps_first = Mat::zeros(tokens_per_frame, video.cols);
    overwrite_rows(&mut eps_first, &video, tokens_per_frame);

    let dt = 1.0 / scfg.steps as f64;
    for k in 0..scfg.steps {
        let t_path = k as f64 * dt;
        let first = interpolate_path(&eps_first, &ref_rows, t_path)?;
        overwrite_rows(&mut video, &first, tokens_per_frame);
        let (uv, ua) = field.eval(&video, &audio, 1.0 - t_path)?;
        if uv.data.iter().chain(&ua.data).any(|v| !v.is_finite()) {
            return Err(InferError::NonFinite { step: k });
        }
        for (x, &u) in video.data.iter_mut().zip(&uv.data) {
            *x += dt * u;
        }
        for (x, &u) in audio.data.iter_mut().zip(&ua.data) {
            *x += dt * u;
        }
    }
    // the endpoint blend is the reference itself
    overwrite_rows(&mut video, &ref_rows, tokens_per_frame);

    let video_out = unpatchify_video(&crate::experts::TokenSeq { tokens: video, layout: vts.layout });
    let audio_out = unpatchify_audio(&crate::experts::TokenSeq { tokens: audio, layout: ats.layout });
    Ok((video_out, audio_out))
}

/// Decoded ball height per raw time step, from the video latent.
///
/// Each raw step lives in a (frame, channel-group) slot; the height is the
/// intensity-weighted row centroid of that slot, normalized by `rows − 1`.
/// Negative values are clipped before weighting so mild noise cannot flip the
/// centroid sign; an all-zero (or fully clipped) slot decodes to 0.5.
pub fn decode_height(video: &TensF32, cfg: &ModelConfig) -> Vec<f64> {
    let (c, f, h, w) = cfg.video_grid;
    assert_eq!(video.shape, vec![c, f, h, w], "video latent shape mismatch");
    let raw_steps = cfg.audio_grid.1;
    let sub = raw_steps / f;
    let dup = c / sub;
    let mut out = Vec::with_capacity(raw_steps);
    for r in 0..raw_steps {
        let frame = r / sub;
        let sub_i = r % sub;
        let mut mass = 0.0f64;
        let mut moment = 0.0f64;
        for d in 0..dup {
            let ch = sub_i * dup + d;
            for row in 0..h {
                for col in 0..w {
                    let v = video.data[video.idx4(ch, frame, row, col)] as f64;
                    let v = v.max(0.0);
                    mass += v;
                    moment += v * row as f64;
                }
            }
        }
        if mass == 0.0 {
            out.push(0.5);
        } else {
            out.push(moment / mass / (h as f64 - 1.0));
        }
    }
    out
}

/// Decoded pitch per raw time step, from the audio latent: the argmax
/// frequency bin (summed over channels, earliest bin on ties), normalized by
/// `bins − 1`.
pub fn decode_pitch(audio: &TensF32) -> Vec<f64> {
    assert_eq!(audio.shape.len(), 3, "audio latent must be (channels, time, bins)");
    let (c, t_steps, bins) = (audio.shape[0], audio.shape[1], audio.shape[2]);
    let mut out = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let mut best_bin = 0usize;
        let mut best = f64::NEG_INFINITY;
        for b in 0..bins {
            let mut s = 0.0f64;
            for ch in 0..c {
                s += audio.data[audio.idx3(ch, t, b)] as f64;
            }
            if s > best {
                best = s;
                best_bin = b;
            }
        }
        out.push(best_bin as f64 / (bins as f64 - 1.0));
    }
    out
}
