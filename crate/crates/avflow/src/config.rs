//! Model/training configuration, the shared domain types (sample tuples, quality
//! tags, caption vocabulary), and configuration validation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensF32;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("divisibility violated: {0}")]
    Divisibility(String),
    #[error("temporal ratio not exact: {0}")]
    Ratio(String),
    #[error("value out of range: {0}")]
    Range(String),
}

/// Exact rational, used for the audio-steps-per-video-frame ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub fn new(num: u32, den: u32) -> Self {
        Ratio { num, den }
    }

    /// self × n if the product is an integer, else None.
    pub fn times_exact(&self, n: usize) -> Option<usize> {
        let p = self.num as usize * n;
        if self.den == 0 || p % self.den as usize != 0 {
            None
        } else {
            Some(p / self.den as usize)
        }
    }
}

/// Quality tag for a training sample: the video stream of low-quality samples
/// only contributes to the flow loss at high noise levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubsetTag {
    HighQuality,
    LowQuality,
}

impl SubsetTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SubsetTag::HighQuality => "high_quality",
            SubsetTag::LowQuality => "low_quality",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        match s {
            "high_quality" => Some(SubsetTag::HighQuality),
            "low_quality" => Some(SubsetTag::LowQuality),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Caption vocabulary: a fixed 64-token table. Captions are short deterministic
// token sequences over this table; the text encoder is a learned embedding.
// ---------------------------------------------------------------------------

pub const VOCAB_SIZE: usize = 64;
pub const TOK_NO_SPEECH: u32 = 0;
/// Quadrant of the ball's initial position (rows grow downward).
pub const TOK_QUAD_UL: u32 = 1;
pub const TOK_QUAD_UR: u32 = 2;
pub const TOK_QUAD_LL: u32 = 3;
pub const TOK_QUAD_LR: u32 = 4;
/// Speed class: max per-step displacement in grid cells. SLOW covers at most
/// one cell per step (including the degenerate at-rest case), MEDIUM exactly
/// two, FAST three or more.
pub const TOK_SPEED_SLOW: u32 = 5;
pub const TOK_SPEED_MEDIUM: u32 = 6;
pub const TOK_SPEED_FAST: u32 = 7;
/// Pitch trend over the clip (pitch tracks the ball's row).
pub const TOK_PITCH_UP: u32 = 8;
pub const TOK_PITCH_DOWN: u32 = 9;
pub const TOK_PITCH_FLAT: u32 = 10;

/// One paired training example. `reference` is the clean first-frame slice of
/// `video` at creation time and is what conditions generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTuple {
    pub clip_id: u64,
    pub video: TensF32,
    pub audio: TensF32,
    pub video_caption: Vec<u32>,
    pub audio_caption: Vec<u32>,
    pub speech: Vec<u32>,
    pub subset: SubsetTag,
    pub reference: TensF32,
}

/// The first-frame slice video[:, 0, :, :] of a (C, F, H, W) latent.
pub fn extract_reference(video: &TensF32) -> TensF32 {
    assert_eq!(video.shape.len(), 4, "video latent must be 4-d");
    let (c, _f, h, w) = (video.shape[0], video.shape[1], video.shape[2], video.shape[3]);
    let mut out = TensF32::zeros(&[c, 1, h, w]);
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let dst = out.idx4(ch, 0, r, col);
                out.data[dst] = video.data[video.idx4(ch, 0, r, col)];
            }
        }
    }
    out
}

impl SampleTuple {
    /// Checks the structural invariants: non-empty token sequences, token ids in
    /// vocabulary, and the reference equal to the video's first-frame slice.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (name, seq) in [
            ("video_caption", &self.video_caption),
            ("audio_caption", &self.audio_caption),
            ("speech", &self.speech),
        ] {
            if seq.is_empty() {
                return Err(format!("{name} tokens empty"));
            }
            if let Some(&t) = seq.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
                return Err(format!("{name} token {t} outside vocabulary"));
            }
        }
        let want = extract_reference(&self.video);
        if want != self.reference {
            return Err("reference differs from video first-frame slice".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub video_depth: usize,
    pub audio_depth: usize,
    pub video_dim: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub video_heads: usize,
    pub audio_heads: usize,
    /// Fused-pair index whose audio output feeds the semantic-similarity loss.
    pub fusion_layer_ssl: usize,
    pub frames_per_clip: usize,
    /// Video latent (channels, frames, height, width).
    pub video_grid: (usize, usize, usize, usize),
    /// Audio latent (channels, time, frequency).
    pub audio_grid: (usize, usize, usize),
    /// Video patch kernel (pt, ph, pw).
    pub video_patch: (usize, usize, usize),
    /// Audio patch kernel (pa_t, pa_f) over (time, frequency).
    pub audio_patch: (usize, usize),
    /// Audio latent steps per video latent frame.
    pub temporal_ratio: Ratio,
    /// Noise-level threshold: low-quality video contributes to the flow loss
    /// only when the noise level exceeds this.
    pub tau_mask: f64,
    pub lambda_ssl: f64,
    /// Time steps of the two frozen audio-teacher feature streams; their
    /// ratio is fixed at 3:2 (two teachers running at 3:2 frame rates).
    pub ssl_steps_m: usize,
    pub ssl_steps_h: usize,
    /// Feature widths of the two teacher streams.
    pub ssl_dim_m: usize,
    pub ssl_dim_h: usize,
    pub seed_video_noise: u64,
    pub seed_audio_noise: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            video_depth: 4,
            audio_depth: 6,
            video_dim: 64,
            audio_dim: 64,
            text_dim: 32,
            video_heads: 4,
            audio_heads: 4,
            fusion_layer_ssl: 3,
            frames_per_clip: 4,
            video_grid: (8, 4, 8, 8),
            audio_grid: (4, 16, 8),
            video_patch: (1, 2, 2),
            audio_patch: (4, 1),
            temporal_ratio: Ratio::new(4, 1),
            tau_mask: 0.8,
            lambda_ssl: 1.0,
            ssl_steps_m: 12,
            ssl_steps_h: 8,
            ssl_dim_m: 24,
            ssl_dim_h: 18,
            seed_video_noise: 1000,
            seed_audio_noise: 2000,
        }
    }
}

impl ModelConfig {
    /// Tiny single-pair configuration used by gradient checks (≤ 8 tokens).
    pub fn grad_check() -> Self {
        ModelConfig {
            video_depth: 1,
            audio_depth: 1,
            video_dim: 8,
            audio_dim: 8,
            text_dim: 6,
            video_heads: 2,
            audio_heads: 2,
            fusion_layer_ssl: 0,
            frames_per_clip: 2,
            video_grid: (2, 2, 2, 2),
            audio_grid: (2, 4, 2),
            video_patch: (1, 1, 1),
            audio_patch: (2, 1),
            temporal_ratio: Ratio::new(2, 1),
            tau_mask: 0.8,
            lambda_ssl: 1.0,
            ssl_steps_m: 3,
            ssl_steps_h: 2,
            ssl_dim_m: 6,
            ssl_dim_h: 4,
            seed_video_noise: 11,
            seed_audio_noise: 12,
        }
    }

    pub fn video_token_count(&self) -> usize {
        let (_, f, h, w) = self.video_grid;
        let (pt, ph, pw) = self.video_patch;
        (f / pt) * (h / ph) * (w / pw)
    }

    pub fn video_token_width(&self) -> usize {
        let (c, ..) = self.video_grid;
        let (pt, ph, pw) = self.video_patch;
        c * pt * ph * pw
    }

    pub fn audio_token_count(&self) -> usize {
        let (_, t, f) = self.audio_grid;
        let (pa_t, pa_f) = self.audio_patch;
        (t / pa_t) * (f / pa_f)
    }

    pub fn audio_token_width(&self) -> usize {
        let (c, ..) = self.audio_grid;
        let (pa_t, pa_f) = self.audio_patch;
        c * pa_t * pa_f
    }

    /// Video token frames after patching (self-attention bucket count).
    pub fn video_token_frames(&self) -> usize {
        self.video_grid.1 / self.video_patch.0
    }

    /// Depth of the fused model: the deeper expert sets it.
    pub fn fused_depth(&self) -> usize {
        self.video_depth.max(self.audio_depth)
    }

    pub fn shape_video(&self) -> [usize; 4] {
        let (c, f, h, w) = self.video_grid;
        [c, f, h, w]
    }

    pub fn shape_audio(&self) -> [usize; 3] {
        let (c, t, f) = self.audio_grid;
        [c, t, f]
    }
}

/// Returns the configuration unchanged iff every structural invariant holds.
pub fn validate_config(cfg: ModelConfig) -> Result<ModelConfig, ConfigError> {
    let (_, f, h, w) = cfg.video_grid;
    let (pt, ph, pw) = cfg.video_patch;
    if pt == 0 || ph == 0 || pw == 0 || f % pt != 0 || h % ph != 0 || w % pw != 0 {
        return Err(ConfigError::Divisibility(format!(
            "video patch ({pt},{ph},{pw}) does not tile grid frames/height/width ({f},{h},{w})"
        )));
    }
    let (_, at, af) = cfg.audio_grid;
    let (pa_t, pa_f) = cfg.audio_patch;
    if pa_t == 0 || pa_f == 0 || at % pa_t != 0 || af % pa_f != 0 {
        return Err(ConfigError::Divisibility(format!(
            "audio patch ({pa_t},{pa_f}) does not tile grid time/frequency ({at},{af})"
        )));
    }
    if cfg.video_dim == 0 || cfg.video_dim % cfg.video_heads != 0 {
        return Err(ConfigError::Divisibility(format!(
            "video_dim {} not divisible by video_heads {}",
            cfg.video_dim, cfg.video_heads
        )));
    }
    if cfg.audio_dim == 0 || cfg.audio_dim % cfg.audio_heads != 0 {
        return Err(ConfigError::Divisibility(format!(
            "audio_dim {} not divisible by audio_heads {}",
            cfg.audio_dim, cfg.audio_heads
        )));
    }
    match cfg.temporal_ratio.times_exact(f) {
        Some(steps) if steps == at => {}
        Some(steps) => {
            return Err(ConfigError::Ratio(format!(
                "temporal_ratio × video frames = {steps}, audio grid has {at} steps"
            )))
        }
        None => {
            return Err(ConfigError::Ratio(format!(
                "temporal_ratio {}/{} × {f} frames is not an integer",
                cfg.temporal_ratio.num, cfg.temporal_ratio.den
            )))
        }
    }
    // Each video frame's audio bucket must cover a whole number of audio
    // token-time groups, or frame-bucketed attention cannot partition tokens.
    let steps_per_frame = cfg.temporal_ratio.num as usize;
    if steps_per_frame % (cfg.temporal_ratio.den as usize * pa_t) != 0 {
        return Err(ConfigError::Ratio(format!(
            "audio steps per frame {}/{} not a multiple of audio_patch time {}",
            cfg.temporal_ratio.num, cfg.temporal_ratio.den, pa_t
        )));
    }
    if !(0.0..=1.0).contains(&cfg.tau_mask) {
        return Err(ConfigError::Range(format!("tau_mask {} outside [0,1]", cfg.tau_mask)));
    }
    if cfg.lambda_ssl < 0.0 {
        return Err(ConfigError::Range(format!("lambda_ssl {} negative", cfg.lambda_ssl)));
    }
    if cfg.video_depth == 0 || cfg.audio_depth == 0 {
        return Err(ConfigError::Range("expert depths must be ≥ 1".into()));
    }
    if cfg.fusion_layer_ssl >= cfg.fused_depth() {
        return Err(ConfigError::Range(format!(
            "fusion_layer_ssl {} not below fused depth {}",
            cfg.fusion_layer_ssl,
            cfg.fused_depth()
        )));
    }
    if cfg.frames_per_clip != f {
        return Err(ConfigError::Range(format!(
            "frames_per_clip {} differs from video grid frames {f}",
            cfg.frames_per_clip
        )));
    }
    if cfg.seed_video_noise == cfg.seed_audio_noise {
        return Err(ConfigError::Range("video and audio noise seeds must differ".into()));
    }
    if cfg.ssl_steps_m < 2 || cfg.ssl_steps_h < 2 || cfg.ssl_dim_m == 0 || cfg.ssl_dim_h == 0 {
        return Err(ConfigError::Range(
            "teacher streams need ≥ 2 time steps and nonzero widths".into(),
        ));
    }
    if cfg.ssl_steps_m * 2 != cfg.ssl_steps_h * 3 {
        return Err(ConfigError::Ratio(format!(
            "teacher step counts {}:{} must be in 3:2 ratio",
            cfg.ssl_steps_m, cfg.ssl_steps_h
        )));
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub steps: usize,
    pub weight_decay: f64,
    pub checkpoint_every: usize,
    /// Master seed; data order, timesteps, and parameter init derive from it.
    pub seed: u64,
    pub buffer_capacity: usize,
    /// Ablation switch: draw both noise tensors sequentially from one stream
    /// instead of independently seeded streams.
    pub shared_noise_stream: bool,
    /// Ablation switch: when false, low-quality video contributes to the flow
    /// loss at every noise level.
    pub use_quality_mask: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            grad_accum: 4,
            steps: 2000,
            weight_decay: 0.0,
            checkpoint_every: 500,
            seed: 0,
            buffer_capacity: 32,
            shared_noise_stream: false,
            use_quality_mask: true,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters sized for a multi-billion-parameter run on accelerators;
    /// kept as a documented preset, not usable on a desk CPU.
    pub fn full_scale() -> Self {
        TrainConfig {
            learning_rate: 5e-6,
            batch_size: 32,
            grad_accum: 4,
            steps: 50_000,
            weight_decay: 0.0,
            checkpoint_every: 1000,
            seed: 0,
            buffer_capacity: 32,
            shared_noise_stream: false,
            use_quality_mask: true,
        }
    }
}

/// Top-level configuration file: `[model]` and `[train]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_toy_config_is_accepted() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.video_grid, (8, 4, 8, 8));
        assert_eq!(cfg.audio_grid, (4, 16, 8));
        assert_eq!(cfg.temporal_ratio, Ratio::new(4, 1));
        let v = validate_config(cfg).expect("toy config valid");
        assert_eq!(v, ModelConfig::default());
        // 64 video tokens of raw width 32; 32 audio tokens of raw width 16.
        assert_eq!(v.video_token_count(), 64);
        assert_eq!(v.video_token_width(), 32);
        assert_eq!(v.audio_token_count(), 32);
        assert_eq!(v.audio_token_width(), 16);
    }

    #[test]
    fn grad_check_config_is_accepted_and_small() {
        let cfg = validate_config(ModelConfig::grad_check()).unwrap();
        assert!(cfg.video_token_count() <= 8);
        assert!(cfg.audio_token_count() <= 8);
    }

    #[test]
    fn odd_height_with_patch_two_is_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.video_grid.2 = 9;
        match validate_config(cfg) {
            Err(ConfigError::Divisibility(_)) => {}
            other => panic!("expected divisibility error, got {other:?}"),
        }
    }

    #[test]
    fn tau_inside_range_accepted_outside_rejected() {
        let cfg = ModelConfig { tau_mask: 0.8, ..ModelConfig::default() };
        assert!(validate_config(cfg).is_ok());
        let cfg = ModelConfig { tau_mask: 1.2, ..ModelConfig::default() };
        match validate_config(cfg) {
            Err(ConfigError::Range(_)) => {}
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn inexact_temporal_ratio_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.temporal_ratio = Ratio::new(3, 1); // 3 × 4 frames = 12 ≠ 16 steps
        assert!(matches!(validate_config(cfg), Err(ConfigError::Ratio(_))));
        let mut cfg = ModelConfig::default();
        cfg.temporal_ratio = Ratio::new(7, 2); // 7/2 × 4 = 14 ≠ 16
        assert!(matches!(validate_config(cfg), Err(ConfigError::Ratio(_))));
    }

    #[test]
    fn equal_noise_seeds_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.seed_audio_noise = cfg.seed_video_noise;
        assert!(matches!(validate_config(cfg), Err(ConfigError::Range(_))));
    }

    #[test]
    fn ssl_tap_must_lie_below_fused_depth() {
        let mut cfg = ModelConfig::default();
        cfg.fusion_layer_ssl = 6;
        assert!(matches!(validate_config(cfg), Err(ConfigError::Range(_))));
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = Config::default();
        let text = cfg.to_toml();
        let back = Config::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn reference_extraction_takes_first_frame() {
        let mut v = TensF32::zeros(&[2, 3, 2, 2]);
        for (i, x) in v.data.iter_mut().enumerate() {
            *x = i as f32;
        }
        let r = extract_reference(&v);
        assert_eq!(r.shape, vec![2, 1, 2, 2]);
        for ch in 0..2 {
            for row in 0..2 {
                for col in 0..2 {
                    assert_eq!(
                        r.data[r.idx4(ch, 0, row, col)],
                        v.data[v.idx4(ch, 0, row, col)]
                    );
                }
            }
        }
    }
}
