//! Synthetic paired audio-video data with analytically known cross-modal
//! structure: a ball bounces on an integer pixel grid, the video latent renders
//! it as a separable tent blob, and the audio latent places its energy at the
//! frequency bin equal to the ball's row. Positions live on the integer grid
//! and the tent kernel is symmetric, so intensity centroids and argmax bins
//! recover the generating trajectory exactly — correlation between decoded
//! height and decoded pitch is exactly 1 on clean samples.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::config::{
    extract_reference, ModelConfig, SampleTuple, SubsetTag, TOK_NO_SPEECH, TOK_PITCH_DOWN,
    TOK_PITCH_FLAT, TOK_PITCH_UP, TOK_QUAD_LL, TOK_QUAD_LR, TOK_QUAD_UL, TOK_QUAD_UR,
    TOK_SPEED_FAST, TOK_SPEED_SLOW, TOK_SPEED_STILL,
};
use crate::rng::{derive_seed_tagged, Stream};
use crate::shard::{write_shard, ShardError};
use crate::tensor::TensF32;

/// Peak-normalizing amplitude for the video blob (tent weights sum to 1 per axis).
pub const VIDEO_AMP: f32 = 4.0;
/// Amplitude of the hot frequency bin in the audio latent.
pub const AUDIO_AMP: f32 = 2.0;
/// Tent kernel half-width in cells; weights 0.25 / 0.5 / 0.25.
pub const BLOB_RADIUS_CELLS: usize = 1;
/// Noise std used for the low-quality subset.
pub const DEGRADE_SIGMA: f64 = 0.5;

const TAG_WORLD: u64 = 0x57;
const TAG_DEGRADE: u64 = 0xD6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Shard(#[from] ShardError),
}

/// Ball state on the integer pixel grid. Positions are cells in
/// [1, size−2] so the tent blob never clips at the border; velocities are
/// whole cells per audio step. The vertical bounce bounds `[lo_y, hi_y]`
/// are carried per world so hand-built scenes can restrict them, while
/// `draw_world` always uses the full margin-respecting field: with the
/// bounds fixed and |vy| = 1, the whole trajectory is a deterministic
/// function of any four consecutive positions, so a generator conditioned
/// on the first latent frame faces no hidden state — phase differences
/// between clips still decorrelate mismatched pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BallWorld {
    pub px: i64,
    pub py: i64,
    pub vx: i64,
    pub vy: i64,
    pub lo_y: i64,
    pub hi_y: i64,
}

impl BallWorld {
    /// Position normalized to [0,1]² for an (h, w) grid.
    pub fn position_norm(&self, h: usize, w: usize) -> (f64, f64) {
        (self.px as f64 / (w - 1) as f64, self.py as f64 / (h - 1) as f64)
    }
}

/// One reflecting-boundary step along a single axis; bounds inclusive.
fn reflect(p: i64, v: i64, lo: i64, hi: i64) -> (i64, i64) {
    let mut p2 = p + v;
    let mut v2 = v;
    if p2 > hi {
        p2 = 2 * hi - p2;
        v2 = -v;
    } else if p2 < lo {
        p2 = 2 * lo - p2;
        v2 = -v;
    }
    debug_assert!((lo..=hi).contains(&p2), "reflection left bounds");
    (p2, v2)
}

/// Integer trajectory of `steps` positions including the start.
pub fn simulate(world: BallWorld, steps: usize, h: usize, w: usize) -> Vec<(i64, i64)> {
    let (lo_x, hi_x) = (1i64, w as i64 - 2);
    let (lo_y, hi_y) = (world.lo_y, world.hi_y);
    assert!(lo_y >= 1 && hi_y <= h as i64 - 2 && hi_y > lo_y, "bad vertical bounds");
    assert!(world.vy.abs() <= hi_y - lo_y && world.vx.abs() <= hi_x - lo_x);
    let mut out = Vec::with_capacity(steps);
    let (mut px, mut py, mut vx, mut vy) = (world.px, world.py, world.vx, world.vy);
    for _ in 0..steps {
        out.push((px, py));
        let (nx, nvx) = reflect(px, vx, lo_x, hi_x);
        let (ny, nvy) = reflect(py, vy, lo_y, hi_y);
        px = nx;
        py = ny;
        vx = nvx;
        vy = nvy;
    }
    out
}

/// Deterministic captions from a position series: (video tokens, audio tokens,
/// speech tokens). This is the single caption rule shared by generation,
/// online annotation, and the consumer-side audit.
pub fn captions_for(positions: &[(i64, i64)], h: usize, w: usize) -> (Vec<u32>, Vec<u32>, Vec<u32>) {
    let (x0, y0) = positions[0];
    let left = (x0 as f64) < (w as f64 - 1.0) / 2.0;
    let upper = (y0 as f64) < (h as f64 - 1.0) / 2.0;
    let quad = match (upper, left) {
        (true, true) => TOK_QUAD_UL,
        (true, false) => TOK_QUAD_UR,
        (false, true) => TOK_QUAD_LL,
        (false, false) => TOK_QUAD_LR,
    };
    let mut max_step = 0i64;
    for win in positions.windows(2) {
        let dx = (win[1].0 - win[0].0).abs();
        let dy = (win[1].1 - win[0].1).abs();
        max_step = max_step.max(dx).max(dy);
    }
    let speed = match max_step {
        0 => TOK_SPEED_STILL,
        1 => TOK_SPEED_SLOW,
        _ => TOK_SPEED_FAST,
    };
    let y_end = positions[positions.len() - 1].1;
    let pitch = match y_end.cmp(&y0) {
        std::cmp::Ordering::Greater => TOK_PITCH_UP,
        std::cmp::Ordering::Less => TOK_PITCH_DOWN,
        std::cmp::Ordering::Equal => TOK_PITCH_FLAT,
    };
    (vec![quad, speed], vec![pitch, speed], vec![TOK_NO_SPEECH])
}

/// How raw steps map into the video latent: `sub` raw steps per latent frame,
/// each rendered into `dup` duplicated channels.
pub fn temporal_layout(cfg: &ModelConfig) -> (usize, usize) {
    let (c, f, ..) = cfg.video_grid;
    let raw_steps = cfg.audio_grid.1;
    assert_eq!(raw_steps % f, 0, "raw steps must split evenly across frames");
    let sub = raw_steps / f;
    assert_eq!(c % sub, 0, "channels must split evenly across sub-frames");
    (sub, c / sub)
}

fn tent_weights(center: i64) -> [(i64, f32); 3] {
    [(center - 1, 0.25), (center, 0.5), (center + 1, 0.25)]
}

/// Renders the paired latents for an existing trajectory.
pub fn render_pair(
    positions: &[(i64, i64)],
    clip_id: u64,
    cfg: &ModelConfig,
) -> SampleTuple {
    let (c, f, h, w) = cfg.video_grid;
    let (ca, t_steps, fbins) = cfg.audio_grid;
    assert_eq!(positions.len(), t_steps, "one position per audio step");
    assert_eq!(fbins, h, "frequency bins must equal grid height for the exact pitch-height map");
    assert!(h >= 4 && w >= 4, "grid too small for a margin-1 blob");
    let (sub, dup) = temporal_layout(cfg);

    let mut video = TensF32::zeros(&[c, f, h, w]);
    for (r, &(px, py)) in positions.iter().enumerate() {
        let frame = r / sub;
        let sub_i = r % sub;
        for d in 0..dup {
            let ch = sub_i * dup + d;
            for (row, wr) in tent_weights(py) {
                for (col, wc) in tent_weights(px) {
                    // Margin-1 positions keep the tent inside the grid.
                    let idx = video.idx4(ch, frame, row as usize, col as usize);
                    video.data[idx] = VIDEO_AMP * wr * wc;
                }
            }
        }
    }

    let mut audio = TensF32::zeros(&[ca, t_steps, fbins]);
    for (t, &(_, py)) in positions.iter().enumerate() {
        for ch in 0..ca {
            let idx = audio.idx3(ch, t, py as usize);
            audio.data[idx] = AUDIO_AMP;
        }
    }

    let (video_caption, audio_caption, speech) = captions_for(positions, h, w);
    let reference = extract_reference(&video);
    SampleTuple {
        clip_id,
        video,
        audio,
        video_caption,
        audio_caption,
        speech,
        subset: SubsetTag::HighQuality,
        reference,
    }
}

/// Vertical bounce bounds as a fixed function of vertical speed, for an
/// 8-cell grid (margin cells 1..=6): unit speed spans the full field, the
/// faster speeds get offset sub-spans. Tying bounds to the speed keeps the
/// trajectory a deterministic function of any four consecutive positions
/// (no hidden per-clip state for a generator conditioned on the first
/// frame) while still varying period, amplitude, and mean across clips,
/// which decorrelates mismatched pairs.
pub fn bounds_for_speed(mag: i64, h: usize) -> (i64, i64) {
    let top = h as i64 - 2;
    match mag {
        1 => (1, top),
        2 => (1, top - 1),
        _ => (2, top),
    }
}

/// Draws a world uniformly: vertical speed in {1, 2, 3} with random sign and
/// speed-determined bounce bounds, a start cell inside those bounds, and
/// horizontal velocity in [−1, 1]. Vertical motion is never zero, so pitch
/// always varies on clean clips.
pub fn draw_world(rng: &mut Stream, h: usize, w: usize) -> BallWorld {
    let mag = 1 + rng.below(3) as i64;
    let (lo_y, hi_y) = bounds_for_speed(mag, h);
    let px = 1 + rng.below(w as u64 - 2) as i64;
    let py = lo_y + rng.below((hi_y - lo_y + 1) as u64) as i64;
    let vx = rng.below(3) as i64 - 1;
    let vy = if rng.below(2) == 0 { -mag } else { mag };
    BallWorld { px, py, vx, vy, lo_y, hi_y }
}

/// Generates one clean paired sample, deterministic in `seed`.
pub fn gen_pair(seed: u64, cfg: &ModelConfig) -> SampleTuple {
    let (_, _, h, w) = cfg.video_grid;
    let mut rng = Stream::new(derive_seed_tagged(seed, TAG_WORLD, 0));
    let world = draw_world(&mut rng, h, w);
    let positions = simulate(world, cfg.audio_grid.1, h, w);
    render_pair(&positions, seed, cfg)
}

/// Inverse of the tent splat: the intensity-weighted centroid of each raw
/// step's slot, rounded to the nearest cell. Exact on clean renders because
/// the tent's marginal weights are symmetric around the center cell.
pub fn decode_positions(video: &TensF32, cfg: &ModelConfig) -> Vec<(i64, i64)> {
    let (c, f, h, w) = cfg.video_grid;
    assert_eq!(video.shape, vec![c, f, h, w], "video latent shape mismatch");
    let raw_steps = cfg.audio_grid.1;
    let (sub, dup) = temporal_layout(cfg);
    let mut out = Vec::with_capacity(raw_steps);
    for r in 0..raw_steps {
        let frame = r / sub;
        let sub_i = r % sub;
        let (mut mass, mut mx, mut my) = (0.0f64, 0.0f64, 0.0f64);
        for d in 0..dup {
            let ch = sub_i * dup + d;
            for row in 0..h {
                for col in 0..w {
                    let v = (video.data[video.idx4(ch, frame, row, col)] as f64).max(0.0);
                    mass += v;
                    mx += v * col as f64;
                    my += v * row as f64;
                }
            }
        }
        if mass == 0.0 {
            out.push(((w / 2) as i64, (h / 2) as i64));
        } else {
            out.push(((mx / mass).round() as i64, (my / mass).round() as i64));
        }
    }
    out
}

/// Copy with i.i.d. Gaussian noise of std `sigma` added to the video latent
/// only; audio untouched, subset re-tagged low-quality, reference re-extracted
/// from the degraded video.
pub fn degrade(sample: &SampleTuple, seed: u64, sigma: f64) -> SampleTuple {
    assert!(sigma > 0.0, "degrade needs positive sigma");
    let mut rng = Stream::new(derive_seed_tagged(seed, TAG_DEGRADE, 0));
    let mut out = sample.clone();
    for v in &mut out.video.data {
        *v = (*v as f64 + sigma * rng.normal()) as f32;
    }
    out.subset = SubsetTag::LowQuality;
    out.reference = extract_reference(&out.video);
    out
}

/// Builds `n_clean` high-quality and `n_degraded` low-quality samples, writing
/// `data.shard` and a line-oriented `manifest.tsv` (clip_id, subset) to `dir`.
pub fn build_dataset(
    n_clean: usize,
    n_degraded: usize,
    seed: u64,
    cfg: &ModelConfig,
    dir: &Path,
) -> Result<Vec<SampleTuple>, DataError> {
    assert!(n_clean >= 1, "at least one clean sample required");
    fs::create_dir_all(dir)?;
    let mut samples = Vec::with_capacity(n_clean + n_degraded);
    for i in 0..n_clean {
        samples.push(gen_pair(seed + i as u64, cfg));
    }
    for j in 0..n_degraded {
        let s = gen_pair(seed + (n_clean + j) as u64, cfg);
        samples.push(degrade(&s, seed + (n_clean + j) as u64, DEGRADE_SIGMA));
    }
    write_shard(&samples, &dir.join("data.shard"))?;
    let mut manifest = String::new();
    for s in &samples {
        manifest.push_str(&format!("{}\t{}\n", s.clip_id, s.subset.as_str()));
    }
    fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evals::pearson;
    use crate::infer::{decode_height, decode_pitch};
    use crate::shard::read_shard;
    use sha2::{Digest, Sha256};
    use tempfile::tempdir;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn trajectory_stays_in_bounds() {
        for seed in 0..50 {
            let mut rng = Stream::new(seed);
            let world = draw_world(&mut rng, 8, 8);
            for (x, y) in simulate(world, 200, 8, 8) {
                assert!((1..=6).contains(&x));
                assert!((world.lo_y..=world.hi_y).contains(&y));
                assert!((1..=6).contains(&y));
            }
        }
    }

    #[test]
    fn ball_at_rest_gives_constant_pitch_bin() {
        let cfg = cfg();
        let world = BallWorld { px: 3, py: 5, vx: 0, vy: 0, lo_y: 1, hi_y: 6 };
        let positions = simulate(world, cfg.audio_grid.1, 8, 8);
        let s = render_pair(&positions, 0, &cfg);
        for t in 0..cfg.audio_grid.1 {
            for ch in 0..cfg.audio_grid.0 {
                for b in 0..cfg.audio_grid.2 {
                    let v = s.audio.data[s.audio.idx3(ch, t, b)];
                    if b == 5 {
                        assert_eq!(v, AUDIO_AMP);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
        assert_eq!(s.audio_caption[0], TOK_PITCH_FLAT);
        assert_eq!(s.video_caption[1], TOK_SPEED_STILL);
    }

    #[test]
    fn gen_pair_is_deterministic() {
        let cfg = cfg();
        assert_eq!(gen_pair(0, &cfg), gen_pair(0, &cfg));
        assert_ne!(gen_pair(0, &cfg), gen_pair(1, &cfg));
    }

    #[test]
    fn decoded_series_match_generating_trajectory_exactly() {
        let cfg = cfg();
        for seed in 0..20 {
            let mut rng = Stream::new(seed * 31 + 5);
            let world = draw_world(&mut rng, 8, 8);
            let positions = simulate(world, cfg.audio_grid.1, 8, 8);
            let s = render_pair(&positions, seed, &cfg);
            let heights = decode_height(&s.video, &cfg);
            let pitches = decode_pitch(&s.audio);
            let want: Vec<f64> = positions.iter().map(|&(_, y)| y as f64 / 7.0).collect();
            assert_eq!(heights, want, "decoded heights differ (seed {seed})");
            assert_eq!(pitches, want, "decoded pitches differ (seed {seed})");
            let cells = decode_positions(&s.video, &cfg);
            assert_eq!(cells, positions, "decoded cells differ (seed {seed})");
        }
    }

    #[test]
    fn matched_pairs_correlate_exactly_and_shuffled_pairs_do_not() {
        let cfg = cfg();
        let n = 100;
        let samples: Vec<_> = (0..n).map(|i| gen_pair(i as u64, &cfg)).collect();
        let mut null_sum = 0.0;
        let mut matched_exact = 0;
        for i in 0..n {
            let h = decode_height(&samples[i].video, &cfg);
            let p_same = decode_pitch(&samples[i].audio);
            if pearson(&h, &p_same) == Some(1.0) {
                matched_exact += 1;
            }
            let p_other = decode_pitch(&samples[(i + 1) % n].audio);
            null_sum += pearson(&h, &p_other).map_or(0.0, f64::abs);
        }
        // Vertical velocity is never zero, so every clean clip has pitch variance.
        assert_eq!(matched_exact, n, "every matched pair must correlate exactly");
        let null_mean = null_sum / n as f64;
        eprintln!("shuffled-pair mean |corr| = {null_mean:.4}");
        assert!(null_mean < 0.3, "shuffled-pair mean |corr| too high: {null_mean}");
    }

    #[test]
    fn degrade_touches_video_only_and_matches_sigma() {
        let cfg = cfg();
        let clean = gen_pair(3, &cfg);
        let noisy = degrade(&clean, 9, DEGRADE_SIGMA);
        assert_eq!(noisy.audio, clean.audio, "audio must be bitwise unchanged");
        assert_eq!(noisy.subset, SubsetTag::LowQuality);
        assert_eq!(noisy.reference, extract_reference(&noisy.video));
        // Empirical std of the added noise across ≥ 10⁴ elements within 5%.
        let mut diffs: Vec<f64> = Vec::new();
        for s in 0..5u64 {
            let c = gen_pair(100 + s, &cfg);
            let d = degrade(&c, 200 + s, DEGRADE_SIGMA);
            diffs.extend(
                d.video.data.iter().zip(&c.video.data).map(|(a, b)| (*a - *b) as f64),
            );
        }
        assert!(diffs.len() >= 10_000);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / diffs.len() as f64;
        let std = var.sqrt();
        assert!((std - DEGRADE_SIGMA).abs() / DEGRADE_SIGMA < 0.05, "std {std}");
    }

    #[test]
    fn degrade_near_zero_sigma_changes_almost_nothing() {
        let cfg = cfg();
        let clean = gen_pair(4, &cfg);
        let sigma = 1e-9;
        let out = degrade(&clean, 5, sigma);
        // Gaussian draws never exceed 100σ in practice.
        assert!(out.video.max_abs_diff(&clean.video) < (100.0 * sigma) as f32);
    }

    #[test]
    fn build_dataset_counts_manifest_and_checksum() {
        let cfg = cfg();
        let dir = tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let samples = build_dataset(4, 4, 7, &cfg, &a).unwrap();
        assert_eq!(samples.len(), 8);
        let back = read_shard(&a.join("data.shard")).unwrap();
        assert_eq!(back, samples);
        let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
        let highs = manifest.lines().filter(|l| l.ends_with("high_quality")).count();
        let lows = manifest.lines().filter(|l| l.ends_with("low_quality")).count();
        assert_eq!((highs, lows), (4, 4));
        // Same seed → identical shard bytes.
        build_dataset(4, 4, 7, &cfg, &b).unwrap();
        let ha = Sha256::digest(fs::read(a.join("data.shard")).unwrap());
        let hb = Sha256::digest(fs::read(b.join("data.shard")).unwrap());
        assert_eq!(ha, hb);
    }

    #[test]
    fn clean_only_dataset_has_no_low_quality_tags() {
        let cfg = cfg();
        let dir = tempdir().unwrap();
        let samples = build_dataset(4, 0, 11, &cfg, dir.path()).unwrap();
        assert_eq!(samples.len(), 4);
        assert!(samples.iter().all(|s| s.subset == SubsetTag::HighQuality));
    }

    #[test]
    fn samples_satisfy_structural_invariants() {
        let cfg = cfg();
        for seed in 0..10 {
            gen_pair(seed, &cfg).check_invariants().unwrap();
        }
        let d = degrade(&gen_pair(0, &cfg), 1, 0.5);
        d.check_invariants().unwrap();
    }
}
