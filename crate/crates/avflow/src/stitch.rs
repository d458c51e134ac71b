//! Block-level fusion of the two expert branches: per-depth connector
//! parameters carry bidirectional injections between the streams, the shallower
//! expert is depth-matched by weight interpolation, and the whole bimodal model
//! lives in one flat name→tensor map.
//!
//! Injections are additive attention branches with dedicated key/value
//! projections: the host attention's output and the branch's separately
//! normalized attention output are summed before the host's output projection.
//! Because each branch's value projection starts at zero, a freshly built
//! fused model reproduces both standalone expert paths exactly.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{NodeId, Tape};
use crate::config::ModelConfig;
use crate::experts::{
    block_attn_half, block_finish_half, caption_nodes, expert_input, expert_output,
    frame_bucketed_attention, init_audio_block, init_audio_static, init_cond, init_ssl,
    init_video_block, init_video_static, param, time_vector, BlockWeights,
    BucketedInjection, CrossInjection, ParamNodes,
};
use crate::rng::{derive_seed_tagged, Stream};
use crate::shard::{read_mat_map, write_mat_map, ShardError};
use crate::tensor::Mat;

#[derive(Debug, Error)]
pub enum StitchError {
    #[error("target depth {target} below current depth {current}")]
    Depth { target: usize, current: usize },
    #[error("bracketing blocks have different parameter names: {0}")]
    NameMismatch(String),
    #[error("bucket geometry mismatch: {0}")]
    Ratio(String),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error("checkpoint inconsistent with configuration: {0}")]
    Checkpoint(String),
}

// ---------------------------------------------------------------------------
// Connector parameters
// ---------------------------------------------------------------------------

/// Per-depth cross-modal connector: two bias-free two-layer adapters, three
/// dedicated key/value projection pairs (video self-attention injection, video
/// cross-attention injection, audio cross-attention injection), and the shared
/// LayerNorm applied on the audio→video path.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectorWeights(pub BTreeMap<String, Mat>);

/// Value projections start at zero so injections vanish at initialization;
/// the test suite pins this expert-preservation property exactly.
pub fn init_connector(cfg: &ModelConfig, rng: &mut Stream) -> ConnectorWeights {
    let (dv, da) = (cfg.video_dim, cfg.audio_dim);
    let std = crate::experts::WEIGHT_STD;
    let mut m = BTreeMap::new();
    m.insert("adapter_a2v.w1".into(), rng.normal_mat_scaled(da, dv, std));
    m.insert("adapter_a2v.w2".into(), rng.normal_mat_scaled(dv, dv, std));
    m.insert("adapter_v2a.w1".into(), rng.normal_mat_scaled(dv, da, std));
    m.insert("adapter_v2a.w2".into(), rng.normal_mat_scaled(da, da, std));
    m.insert("self_inj.k".into(), rng.normal_mat_scaled(dv, dv, std));
    m.insert("self_inj.v".into(), Mat::zeros(dv, dv));
    m.insert("cross_inj_v.k".into(), rng.normal_mat_scaled(dv, dv, std));
    m.insert("cross_inj_v.v".into(), Mat::zeros(dv, dv));
    m.insert("cross_inj_a.k".into(), rng.normal_mat_scaled(da, da, std));
    m.insert("cross_inj_a.v".into(), Mat::zeros(da, da));
    m.insert("shared_norm.g".into(), Mat::filled(1, dv, 1.0));
    m.insert("shared_norm.b".into(), Mat::zeros(1, dv));
    ConnectorWeights(m)
}

// ---------------------------------------------------------------------------
// Layer interpolation
// ---------------------------------------------------------------------------

/// Depth-expands a block stack by inserting mean-of-neighbors blocks at
/// near-uniform positions. The i-th insertion goes after original index
/// floor((i+1)·len/(gaps+1)) (ties toward earlier positions, clamped so a
/// following neighbor always exists); every tensor of an inserted block is
/// 0.5·(preceding original + following original), matched by parameter name.
/// Original blocks are returned unchanged and in order.
pub fn interpolate_layers(
    blocks: &[BlockWeights],
    target_depth: usize,
) -> Result<Vec<BlockWeights>, StitchError> {
    let len = blocks.len();
    assert!(len >= 2, "need at least two blocks to interpolate between");
    if target_depth < len {
        return Err(StitchError::Depth { target: target_depth, current: len });
    }
    if target_depth == len {
        return Ok(blocks.to_vec());
    }
    let gaps = target_depth - len;
    // after[i] = original index the i-th new block is inserted after
    let after: Vec<usize> = (0..gaps)
        .map(|i| (((i + 1) * len) / (gaps + 1)).min(len - 2))
        .collect();

    let mut out: Vec<BlockWeights> = Vec::with_capacity(target_depth);
    for (j, b) in blocks.iter().enumerate() {
        out.push(b.clone());
        for (i, &a) in after.iter().enumerate() {
            if a == j {
                out.push(mean_block(&blocks[j], &blocks[j + 1], i)?);
            }
        }
    }
    assert_eq!(out.len(), target_depth);
    Ok(out)
}

fn mean_block(lo: &BlockWeights, hi: &BlockWeights, idx: usize) -> Result<BlockWeights, StitchError> {
    let lo_names: Vec<&String> = lo.0.keys().collect();
    let hi_names: Vec<&String> = hi.0.keys().collect();
    if lo_names != hi_names {
        return Err(StitchError::NameMismatch(format!(
            "insertion {idx}: {} vs {} parameters",
            lo_names.len(),
            hi_names.len()
        )));
    }
    let mut m = BTreeMap::new();
    for (name, a) in &lo.0 {
        let b = &hi.0[name];
        if (a.rows, a.cols) != (b.rows, b.cols) {
            return Err(StitchError::NameMismatch(format!(
                "insertion {idx}: {name} shapes ({},{}) vs ({},{})",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let mut v = a.clone();
        for (x, y) in v.data.iter_mut().zip(&b.data) {
            *x = 0.5 * (*x + *y);
        }
        m.insert(name.clone(), v);
    }
    Ok(BlockWeights(m))
}

// ---------------------------------------------------------------------------
// The fused model
// ---------------------------------------------------------------------------

/// The bimodal model: every parameter in one flat name→tensor map under the
/// namespaces `video.*`, `audio.*`, `connector.<depth>.*`, `cond.*`, `ssl.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedModel {
    pub cfg: ModelConfig,
    pub weights: BTreeMap<String, Mat>,
}

fn insert_namespaced(map: &mut BTreeMap<String, Mat>, prefix: &str, src: BTreeMap<String, Mat>) {
    for (k, v) in src {
        map.insert(format!("{prefix}{k}"), v);
    }
}

/// Stitches prebuilt expert block stacks into one fused model: the shallower
/// stack is interpolated to the deeper depth, per-depth connectors are
/// initialized with zero value projections, and the non-block parameters
/// (projections, positions, time MLPs, caption table, teacher heads) are
/// seeded from `seed`.
pub fn build_fused_model(
    cfg: &ModelConfig,
    video_blocks: Vec<BlockWeights>,
    audio_blocks: Vec<BlockWeights>,
    seed: u64,
) -> Result<FusedModel, StitchError> {
    assert!(!video_blocks.is_empty() && !audio_blocks.is_empty(), "empty expert stacks");
    let depth = video_blocks.len().max(audio_blocks.len());
    let vb = if video_blocks.len() < depth {
        interpolate_layers(&video_blocks, depth)?
    } else {
        video_blocks
    };
    let ab = if audio_blocks.len() < depth {
        interpolate_layers(&audio_blocks, depth)?
    } else {
        audio_blocks
    };

    let mut w = BTreeMap::new();
    for (i, b) in vb.into_iter().enumerate() {
        insert_namespaced(&mut w, &format!("video.blk.{i}."), b.0);
    }
    for (i, b) in ab.into_iter().enumerate() {
        insert_namespaced(&mut w, &format!("audio.blk.{i}."), b.0);
    }
    let mut rng = Stream::new(derive_seed_tagged(seed, 0x5A, 0));
    insert_namespaced(&mut w, "video.", init_video_static(cfg, &mut rng));
    insert_namespaced(&mut w, "audio.", init_audio_static(cfg, &mut rng));
    insert_namespaced(&mut w, "cond.", init_cond(cfg, &mut rng));
    insert_namespaced(&mut w, "ssl.", init_ssl(cfg, &mut rng));
    for i in 0..depth {
        let c = init_connector(cfg, &mut rng);
        insert_namespaced(&mut w, &format!("connector.{i}."), c.0);
    }
    Ok(FusedModel { cfg: cfg.clone(), weights: w })
}

/// Builds expert stacks at the configured depths and fuses them.
pub fn init_fused(cfg: &ModelConfig, seed: u64) -> FusedModel {
    let mut rng_v = Stream::new(derive_seed_tagged(seed, 0x11, 0));
    let mut rng_a = Stream::new(derive_seed_tagged(seed, 0x22, 0));
    let vb: Vec<BlockWeights> = (0..cfg.video_depth).map(|_| init_video_block(cfg, &mut rng_v)).collect();
    let ab: Vec<BlockWeights> = (0..cfg.audio_depth).map(|_| init_audio_block(cfg, &mut rng_a)).collect();
    build_fused_model(cfg, vb, ab, seed).expect("valid configured depths")
}

impl FusedModel {
    pub fn depth(&self) -> usize {
        self.cfg.fused_depth()
    }

    /// Writes the flat weight map as a checkpoint shard.
    pub fn save(&self, path: &Path) -> Result<(), StitchError> {
        write_mat_map(&self.weights, path)?;
        Ok(())
    }

    /// Reads a checkpoint and checks it carries exactly the parameter set the
    /// configuration implies (names and shapes).
    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<FusedModel, StitchError> {
        let weights = read_mat_map(path)?;
        let fresh = init_fused(cfg, 0);
        if weights.len() != fresh.weights.len() {
            return Err(StitchError::Checkpoint(format!(
                "{} tensors, expected {}",
                weights.len(),
                fresh.weights.len()
            )));
        }
        for (name, m) in &fresh.weights {
            match weights.get(name) {
                None => return Err(StitchError::Checkpoint(format!("missing tensor {name}"))),
                Some(x) if (x.rows, x.cols) != (m.rows, m.cols) => {
                    return Err(StitchError::Checkpoint(format!(
                        "{name}: shape ({},{}), expected ({},{})",
                        x.rows, x.cols, m.rows, m.cols
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(FusedModel { cfg: cfg.clone(), weights })
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Bias-free two-layer adapter with a SiLU nonlinearity between the layers;
/// zero input maps to zero output exactly.
fn adapter(t: &mut Tape, pm: &ParamNodes, prefix: &str, x: NodeId) -> NodeId {
    let w1 = param(pm, prefix, "w1");
    let w2 = param(pm, prefix, "w2");
    let h = t.matmul(x, false, w1, false);
    let h = t.silu(h);
    t.matmul(h, false, w2, false)
}

fn layer_norm_affine(t: &mut Tape, x: NodeId, g: NodeId, b: NodeId) -> NodeId {
    let n = t.normalize_rows(x);
    let n = t.mul_row(n, g);
    t.add_row(n, b)
}

/// Per-frame audio→video update: project the (already adapted and normalized)
/// audio tokens with dedicated key/value layers, then let each video frame's
/// queries attend only to its own frame's audio bucket.
#[allow(clippy::too_many_arguments)]
pub fn frame_bucketed_cross_attention(
    t: &mut Tape,
    q_video: NodeId,
    audio_tokens: NodeId,
    heads: usize,
    q_rows_per_frame: usize,
    kv_rows_per_frame: usize,
    k_proj: NodeId,
    v_proj: NodeId,
) -> Result<NodeId, StitchError> {
    let nq = t.val(q_video).rows;
    let nkv = t.val(audio_tokens).rows;
    if q_rows_per_frame == 0 || nq % q_rows_per_frame != 0 {
        return Err(StitchError::Ratio(format!(
            "{nq} video rows not divisible into frames of {q_rows_per_frame}"
        )));
    }
    let frames = nq / q_rows_per_frame;
    if kv_rows_per_frame == 0 || nkv != frames * kv_rows_per_frame {
        return Err(StitchError::Ratio(format!(
            "{nkv} audio rows cannot fill {frames} buckets of {kv_rows_per_frame}"
        )));
    }
    let k = t.matmul(audio_tokens, false, k_proj, false);
    let v = t.matmul(audio_tokens, false, v_proj, false);
    Ok(frame_bucketed_attention(t, q_video, k, v, heads, q_rows_per_frame, kv_rows_per_frame))
}

/// Audio tokens per video frame for the self-attention injection buckets.
fn bucket_geometry(cfg: &ModelConfig) -> (usize, usize) {
    let frames = cfg.video_token_frames();
    let q_rows = cfg.video_token_count() / frames;
    assert_eq!(
        cfg.audio_token_count() % frames,
        0,
        "audio tokens must split evenly across video frames"
    );
    (q_rows, cfg.audio_token_count() / frames)
}

/// One fused depth: audio attention half → audio→video adaptation (shared
/// LayerNorm) → video block with both injections → video→audio adaptation →
/// audio finish half with its injection. Returns the two stream states.
#[allow(clippy::too_many_arguments)]
pub fn fused_pair_forward(
    t: &mut Tape,
    pm: &ParamNodes,
    cfg: &ModelConfig,
    depth: usize,
    x_v: NodeId,
    x_a: NodeId,
    cond_v: NodeId,
    cond_a: NodeId,
    tv_v: NodeId,
    tv_a: NodeId,
) -> (NodeId, NodeId) {
    let pv = format!("video.blk.{depth}.");
    let pa = format!("audio.blk.{depth}.");
    let pc = format!("connector.{depth}.");

    // Audio linear-attention sub-layer; its hidden state feeds the video side.
    let x1_a = block_attn_half(t, pm, &pa, x_a, tv_a, cfg.audio_heads, true, None);

    // Audio → video: adapter, then the shared LayerNorm used by both video
    // injection sites.
    let z_raw = adapter(t, pm, &format!("{pc}adapter_a2v."), x1_a);
    let ng = param(pm, &pc, "shared_norm.g");
    let nb = param(pm, &pc, "shared_norm.b");
    let z = layer_norm_affine(t, z_raw, ng, nb);

    let sk = param(pm, &pc, "self_inj.k");
    let sv = param(pm, &pc, "self_inj.v");
    let k_self = t.matmul(z, false, sk, false);
    let v_self = t.matmul(z, false, sv, false);
    let (q_rows, kv_rows) = bucket_geometry(cfg);

    let ck = param(pm, &pc, "cross_inj_v.k");
    let cv = param(pm, &pc, "cross_inj_v.v");
    let k_cv = t.matmul(z, false, ck, false);
    let v_cv = t.matmul(z, false, cv, false);

    // Video block with frame-bucketed self-attention injection and
    // cross-attention injection.
    let x1_v = block_attn_half(
        t,
        pm,
        &pv,
        x_v,
        tv_v,
        cfg.video_heads,
        false,
        Some(BucketedInjection {
            k: k_self,
            v: v_self,
            q_rows_per_bucket: q_rows,
            kv_rows_per_bucket: kv_rows,
        }),
    );
    let out_v = block_finish_half(
        t,
        pm,
        &pv,
        x1_v,
        cond_v,
        tv_v,
        cfg.video_heads,
        Some(CrossInjection { k: k_cv, v: v_cv }),
    );

    // Video → audio: adapter (no norm on this path), injected into the audio
    // cross-attention alongside its condition tokens.
    let zv = adapter(t, pm, &format!("{pc}adapter_v2a."), x1_v);
    let ak = param(pm, &pc, "cross_inj_a.k");
    let av = param(pm, &pc, "cross_inj_a.v");
    let k_ca = t.matmul(zv, false, ak, false);
    let v_ca = t.matmul(zv, false, av, false);
    let out_a = block_finish_half(
        t,
        pm,
        &pa,
        x1_a,
        cond_a,
        tv_a,
        cfg.audio_heads,
        Some(CrossInjection { k: k_ca, v: v_ca }),
    );

    (out_v, out_a)
}

/// Outputs of a full fused forward pass: per-stream velocity predictions in
/// token space plus the audio hidden state tapped for the semantic loss.
#[derive(Clone, Copy, Debug)]
pub struct FusedOutput {
    pub video_pred: NodeId,
    pub audio_pred: NodeId,
    pub ssl_tap: NodeId,
}

/// Full bimodal forward: both token streams in, both velocity predictions out.
#[allow(clippy::too_many_arguments)]
pub fn fused_forward(
    t: &mut Tape,
    pm: &ParamNodes,
    cfg: &ModelConfig,
    video_tokens: NodeId,
    audio_tokens: NodeId,
    video_caption: &[u32],
    audio_caption: &[u32],
    speech: &[u32],
    s_level: f64,
) -> FusedOutput {
    let (cond_v, cond_a) = caption_nodes(t, pm, video_caption, audio_caption, speech);
    let tv_v = time_vector(t, pm, "video.time.", s_level);
    let tv_a = time_vector(t, pm, "audio.time.", s_level);
    let mut xv = expert_input(t, pm, "video.", video_tokens);
    let mut xa = expert_input(t, pm, "audio.", audio_tokens);
    let mut tap = None;
    for d in 0..cfg.fused_depth() {
        let (nv, na) = fused_pair_forward(t, pm, cfg, d, xv, xa, cond_v, cond_a, tv_v, tv_a);
        xv = nv;
        xa = na;
        if d == cfg.fusion_layer_ssl {
            tap = Some(xa);
        }
    }
    FusedOutput {
        video_pred: expert_output(t, pm, "video.", xv),
        audio_pred: expert_output(t, pm, "audio.", xa),
        ssl_tap: tap.expect("fusion_layer_ssl below fused depth"),
    }
}

/// Which expert a standalone forward runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamKind {
    Video,
    Audio,
}

/// Runs one stream of the fused model with every fusion hook absent: the pure
/// expert path over the same (depth-matched) block stack. The fused forward at
/// initialization must reproduce this output exactly.
pub fn standalone_forward(
    t: &mut Tape,
    pm: &ParamNodes,
    cfg: &ModelConfig,
    kind: StreamKind,
    tokens: NodeId,
    video_caption: &[u32],
    audio_caption: &[u32],
    speech: &[u32],
    s_level: f64,
) -> NodeId {
    let (cond_v, cond_a) = caption_nodes(t, pm, video_caption, audio_caption, speech);
    let (stream, cond, heads, linear) = match kind {
        StreamKind::Video => ("video", cond_v, cfg.video_heads, false),
        StreamKind::Audio => ("audio", cond_a, cfg.audio_heads, true),
    };
    let tv = time_vector(t, pm, &format!("{stream}.time."), s_level);
    let mut x = expert_input(t, pm, &format!("{stream}."), tokens);
    for d in 0..cfg.fused_depth() {
        let pfx = format!("{stream}.blk.{d}.");
        let x1 = block_attn_half(t, pm, &pfx, x, tv, heads, linear, None);
        x = block_finish_half(t, pm, &pfx, x1, cond, tv, heads, None);
    }
    expert_output(t, pm, &format!("{stream}."), x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::experts::register_params;
    use tempfile::tempdir;

    fn marker_block(cfg: &ModelConfig, fill: f64) -> BlockWeights {
        let mut rng = Stream::new(0);
        let mut b = init_video_block(cfg, &mut rng);
        for m in b.0.values_mut() {
            for v in &mut m.data {
                *v = fill;
            }
        }
        b
    }

    #[test]
    fn interpolation_no_op_at_equal_depth() {
        let cfg = ModelConfig::default();
        let blocks: Vec<BlockWeights> = (0..3).map(|i| marker_block(&cfg, i as f64)).collect();
        let out = interpolate_layers(&blocks, 3).unwrap();
        assert_eq!(out, blocks);
    }

    #[test]
    fn interpolation_between_identical_blocks_copies_them() {
        let cfg = ModelConfig::default();
        let blocks = vec![marker_block(&cfg, 2.0), marker_block(&cfg, 2.0)];
        let out = interpolate_layers(&blocks, 3).unwrap();
        assert_eq!(out.len(), 3);
        for b in &out {
            assert_eq!(b, &blocks[0]);
        }
    }

    #[test]
    fn interpolation_averages_ones_and_threes_to_twos() {
        let cfg = ModelConfig::default();
        let blocks = vec![marker_block(&cfg, 1.0), marker_block(&cfg, 3.0)];
        let out = interpolate_layers(&blocks, 3).unwrap();
        assert_eq!(out[0], blocks[0]);
        assert_eq!(out[2], blocks[1]);
        for m in out[1].0.values() {
            assert!(m.data.iter().all(|&v| v == 2.0));
        }
    }

    #[test]
    fn interpolation_positions_four_to_six() {
        let cfg = ModelConfig::default();
        let blocks: Vec<BlockWeights> = (0..4).map(|i| marker_block(&cfg, i as f64)).collect();
        let out = interpolate_layers(&blocks, 6).unwrap();
        // insertions go after original indices 1 and 2
        let fills: Vec<f64> = out.iter().map(|b| b.0["ada.b"].data[0]).collect();
        assert_eq!(fills, vec![0.0, 1.0, 1.5, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn interpolation_rejects_shrinking_and_name_mismatch() {
        let cfg = ModelConfig::default();
        let blocks: Vec<BlockWeights> = (0..4).map(|i| marker_block(&cfg, i as f64)).collect();
        assert!(matches!(
            interpolate_layers(&blocks, 3),
            Err(StitchError::Depth { target: 3, current: 4 })
        ));
        let mut bad = blocks.clone();
        bad[1].0.remove("ff.w1");
        assert!(matches!(interpolate_layers(&bad, 6), Err(StitchError::NameMismatch(_))));
    }

    #[test]
    fn fused_model_depth_counts() {
        let cfg = ModelConfig::default();
        let model = init_fused(&cfg, 7);
        assert_eq!(model.depth(), 6);
        for d in 0..6 {
            assert!(model.weights.contains_key(&format!("video.blk.{d}.attn.wq")));
            assert!(model.weights.contains_key(&format!("audio.blk.{d}.attn.wq")));
            assert!(model.weights.contains_key(&format!("connector.{d}.self_inj.v")));
        }
        assert!(!model.weights.contains_key("video.blk.6.attn.wq"));
        // value projections start at zero
        for d in 0..6 {
            for v in ["self_inj.v", "cross_inj_v.v", "cross_inj_a.v"] {
                let m = &model.weights[&format!("connector.{d}.{v}")];
                assert!(m.data.iter().all(|&x| x == 0.0), "{v} not zero at depth {d}");
            }
        }
    }

    #[test]
    fn equal_depths_keep_expert_weights_bit_identical() {
        let mut cfg = ModelConfig::default();
        cfg.video_depth = 3;
        cfg.audio_depth = 3;
        let mut rng = Stream::new(5);
        let vb: Vec<BlockWeights> = (0..3).map(|_| init_video_block(&cfg, &mut rng)).collect();
        let ab: Vec<BlockWeights> = (0..3).map(|_| init_audio_block(&cfg, &mut rng)).collect();
        let model = build_fused_model(&cfg, vb.clone(), ab.clone(), 9).unwrap();
        for (i, b) in vb.iter().enumerate() {
            for (name, m) in &b.0 {
                assert_eq!(&model.weights[&format!("video.blk.{i}.{name}")], m);
            }
        }
        for (i, b) in ab.iter().enumerate() {
            for (name, m) in &b.0 {
                assert_eq!(&model.weights[&format!("audio.blk.{i}.{name}")], m);
            }
        }
    }

    fn random_tokens(cfg: &ModelConfig, seed: u64) -> (Mat, Mat) {
        let mut rng = Stream::new(seed);
        (
            rng.normal_mat(cfg.video_token_count(), cfg.video_token_width()),
            rng.normal_mat(cfg.audio_token_count(), cfg.audio_token_width()),
        )
    }

    #[test]
    fn fused_model_preserves_both_experts_exactly_at_init() {
        let cfg = ModelConfig::default();
        let model = init_fused(&cfg, 42);
        for trial in 0..5 {
            let (vt, at) = random_tokens(&cfg, 100 + trial);
            let s = 0.1 + 0.15 * trial as f64;
            let mut t = Tape::new();
            let pm = register_params(&mut t, &model.weights, false);
            let vtn = t.constant(vt);
            let atn = t.constant(at);
            let (vc, ac, sp) = (vec![1u32, 6], vec![8u32, 6], vec![0u32]);
            let fused = fused_forward(&mut t, &pm, &cfg, vtn, atn, &vc, &ac, &sp, s);
            let solo_v =
                standalone_forward(&mut t, &pm, &cfg, StreamKind::Video, vtn, &vc, &ac, &sp, s);
            let solo_a =
                standalone_forward(&mut t, &pm, &cfg, StreamKind::Audio, atn, &vc, &ac, &sp, s);
            assert_eq!(t.val(fused.video_pred).max_abs_diff(t.val(solo_v)), 0.0);
            assert_eq!(t.val(fused.audio_pred).max_abs_diff(t.val(solo_a)), 0.0);
        }
    }

    #[test]
    fn inserting_between_identity_gated_blocks_keeps_function() {
        // Both bracketing blocks carry all-zero time-conditioning maps, so
        // they are identity on tokens for every noise level; their mean block
        // is then also identity and the expanded stack computes the same map.
        let mut cfg = ModelConfig::default();
        cfg.video_depth = 2;
        cfg.audio_depth = 2;
        cfg.fusion_layer_ssl = 1;
        let mut rng = Stream::new(3);
        let make_identity_gated = |rng: &mut Stream| {
            let mut b = init_video_block(&cfg, rng);
            let d = cfg.video_dim;
            b.0.insert("ada.w".into(), Mat::zeros(d, 9 * d));
            b.0.insert("ada.b".into(), Mat::zeros(1, 9 * d));
            b
        };
        let vb = vec![make_identity_gated(&mut rng), make_identity_gated(&mut rng)];
        let ab: Vec<BlockWeights> = (0..2).map(|_| init_audio_block(&cfg, &mut rng)).collect();
        let two = build_fused_model(&cfg, vb.clone(), ab.clone(), 17).unwrap();

        let expanded = interpolate_layers(&vb, 3).unwrap();
        // identity-gated blocks leave tokens unchanged, so the 2-block and the
        // expanded 3-block stacks must compute the same input→output map.
        let (vt, _) = random_tokens(&cfg, 8);
        let out2 = run_video_stack(&two.weights, &vb, &cfg, &vt);
        let out3 = run_video_stack(&two.weights, &expanded, &cfg, &vt);
        assert_eq!(out2.max_abs_diff(&out3), 0.0);
    }

    fn run_video_stack(
        base: &BTreeMap<String, Mat>,
        blocks: &[BlockWeights],
        cfg: &ModelConfig,
        vt: &Mat,
    ) -> Mat {
        let mut w = BTreeMap::new();
        for (i, b) in blocks.iter().enumerate() {
            for (k, m) in &b.0 {
                w.insert(format!("video.blk.{i}.{k}"), m.clone());
            }
        }
        for (k, m) in base {
            if !k.starts_with("video.blk.") {
                w.insert(k.clone(), m.clone());
            }
        }
        let mut t = Tape::new();
        let pm = register_params(&mut t, &w, false);
        let tok = t.constant(vt.clone());
        let (cond_v, _) = caption_nodes(&mut t, &pm, &[1, 6], &[8], &[0]);
        let tv = time_vector(&mut t, &pm, "video.time.", 0.4);
        let mut x = expert_input(&mut t, &pm, "video.", tok);
        for d in 0..blocks.len() {
            let pfx = format!("video.blk.{d}.");
            let x1 = block_attn_half(&mut t, &pm, &pfx, x, tv, cfg.video_heads, false, None);
            x = block_finish_half(&mut t, &pm, &pfx, x1, cond_v, tv, cfg.video_heads, None);
        }
        let out = expert_output(&mut t, &pm, "video.", x);
        t.val(out).clone()
    }

    #[test]
    fn bucketed_cross_attention_follows_its_contract() {
        let cfg = ModelConfig::default();
        let model = init_fused(&cfg, 4);
        let mut t = Tape::new();
        let mut rng = Stream::new(6);
        let q = t.constant(rng.normal_mat(cfg.video_token_count(), cfg.video_dim));
        // one audio token per frame bucket
        let frames = cfg.video_token_frames();
        let toks = rng.normal_mat(frames, cfg.video_dim);
        let a = t.constant(toks.clone());
        let kp = t.constant(rng.normal_mat(cfg.video_dim, cfg.video_dim));
        let vp_mat = rng.normal_mat(cfg.video_dim, cfg.video_dim);
        let vp = t.constant(vp_mat.clone());
        let q_rows = cfg.video_token_count() / frames;
        let out =
            frame_bucketed_cross_attention(&mut t, q, a, cfg.video_heads, q_rows, 1, kp, vp)
                .unwrap();
        // single key per bucket ⇒ every row of frame f equals v_proj(token_f)
        let want = crate::tensor::matmul(&toks, false, &vp_mat, false);
        for f in 0..frames {
            for r in 0..q_rows {
                assert_eq!(t.val(out).row(f * q_rows + r), want.row(f), "frame {f} row {r}");
            }
        }
        // zero value projection ⇒ zero update
        let zp = t.constant(Mat::zeros(cfg.video_dim, cfg.video_dim));
        let zout =
            frame_bucketed_cross_attention(&mut t, q, a, cfg.video_heads, q_rows, 1, kp, zp)
                .unwrap();
        assert!(t.val(zout).data.iter().all(|&x| x == 0.0));
        // geometry mismatch ⇒ error
        assert!(matches!(
            frame_bucketed_cross_attention(&mut t, q, a, cfg.video_heads, 7, 1, kp, vp),
            Err(StitchError::Ratio(_))
        ));
        let _ = model;
    }

    #[test]
    fn bucket_permutations_are_frame_local() {
        let cfg = ModelConfig::default();
        let mut t = Tape::new();
        let mut rng = Stream::new(7);
        let q = t.constant(rng.normal_mat(cfg.video_token_count(), cfg.video_dim));
        let frames = cfg.video_token_frames();
        let (q_rows, kv_rows) = (cfg.video_token_count() / frames, 2);
        let toks = rng.normal_mat(frames * kv_rows, cfg.video_dim);
        let kp = t.constant(rng.normal_mat(cfg.video_dim, cfg.video_dim));
        let vp = t.constant(rng.normal_mat(cfg.video_dim, cfg.video_dim));
        let a = t.constant(toks.clone());
        let base = frame_bucketed_cross_attention(
            &mut t, q, a, cfg.video_heads, q_rows, kv_rows, kp, vp,
        )
        .unwrap();
        // swap the two tokens of bucket 2 only
        let mut perm = toks.clone();
        for c in 0..cfg.video_dim {
            let lo = 2 * kv_rows;
            let (x, y) = (perm.at(lo, c), perm.at(lo + 1, c));
            *perm.at_mut(lo, c) = y;
            *perm.at_mut(lo + 1, c) = x;
        }
        let ap = t.constant(perm);
        let swapped = frame_bucketed_cross_attention(
            &mut t, q, ap, cfg.video_heads, q_rows, kv_rows, kp, vp,
        )
        .unwrap();
        for f in 0..frames {
            for r in 0..q_rows {
                let (b, s) = (t.val(base).row(f * q_rows + r), t.val(swapped).row(f * q_rows + r));
                if f == 2 {
                    // attention is permutation-invariant over its keys up to
                    // floating-point summation order within the bucket
                    for (x, y) in b.iter().zip(s) {
                        assert!((x - y).abs() < 1e-12, "frame {f} row {r}");
                    }
                } else {
                    // …and rows outside the permuted bucket must be untouched
                    assert_eq!(b, s, "frame {f} row {r}");
                }
            }
        }
        // moving a token's value across buckets changes only the target frame
        let mut moved = toks.clone();
        for c in 0..cfg.video_dim {
            *moved.at_mut(0, c) += 3.0; // bucket 0
        }
        let am = t.constant(moved);
        let shifted = frame_bucketed_cross_attention(
            &mut t, q, am, cfg.video_heads, q_rows, kv_rows, kp, vp,
        )
        .unwrap();
        for f in 0..frames {
            let mut differs = false;
            for r in 0..q_rows {
                if t.val(base).row(f * q_rows + r) != t.val(shifted).row(f * q_rows + r) {
                    differs = true;
                }
            }
            assert_eq!(differs, f == 0, "frame {f}");
        }
    }

    #[test]
    fn zero_audio_tokens_with_nonzero_connectors_leave_video_unchanged() {
        // The audio block's time-conditioning map is zeroed so a zero hidden
        // state stays zero through its attention sub-layer; the bias-free
        // adapter then maps zero to zero, the zero-initialized norm shift keeps
        // it zero, and even nonzero value projections inject nothing.
        let cfg = ModelConfig::grad_check();
        let mut model = init_fused(&cfg, 11);
        let d = cfg.audio_dim;
        model.weights.insert("audio.blk.0.ada.w".into(), Mat::zeros(d, 9 * d));
        model.weights.insert("audio.blk.0.ada.b".into(), Mat::zeros(1, 9 * d));
        let mut rng = Stream::new(12);
        for v in ["self_inj.v", "cross_inj_v.v", "cross_inj_a.v"] {
            let key = format!("connector.0.{v}");
            let shape = model.weights[&key].rows;
            let cols = model.weights[&key].cols;
            model.weights.insert(key, rng.normal_mat(shape, cols));
        }

        let (vt, _) = random_tokens(&cfg, 13);
        let mut t = Tape::new();
        let pm = register_params(&mut t, &model.weights, false);
        let vtn = t.constant(vt);
        let (vc, ac, sp) = (vec![1u32], vec![8u32], vec![0u32]);

        // a zero audio hidden stream: bypass the audio input projection by
        // running the pair forward directly on a zero state
        let cond = caption_nodes(&mut t, &pm, &vc, &ac, &sp);
        let tvv = time_vector(&mut t, &pm, "video.time.", 0.3);
        let tva = time_vector(&mut t, &pm, "audio.time.", 0.3);
        let xv = expert_input(&mut t, &pm, "video.", vtn);
        let xa = t.constant(Mat::zeros(cfg.audio_token_count(), cfg.audio_dim));
        let (fused_v, _) =
            fused_pair_forward(&mut t, &pm, &cfg, 0, xv, xa, cond.0, cond.1, tvv, tva);
        let x1 = block_attn_half(&mut t, &pm, "video.blk.0.", xv, tvv, cfg.video_heads, false, None);
        let solo_v =
            block_finish_half(&mut t, &pm, "video.blk.0.", x1, cond.0, tvv, cfg.video_heads, None);
        assert_eq!(t.val(fused_v).max_abs_diff(t.val(solo_v)), 0.0);
    }

    #[test]
    fn gradients_flow_bidirectionally_once_value_projections_are_nonzero() {
        let cfg = ModelConfig::grad_check();
        let mut model = init_fused(&cfg, 21);
        let mut rng = Stream::new(22);
        for v in ["self_inj.v", "cross_inj_v.v", "cross_inj_a.v"] {
            let key = format!("connector.0.{v}");
            let (r, c) = (model.weights[&key].rows, model.weights[&key].cols);
            model.weights.insert(key, rng.normal_mat_scaled(r, c, 0.1));
        }
        let (vt, at) = random_tokens(&cfg, 23);
        let mut t = Tape::new();
        let pm = register_params(&mut t, &model.weights, false);
        let vtn = t.input(vt.clone());
        let atn = t.input(at.clone());
        let (vc, ac, sp) = (vec![1u32], vec![8u32], vec![0u32]);
        let out = fused_forward(&mut t, &pm, &cfg, vtn, atn, &vc, &ac, &sp, 0.5);
        let wa = t.constant(Mat::filled(
            cfg.audio_token_count(),
            cfg.audio_token_width(),
            1.0,
        ));
        let prod = t.mul(out.audio_pred, wa);
        let loss = t.mean_all(prod);
        let grads = t.backward(loss);
        let g_video_input = grads[vtn].as_ref().expect("video input should receive gradient");
        let l1: f64 = g_video_input.data.iter().map(|x| x.abs()).sum();
        assert!(l1 > 0.0, "audio loss must reach the video input once injections are live");

        // finite-difference probe on one video-input element
        let idx = 5usize;
        let eval = |delta: f64| -> f64 {
            let mut t2 = Tape::new();
            let pm2 = register_params(&mut t2, &model.weights, false);
            let mut vt2 = vt.clone();
            vt2.data[idx] += delta;
            let vtn2 = t2.constant(vt2);
            let atn2 = t2.constant(at.clone());
            let out2 = fused_forward(&mut t2, &pm2, &cfg, vtn2, atn2, &vc, &ac, &sp, 0.5);
            let wa2 = t2.constant(Mat::filled(
                cfg.audio_token_count(),
                cfg.audio_token_width(),
                1.0,
            ));
            let prod2 = t2.mul(out2.audio_pred, wa2);
            let l2 = t2.mean_all(prod2);
            t2.val(l2).data[0]
        };
        let h = 1e-5;
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let an = g_video_input.data[idx];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        assert!((fd - an).abs() < 1e-9 || rel < 1e-4, "fd {fd:.3e} vs {an:.3e}");
    }

    #[test]
    fn every_parameter_class_passes_finite_difference_checks() {
        let cfg = ModelConfig::grad_check();
        let mut model = init_fused(&cfg, 31);
        // make injections live so connector gradients are nonzero
        let mut rng = Stream::new(32);
        for v in ["self_inj.v", "cross_inj_v.v", "cross_inj_a.v"] {
            let key = format!("connector.0.{v}");
            let (r, c) = (model.weights[&key].rows, model.weights[&key].cols);
            model.weights.insert(key, rng.normal_mat_scaled(r, c, 0.1));
        }
        let (vt, at) = random_tokens(&cfg, 33);
        let wv = rng.normal_mat(cfg.video_token_count(), cfg.video_token_width());
        let wa = rng.normal_mat(cfg.audio_token_count(), cfg.audio_token_width());
        let wt = rng.normal_mat(cfg.audio_token_count(), cfg.audio_dim);
        let (vc, ac, sp) = (vec![1u32, 6], vec![8u32], vec![0u32]);

        let build = |t: &mut Tape, pm: &ParamNodes| -> NodeId {
            let vtn = t.constant(vt.clone());
            let atn = t.constant(at.clone());
            let out = fused_forward(t, pm, &cfg, vtn, atn, &vc, &ac, &sp, 0.45);
            let wvn = t.constant(wv.clone());
            let wan = t.constant(wa.clone());
            let wtn = t.constant(wt.clone());
            let pv = t.mul(out.video_pred, wvn);
            let pa = t.mul(out.audio_pred, wan);
            let pt = t.mul(out.ssl_tap, wtn);
            let mv = t.mean_all(pv);
            let ma = t.mean_all(pa);
            let mt = t.mean_all(pt);
            let s1 = t.add(mv, ma);
            t.add(s1, mt)
        };

        let mut t = Tape::new();
        let pm = register_params(&mut t, &model.weights, true);
        let loss = build(&mut t, &pm);
        let grads = t.backward(loss);
        let eval = |w: &BTreeMap<String, Mat>| -> f64 {
            let mut t2 = Tape::new();
            let pm2 = register_params(&mut t2, w, false);
            let l = build(&mut t2, &pm2);
            t2.val(l).data[0]
        };
        let h = 1e-5;
        let mut pick = Stream::new(34);
        for (name, m) in &model.weights {
            if name.starts_with("ssl.") {
                continue; // teacher heads are exercised by the semantic loss
            }
            let zero = Mat::zeros(m.rows, m.cols);
            let g = grads[pm[name]].as_ref().unwrap_or(&zero);
            for _ in 0..m.numel().min(2) {
                let idx = pick.below(m.numel() as u64) as usize;
                let mut wp = model.weights.clone();
                wp.get_mut(name).unwrap().data[idx] += h;
                let mut wm = model.weights.clone();
                wm.get_mut(name).unwrap().data[idx] -= h;
                let fd = (eval(&wp) - eval(&wm)) / (2.0 * h);
                let an = g.data[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() < 1e-9 || rel < 1e-4,
                    "{name}[{idx}]: fd {fd:.6e} vs analytic {an:.6e}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_and_validates() {
        let cfg = ModelConfig::grad_check();
        let model = init_fused(&cfg, 41);
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.shard");
        model.save(&path).unwrap();
        let back = FusedModel::load(&cfg, &path).unwrap();
        assert_eq!(back.weights, model.weights);
        // a truncated weight set must be rejected
        let mut broken = model.weights.clone();
        broken.remove("cond.embed");
        write_mat_map(&broken, &path).unwrap();
        assert!(matches!(FusedModel::load(&cfg, &path), Err(StitchError::Checkpoint(_))));
    }
}
