//! The two unimodal transformer branches at toy scale: a video branch
//! (softmax self-attention + caption cross-attention) and an audio branch
//! (linear attention + condition cross-attention). Each is usable standalone;
//! the fusion layer passes optional context hooks into the same block
//! functions, so the standalone path and the fused path share all code.

use std::collections::BTreeMap;

use crate::autodiff::{NodeId, Tape};
use crate::config::{ConfigError, ModelConfig, VOCAB_SIZE};
use crate::rng::Stream;
use crate::tensor::{Mat, TensF32};

/// Standard deviation for randomly initialized weight matrices.
pub const WEIGHT_STD: f64 = 0.02;
/// Width of the sinusoidal noise-level embedding fed to each stream's time MLP.
pub const TIME_EMBED_DIM: usize = 32;

// ---------------------------------------------------------------------------
// Patchify / unpatchify
// ---------------------------------------------------------------------------

/// Records how a token matrix maps back onto its latent grid.
#[derive(Clone, Debug, PartialEq)]
pub enum TokenLayout {
    Video { chans: usize, frames: usize, height: usize, width: usize, patch: (usize, usize, usize) },
    Audio { chans: usize, steps: usize, bins: usize, patch: (usize, usize) },
}

/// A latent flattened to (sequence, width) tokens plus its inverse-map layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq {
    pub tokens: Mat,
    pub layout: TokenLayout,
}

/// Video latent (C, F, H, W) → tokens with kernel (pt, ph, pw).
/// Token rows run frame-major over (frame, row, col) patch positions; within a
/// row, entries run channel-major over the patch volume.
pub fn patchify_video(v: &TensF32, patch: (usize, usize, usize)) -> Result<TokenSeq, ConfigError> {
    assert_eq!(v.shape.len(), 4, "video latent must be rank 4");
    let (c, f, h, w) = (v.shape[0], v.shape[1], v.shape[2], v.shape[3]);
    let (pt, ph, pw) = patch;
    if pt == 0 || ph == 0 || pw == 0 || f % pt != 0 || h % ph != 0 || w % pw != 0 {
        return Err(ConfigError::Divisibility(format!(
            "video patch ({pt},{ph},{pw}) does not tile grid ({f},{h},{w})"
        )));
    }
    let (nf, nh, nw) = (f / pt, h / ph, w / pw);
    let width = c * pt * ph * pw;
    let mut tokens = Mat::zeros(nf * nh * nw, width);
    for fp in 0..nf {
        for hp in 0..nh {
            for wp in 0..nw {
                let row = (fp * nh + hp) * nw + wp;
                for ch in 0..c {
                    for dt in 0..pt {
                        for dh in 0..ph {
                            for dw in 0..pw {
                                let col = ((ch * pt + dt) * ph + dh) * pw + dw;
                                let src =
                                    v.idx4(ch, fp * pt + dt, hp * ph + dh, wp * pw + dw);
                                tokens.data[row * width + col] = v.data[src] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(TokenSeq {
        tokens,
        layout: TokenLayout::Video { chans: c, frames: f, height: h, width: w, patch },
    })
}

/// Exact inverse of `patchify_video`.
pub fn unpatchify_video(ts: &TokenSeq) -> TensF32 {
    let TokenLayout::Video { chans: c, frames: f, height: h, width: w, patch } = ts.layout else {
        panic!("layout is not a video layout");
    };
    let (pt, ph, pw) = patch;
    let (nf, nh, nw) = (f / pt, h / ph, w / pw);
    let width = c * pt * ph * pw;
    assert_eq!(ts.tokens.rows, nf * nh * nw, "token count mismatch");
    assert_eq!(ts.tokens.cols, width, "token width mismatch");
    let mut out = TensF32::zeros(&[c, f, h, w]);
    for fp in 0..nf {
        for hp in 0..nh {
            for wp in 0..nw {
                let row = (fp * nh + hp) * nw + wp;
                for ch in 0..c {
                    for dt in 0..pt {
                        for dh in 0..ph {
                            for dw in 0..pw {
                                let col = ((ch * pt + dt) * ph + dh) * pw + dw;
                                let dst =
                                    out.idx4(ch, fp * pt + dt, hp * ph + dh, wp * pw + dw);
                                out.data[dst] = ts.tokens.data[row * width + col] as f32;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Audio latent (C, T, B) → tokens with kernel (pa_t, pa_f) over (time, bins).
/// Token rows run time-major over (time patch, bin patch) positions.
pub fn patchify_audio(a: &TensF32, patch: (usize, usize)) -> Result<TokenSeq, ConfigError> {
    assert_eq!(a.shape.len(), 3, "audio latent must be rank 3");
    let (c, t, b) = (a.shape[0], a.shape[1], a.shape[2]);
    let (pa_t, pa_f) = patch;
    if pa_t == 0 || pa_f == 0 || t % pa_t != 0 || b % pa_f != 0 {
        return Err(ConfigError::Divisibility(format!(
            "audio patch ({pa_t},{pa_f}) does not tile grid ({t},{b})"
        )));
    }
    let (nt, nb) = (t / pa_t, b / pa_f);
    let width = c * pa_t * pa_f;
    let mut tokens = Mat::zeros(nt * nb, width);
    for tp in 0..nt {
        for bp in 0..nb {
            let row = tp * nb + bp;
            for ch in 0..c {
                for dt in 0..pa_t {
                    for df in 0..pa_f {
                        let col = (ch * pa_t + dt) * pa_f + df;
                        let src = a.idx3(ch, tp * pa_t + dt, bp * pa_f + df);
                        tokens.data[row * width + col] = a.data[src] as f64;
                    }
                }
            }
        }
    }
    Ok(TokenSeq {
        tokens,
        layout: TokenLayout::Audio { chans: c, steps: t, bins: b, patch },
    })
}

/// Exact inverse of `patchify_audio`.
pub fn unpatchify_audio(ts: &TokenSeq) -> TensF32 {
    let TokenLayout::Audio { chans: c, steps: t, bins: b, patch } = ts.layout else {
        panic!("layout is not an audio layout");
    };
    let (pa_t, pa_f) = patch;
    let (nt, nb) = (t / pa_t, b / pa_f);
    let width = c * pa_t * pa_f;
    assert_eq!(ts.tokens.rows, nt * nb, "token count mismatch");
    assert_eq!(ts.tokens.cols, width, "token width mismatch");
    let mut out = TensF32::zeros(&[c, t, b]);
    for tp in 0..nt {
        for bp in 0..nb {
            let row = tp * nb + bp;
            for ch in 0..c {
                for dt in 0..pa_t {
                    for df in 0..pa_f {
                        let col = (ch * pa_t + dt) * pa_f + df;
                        let dst = out.idx3(ch, tp * pa_t + dt, bp * pa_f + df);
                        out.data[dst] = ts.tokens.data[row * width + col] as f32;
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Attention operators (tape-backed)
// ---------------------------------------------------------------------------

fn check_attention_shapes(t: &Tape, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> usize {
    let (dq, dk, dv) = (t.val(q).cols, t.val(k).cols, t.val(v).cols);
    assert_eq!(dq, dk, "query/key widths differ");
    assert_eq!(dk, dv, "key/value widths differ");
    assert_eq!(t.val(k).rows, t.val(v).rows, "key/value counts differ");
    assert!(heads >= 1 && dq % heads == 0, "width {dq} not divisible by {heads} heads");
    dq / heads
}

/// Multi-head softmax attention over already-projected q/k/v. Per head,
/// rows of the attention matrix sum to 1; heads are concatenated back along
/// the width. A single key reproduces its value bitwise (softmax of one logit
/// is exactly 1).
pub fn attention(t: &mut Tape, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
    let dh = check_attention_shapes(t, q, k, v, heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * dh, dh);
        let kh = t.slice_cols(k, h * dh, dh);
        let vh = t.slice_cols(v, h * dh, dh);
        let scores = t.matmul(qh, false, kh, true);
        let scaled = t.scale(scores, scale);
        let probs = t.softmax_rows(scaled);
        outs.push(t.matmul(probs, false, vh, false));
    }
    if heads == 1 {
        outs[0]
    } else {
        t.concat_cols(&outs)
    }
}

/// Multi-head linear attention over already-projected q/k/v with the strictly
/// positive feature map φ(x) = elu(x) + 1:
/// out = φ(q)·(φ(k)ᵀ v) / (φ(q)·Σ_j φ(k_j)), normalized per query row.
pub fn linear_attention(t: &mut Tape, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
    let dh = check_attention_shapes(t, q, k, v, heads);
    let m = t.val(k).rows;
    let ones = t.constant(Mat::filled(1, m, 1.0));
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * dh, dh);
        let kh = t.slice_cols(k, h * dh, dh);
        let vh = t.slice_cols(v, h * dh, dh);
        let fq = t.elu_p1(qh);
        let fk = t.elu_p1(kh);
        let kv = t.matmul(fk, true, vh, false);
        let num = t.matmul(fq, false, kv, false);
        let ksum = t.matmul(ones, false, fk, false); // (1, dh): Σ_j φ(k_j)
        let denom = t.matmul(fq, false, ksum, true); // (n, 1), strictly positive
        outs.push(t.div_col(num, denom));
    }
    if heads == 1 {
        outs[0]
    } else {
        t.concat_cols(&outs)
    }
}

/// Bucketed softmax attention: query rows come in `buckets` contiguous groups
/// of `q_rows_per_bucket`, key/value rows in groups of `kv_rows_per_bucket`,
/// and group i of queries attends only within group i of keys/values. Used for
/// the per-frame audio→video injection.
pub fn frame_bucketed_attention(
    t: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    q_rows_per_bucket: usize,
    kv_rows_per_bucket: usize,
) -> NodeId {
    let (nq, nkv) = (t.val(q).rows, t.val(k).rows);
    assert!(q_rows_per_bucket >= 1 && nq % q_rows_per_bucket == 0, "query bucket mismatch");
    let buckets = nq / q_rows_per_bucket;
    assert_eq!(nkv, buckets * kv_rows_per_bucket, "key/value bucket mismatch");
    let mut parts = Vec::with_capacity(buckets);
    for bkt in 0..buckets {
        let qb = t.slice_rows(q, bkt * q_rows_per_bucket, q_rows_per_bucket);
        let kb = t.slice_rows(k, bkt * kv_rows_per_bucket, kv_rows_per_bucket);
        let vb = t.slice_rows(v, bkt * kv_rows_per_bucket, kv_rows_per_bucket);
        parts.push(attention(t, qb, kb, vb, heads));
    }
    if buckets == 1 {
        parts[0]
    } else {
        t.concat_rows(&parts)
    }
}

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

/// One transformer block's parameters as a stable flat name → tensor map.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights(pub BTreeMap<String, Mat>);

fn randn(rng: &mut Stream, r: usize, c: usize) -> Mat {
    rng.normal_mat_scaled(r, c, WEIGHT_STD)
}

/// Shared skeleton for both branches: pre-norm affine parameters, attention
/// and cross-attention projections, a 2× feed-forward, and the adaptive
/// time-conditioning map producing 3 × (scale, shift, gate).
fn init_block(rng: &mut Stream, dim: usize, cond_dim: usize) -> BlockWeights {
    let mut m = BTreeMap::new();
    for ln in ["ln1", "ln2", "ln3"] {
        m.insert(format!("{ln}.g"), Mat::filled(1, dim, 1.0));
        m.insert(format!("{ln}.b"), Mat::zeros(1, dim));
    }
    for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "cross.wq", "cross.wo"] {
        m.insert(w.to_string(), randn(rng, dim, dim));
    }
    m.insert("cross.wk".into(), randn(rng, cond_dim, dim));
    m.insert("cross.wv".into(), randn(rng, cond_dim, dim));
    m.insert("ff.w1".into(), randn(rng, dim, 2 * dim));
    m.insert("ff.b1".into(), Mat::zeros(1, 2 * dim));
    m.insert("ff.w2".into(), randn(rng, 2 * dim, dim));
    m.insert("ff.b2".into(), Mat::zeros(1, dim));
    m.insert("ada.w".into(), randn(rng, dim, 9 * dim));
    m.insert("ada.b".into(), Mat::zeros(1, 9 * dim));
    BlockWeights(m)
}

pub fn init_video_block(cfg: &ModelConfig, rng: &mut Stream) -> BlockWeights {
    init_block(rng, cfg.video_dim, cfg.text_dim)
}

pub fn init_audio_block(cfg: &ModelConfig, rng: &mut Stream) -> BlockWeights {
    init_block(rng, cfg.audio_dim, cfg.text_dim)
}

/// Per-stream non-block parameters: input/output projections, learned
/// positions, the time MLP, and the final pre-output norm.
fn init_static(rng: &mut Stream, dim: usize, token_w: usize, n_tokens: usize) -> BTreeMap<String, Mat> {
    let mut m = BTreeMap::new();
    m.insert("in.w".into(), randn(rng, token_w, dim));
    m.insert("in.b".into(), Mat::zeros(1, dim));
    m.insert("pos".into(), randn(rng, n_tokens, dim));
    m.insert("time.w1".into(), randn(rng, TIME_EMBED_DIM, dim));
    m.insert("time.b1".into(), Mat::zeros(1, dim));
    m.insert("time.w2".into(), randn(rng, dim, dim));
    m.insert("time.b2".into(), Mat::zeros(1, dim));
    m.insert("final.g".into(), Mat::filled(1, dim, 1.0));
    m.insert("final.b".into(), Mat::zeros(1, dim));
    m.insert("out.w".into(), randn(rng, dim, token_w));
    m.insert("out.b".into(), Mat::zeros(1, token_w));
    m
}

pub fn init_video_static(cfg: &ModelConfig, rng: &mut Stream) -> BTreeMap<String, Mat> {
    init_static(rng, cfg.video_dim, cfg.video_token_width(), cfg.video_token_count())
}

pub fn init_audio_static(cfg: &ModelConfig, rng: &mut Stream) -> BTreeMap<String, Mat> {
    init_static(rng, cfg.audio_dim, cfg.audio_token_width(), cfg.audio_token_count())
}

/// The caption-token embedding table shared by all three annotation streams.
pub fn init_cond(cfg: &ModelConfig, rng: &mut Stream) -> BTreeMap<String, Mat> {
    let mut m = BTreeMap::new();
    m.insert("embed".into(), randn(rng, VOCAB_SIZE, cfg.text_dim));
    m
}

/// Bias-free projection heads mapping tapped audio hidden states into the two
/// teacher feature spaces.
pub fn init_ssl(cfg: &ModelConfig, rng: &mut Stream) -> BTreeMap<String, Mat> {
    let mut m = BTreeMap::new();
    m.insert("pi_m.w".into(), randn(rng, cfg.audio_dim, cfg.ssl_dim_m));
    m.insert("pi_h.w".into(), randn(rng, cfg.audio_dim, cfg.ssl_dim_h));
    m
}

// ---------------------------------------------------------------------------
// Tape registration and lookup
// ---------------------------------------------------------------------------

/// Flat parameter-name → tape-node map for one forward/backward pass.
pub type ParamNodes = BTreeMap<String, NodeId>;

/// Registers every tensor of `weights` on the tape, as trainable inputs or as
/// constants (inference).
pub fn register_params(t: &mut Tape, weights: &BTreeMap<String, Mat>, trainable: bool) -> ParamNodes {
    let mut pm = ParamNodes::new();
    for (name, m) in weights {
        let id = if trainable { t.input(m.clone()) } else { t.constant(m.clone()) };
        pm.insert(name.clone(), id);
    }
    pm
}

/// Looks up `prefix + name`, panicking with the full key when absent.
pub fn param(pm: &ParamNodes, prefix: &str, name: &str) -> NodeId {
    *pm.get(&format!("{prefix}{name}"))
        .unwrap_or_else(|| panic!("missing parameter {prefix}{name}"))
}

// ---------------------------------------------------------------------------
// Time conditioning
// ---------------------------------------------------------------------------

/// Sinusoidal embedding of a noise level s ∈ [0,1]: half sines, half cosines
/// at geometrically spaced frequencies.
pub fn time_embedding(s: f64) -> Mat {
    let half = TIME_EMBED_DIM / 2;
    let mut e = Mat::zeros(1, TIME_EMBED_DIM);
    for i in 0..half {
        let freq = 1000f64.powf(i as f64 / (half - 1) as f64);
        e.data[i] = (s * freq).sin();
        e.data[half + i] = (s * freq).cos();
    }
    e
}

/// Per-stream time vector: sinusoidal embedding of the noise level pushed
/// through the stream's two-layer SiLU MLP. `prefix` is e.g. `"video.time."`.
pub fn time_vector(t: &mut Tape, pm: &ParamNodes, prefix: &str, s: f64) -> NodeId {
    let e = t.constant(time_embedding(s));
    let w1 = param(pm, prefix, "w1");
    let b1 = param(pm, prefix, "b1");
    let w2 = param(pm, prefix, "w2");
    let b2 = param(pm, prefix, "b2");
    let h = t.matmul(e, false, w1, false);
    let h = t.add_row(h, b1);
    let h = t.silu(h);
    let h = t.matmul(h, false, w2, false);
    t.add_row(h, b2)
}

// ---------------------------------------------------------------------------
// Transformer blocks
// ---------------------------------------------------------------------------

/// Already-projected key/value nodes for an additive cross-attention branch.
#[derive(Clone, Copy, Debug)]
pub struct CrossInjection {
    pub k: NodeId,
    pub v: NodeId,
}

/// Already-projected key/value nodes for the frame-bucketed additive branch in
/// video self-attention, plus the bucket geometry.
#[derive(Clone, Copy, Debug)]
pub struct BucketedInjection {
    pub k: NodeId,
    pub v: NodeId,
    pub q_rows_per_bucket: usize,
    pub kv_rows_per_bucket: usize,
}

/// Fusion hooks for a video block: absent hooks give the pure expert path.
#[derive(Clone, Copy, Debug, Default)]
pub struct VideoBlockCtx {
    pub self_inj: Option<BucketedInjection>,
    pub cross_inj: Option<CrossInjection>,
}

/// Fusion hooks for an audio block.
#[derive(Clone, Copy, Debug, Default)]
pub struct AudioBlockCtx {
    pub cross_inj: Option<CrossInjection>,
}

/// Pre-norm affine followed by adaptive modulation: (LN(x)·g + b)·(1+scale) + shift.
fn mod_norm(t: &mut Tape, x: NodeId, g: NodeId, b: NodeId, scale: NodeId, shift: NodeId) -> NodeId {
    let n = t.normalize_rows(x);
    let n = t.mul_row(n, g);
    let n = t.add_row(n, b);
    let sp1 = t.add_const(scale, 1.0);
    let n = t.mul_row(n, sp1);
    t.add_row(n, shift)
}

/// The block's nine (scale, shift, gate) chunks from its time-conditioning map.
fn ada_chunks(t: &mut Tape, pm: &ParamNodes, prefix: &str, tvec: NodeId, dim: usize) -> Vec<NodeId> {
    let w = param(pm, prefix, "ada.w");
    let b = param(pm, prefix, "ada.b");
    let raw = t.matmul(tvec, false, w, false);
    let raw = t.add_row(raw, b);
    (0..9).map(|i| t.slice_cols(raw, i * dim, dim)).collect()
}

fn ff_sublayer(t: &mut Tape, pm: &ParamNodes, prefix: &str, h: NodeId) -> NodeId {
    let w1 = param(pm, prefix, "ff.w1");
    let b1 = param(pm, prefix, "ff.b1");
    let w2 = param(pm, prefix, "ff.w2");
    let b2 = param(pm, prefix, "ff.b2");
    let f = t.matmul(h, false, w1, false);
    let f = t.add_row(f, b1);
    let f = t.silu(f);
    let f = t.matmul(f, false, w2, false);
    t.add_row(f, b2)
}

/// First half of a block: the (softmax or linear) attention sub-layer with an
/// optional frame-bucketed additive branch. Returns the hidden state after the
/// residual — the tap the fusion layer adapts across modalities. The fused
/// forward calls the halves directly in its interleaved order; the standalone
/// block wrappers call the same halves, so both paths share every operation.
pub fn block_attn_half(
    t: &mut Tape,
    pm: &ParamNodes,
    prefix: &str,
    x: NodeId,
    tvec: NodeId,
    heads: usize,
    attn_is_linear: bool,
    self_inj: Option<BucketedInjection>,
) -> NodeId {
    let dim = t.val(x).cols;
    let ch = ada_chunks(t, pm, prefix, tvec, dim);
    let g1 = param(pm, prefix, "ln1.g");
    let b1 = param(pm, prefix, "ln1.b");
    let h = mod_norm(t, x, g1, b1, ch[0], ch[1]);
    let wq = param(pm, prefix, "attn.wq");
    let wk = param(pm, prefix, "attn.wk");
    let wv = param(pm, prefix, "attn.wv");
    let wo = param(pm, prefix, "attn.wo");
    let q = t.matmul(h, false, wq, false);
    let k = t.matmul(h, false, wk, false);
    let v = t.matmul(h, false, wv, false);
    let mut a = if attn_is_linear {
        linear_attention(t, q, k, v, heads)
    } else {
        attention(t, q, k, v, heads)
    };
    if let Some(inj) = self_inj {
        let extra = frame_bucketed_attention(
            t,
            q,
            inj.k,
            inj.v,
            heads,
            inj.q_rows_per_bucket,
            inj.kv_rows_per_bucket,
        );
        a = t.add(a, extra);
    }
    let y = t.matmul(a, false, wo, false);
    let gated = t.mul_row(y, ch[2]);
    t.add(x, gated)
}

/// Second half of a block: cross-attention over the condition tokens (with an
/// optional additive injection branch) followed by the feed-forward sub-layer.
pub fn block_finish_half(
    t: &mut Tape,
    pm: &ParamNodes,
    prefix: &str,
    x1: NodeId,
    cond: NodeId,
    tvec: NodeId,
    heads: usize,
    cross_inj: Option<CrossInjection>,
) -> NodeId {
    let dim = t.val(x1).cols;
    let ch = ada_chunks(t, pm, prefix, tvec, dim);
    let g2 = param(pm, prefix, "ln2.g");
    let b2 = param(pm, prefix, "ln2.b");
    let h2 = mod_norm(t, x1, g2, b2, ch[3], ch[4]);
    let cwq = param(pm, prefix, "cross.wq");
    let cwk = param(pm, prefix, "cross.wk");
    let cwv = param(pm, prefix, "cross.wv");
    let cwo = param(pm, prefix, "cross.wo");
    let q2 = t.matmul(h2, false, cwq, false);
    let k2 = t.matmul(cond, false, cwk, false);
    let v2 = t.matmul(cond, false, cwv, false);
    let mut a2 = attention(t, q2, k2, v2, heads);
    if let Some(inj) = cross_inj {
        let extra = attention(t, q2, inj.k, inj.v, heads);
        a2 = t.add(a2, extra);
    }
    let y2 = t.matmul(a2, false, cwo, false);
    let gated2 = t.mul_row(y2, ch[5]);
    let x2 = t.add(x1, gated2);

    let g3 = param(pm, prefix, "ln3.g");
    let b3 = param(pm, prefix, "ln3.b");
    let h3 = mod_norm(t, x2, g3, b3, ch[6], ch[7]);
    let y3 = ff_sublayer(t, pm, prefix, h3);
    let gated3 = t.mul_row(y3, ch[8]);
    t.add(x2, gated3)
}

/// Video block: softmax self-attention (+ optional bucketed audio injection),
/// caption cross-attention (+ optional audio injection), feed-forward.
/// Returns (output tokens, hidden state after the self-attention sub-layer).
pub fn video_block(
    t: &mut Tape,
    pm: &ParamNodes,
    prefix: &str,
    x: NodeId,
    cond: NodeId,
    tvec: NodeId,
    heads: usize,
    ctx: Option<&VideoBlockCtx>,
) -> (NodeId, NodeId) {
    let (self_inj, cross_inj) = match ctx {
        Some(c) => (c.self_inj, c.cross_inj),
        None => (None, None),
    };
    let x1 = block_attn_half(t, pm, prefix, x, tvec, heads, false, self_inj);
    let out = block_finish_half(t, pm, prefix, x1, cond, tvec, heads, cross_inj);
    (out, x1)
}

/// Audio block: linear attention, condition cross-attention (+ optional video
/// injection), feed-forward. Returns (output tokens, hidden state after the
/// linear-attention sub-layer).
pub fn audio_block(
    t: &mut Tape,
    pm: &ParamNodes,
    prefix: &str,
    x: NodeId,
    cond: NodeId,
    tvec: NodeId,
    heads: usize,
    ctx: Option<&AudioBlockCtx>,
) -> (NodeId, NodeId) {
    let cross_inj = ctx.and_then(|c| c.cross_inj);
    let x1 = block_attn_half(t, pm, prefix, x, tvec, heads, true, None);
    let out = block_finish_half(t, pm, prefix, x1, cond, tvec, heads, cross_inj);
    (out, x1)
}

// ---------------------------------------------------------------------------
// Stream input/output projections
// ---------------------------------------------------------------------------

/// Projects raw tokens into the stream width and adds learned positions.
/// `prefix` is the stream namespace, e.g. `"video."`.
pub fn expert_input(t: &mut Tape, pm: &ParamNodes, prefix: &str, tokens: NodeId) -> NodeId {
    let w = param(pm, prefix, "in.w");
    let b = param(pm, prefix, "in.b");
    let pos = param(pm, prefix, "pos");
    let x = t.matmul(tokens, false, w, false);
    let x = t.add_row(x, b);
    t.add(x, pos)
}

/// Final norm and projection back to token width (the velocity prediction).
pub fn expert_output(t: &mut Tape, pm: &ParamNodes, prefix: &str, x: NodeId) -> NodeId {
    let g = param(pm, prefix, "final.g");
    let b = param(pm, prefix, "final.b");
    let w = param(pm, prefix, "out.w");
    let ob = param(pm, prefix, "out.b");
    let n = t.normalize_rows(x);
    let n = t.mul_row(n, g);
    let n = t.add_row(n, b);
    let y = t.matmul(n, false, w, false);
    t.add_row(y, ob)
}

/// Embeds the three caption streams: the video branch conditions on the video
/// caption alone; the audio branch conditions on all three streams
/// concatenated along the sequence axis.
pub fn caption_nodes(
    t: &mut Tape,
    pm: &ParamNodes,
    video_caption: &[u32],
    audio_caption: &[u32],
    speech: &[u32],
) -> (NodeId, NodeId) {
    let table = param(pm, "cond.", "embed");
    let vids: Vec<usize> = video_caption.iter().map(|&x| x as usize).collect();
    let mut aids = vids.clone();
    aids.extend(audio_caption.iter().map(|&x| x as usize));
    aids.extend(speech.iter().map(|&x| x as usize));
    let v = t.embed(table, &vids);
    let a = t.embed(table, &aids);
    (v, a)
}
