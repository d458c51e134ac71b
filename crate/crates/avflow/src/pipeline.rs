//! Online annotation pipeline: producers sample fixed-length windows out of
//! long synthetic sources, caption each window from its own trajectory
//! segment, render it, and push the finished tuple into a bounded shared
//! buffer that the trainer drains. Captioning the window (not the whole
//! source) is the alignment property the whole design exists to provide; the
//! deliberately misaligned whole-source annotator ships for the ablation that
//! demonstrates the failure.
//!
//! The buffer is a bounded FIFO with blocking put/get, an explicit
//! cancellation flag, and an occupancy high-water mark. One or more producers
//! and a single consumer are supported. An optional loopback-socket mode
//! exposes put/get as length-prefixed JSON messages so a producer can run as
//! a separate OS process.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ModelConfig, SampleTuple};
use crate::rng::{derive_seed_tagged, Stream};
use crate::synthdata::{captions_for, decode_positions, draw_world, render_pair, simulate, temporal_layout};

const TAG_SOURCE: u64 = 0x53;
const TAG_PRODUCER: u64 = 0x50;
/// Public so tests can recompute the deterministic clip-id sequence a
/// producer will emit.
pub const TAG_CLIP: u64 = 0x43;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("window out of bounds: {0}")]
    Bounds(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("pipeline cancelled")]
    Shutdown,
    #[error("entry rejected: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("wire format: {0}")]
    Wire(String),
}

// ---------------------------------------------------------------------------
// Sources and windows
// ---------------------------------------------------------------------------

/// One long-form synthetic source: a single bouncing-ball trajectory many
/// clips long, indexed by raw step.
#[derive(Clone, Debug)]
pub struct Source {
    pub id: u64,
    pub positions: Vec<(i64, i64)>,
}

/// The corpus the producers draw from.
pub struct SourceStore {
    pub cfg: ModelConfig,
    pub sources: Vec<Source>,
}

impl SourceStore {
    /// Generates `n_sources` trajectories of `frames_per_source` latent frames
    /// each, deterministic in `seed`.
    pub fn generate(n_sources: usize, frames_per_source: usize, seed: u64, cfg: &ModelConfig) -> Self {
        assert!(n_sources >= 1, "need at least one source");
        let (_, f, h, w) = cfg.video_grid;
        assert!(frames_per_source >= f, "sources must be at least one clip long");
        let (sub, _) = temporal_layout(cfg);
        let sources = (0..n_sources)
            .map(|i| {
                let mut rng = Stream::new(derive_seed_tagged(seed, TAG_SOURCE, i as u64));
                let world = draw_world(&mut rng, h, w);
                Source { id: i as u64, positions: simulate(world, frames_per_source * sub, h, w) }
            })
            .collect();
        SourceStore { cfg: cfg.clone(), sources }
    }

    /// Length of a source in latent frames.
    pub fn frames(&self, source_idx: usize) -> usize {
        let (sub, _) = temporal_layout(&self.cfg);
        self.sources[source_idx].positions.len() / sub
    }
}

/// A window cut from a source: the raw-step positions it covers.
#[derive(Clone, Debug, PartialEq)]
pub struct RawClip {
    pub source_id: u64,
    pub offset_frames: usize,
    pub positions: Vec<(i64, i64)>,
}

/// Cuts `length_frames` aligned frames from a source starting at
/// `offset_frames`; the window spans exactly `sub × length` raw steps, so the
/// audio side covers the configured steps-per-frame ratio.
pub fn sample_window(
    store: &SourceStore,
    source_idx: usize,
    offset_frames: usize,
    length_frames: usize,
) -> Result<RawClip, PipelineError> {
    if source_idx >= store.sources.len() {
        return Err(PipelineError::Bounds(format!("source {source_idx} of {}", store.sources.len())));
    }
    let total = store.frames(source_idx);
    if length_frames == 0 || offset_frames + length_frames > total {
        return Err(PipelineError::Bounds(format!(
            "window [{offset_frames}, {}) of a {total}-frame source",
            offset_frames + length_frames
        )));
    }
    let (sub, _) = temporal_layout(&store.cfg);
    let lo = offset_frames * sub;
    let hi = (offset_frames + length_frames) * sub;
    Ok(RawClip {
        source_id: store.sources[source_idx].id,
        offset_frames,
        positions: store.sources[source_idx].positions[lo..hi].to_vec(),
    })
}

/// Which trajectory segment the captions describe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotatorMode {
    /// Captions computed from the window itself — aligned by construction.
    Online,
    /// Captions computed from the window's whole source — the misaligned
    /// offline behavior kept for the ablation.
    OfflineWholeSource,
}

/// Deterministic rule-based captions for a window.
pub fn annotate(clip: &RawClip, cfg: &ModelConfig) -> (Vec<u32>, Vec<u32>, Vec<u32>) {
    let (_, _, h, w) = cfg.video_grid;
    captions_for(&clip.positions, h, w)
}

/// Renders a window into a finished training tuple carrying the given
/// captions.
pub fn encode_clip(
    clip: &RawClip,
    captions: (Vec<u32>, Vec<u32>, Vec<u32>),
    clip_id: u64,
    cfg: &ModelConfig,
) -> SampleTuple {
    let mut sample = render_pair(&clip.positions, clip_id, cfg);
    sample.video_caption = captions.0;
    sample.audio_caption = captions.1;
    sample.speech = captions.2;
    sample
}

/// Consumer-side audit: decode the rendered clip back to cell positions and
/// re-derive the captions; they must reproduce the stored annotation exactly.
pub fn audit_sample(sample: &SampleTuple, cfg: &ModelConfig) -> bool {
    let (_, _, h, w) = cfg.video_grid;
    let positions = decode_positions(&sample.video, cfg);
    let (vc, ac, sp) = captions_for(&positions, h, w);
    vc == sample.video_caption && ac == sample.audio_caption && sp == sample.speech
}

// ---------------------------------------------------------------------------
// Bounded shared buffer
// ---------------------------------------------------------------------------

/// One handoff unit: the sample, its FIFO sequence number, and who made it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub sample: SampleTuple,
    pub produced_at: u64,
    pub annotator_id: u32,
}

struct BufState {
    queue: VecDeque<BufferEntry>,
    next_seq: u64,
    watermark: usize,
    cancelled: bool,
}

/// Bounded FIFO with blocking put/get, cancellation, and an occupancy
/// high-water mark. Safe for any number of producers and consumers.
pub struct SharedBuffer {
    capacity: usize,
    state: Mutex<BufState>,
    not_full: Condvar,
    not_empty: Condvar,
}

impl SharedBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "capacity must be at least 1");
        SharedBuffer {
            capacity,
            state: Mutex::new(BufState {
                queue: VecDeque::with_capacity(capacity),
                next_seq: 0,
                watermark: 0,
                cancelled: false,
            }),
            not_full: Condvar::new(),
            not_empty: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Highest occupancy ever observed.
    pub fn watermark(&self) -> usize {
        self.state.lock().unwrap().watermark
    }

    /// Signals every blocked party to give up; the buffer is unusable after.
    pub fn cancel(&self) {
        let mut st = self.state.lock().unwrap();
        st.cancelled = true;
        self.not_full.notify_all();
        self.not_empty.notify_all();
    }

    pub fn is_cancelled(&self) -> bool {
        self.state.lock().unwrap().cancelled
    }

    /// Blocks while full; assigns the FIFO sequence number under the lock.
    pub fn put(&self, sample: SampleTuple, annotator_id: u32) -> Result<u64, PipelineError> {
        sample
            .check_invariants()
            .map_err(PipelineError::Invariant)?;
        let mut st = self.state.lock().unwrap();
        loop {
            if st.cancelled {
                return Err(PipelineError::Shutdown);
            }
            if st.queue.len() < self.capacity {
                break;
            }
            st = self.not_full.wait(st).unwrap();
        }
        let seq = st.next_seq;
        st.next_seq += 1;
        st.queue.push_back(BufferEntry { sample, produced_at: seq, annotator_id });
        if st.queue.len() > st.watermark {
            st.watermark = st.queue.len();
        }
        self.not_empty.notify_one();
        Ok(seq)
    }

    /// Blocks up to `timeout` for the oldest entry.
    pub fn get_timeout(&self, timeout: Duration) -> Result<BufferEntry, PipelineError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(e) = st.queue.pop_front() {
                self.not_full.notify_one();
                return Ok(e);
            }
            if st.cancelled {
                return Err(PipelineError::Shutdown);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(PipelineError::Timeout("buffer stayed empty".into()));
            }
            let (g, _) = self.not_empty.wait_timeout(st, deadline - now).unwrap();
            st = g;
        }
    }
}

// ---------------------------------------------------------------------------
// Producer and consumer
// ---------------------------------------------------------------------------

/// Produces exactly `n_items` annotated clips into the buffer, blocking on
/// back-pressure; window choice is deterministic in (seed, annotator_id).
/// Returns the produced count, or Shutdown if cancelled mid-run.
pub fn producer_run(
    store: &SourceStore,
    buffer: &SharedBuffer,
    n_items: usize,
    seed: u64,
    mode: AnnotatorMode,
    annotator_id: u32,
) -> Result<usize, PipelineError> {
    let cfg = &store.cfg;
    let clip_len = cfg.video_grid.1;
    let mut rng = Stream::new(derive_seed_tagged(seed, TAG_PRODUCER, annotator_id as u64));
    for i in 0..n_items {
        let src = rng.below(store.sources.len() as u64) as usize;
        let max_off = store.frames(src) - clip_len;
        let off = rng.below(max_off as u64 + 1) as usize;
        let clip = sample_window(store, src, off, clip_len)?;
        let captions = match mode {
            AnnotatorMode::Online => annotate(&clip, cfg),
            AnnotatorMode::OfflineWholeSource => {
                let (_, _, h, w) = cfg.video_grid;
                captions_for(&store.sources[src].positions, h, w)
            }
        };
        let clip_id = derive_seed_tagged(seed, TAG_CLIP, ((annotator_id as u64) << 32) | i as u64);
        let sample = encode_clip(&clip, captions, clip_id, cfg);
        buffer.put(sample, annotator_id)?;
    }
    Ok(n_items)
}

/// A drained batch plus what the consumer-side audit saw.
#[derive(Clone, Debug)]
pub struct Batch {
    pub samples: Vec<SampleTuple>,
    pub produced_at: Vec<u64>,
    pub audit_failures: usize,
}

/// Takes exactly `batch_size` entries in production order, auditing each one;
/// fails with Timeout if the buffer cannot deliver in time.
pub fn consume_batch(
    buffer: &SharedBuffer,
    batch_size: usize,
    timeout: Duration,
    cfg: &ModelConfig,
) -> Result<Batch, PipelineError> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let deadline = Instant::now() + timeout;
    let mut samples = Vec::with_capacity(batch_size);
    let mut produced_at = Vec::with_capacity(batch_size);
    let mut audit_failures = 0usize;
    for _ in 0..batch_size {
        let now = Instant::now();
        let left = if deadline > now { deadline - now } else { Duration::ZERO };
        let entry = buffer.get_timeout(left)?;
        if !audit_sample(&entry.sample, cfg) {
            audit_failures += 1;
        }
        produced_at.push(entry.produced_at);
        samples.push(entry.sample);
    }
    Ok(Batch { samples, produced_at, audit_failures })
}

// ---------------------------------------------------------------------------
// Loopback socket mode
// ---------------------------------------------------------------------------

const OP_PUT: u8 = 0x50;
const OP_GET: u8 = 0x47;

fn write_frame(s: &mut TcpStream, payload: &[u8]) -> Result<(), PipelineError> {
    s.write_all(&(payload.len() as u32).to_le_bytes())?;
    s.write_all(payload)?;
    Ok(())
}

fn read_frame(s: &mut TcpStream) -> Result<Vec<u8>, PipelineError> {
    let mut len = [0u8; 4];
    s.read_exact(&mut len)?;
    let n = u32::from_le_bytes(len) as usize;
    let mut buf = vec![0u8; n];
    s.read_exact(&mut buf)?;
    Ok(buf)
}

/// Serves put/get over a loopback listener until the buffer is cancelled.
/// Connections are handled one at a time; each carries one operation.
pub fn serve_buffer(listener: TcpListener, buffer: &SharedBuffer) -> Result<(), PipelineError> {
    listener.set_nonblocking(true)?;
    loop {
        if buffer.is_cancelled() {
            return Ok(());
        }
        match listener.accept() {
            Ok((mut conn, _)) => {
                conn.set_nonblocking(false)?;
                if let Err(e) = serve_one(&mut conn, buffer) {
                    // a broken client connection must not kill the server
                    if matches!(e, PipelineError::Shutdown) {
                        return Ok(());
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn serve_one(conn: &mut TcpStream, buffer: &SharedBuffer) -> Result<(), PipelineError> {
    let mut op = [0u8; 1];
    conn.read_exact(&mut op)?;
    match op[0] {
        OP_PUT => {
            let mut annot = [0u8; 4];
            conn.read_exact(&mut annot)?;
            let payload = read_frame(conn)?;
            let sample: SampleTuple =
                serde_json::from_slice(&payload).map_err(|e| PipelineError::Wire(e.to_string()))?;
            let seq = buffer.put(sample, u32::from_le_bytes(annot))?;
            conn.write_all(&seq.to_le_bytes())?;
            Ok(())
        }
        OP_GET => {
            let mut ms = [0u8; 8];
            conn.read_exact(&mut ms)?;
            let timeout = Duration::from_millis(u64::from_le_bytes(ms));
            match buffer.get_timeout(timeout) {
                Ok(entry) => {
                    let bytes = serde_json::to_vec(&entry)
                        .map_err(|e| PipelineError::Wire(e.to_string()))?;
                    write_frame(conn, &bytes)
                }
                Err(PipelineError::Timeout(_)) => write_frame(conn, &[]),
                Err(e) => Err(e),
            }
        }
        other => Err(PipelineError::Wire(format!("unknown opcode {other:#04x}"))),
    }
}

/// Client-side put over a socket; returns the assigned sequence number.
pub fn socket_put(addr: &str, sample: &SampleTuple, annotator_id: u32) -> Result<u64, PipelineError> {
    let mut conn = TcpStream::connect(addr)?;
    conn.write_all(&[OP_PUT])?;
    conn.write_all(&annotator_id.to_le_bytes())?;
    let bytes = serde_json::to_vec(sample).map_err(|e| PipelineError::Wire(e.to_string()))?;
    write_frame(&mut conn, &bytes)?;
    let mut seq = [0u8; 8];
    conn.read_exact(&mut seq)?;
    Ok(u64::from_le_bytes(seq))
}

/// Client-side get over a socket; None on server-side timeout.
pub fn socket_get(addr: &str, timeout: Duration) -> Result<Option<BufferEntry>, PipelineError> {
    let mut conn = TcpStream::connect(addr)?;
    conn.write_all(&[OP_GET])?;
    conn.write_all(&(timeout.as_millis() as u64).to_le_bytes())?;
    let payload = read_frame(&mut conn)?;
    if payload.is_empty() {
        return Ok(None);
    }
    let entry: BufferEntry =
        serde_json::from_slice(&payload).map_err(|e| PipelineError::Wire(e.to_string()))?;
    Ok(Some(entry))
}
