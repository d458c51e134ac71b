//! Bit-exact binary container for sample shards and tensor maps (checkpoints).
//!
//! Layout: `magic "AVSH" | version u32 | kind u32 | count u64 | records… |
//! sha256`. All integers little-endian. Sample tensors carry f32 payloads;
//! tensor maps carry f64. The trailing digest makes truncation and corruption
//! detectable without trusting record lengths.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{SampleTuple, SubsetTag};
use crate::tensor::{Mat, TensF32};

const MAGIC: &[u8; 4] = b"AVSH";
const VERSION: u32 = 1;
const KIND_SAMPLES: u32 = 1;
const KIND_TENSOR_MAP: u32 = 2;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt shard: {0}")]
    Corrupt(String),
    #[error("refusing to write an empty shard")]
    Empty,
}

fn corrupt(msg: impl Into<String>) -> ShardError {
    ShardError::Corrupt(msg.into())
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn new(kind: u32) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&kind.to_le_bytes());
        Enc { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn tens_f32(&mut self, t: &TensF32) {
        self.u8(DTYPE_F32);
        self.u8(t.shape.len() as u8);
        for &d in &t.shape {
            self.u64(d as u64);
        }
        for &v in &t.data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn mat_f64(&mut self, m: &Mat) {
        self.u8(DTYPE_F64);
        self.u8(2);
        self.u64(m.rows as u64);
        self.u64(m.cols as u64);
        for &v in &m.data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn tokens(&mut self, seq: &[u32]) {
        self.u32(seq.len() as u32);
        for &t in seq {
            self.u32(t);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn new(buf: &'a [u8], kind: u32) -> Result<(Self, u64), ShardError> {
        if buf.len() < 4 + 4 + 4 + 8 + 32 {
            return Err(corrupt("file shorter than header + digest"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        let want = Sha256::digest(body);
        if digest != want.as_slice() {
            return Err(corrupt("checksum mismatch"));
        }
        let mut d = Dec { buf: body, pos: 0 };
        let magic = d.bytes(4)?;
        if magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = d.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let got_kind = d.u32()?;
        if got_kind != kind {
            return Err(corrupt(format!("expected kind {kind}, found {got_kind}")));
        }
        let count = d.u64()?;
        Ok((d, count))
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], ShardError> {
        if self.pos + n > self.buf.len() {
            return Err(corrupt("payload length mismatch"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ShardError> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ShardError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ShardError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn tens_f32(&mut self) -> Result<TensF32, ShardError> {
        if self.u8()? != DTYPE_F32 {
            return Err(corrupt("expected f32 tensor"));
        }
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.bytes(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(TensF32 { shape, data })
    }

    fn mat_f64(&mut self) -> Result<Mat, ShardError> {
        if self.u8()? != DTYPE_F64 {
            return Err(corrupt("expected f64 tensor"));
        }
        if self.u8()? != 2 {
            return Err(corrupt("tensor maps hold 2-d tensors"));
        }
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let raw = self.bytes(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Mat { rows, cols, data })
    }

    fn tokens(&mut self) -> Result<Vec<u32>, ShardError> {
        let n = self.u32()? as usize;
        let mut seq = Vec::with_capacity(n);
        for _ in 0..n {
            seq.push(self.u32()?);
        }
        Ok(seq)
    }

    fn expect_end(&self) -> Result<(), ShardError> {
        if self.pos != self.buf.len() {
            return Err(corrupt("trailing bytes after records"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Sample shards
// ---------------------------------------------------------------------------

/// Writes the samples to `path`; returns the sample count.
pub fn write_shard(samples: &[SampleTuple], path: &Path) -> Result<usize, ShardError> {
    if samples.is_empty() {
        return Err(ShardError::Empty);
    }
    let mut e = Enc::new(KIND_SAMPLES);
    e.u64(samples.len() as u64);
    for s in samples {
        e.u64(s.clip_id);
        e.u8(match s.subset {
            SubsetTag::HighQuality => 0,
            SubsetTag::LowQuality => 1,
        });
        e.tens_f32(&s.video);
        e.tens_f32(&s.audio);
        e.tens_f32(&s.reference);
        e.tokens(&s.video_caption);
        e.tokens(&s.audio_caption);
        e.tokens(&s.speech);
    }
    fs::write(path, e.finish())?;
    Ok(samples.len())
}

pub fn read_shard(path: &Path) -> Result<Vec<SampleTuple>, ShardError> {
    let buf = fs::read(path)?;
    let (mut d, count) = Dec::new(&buf, KIND_SAMPLES)?;
    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let clip_id = d.u64()?;
        let subset = match d.u8()? {
            0 => SubsetTag::HighQuality,
            1 => SubsetTag::LowQuality,
            v => return Err(corrupt(format!("unknown subset tag {v}"))),
        };
        let video = d.tens_f32()?;
        let audio = d.tens_f32()?;
        let reference = d.tens_f32()?;
        let video_caption = d.tokens()?;
        let audio_caption = d.tokens()?;
        let speech = d.tokens()?;
        samples.push(SampleTuple {
            clip_id,
            video,
            audio,
            video_caption,
            audio_caption,
            speech,
            subset,
            reference,
        });
    }
    d.expect_end()?;
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Tensor maps (checkpoints)
// ---------------------------------------------------------------------------

/// Writes a name → f64 matrix map (ordered by name for a canonical encoding).
pub fn write_mat_map(map: &BTreeMap<String, Mat>, path: &Path) -> Result<usize, ShardError> {
    if map.is_empty() {
        return Err(ShardError::Empty);
    }
    let mut e = Enc::new(KIND_TENSOR_MAP);
    e.u64(map.len() as u64);
    for (name, mat) in map {
        let bytes = name.as_bytes();
        e.u32(bytes.len() as u32);
        e.buf.extend_from_slice(bytes);
        e.mat_f64(mat);
    }
    fs::write(path, e.finish())?;
    Ok(map.len())
}

pub fn read_mat_map(path: &Path) -> Result<BTreeMap<String, Mat>, ShardError> {
    let buf = fs::read(path)?;
    let (mut d, count) = Dec::new(&buf, KIND_TENSOR_MAP)?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let n = d.u32()? as usize;
        let name = String::from_utf8(d.bytes(n)?.to_vec())
            .map_err(|_| corrupt("tensor name not utf-8"))?;
        let mat = d.mat_f64()?;
        map.insert(name, mat);
    }
    d.expect_end()?;
    Ok(map)
}
