//! Joint audio-video generation at desk scale: two unimodal diffusion-transformer
//! experts (video: self-attention + text cross-attention; audio: linear attention +
//! condition cross-attention) are stitched block-by-block into one bimodal
//! flow-matching model and trained end-to-end on a synthetic paired dataset whose
//! cross-modal structure (audio pitch tracks the height of a bouncing ball) is
//! analytically known, so alignment can be measured exactly.

pub mod autodiff;
pub mod config;
pub mod evals;
pub mod experts;
pub mod flow;
pub mod infer;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod shard;
pub mod stitch;
pub mod synthdata;
pub mod tensor;
pub mod train;
