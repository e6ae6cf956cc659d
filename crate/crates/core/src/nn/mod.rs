//! Reverse-mode differentiable network substrate and the encoder/decoder models.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod params;
pub mod sequential;

pub use layers::{Layer, PoolKind, Tape};
pub use model::{
    chunk_batch, end_to_end_forward, Decoder, DecoderSpec, Encoder, EncoderSpec, PoolSpec,
    SpatialBlock, TemporalBlock, UpsampleBlock,
};
pub use params::{Grads, ModelParams};
pub use sequential::Sequential;
