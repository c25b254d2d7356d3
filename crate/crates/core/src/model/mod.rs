//! Student/teacher encoders, the masked-token predictor and auxiliary heads.

mod checkpoint;
mod encoder;
mod heads;
mod layers;

pub use checkpoint::{load_module, prefixed, read_checkpoint, write_atomic, write_checkpoint};
pub use encoder::{ema_update, patchify, split_channels, Encoder, LatentGrid, ModelConfig, Tokens};
pub use heads::{ActionHead, DynHead, HamActivation, HamNet, HeadLayout, Heads, Predictor};
pub use layers::{sinusoidal_positions, Block, Linear, Module, Norm, NORM_EPS};
pub(crate) use layers::gaussian;

#[cfg(test)]
mod tests;
