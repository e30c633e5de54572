//! Conformer encoder blocks, subsampling, attention and the transformer
//! decoder.

mod layers;
mod params;

pub use layers::*;
pub use params::{derive_seed, splitmix64, Ctx, ParamId, ParamInit, ParamStore};
