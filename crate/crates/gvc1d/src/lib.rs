//! GVC1D: a video codec that compresses frames into a short sequence of
//! quantized 1D latent tokens, entropy-codes them with an autoregressive
//! transformer over a bit-exact range coder, and conditions on short-term
//! decoder features plus a fixed-size recurrent 1D memory.

pub mod bitstream;
pub mod codec;
pub mod detmath;
pub mod entropy;
pub mod entropy_model;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod rangecoder;
pub mod serial;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{GvcError, Result};
