//! Numeric core, decoder model, data handling, episode sampling, simulated
//! collectives and the hybrid pretraining loop.

pub mod collectives;
pub mod data;
pub mod episodes;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod spectral;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{backward, Gradients, ParamId, ParamStore, Tape, Var};
pub use tensor::{Real, Tensor};
