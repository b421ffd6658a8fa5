//! Tensorized attention: attention over multi-dimensional reshapings of a
//! token sequence, with per-dimension rotary positions, spectrum analysis of
//! attention matrices in vector vs tensor space, random-projection
//! experiments, and a toy recall model that trains end to end.

pub mod attention;
pub mod error;
pub mod position;
pub mod bench;
pub mod cp;
pub mod io;
pub mod jl;
pub mod rng;
pub mod spectrum;
pub mod svd;
pub mod tensor;
pub mod toylm;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{set_threads, threads, BoolTensor, DenseTensor, MaskPolicy, TensorizationScheme};
