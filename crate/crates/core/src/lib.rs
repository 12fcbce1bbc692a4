//! Numeric core for Matryoshka mixture-of-experts adaptation of a frozen
//! decoder-only transformer.
//!
//! The crate is `no_std` and only needs `alloc`. It owns the autodiff tensor
//! engine, token compression, the MoME layer, the backbone, losses, the
//! synthetic two-stream task, training and the diagnostic analyses. File
//! formats, configuration files and the command line live in `mome-lab`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod backbone;
pub mod error;
pub mod exec;
pub mod matryoshka;
pub mod math;
pub mod mome;
pub mod objective;
pub mod params;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
