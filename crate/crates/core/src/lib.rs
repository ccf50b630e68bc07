#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Mask, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Matrix;
pub mod nn;
pub mod check;
pub mod align;
pub mod losses;
pub mod decoder;
pub mod tokenizer;
pub mod train;
pub mod codes;
pub mod corpus;
pub mod slm;
pub mod bitrate;
