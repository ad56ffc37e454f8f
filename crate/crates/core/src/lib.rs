//! Toy RGB-D semantic segmentation with depth-aware positional encoding,
//! cross-input attention and attention-mix fusion, on a small reverse-mode
//! autodiff engine.

pub mod ablation;
pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod optim;
pub mod params;
pub mod posenc;
pub mod run;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
