//! Cross-feature-level Mamba segmentation model on a small tape-based
//! autodiff engine.

pub mod activation;
pub mod autodiff;
pub mod cflma;
pub mod cflmd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod selftest;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, OffsetOrder, OffsetVariant};
pub use model::Cfmd;
pub use autodiff::{Gradients, Tape, Var};
pub use element::{DType, Element};
pub use error::{Error, Result};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::{Dims, Fill, Tensor};
