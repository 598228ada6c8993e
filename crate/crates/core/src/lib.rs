//! Single-model multilingual audio-visual speech recognition at desk scale.
//!
//! Audio and video frontends are fused and encoded by a transformer that
//! receives fresh learnable prompts at every layer. The final prompt and
//! feature outputs feed a language classifier, a CTC head and a
//! language-conditioned attention decoder, all trained jointly under a
//! per-language balancing weight.

pub mod autograd;
pub mod checkpoint;
pub mod classifier;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod frontends;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use autograd::{Graph, NodeId};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
