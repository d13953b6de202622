pub mod config;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod regression;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use encoder::Mode;
pub use error::{Error, FormatError, Result};
pub use model::{ModelConfig, ModelWeights};
pub use regression::{AnchorCodec, LossKind, ProbabilityVector, SvrDecoder};
pub use tensor::{Graph, Tensor, Var};
