pub mod backbone;
pub mod checkpoint;
pub mod compensator;
pub mod config;
pub mod crr;
pub mod ctr;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod mask;
pub mod metrics;
pub mod tensor;
pub mod trainer;

pub use error::{Result, RtcError};
pub use mask::LabelMap;
pub use tensor::{Gradients, Graph, Tensor, Var};
