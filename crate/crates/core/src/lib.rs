mod binio;
pub mod baselines;
pub mod channel;
pub mod dictionary;
pub mod encoder;
pub mod error;
pub mod head;
pub mod params;
pub mod pipeline;
pub mod stats;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{GradCheck, Gradients, Graph, NodeId, Op, Tensor};
