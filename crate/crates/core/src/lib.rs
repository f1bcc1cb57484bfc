pub mod archive;
pub mod bins;
pub mod dataset;
pub mod engine;
pub mod features;
pub mod lassopath;
pub mod netir;
pub mod probe;
pub mod pruner;
pub mod synthfaces;
pub mod tensor;

pub use netir::{NetworkBuilder, NetworkIR, Shape3};
pub use tensor::Tensor;
