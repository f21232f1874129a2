pub mod adapt;
pub mod autodiff;
pub mod data;
pub mod features;
pub mod nn;
pub mod real;
pub mod report;
pub mod seed;
pub mod tensor;

pub use real::{Precision, Real};
pub use tensor::Tensor;
