//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! Just enough machinery to train small convolutional image networks on the
//! CPU: a define-by-run [`Graph`], convolution/pooling/upsampling, gated
//! activations, a few fused losses and an [`Adam`] optimizer. All element
//! types implement [`Float`], so the same model code runs in `f32` for
//! training and in `f64` for finite-difference checks.

mod conv;
mod float;
mod graph;
mod ops;
mod optim;
mod tensor;

pub use conv::ConvGeometry;
pub use float::{gemm, Float, Layout};
pub use graph::{BackwardArgs, BackwardFn, Gradients, Graph, Var};
pub use ops::{blend, sigmoid, Activation};
pub use optim::Adam;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
