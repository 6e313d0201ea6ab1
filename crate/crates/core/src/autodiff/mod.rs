//! Reverse-mode differentiation for small dense models.
//!
//! Produces per-sample losses and gradients of a mini-batch and matrix-free
//! Hessian-vector products of the mini-batch loss.

mod curvature;
mod graph;
mod model;
mod observe;
mod tensor;

pub use curvature::{
    dense_hessian_reference, hessian_diagonal, hessian_vector_product, hutchinson_diagonal,
    BatchCurvature, CurvatureProbe, DenseCurvature, DiagMode, DENSE_REFERENCE_CAP,
    DEFAULT_DIAG_CAP,
};
pub use graph::{Graph, Var};
pub use model::{
    Activation, Batch, Layer, LayerSpan, Layout, LossKind, Model, ParamBlock, ParamVector,
    Quadratic, SamplePass, Sequential,
};
pub use observe::{
    backward_per_sample, batch_gradient, forward_batch, gradient_and_observations, observe_batch,
    observe_with_batch_gradient, BatchGradient, BatchObservables,
};
pub use tensor::Tensor;
