//! Dense tensors, the convolution / attention / normalization primitives the
//! models need, a tape-based autodiff graph, AdamW, a central-difference
//! gradient checker and a portable array container.

pub mod container;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use container::{Container, FeatureEntry, FeatureStore};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_full, relative_error, relative_error_floored, GradCheckReport, FLOOR_FRACTION};
pub use graph::{ConvGeometry, Gradients, Graph, NodeId};
pub use nn::{BatchNorm, Conv2d, LayerNorm, Linear, Mode};
pub use optim::{AdamW, AdamWConfig, StepReport, WarmupCosine};
pub use params::{derive_seed, BufferId, Init, Param, ParamId, ParamStore, StatUpdate};
pub use scalar::{gemm, DType, FloatOps, Scalar};
pub use tensor::Tensor;
