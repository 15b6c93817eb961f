//! Forward and backward kernels on plain tensors. The autodiff graph wires
//! these together; they can also be called directly.

pub mod attention;
pub mod conv;
pub mod norm;
pub mod pool;
