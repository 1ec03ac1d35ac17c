//! Dense tensor kernels and small-matrix linear algebra.

pub mod conv;
pub mod linalg;
pub mod matrix;
pub mod pool;
pub mod tensor;

pub use conv::{conv2d, conv2d_input_adjoint, Padding};
pub use linalg::{dense_eig_symmetric, dense_svd, householder_qr_flops, qr_householder};
pub use matrix::{matmul, DenseMatrix};
pub use pool::maxpool_argmax;
pub use tensor::{dot, norm2, rel_err, IndexTensor, MaskTensor, Tensor};
