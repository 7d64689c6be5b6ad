//! Derivative tensors, polynomial losses, Kronecker algebra and small dense
//! symmetric linear algebra.

mod derivatives;
mod linalg;
mod poly;
mod symmetric;

pub use derivatives::{
    fd_derivative_tensors, fd_step, poly_derivative_tensors, tensor_indices, DerivativeTensors,
    FnObjective, Objective, MAX_DENSE_DIM,
};
pub use linalg::{
    asymmetry, kron, kron_power, operator_norm, operator_norm_with, sym_eigen, sym_eigen_capped,
    symmetric_spectral_radius, SymEigen, EIGEN_DIM_CAP, KRON_ENTRY_CAP, NORM_MAX_ITERS,
    NORM_REL_TOL, SYMMETRY_TOL,
};
pub use poly::PolyLoss;
pub use symmetric::{SymTensor, TENSOR_ENTRY_CAP};

pub(crate) use linalg::kron_vec;
pub(crate) use symmetric::checked_power;
