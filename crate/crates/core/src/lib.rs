//! Transfer-matrix cocycles for Jacobi operators with random decaying
//! perturbations: solution asymptotics, subordinacy exponents, correction
//! matrices and sparse-potential propagation.

pub mod ac_criterion;
pub mod cocycle;
pub mod error;
pub mod matrix;
pub mod phase;
pub mod randpert;
pub mod singular;
pub mod sparse;
pub mod stats;
pub mod subordinacy;
pub mod trajectory;
pub mod variation;

pub use cocycle::{
    boundary_angle, fast_const_power, single_step, solve_forward, transfer_norms,
    transfer_product, transfer_product_scaled, Coefficients, ConstPower, OperatorSpec,
};
pub use error::{LabError, Result};
pub use matrix::{Matrix2, ScaledMatrix, Svd2};
pub use trajectory::{l_norm, Trajectory};
