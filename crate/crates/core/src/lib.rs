//! Numerical laboratory for contact Hamilton-Jacobi equations
//! `H(x, Du, u) = 0` and their perturbations `H + eps * P = 0` on the flat
//! torus, built on a semi-Lagrangian discretization of the implicit
//! Lax-Oleinik semigroup.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod grid;
pub mod model;
pub mod semigroup;
pub mod stationary;
pub mod stability;
