//! Low-rank Riemannian solver for `min f(X)` over the spectrahedron
//! `{X >= 0, X_ii = I_d}`, via rank-restricted factorizations `X = Y Y^T`
//! with `Y` on the product Stiefel manifold `St(d,p)^m`.

pub mod blockmat;
pub mod certificate;
pub mod costs;
pub mod eigs;
pub mod rtr;
pub mod staircase;
pub mod error;
pub mod faces;
pub mod stiefel;

pub use blockmat::{symblockdiag, BlockDiag, BlockSpec, SymBlockMatrix};
pub use costs::{ConvexityClass, CostModel, LinearCost, PseudoHuberCost, SmoothedLudCost};
pub use error::{Error, Result};
pub use stiefel::{ManifoldSpec, StiefelPoint, TangentVector};
