//! Classical regularized inversion with the transfer operator known: the
//! reference oracles the learned models are compared against.

pub mod regularized;
pub mod svd;

pub use regularized::{
    cholesky, first_difference_operator, graph_roughness, select_lambda, solve_beat, tikhonov_solve, tsvd_solve,
    RegOperator, RegularizationConfig, TikhonovSolver, GRAPH_NEIGHBOURS, LAMBDA_GRID,
};
pub use svd::{svd, SvdFactors};
