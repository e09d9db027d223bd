//! Numerical schemes for one-dimensional backward doubly stochastic
//! differential equations
//!
//! ```text
//! Y_t = xi + int_t^T f(s, Y_s, Z_s) ds + int_t^T g(s, Y_s, Z_s) dB_s - int_t^T Z_s dW_s
//! ```
//!
//! driven by scaled Bernoulli walks: the implicit tree scheme, the modified
//! explicit scheme, discrete Picard iteration with weighted-norm contraction
//! diagnostics, exact oracles, Monte-Carlo estimation over backward-noise
//! paths, and the stochastic PDE surface `u(0, x)`.

// `!(x > 0.0)` guards are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod explicit_solver;
pub mod grid_noise;
pub mod model;
pub mod montecarlo;
pub mod oracle;
pub mod picard;
pub mod spde;
pub mod table;
pub mod tree_solver;

pub use error::{Error, Result};
pub use grid_noise::{make_grid, sample_path, sample_path_at, NoisePath, TimeGrid, WalkValues};
pub use model::{
    builtin, validate_spec, Coefficient, ProblemSpec, TerminalFunctional, ValidatedSpec,
};
pub use tree_solver::{
    solve_backward, solve_with_scheme, LevelValues, Scheme, SolveOptions, SolveReport,
};
