//! Random field `u(0, x)` from the forward-backward representation: run the
//! backward solver on a lattice for the forward diffusion started at `x`,
//! with terminal value `h(X_T)`.
//!
//! The volatility must be constant so the lattice recombines. Node `i` of
//! level `j` sits at `X = mu_j + sigma (2i - j) sqrt(delta)`, where `mu_j` is
//! the Euler mean `mu_{j+1} = mu_j + b(mu_j) delta`. For constant drift this
//! is the Euler scheme exactly; for state-dependent drift the fluctuation part
//! does not feel the drift, which is the usual lattice approximation.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_noise::TimeGrid;
use crate::model::{TerminalFunctional, ValidatedSpec};
use crate::table;
use crate::tree_solver::{solve_backward_on, terminal_from_values, NodeState, SolveOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Volatility {
    Constant(f64),
    /// `s0 + s1 x`; only `s1 = 0` is supported.
    Affine {
        s0: f64,
        s1: f64,
    },
}

impl Volatility {
    fn constant(&self) -> Result<f64> {
        match *self {
            Volatility::Constant(s) => Ok(s),
            Volatility::Affine { s0, s1: 0.0 } => Ok(s0),
            Volatility::Affine { .. } => Err(Error::Unsupported(
                "state-dependent volatility does not give a recombining lattice".into(),
            )),
        }
    }
}

/// Forward diffusion `dX = (b0 + b1 X) dt + sigma dW` and terminal `h(X_T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardSpec {
    pub drift: (f64, f64),
    pub volatility: Volatility,
    pub h: TerminalFunctional,
}

impl ForwardSpec {
    /// Driftless, unit volatility.
    pub fn brownian(h: TerminalFunctional) -> Self {
        Self {
            drift: (0.0, 0.0),
            volatility: Volatility::Constant(1.0),
            h,
        }
    }
}

/// Forward states on the recombining lattice started at one `x`.
#[derive(Debug, Clone)]
pub struct ForwardLattice {
    means: Vec<f64>,
    sigma: f64,
    sqrt_delta: f64,
}

impl ForwardLattice {
    pub fn new(fwd: &ForwardSpec, grid: &TimeGrid, x: f64) -> Result<Self> {
        let sigma = fwd.volatility.constant()?;
        if !x.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "start point {x} is not finite"
            )));
        }
        let (b0, b1) = fwd.drift;
        let mut means = Vec::with_capacity(grid.steps() + 1);
        let mut mu = x;
        means.push(mu);
        for _ in 0..grid.steps() {
            mu += (b0 + b1 * mu) * grid.delta();
            means.push(mu);
        }
        Ok(Self {
            means,
            sigma,
            sqrt_delta: grid.sqrt_delta(),
        })
    }
}

impl NodeState for ForwardLattice {
    fn state(&self, level: usize, node: usize) -> f64 {
        self.means[level] + self.sigma * (2.0 * node as f64 - level as f64) * self.sqrt_delta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub x_grid: Vec<f64>,
    /// `u(0, x)` for the realized backward path.
    pub u: Vec<f64>,
    pub path_tag: String,
}

/// `u(0, x)` at every point of `x_grid` for the backward path `eps`. The
/// coefficients of `spec` see the forward state as their `x` argument; its
/// terminal functional is ignored in favour of `fwd.h`.
pub fn u_surface(
    fwd: &ForwardSpec,
    spec: &ValidatedSpec,
    grid: &TimeGrid,
    x_grid: &[f64],
    eps: &[i8],
    path_tag: impl Into<String>,
) -> Result<Surface> {
    fwd.volatility.constant()?;
    if fwd.h.is_path_dependent() {
        return Err(Error::Unsupported(
            "terminal function must depend on X_T only".into(),
        ));
    }
    let n = grid.steps();
    let u = x_grid
        .par_iter()
        .map(|&x| {
            let lattice = ForwardLattice::new(fwd, grid, x)?;
            let terminal: Vec<f64> = (0..=n)
                .map(|i| fwd.h.at_terminal(lattice.state(n, i)).expect("markovian h"))
                .collect();
            let rep = solve_backward_on(
                spec,
                grid,
                eps,
                &SolveOptions::default(),
                terminal_from_values(terminal, grid),
                &lattice,
            )?;
            Ok(rep.y0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Surface {
        x_grid: x_grid.to_vec(),
        u,
        path_tag: path_tag.into(),
    })
}

/// `B_T` on the walk, the additive noise carried by `u` when `g = 1`.
pub fn backward_noise_term(eps: &[i8], grid: &TimeGrid) -> f64 {
    eps.iter().map(|&e| i64::from(e)).sum::<i64>() as f64 * grid.sqrt_delta()
}

/// `m` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    match m {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..m)
            .map(|k| {
                if k + 1 == m {
                    hi
                } else {
                    lo + (hi - lo) * k as f64 / (m - 1) as f64
                }
            })
            .collect(),
    }
}

/// Columns `x,u0,eps_seed`.
pub fn write_surface_csv<W: Write>(out: &mut W, surface: &Surface) -> io::Result<()> {
    let rows: Vec<Vec<String>> = surface
        .x_grid
        .iter()
        .zip(&surface.u)
        .map(|(x, u)| vec![table::float(*x), table::float(*u), surface.path_tag.clone()])
        .collect();
    table::write_csv(out, &["x", "u0", "eps_seed"], &rows)
}
