//! Implicit scheme: backward induction on the recombining forward-walk tree
//! for one fixed backward-noise path.
//!
//! Level `j` has nodes `i = 0..=j`; node `i` sits at `W = (2i - j) sqrt(delta)`
//! and its up-move leads to node `i + 1` of level `j + 1`. For a fixed
//! `eps`, the values at level `j` depend only on the node and on the suffix
//! `eps[j..]`, which is how the mixed conditioning on the forward prefix and
//! the backward suffix is realized.
//!
//! Per node, with `Y+ = next.y[i+1]`, `Y- = next.y[i]` and `g+-` evaluated at
//! `t_{j+1}`:
//!
//! ```text
//! z   = (Y+ - Y-) / (2 sqrt(delta)) + (g+ - g-) eps / 2
//! y - f(t_j, y, z) delta = (Y+ + Y-) / 2 + sqrt(delta) (g+ + g-) eps / 2
//! ```
//!
//! The second line is inverted by [`theta_invert`]. The step from level
//! `j + 1` to `j` consumes `eps[j]`, the 0-based slot of `eps_{j+1}`.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_noise::TimeGrid;
use crate::model::{ProblemSpec, ValidatedSpec};
use crate::table;

/// Which backward scheme produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Implicit,
    Explicit,
    Picard,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Implicit => "implicit",
            Scheme::Explicit => "explicit",
            Scheme::Picard => "picard",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "implicit" => Ok(Scheme::Implicit),
            "explicit" => Ok(Scheme::Explicit),
            "picard" => Ok(Scheme::Picard),
            other => Err(Error::InvalidArgument(format!("unknown scheme `{other}`"))),
        }
    }
}

/// Node-indexed `(y, z)` on one tree level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelValues {
    pub level: usize,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

impl LevelValues {
    pub fn zeros(level: usize) -> Self {
        Self {
            level,
            y: vec![0.0; level + 1],
            z: vec![0.0; level + 1],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.y.iter().chain(&self.z).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub scheme: Scheme,
    /// All levels `0..=n` when requested.
    pub levels: Option<Vec<LevelValues>>,
    pub y0: f64,
    pub z0: f64,
    /// Largest fixed-point iteration count used at any node.
    pub fixed_point_iterations: usize,
    /// Largest `|Theta(y) - rhs|` over all nodes.
    pub residual: f64,
}

/// How the terminal `z` enters the first backward step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TerminalZ {
    /// `Z_T` is the discrete gradient of `Phi` across terminal nodes.
    #[default]
    CentralDifference,
    /// The first step evaluates `g` at the unknown `z_{n-1}` and solves the
    /// resulting monotone equation in `z` instead of using `Z_T`.
    PsiFixedPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub keep_tree: bool,
    pub tol: f64,
    pub max_iterations: usize,
    pub terminal_z: TerminalZ,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            keep_tree: false,
            tol: 1e-12,
            max_iterations: 100,
            terminal_z: TerminalZ::CentralDifference,
        }
    }
}

impl SolveOptions {
    pub fn keep_tree() -> Self {
        Self {
            keep_tree: true,
            ..Self::default()
        }
    }
}

/// State variable `x` seen by the coefficients at each tree node.
pub trait NodeState: Sync {
    fn state(&self, level: usize, node: usize) -> f64;
}

/// The forward walk itself: `x = W` at the node.
#[derive(Debug, Clone, Copy)]
pub struct WalkLattice {
    sqrt_delta: f64,
}

impl WalkLattice {
    pub fn new(grid: &TimeGrid) -> Self {
        Self {
            sqrt_delta: grid.sqrt_delta(),
        }
    }
}

impl NodeState for WalkLattice {
    fn state(&self, level: usize, node: usize) -> f64 {
        (2.0 * node as f64 - level as f64) * self.sqrt_delta
    }
}

/// Discrete gradient of node values along the walk axis: central
/// difference inside, one-sided at the two extreme nodes.
pub fn discrete_gradient(y: &[f64], sqrt_delta: f64) -> Vec<f64> {
    let m = y.len();
    if m < 2 {
        return vec![0.0; m];
    }
    let h = 2.0 * sqrt_delta;
    (0..m)
        .map(|i| {
            if i == 0 {
                (y[1] - y[0]) / h
            } else if i == m - 1 {
                (y[m - 1] - y[m - 2]) / h
            } else {
                (y[i + 1] - y[i - 1]) / (2.0 * h)
            }
        })
        .collect()
}

/// Terminal level: `y = Phi` at the nodes, `z` its discrete gradient.
pub fn terminal_layer(spec: &ProblemSpec, grid: &TimeGrid) -> Result<LevelValues> {
    let n = grid.steps();
    let y = (0..=n)
        .map(|i| {
            spec.phi.at_terminal(grid.node_value(n, i)).ok_or_else(|| {
                Error::Unsupported(format!(
                    "{}: path-dependent terminal functional has no tree representation",
                    spec.name
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(terminal_from_values(y, grid))
}

pub(crate) fn terminal_from_values(y: Vec<f64>, grid: &TimeGrid) -> LevelValues {
    let z = discrete_gradient(&y, grid.sqrt_delta());
    LevelValues {
        level: grid.steps(),
        y,
        z,
    }
}

/// Solution of `y - f(t, x, y, z) delta = rhs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaSolution {
    pub y: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Inverts `Theta(y) = y - f(t, x, y, z) delta`. Affine `f` is solved in
/// closed form; otherwise `y <- rhs + f(y) delta` from `y = rhs`, which
/// contracts with factor `delta K`.
#[allow(clippy::too_many_arguments)]
pub fn theta_invert(
    rhs: f64,
    z: f64,
    t: f64,
    x: f64,
    spec: &ProblemSpec,
    grid: &TimeGrid,
    tol: f64,
    max_iterations: usize,
) -> Result<ThetaSolution> {
    let delta = grid.delta();
    let f = |y: f64| spec.f.value(t, x, y, z);
    let residual = |y: f64| (y - f(y) * delta - rhs).abs();

    if let Some((slope, offset)) = spec.f.affine_in_y(t, x, z) {
        let y = (rhs + offset * delta) / (1.0 - slope * delta);
        return Ok(ThetaSolution {
            y,
            iterations: 0,
            residual: residual(y),
        });
    }

    let mut y = rhs;
    for it in 1..=max_iterations {
        let next = rhs + f(y) * delta;
        let step = (next - y).abs();
        y = next;
        if step <= tol.max(4.0 * f64::EPSILON * y.abs()) {
            return Ok(ThetaSolution {
                y,
                iterations: it,
                residual: residual(y),
            });
        }
    }
    Err(Error::NumericFailure {
        level: 0,
        node: 0,
        residual: residual(y),
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct StepStats {
    pub iterations: usize,
    pub residual: f64,
}

/// One implicit step from `next` (level `j + 1`) to level `j`.
pub fn implicit_step(
    next: &LevelValues,
    eps_sign: i8,
    spec: &ValidatedSpec,
    grid: &TimeGrid,
    tol: f64,
) -> Result<LevelValues> {
    let opts = SolveOptions {
        tol,
        ..SolveOptions::default()
    };
    implicit_step_on(
        next,
        eps_sign,
        spec,
        grid,
        &WalkLattice::new(grid),
        &opts,
        false,
    )
    .map(|(level, _)| level)
}

pub(crate) fn implicit_step_on(
    next: &LevelValues,
    eps_sign: i8,
    spec: &ProblemSpec,
    grid: &TimeGrid,
    lattice: &dyn NodeState,
    opts: &SolveOptions,
    psi_terminal: bool,
) -> Result<(LevelValues, StepStats)> {
    let j = next
        .level
        .checked_sub(1)
        .ok_or_else(|| Error::InvalidArgument("cannot step below level 0".into()))?;
    let sd = grid.sqrt_delta();
    let eps = f64::from(eps_sign);
    let (t_j, t_next) = (grid.time(j), grid.time(j + 1));
    let mut out = LevelValues::zeros(j);
    let mut stats = StepStats::default();

    for i in 0..=j {
        let (y_up, y_dn) = (next.y[i + 1], next.y[i]);
        let (x_up, x_dn) = (lattice.state(j + 1, i + 1), lattice.state(j + 1, i));
        let slope = (y_up - y_dn) / (2.0 * sd);

        let (z, g_up, g_dn) = if psi_terminal {
            let (z, its) = psi_solve(
                slope,
                eps,
                |zz| {
                    (
                        spec.g.value(t_next, x_up, y_up, zz),
                        spec.g.value(t_next, x_dn, y_dn, zz),
                    )
                },
                opts,
            )
            .map_err(|residual| Error::NumericFailure {
                level: j,
                node: i,
                residual,
            })?;
            stats.iterations = stats.iterations.max(its);
            (
                z,
                spec.g.value(t_next, x_up, y_up, z),
                spec.g.value(t_next, x_dn, y_dn, z),
            )
        } else {
            let g_up = spec.g.value(t_next, x_up, y_up, next.z[i + 1]);
            let g_dn = spec.g.value(t_next, x_dn, y_dn, next.z[i]);
            (slope + 0.5 * (g_up - g_dn) * eps, g_up, g_dn)
        };

        let rhs = 0.5 * (y_up + y_dn) + 0.5 * sd * (g_up + g_dn) * eps;
        let sol = theta_invert(
            rhs,
            z,
            t_j,
            lattice.state(j, i),
            spec,
            grid,
            opts.tol,
            opts.max_iterations,
        )
        .map_err(|e| match e {
            Error::NumericFailure { residual, .. } => Error::NumericFailure {
                level: j,
                node: i,
                residual,
            },
            other => other,
        })?;
        stats.iterations = stats.iterations.max(sol.iterations);
        stats.residual = stats.residual.max(sol.residual);
        out.y[i] = sol.y;
        out.z[i] = z;
    }
    Ok((out, stats))
}

/// Fixed point `z = slope + (g(Y+, z) - g(Y-, z)) eps / 2`.
fn psi_solve(
    slope: f64,
    eps: f64,
    g_pair: impl Fn(f64) -> (f64, f64),
    opts: &SolveOptions,
) -> std::result::Result<(f64, usize), f64> {
    let map = |z: f64| {
        let (up, dn) = g_pair(z);
        slope + 0.5 * (up - dn) * eps
    };
    let mut z = slope;
    for it in 1..=opts.max_iterations {
        let next = map(z);
        let step = (next - z).abs();
        z = next;
        if step <= opts.tol.max(4.0 * f64::EPSILON * z.abs()) {
            return Ok((z, it));
        }
    }
    Err((map(z) - z).abs())
}

/// Implicit backward solve along the backward-noise path `eps`.
pub fn solve_backward(
    spec: &ValidatedSpec,
    grid: &TimeGrid,
    eps: &[i8],
    opts: &SolveOptions,
) -> Result<SolveReport> {
    let terminal = terminal_layer(spec, grid)?;
    solve_backward_on(spec, grid, eps, opts, terminal, &WalkLattice::new(grid))
}

pub(crate) fn check_eps(eps: &[i8], grid: &TimeGrid) -> Result<()> {
    if eps.len() != grid.steps() {
        return Err(Error::InvalidArgument(format!(
            "eps has {} signs, grid has {} steps",
            eps.len(),
            grid.steps()
        )));
    }
    Ok(())
}

pub(crate) fn solve_backward_on(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    eps: &[i8],
    opts: &SolveOptions,
    terminal: LevelValues,
    lattice: &dyn NodeState,
) -> Result<SolveReport> {
    check_eps(eps, grid)?;
    let n = grid.steps();
    let mut levels = opts.keep_tree.then(|| Vec::with_capacity(n + 1));
    let mut current = terminal;
    let (mut iterations, mut residual) = (0, 0.0_f64);

    for j in (0..n).rev() {
        let psi = j + 1 == n && opts.terminal_z == TerminalZ::PsiFixedPoint;
        let (level, stats) = implicit_step_on(&current, eps[j], spec, grid, lattice, opts, psi)?;
        iterations = iterations.max(stats.iterations);
        residual = residual.max(stats.residual);
        if let Some(levels) = levels.as_mut() {
            levels.push(current);
        }
        current = level;
    }

    let (y0, z0) = (current.y[0], current.z[0]);
    if let Some(levels) = levels.as_mut() {
        levels.push(current);
        levels.reverse();
    }
    Ok(SolveReport {
        scheme: Scheme::Implicit,
        levels,
        y0,
        z0,
        fixed_point_iterations: iterations,
        residual,
    })
}

/// Largest violation of the one-step equation under both forward branches,
///
/// ```text
/// y_j = y_{j+1} + f(t_j, y_j, z_j) delta + g(t_{j+1}, y_{j+1}, z_{j+1}) sqrt(delta) eps - z_j sqrt(delta) beta,
/// ```
///
/// over every node of a kept tree.
pub fn implicit_residual(
    levels: &[LevelValues],
    eps: &[i8],
    spec: &ProblemSpec,
    grid: &TimeGrid,
) -> f64 {
    branch_residual(levels, eps, spec, grid, |j, i, y, z, _| {
        spec.f.value(grid.time(j), grid.node_value(j, i), y, z)
    })
}

/// Shared by the implicit and explicit residual checks; `drift` returns the
/// `f` term at node `(j, i)` given `(y_j, z_j)` and the next level.
pub(crate) fn branch_residual(
    levels: &[LevelValues],
    eps: &[i8],
    spec: &ProblemSpec,
    grid: &TimeGrid,
    drift: impl Fn(usize, usize, f64, f64, &LevelValues) -> f64,
) -> f64 {
    let sd = grid.sqrt_delta();
    let delta = grid.delta();
    let mut worst: f64 = 0.0;
    for j in 0..grid.steps() {
        let (cur, next) = (&levels[j], &levels[j + 1]);
        let e = f64::from(eps[j]);
        let t_next = grid.time(j + 1);
        for i in 0..=j {
            let (y, z) = (cur.y[i], cur.z[i]);
            let fterm = drift(j, i, y, z, next) * delta;
            for (child, beta) in [(i + 1, 1.0), (i, -1.0)] {
                let g = spec.g.value(
                    t_next,
                    grid.node_value(j + 1, child),
                    next.y[child],
                    next.z[child],
                );
                let rebuilt = next.y[child] + fterm + g * sd * e - z * sd * beta;
                let scale = 1.0_f64.max(y.abs());
                worst = worst.max((y - rebuilt).abs() / scale);
            }
        }
    }
    worst
}

/// Tree dump with columns `level,node,W,y,z,scheme`.
pub fn write_tree_csv<W: Write>(
    out: &mut W,
    levels: &[LevelValues],
    grid: &TimeGrid,
    scheme: Scheme,
) -> io::Result<()> {
    let rows: Vec<Vec<String>> = levels
        .iter()
        .flat_map(|lv| {
            (0..=lv.level).map(move |i| {
                vec![
                    lv.level.to_string(),
                    i.to_string(),
                    table::float(grid.node_value(lv.level, i)),
                    table::float(lv.y[i]),
                    table::float(lv.z[i]),
                    scheme.as_str().to_string(),
                ]
            })
        })
        .collect();
    table::write_csv(out, &["level", "node", "W", "y", "z", "scheme"], &rows)
}

/// Runs the requested scheme along `eps`. Picard uses its default options;
/// its report carries the sweep count and the last squared difference norm.
pub fn solve_with_scheme(
    scheme: Scheme,
    spec: &ValidatedSpec,
    grid: &TimeGrid,
    eps: &[i8],
    opts: &SolveOptions,
) -> Result<SolveReport> {
    match scheme {
        Scheme::Implicit => solve_backward(spec, grid, eps, opts),
        Scheme::Explicit => crate::explicit_solver::solve_backward_explicit(spec, grid, eps, opts),
        Scheme::Picard => {
            let out = crate::picard::picard_solve(spec, grid, eps, &Default::default())?;
            let root = &out.iterate.levels[0];
            Ok(SolveReport {
                scheme: Scheme::Picard,
                y0: root.y[0],
                z0: root.z[0],
                fixed_point_iterations: out.diagnostics.norms.len(),
                residual: out.diagnostics.norms.last().copied().unwrap_or(0.0),
                levels: opts.keep_tree.then_some(out.iterate.levels),
            })
        }
    }
}

/// Tree values met by the forward path `beta`: `y` at levels `0..=n` and `z`
/// at levels `0..n`.
pub fn values_along(levels: &[LevelValues], beta: &[i8]) -> (Vec<f64>, Vec<f64>) {
    let mut node = 0;
    let mut y = Vec::with_capacity(levels.len());
    let mut z = Vec::with_capacity(levels.len().saturating_sub(1));
    for (j, lv) in levels.iter().enumerate() {
        y.push(lv.y[node]);
        if j < beta.len() {
            z.push(lv.z[node]);
            if beta[j] > 0 {
                node += 1;
            }
        }
    }
    (y, z)
}
