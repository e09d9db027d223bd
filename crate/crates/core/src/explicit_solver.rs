//! Modified explicit scheme: `f` is evaluated at the conditional mean of the
//! next level instead of at the unknown `y_j`, so no fixed-point solve is
//! needed.
//!
//! ```text
//! m    = (Y+ + Y-) / 2
//! z    = (Y+ - Y-) / (2 sqrt(delta)) + (g+ - g-) eps / 2
//! y    = m + f(t_j, m, z) delta + sqrt(delta) (g+ + g-) eps / 2
//! ```
//!
//! The `g` average is the conditional mean over the next forward sign, as in
//! the implicit step.

use crate::error::{Error, Result};
use crate::grid_noise::TimeGrid;
use crate::model::{ProblemSpec, ValidatedSpec};
use crate::tree_solver::{
    branch_residual, check_eps, terminal_layer, LevelValues, NodeState, Scheme, SolveOptions,
    SolveReport, WalkLattice,
};

pub fn explicit_step(
    next: &LevelValues,
    eps_sign: i8,
    spec: &ValidatedSpec,
    grid: &TimeGrid,
) -> Result<LevelValues> {
    explicit_step_on(next, eps_sign, spec, grid, &WalkLattice::new(grid))
}

pub(crate) fn explicit_step_on(
    next: &LevelValues,
    eps_sign: i8,
    spec: &ProblemSpec,
    grid: &TimeGrid,
    lattice: &dyn NodeState,
) -> Result<LevelValues> {
    let j = next
        .level
        .checked_sub(1)
        .ok_or_else(|| Error::InvalidArgument("cannot step below level 0".into()))?;
    let sd = grid.sqrt_delta();
    let eps = f64::from(eps_sign);
    let (t_j, t_next) = (grid.time(j), grid.time(j + 1));
    let mut out = LevelValues::zeros(j);

    for i in 0..=j {
        let (y_up, y_dn) = (next.y[i + 1], next.y[i]);
        let g_up = spec
            .g
            .value(t_next, lattice.state(j + 1, i + 1), y_up, next.z[i + 1]);
        let g_dn = spec
            .g
            .value(t_next, lattice.state(j + 1, i), y_dn, next.z[i]);
        let mean = 0.5 * (y_up + y_dn);
        let z = (y_up - y_dn) / (2.0 * sd) + 0.5 * (g_up - g_dn) * eps;
        let y = mean
            + spec.f.value(t_j, lattice.state(j, i), mean, z) * grid.delta()
            + 0.5 * sd * (g_up + g_dn) * eps;
        if !(y.is_finite() && z.is_finite()) {
            return Err(Error::NumericFailure {
                level: j,
                node: i,
                residual: f64::INFINITY,
            });
        }
        out.y[i] = y;
        out.z[i] = z;
    }
    Ok(out)
}

/// Explicit backward solve along `eps`; shares the terminal layer with the
/// implicit scheme. `opts.tol` and `opts.max_iterations` are unused.
pub fn solve_backward_explicit(
    spec: &ValidatedSpec,
    grid: &TimeGrid,
    eps: &[i8],
    opts: &SolveOptions,
) -> Result<SolveReport> {
    check_eps(eps, grid)?;
    let lattice = WalkLattice::new(grid);
    let n = grid.steps();
    let mut levels = opts.keep_tree.then(|| Vec::with_capacity(n + 1));
    let mut current = terminal_layer(spec, grid)?;
    for j in (0..n).rev() {
        let level = explicit_step_on(&current, eps[j], spec, grid, &lattice)?;
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
        scheme: Scheme::Explicit,
        levels,
        y0,
        z0,
        fixed_point_iterations: 0,
        residual: 0.0,
    })
}

/// Largest violation over every node and both forward branches of
///
/// ```text
/// y_j = y_{j+1} + f(E[y_{j+1} | .], z_j) delta + g(y_{j+1}, z_{j+1}) sqrt(delta) eps - z_j sqrt(delta) beta.
/// ```
pub fn explicit_residual(
    levels: &[LevelValues],
    eps: &[i8],
    spec: &ProblemSpec,
    grid: &TimeGrid,
) -> f64 {
    branch_residual(levels, eps, spec, grid, |j, i, _y, z, next| {
        let mean = 0.5 * (next.y[i + 1] + next.y[i]);
        spec.f.value(grid.time(j), grid.node_value(j, i), mean, z)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_noise::{make_grid, node_probabilities, sample_path_at};
    use crate::model::{self, validate_spec, Coefficient, TerminalFunctional};
    use crate::tree_solver::{implicit_step, solve_backward};

    #[test]
    fn linear_generator_step() {
        let grid = make_grid(1.0, 10).unwrap(); // delta = 0.1
        let spec = ProblemSpec::new(
            "f=y",
            Coefficient::LinearYz { a: 1.0, b: 0.0 },
            Coefficient::Zero,
            TerminalFunctional::Identity,
            1.0,
            0.0,
        );
        let spec = validate_spec(&spec, &grid).unwrap();
        let mut next = LevelValues::zeros(10);
        next.y[1] = 2.0;
        let lv = explicit_step(&next, 1, &spec, &grid).unwrap();
        assert!((lv.z[0] - 2.0 / (2.0 * 0.1_f64.sqrt())).abs() < 1e-14);
        assert!((lv.z[0] - 3.162_277_660_168_379_5).abs() < 1e-14);
        assert!((lv.y[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn coincides_with_implicit_when_f_vanishes() {
        let grid = make_grid(1.0, 12).unwrap();
        for spec in [
            model::transport(),
            model::time_integral(),
            model::zero(),
            model::linear(0.0, 0.0, 0.3, 0.4),
        ] {
            let spec = validate_spec(&spec, &grid).unwrap();
            let eps = sample_path_at(&grid, 5, 1).eps;
            let imp = solve_backward(&spec, &grid, &eps, &SolveOptions::keep_tree()).unwrap();
            let exp =
                solve_backward_explicit(&spec, &grid, &eps, &SolveOptions::keep_tree()).unwrap();
            for (a, b) in imp.levels.unwrap().iter().zip(exp.levels.unwrap().iter()) {
                for (u, v) in a.y.iter().zip(&b.y).chain(a.z.iter().zip(&b.z)) {
                    assert!((u - v).abs() < 1e-14, "{}: {u} vs {v}", spec.name);
                }
            }
            // single steps too
            let next = crate::tree_solver::terminal_layer(&spec, &grid).unwrap();
            let a = implicit_step(&next, -1, &spec, &grid, 1e-12).unwrap();
            let b = explicit_step(&next, -1, &spec, &grid).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn transport_is_exact() {
        let grid = make_grid(1.0, 4).unwrap();
        let spec = validate_spec(&model::transport(), &grid).unwrap();
        let rep = solve_backward_explicit(&spec, &grid, &[1, -1, 1, 1], &SolveOptions::default())
            .unwrap();
        assert!((rep.y0 - 1.0).abs() < 1e-15);
        assert!((rep.z0 - 1.0).abs() < 1e-15);
        assert_eq!(rep.scheme, Scheme::Explicit);
    }

    #[test]
    fn sine_residual() {
        let grid = make_grid(1.0, 16).unwrap();
        let spec = validate_spec(&model::sine(), &grid).unwrap();
        let eps = sample_path_at(&grid, 3, 0).eps;
        let rep = solve_backward_explicit(&spec, &grid, &eps, &SolveOptions::keep_tree()).unwrap();
        let levels = rep.levels.unwrap();
        assert!(levels.iter().all(LevelValues::is_finite));
        assert!(explicit_residual(&levels, &eps, &spec, &grid) < 1e-12);
    }

    /// Mean over sampled paths of `sqrt(max_j E_beta |ybar_j - y_j|^2)`. The
    /// root gap alone is useless here: with `Phi = W_T` and homogeneous linear
    /// coefficients both schemes give `y_j` odd in `W`, so `y_0 = 0`.
    fn mean_tree_gap(n: usize) -> f64 {
        let grid = make_grid(1.0, n).unwrap();
        let spec = validate_spec(&model::linear(0.3, 0.0, 0.2, 0.0), &grid).unwrap();
        let samples = 400;
        (0..samples)
            .map(|k| {
                let eps = sample_path_at(&grid, 99, k).eps;
                let a = solve_backward(&spec, &grid, &eps, &SolveOptions::keep_tree()).unwrap();
                let b = solve_backward_explicit(&spec, &grid, &eps, &SolveOptions::keep_tree())
                    .unwrap();
                let (a, b) = (a.levels.unwrap(), b.levels.unwrap());
                a.iter()
                    .zip(&b)
                    .map(|(u, v)| {
                        node_probabilities(u.level)
                            .iter()
                            .zip(u.y.iter().zip(&v.y))
                            .map(|(p, (x, y))| p * (x - y).powi(2))
                            .sum::<f64>()
                    })
                    .fold(0.0, f64::max)
                    .sqrt()
            })
            .sum::<f64>()
            / samples as f64
    }

    #[test]
    fn scheme_gap_decays_at_least_linearly() {
        let (e8, e16, e32) = (mean_tree_gap(8), mean_tree_gap(16), mean_tree_gap(32));
        assert!(e8 > 0.0);
        assert!(e16 <= 0.6 * e8, "{e8} -> {e16}");
        assert!(e32 <= 0.6 * e16, "{e16} -> {e32}");
    }
}
