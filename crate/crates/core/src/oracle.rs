//! Ground truth for the solvers: closed forms for the exactly solvable
//! builtins, exact expectations by enumerating every backward-noise path, the
//! discrete Gronwall series, the a-priori second-moment bound, and the
//! martingale representation on the forward-sign tree.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_noise::{
    check_enumeration_cap, make_grid, node_probabilities, pairwise_sum, scaled_prefix_sums,
    sign_sequence, walk_values, NoisePath, TimeGrid, ENUMERATION_CAP,
};
use crate::model::{self, ExactModel, ProblemSpec, ValidatedSpec};
use crate::tree_solver::{solve_with_scheme, LevelValues, Scheme, SolveOptions};

/// Cap on `n` when every backward path needs its own solver run.
pub const JOINT_ENUMERATION_CAP: usize = 12;

/// Closed-form values along one realized path pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactSolution {
    /// Levels `0..=n`.
    pub y_path: Vec<f64>,
    /// Levels `0..n`.
    pub z_path: Vec<f64>,
}

/// `Y_j = (B_n - B_j) + W_j`, `Z = 1`.
pub fn exact_transport(grid: &TimeGrid, path: &NoisePath) -> Result<ExactSolution> {
    let walks = walk_values(path, grid)?;
    let y_path = walks
        .backward_increments()
        .iter()
        .zip(&walks.w)
        .map(|(b, w)| b + w)
        .collect();
    Ok(ExactSolution {
        y_path,
        z_path: vec![1.0; grid.steps()],
    })
}

/// `Y_j = sqrt(delta) sum_{m >= j} t_{m+1} eps[m]`, `Z = 0`.
pub fn exact_time_integral(grid: &TimeGrid, path: &NoisePath) -> Result<ExactSolution> {
    walk_values(path, grid)?;
    Ok(ExactSolution {
        y_path: time_integral_values(grid, &path.eps),
        z_path: vec![0.0; grid.steps()],
    })
}

fn time_integral_values(grid: &TimeGrid, eps: &[i8]) -> Vec<f64> {
    let n = grid.steps();
    let sd = grid.sqrt_delta();
    let mut y = vec![0.0; n + 1];
    for m in (0..n).rev() {
        y[m] = y[m + 1] + sd * grid.time(m + 1) * f64::from(eps[m]);
    }
    y
}

pub fn exact_solution(
    model: ExactModel,
    grid: &TimeGrid,
    path: &NoisePath,
) -> Result<ExactSolution> {
    match model {
        ExactModel::Transport => exact_transport(grid, path),
        ExactModel::TimeIntegral => exact_time_integral(grid, path),
        ExactModel::Walk => Ok(ExactSolution {
            y_path: walk_values(path, grid)?.w,
            z_path: vec![1.0; grid.steps()],
        }),
    }
}

/// The closed form at every tree node for a fixed backward path.
pub fn exact_tree(model: ExactModel, grid: &TimeGrid, eps: &[i8]) -> Result<Vec<LevelValues>> {
    let n = grid.steps();
    if eps.len() != n {
        return Err(Error::InvalidArgument(format!(
            "eps has {} signs, grid has {n} steps",
            eps.len()
        )));
    }
    let b = scaled_prefix_sums(eps, grid.sqrt_delta());
    let integral = time_integral_values(grid, eps);
    Ok((0..=n)
        .map(|j| {
            let mut lv = LevelValues::zeros(j);
            for i in 0..=j {
                let w = grid.node_value(j, i);
                (lv.y[i], lv.z[i]) = match model {
                    ExactModel::Transport => (b[n] - b[j] + w, 1.0),
                    ExactModel::TimeIntegral => (integral[j], 0.0),
                    ExactModel::Walk => (w, 1.0),
                };
            }
            lv
        })
        .collect())
}

/// `E_beta[h(y, z)]` over the nodes of one level.
pub fn level_mean(level: &LevelValues, h: impl Fn(f64, f64) -> f64) -> f64 {
    let terms: Vec<f64> = node_probabilities(level.level)
        .iter()
        .zip(level.y.iter().zip(&level.z))
        .map(|(p, (&y, &z))| p * h(y, z))
        .collect();
    pairwise_sum(&terms)
}

/// Exact expectation under the discrete law. `functional` receives the full
/// tree for one backward path (the tree already carries every forward path)
/// and must return the conditional expectation given that path, typically
/// through [`level_mean`].
pub fn brute_force_expectation<F>(
    spec: &ValidatedSpec,
    grid: &TimeGrid,
    scheme: Scheme,
    functional: F,
) -> Result<f64>
where
    F: Fn(&[LevelValues], &[i8]) -> f64 + Sync,
{
    let n = grid.steps();
    check_enumeration_cap(n, JOINT_ENUMERATION_CAP)?;
    let count = 1u64 << n;
    let values = (0..count)
        .into_par_iter()
        .map(|k| {
            let eps = sign_sequence(n, k);
            let report = solve_with_scheme(scheme, spec, grid, &eps, &SolveOptions::keep_tree())?;
            let levels = report.levels.expect("tree kept");
            Ok(functional(&levels, &eps))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&values) / count as f64)
}

/// `E[W_n]` and `E[W_n^2]` by enumerating every forward sign sequence.
pub fn walk_moments(grid: &TimeGrid) -> Result<(f64, f64)> {
    let n = grid.steps();
    check_enumeration_cap(n, ENUMERATION_CAP)?;
    let count = 1u64 << n;
    let terminal: Vec<f64> = (0..count)
        .into_par_iter()
        .map(|k| scaled_prefix_sums(&sign_sequence(n, k), grid.sqrt_delta())[n])
        .collect();
    let squares: Vec<f64> = terminal.iter().map(|w| w * w).collect();
    Ok((
        pairwise_sum(&terminal) / count as f64,
        pairwise_sum(&squares) / count as f64,
    ))
}

/// `1 + sum_{p >= 1} b^p / p! * (1 + delta) ... (1 + (p - 1) delta)`, summed
/// until the next term is negligible.
pub fn gronwall_epsilon(delta: f64, b: f64) -> Result<f64> {
    if !(delta > 0.0 && delta.is_finite()) || !(b >= 0.0 && b.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "need delta > 0 and b >= 0, got delta = {delta}, b = {b}"
        )));
    }
    let product = b * delta;
    if product >= 1.0 {
        return Err(Error::DivergentSeries { product });
    }
    let mut sum = 1.0;
    let mut term = b;
    let mut p = 1u64;
    while p <= 1_000_000 {
        sum += term;
        if term < 1e-16 * sum {
            break;
        }
        term *= b * (1.0 + p as f64 * delta) / (p + 1) as f64;
        p += 1;
    }
    Ok(sum)
}

/// `1 + 2K + 7K^2`, the growth rate in the a-priori bound.
pub fn apriori_rate(spec: &ProblemSpec) -> f64 {
    let k = spec.lipschitz;
    1.0 + 2.0 * k + 7.0 * k * k
}

fn check_apriori_gate(spec: &ProblemSpec, grid: &TimeGrid) -> Result<()> {
    let contraction = apriori_rate(spec) * grid.delta();
    if contraction >= 1.0 {
        let min_steps = (apriori_rate(spec) * grid.horizon()).floor() as usize + 1;
        return Err(Error::StepTooCoarse {
            contraction,
            min_steps,
        });
    }
    Ok(())
}

/// `C * exp((1 + 2K + 7K^2) T)` with
/// `C = |f(0,0)|^2 + 3|g(0,0)|^2 + (1 + K delta + 3K^2 delta + 3 alpha^2 sqrt(delta)) E|xi|^2`.
/// Time-dependent coefficients use their sup over the grid at the origin.
pub fn apriori_bound_rhs(
    spec: &ProblemSpec,
    grid: &TimeGrid,
    xi_second_moment: f64,
) -> Result<f64> {
    check_apriori_gate(spec, grid)?;
    let (k, a, d) = (spec.lipschitz, spec.alpha, grid.delta());
    let f0 = spec.f.sup_at_origin(grid);
    let g0 = spec.g.sup_at_origin(grid);
    let c = f0 * f0
        + 3.0 * g0 * g0
        + (1.0 + k * d + 3.0 * k * k * d + 3.0 * a * a * d.sqrt()) * xi_second_moment;
    Ok(c * (apriori_rate(spec) * grid.horizon()).exp())
}

/// `E|Phi|^2` under the forward-walk law.
pub fn terminal_second_moment(spec: &ProblemSpec, grid: &TimeGrid) -> Result<f64> {
    let n = grid.steps();
    if spec.phi.is_path_dependent() {
        check_enumeration_cap(n, ENUMERATION_CAP)?;
        let count = 1u64 << n;
        let values: Vec<f64> = (0..count)
            .into_par_iter()
            .map(|k| {
                let w = scaled_prefix_sums(&sign_sequence(n, k), grid.sqrt_delta());
                spec.phi.on_path(&w, grid).powi(2)
            })
            .collect();
        return Ok(pairwise_sum(&values) / count as f64);
    }
    let terms: Vec<f64> = node_probabilities(n)
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let v = spec
                .phi
                .at_terminal(grid.node_value(n, i))
                .expect("terminal functional");
            p * v * v
        })
        .collect();
    Ok(pairwise_sum(&terms))
}

/// `sup_j E|y_j|^2 + delta sum_{j=0}^{n} E|z_j|^2` for the explicit scheme,
/// exact over both noises.
pub fn apriori_bound_lhs(spec: &ValidatedSpec, grid: &TimeGrid) -> Result<f64> {
    let n = grid.steps();
    check_enumeration_cap(n, JOINT_ENUMERATION_CAP)?;
    let count = 1u64 << n;
    let per_path = (0..count)
        .into_par_iter()
        .map(|k| {
            let eps = sign_sequence(n, k);
            let rep = solve_with_scheme(
                Scheme::Explicit,
                spec,
                grid,
                &eps,
                &SolveOptions::keep_tree(),
            )?;
            let levels = rep.levels.expect("tree kept");
            let y2: Vec<f64> = levels
                .iter()
                .map(|lv| level_mean(lv, |y, _| y * y))
                .collect();
            let z2: Vec<f64> = levels
                .iter()
                .map(|lv| level_mean(lv, |_, z| z * z))
                .collect();
            Ok((y2, z2))
        })
        .collect::<Result<Vec<_>>>()?;

    let level_average = |level: usize, pick_z: bool| {
        let values: Vec<f64> = per_path
            .iter()
            .map(|(y2, z2)| if pick_z { z2[level] } else { y2[level] })
            .collect();
        pairwise_sum(&values) / count as f64
    };
    let sup_y = (0..=n).map(|j| level_average(j, false)).fold(0.0, f64::max);
    let z_sum = pairwise_sum(&(0..=n).map(|j| level_average(j, true)).collect::<Vec<_>>());
    Ok(sup_y + grid.delta() * z_sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AprioriCheck {
    pub lhs: f64,
    pub rhs: f64,
}

impl AprioriCheck {
    pub fn holds(&self) -> bool {
        self.lhs < self.rhs
    }
}

/// Both sides of the a-priori bound; errors with `StepTooCoarse` when the
/// step violates the bound's own precondition.
pub fn apriori_check(spec: &ValidatedSpec, grid: &TimeGrid) -> Result<AprioriCheck> {
    let rhs = apriori_bound_rhs(spec, grid, terminal_second_moment(spec, grid)?)?;
    Ok(AprioriCheck {
        lhs: apriori_bound_lhs(spec, grid)?,
        rhs,
    })
}

/// Conditional expectations of a terminal variable on the non-recombining
/// forward-sign tree. Node `k` of level `j` has children `2k` (sign `+1`) and
/// `2k + 1` (sign `-1`), so leaf `k` is [`sign_sequence`]`(n, k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTree {
    /// `2^j` values at level `j = 0..=n`.
    pub m: Vec<Vec<f64>>,
    /// `2^j` integrands at level `j = 0..n`.
    pub z: Vec<Vec<f64>>,
}

pub fn martingale_representation<F>(terminal_rv: F, grid: &TimeGrid) -> Result<MartingaleTree>
where
    F: Fn(&[i8]) -> f64 + Sync,
{
    let n = grid.steps();
    check_enumeration_cap(n, ENUMERATION_CAP)?;
    let leaves: Vec<f64> = (0..1u64 << n)
        .into_par_iter()
        .map(|k| terminal_rv(&sign_sequence(n, k)))
        .collect();
    let sd = grid.sqrt_delta();
    let mut m = vec![leaves];
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        let below = m.last().expect("leaf level present");
        let (mean, integrand): (Vec<f64>, Vec<f64>) = below
            .chunks_exact(2)
            .map(|pair| (0.5 * (pair[0] + pair[1]), (pair[0] - pair[1]) / (2.0 * sd)))
            .unzip();
        m.push(mean);
        z.push(integrand);
    }
    m.reverse();
    z.reverse();
    Ok(MartingaleTree { m, z })
}

/// Largest violation of `M_{j+1} - M_j = Z_j sqrt(delta) beta_{j+1}` over
/// every edge, and of `M_n = M_0 + sum_j Z_j sqrt(delta) beta_{j+1}` over
/// every path.
pub fn representation_residual(tree: &MartingaleTree, grid: &TimeGrid) -> f64 {
    let n = tree.z.len();
    let sd = grid.sqrt_delta();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for k in 0..tree.z[j].len() {
            for (child, sign) in [(2 * k, 1.0), (2 * k + 1, -1.0)] {
                let step = tree.m[j + 1][child] - tree.m[j][k];
                worst = worst.max((step - tree.z[j][k] * sd * sign).abs());
            }
        }
    }
    let per_leaf: Vec<f64> = (0..tree.m[n].len())
        .into_par_iter()
        .map(|leaf| {
            let mut value = tree.m[0][0];
            for j in 0..n {
                let node = leaf >> (n - j);
                let sign = if (leaf >> (n - 1 - j)) & 1 == 0 {
                    1.0
                } else {
                    -1.0
                };
                value += tree.z[j][node] * sd * sign;
            }
            (value - tree.m[n][leaf]).abs()
        })
        .collect();
    per_leaf.into_iter().fold(worst, f64::max)
}

type TerminalRv = Box<dyn Fn(&[i8]) -> f64 + Sync>;

/// One line of the oracle report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub claim: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

impl OracleRecord {
    fn at_most(claim: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self {
            claim: claim.into(),
            lhs,
            rhs,
            pass: lhs <= rhs,
        }
    }

    fn failed(claim: impl Into<String>, err: &Error) -> Self {
        let claim = claim.into();
        log::error!("{claim}: {err}");
        Self {
            claim,
            lhs: f64::NAN,
            rhs: f64::NAN,
            pass: false,
        }
    }
}

fn max_tree_gap(a: &[LevelValues], b: &[LevelValues]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(u, v)| u.y.iter().zip(&v.y).chain(u.z.iter().zip(&v.z)))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Worst node error against the closed form over every backward path.
pub fn exactness_gap(spec: &ValidatedSpec, grid: &TimeGrid, scheme: Scheme) -> Result<f64> {
    let model = spec
        .exact
        .ok_or_else(|| Error::Unsupported(format!("{} has no closed form", spec.name)))?;
    let n = grid.steps();
    check_enumeration_cap(n, JOINT_ENUMERATION_CAP)?;
    let gaps = (0..1u64 << n)
        .into_par_iter()
        .map(|k| {
            let eps = sign_sequence(n, k);
            let rep = solve_with_scheme(scheme, spec, grid, &eps, &SolveOptions::keep_tree())?;
            Ok(max_tree_gap(
                &rep.levels.expect("tree kept"),
                &exact_tree(model, grid, &eps)?,
            ))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

fn record(claim: &str, outcome: Result<OracleRecord>) -> OracleRecord {
    outcome.unwrap_or_else(|e| OracleRecord::failed(claim, &e))
}

/// The invariant suite behind `oracle-check`.
pub fn oracle_suite() -> Vec<OracleRecord> {
    let mut out = Vec::new();

    for (name, spec) in [
        ("transport", model::transport()),
        ("time_integral", model::time_integral()),
        ("zero", model::zero()),
    ] {
        for scheme in [Scheme::Implicit, Scheme::Explicit] {
            let claim = format!("exact_tree/{name}/{}/n=8", scheme.as_str());
            out.push(record(
                &claim,
                (|| {
                    let grid = make_grid(1.0, 8)?;
                    let spec = model::validate_spec(&spec, &grid)?;
                    Ok(OracleRecord::at_most(
                        &claim,
                        exactness_gap(&spec, &grid, scheme)?,
                        1e-12,
                    ))
                })(),
            ));
        }
    }

    out.push(record(
        "transport/mean_y0/n=10",
        (|| {
            let grid = make_grid(1.0, 10)?;
            let spec = model::validate_spec(&model::transport(), &grid)?;
            let mean = brute_force_expectation(&spec, &grid, Scheme::Implicit, |lv, _| lv[0].y[0])?;
            Ok(OracleRecord::at_most(
                "transport/mean_y0/n=10",
                mean.abs(),
                1e-15,
            ))
        })(),
    ));
    out.push(record(
        "transport/second_moment_y0/n=4",
        (|| {
            let grid = make_grid(1.0, 4)?;
            let spec = model::validate_spec(&model::transport(), &grid)?;
            let m2 = brute_force_expectation(&spec, &grid, Scheme::Implicit, |lv, _| {
                lv[0].y[0].powi(2)
            })?;
            Ok(OracleRecord::at_most(
                "transport/second_moment_y0/n=4",
                (m2 - 1.0).abs(),
                1e-14,
            ))
        })(),
    ));

    for n in [4, 8, 12] {
        let claim = format!("walk_law/n={n}");
        out.push(record(
            &claim,
            (|| {
                let grid = make_grid(1.0, n)?;
                let (m1, m2) = walk_moments(&grid)?;
                Ok(OracleRecord::at_most(
                    &claim,
                    m1.abs().max((m2 - 1.0).abs()),
                    1e-14,
                ))
            })(),
        ));
    }

    for delta in [1e-2, 1e-3, 1e-4] {
        let claim = format!("gronwall/b=1/delta={delta:e}");
        out.push(record(
            &claim,
            (|| {
                let gap = (gronwall_epsilon(delta, 1.0)? - std::f64::consts::E).abs();
                // the gap is e*delta/2 to first order
                Ok(OracleRecord::at_most(
                    &claim,
                    gap,
                    std::f64::consts::E * delta,
                ))
            })(),
        ));
    }
    out.push(OracleRecord {
        claim: "gronwall/divergent_at_b*delta=1".into(),
        lhs: 1.0,
        rhs: 1.0,
        pass: matches!(
            gronwall_epsilon(0.5, 2.0),
            Err(Error::DivergentSeries { .. })
        ),
    });

    for spec in apriori_specs() {
        for n in [2, 4, 8] {
            let claim = format!("apriori/{}/n={n}", spec.name);
            let grid = match make_grid(1.0, n) {
                Ok(g) => g,
                Err(e) => {
                    out.push(OracleRecord::failed(&claim, &e));
                    continue;
                }
            };
            if apriori_rate(&spec) * grid.delta() >= 1.0 {
                log::info!("{claim}: skipped, step too coarse for the bound");
                continue;
            }
            out.push(record(
                &claim,
                (|| {
                    let spec = model::validate_spec(&spec, &grid)?;
                    let check = apriori_check(&spec, &grid)?;
                    Ok(OracleRecord {
                        claim: claim.clone(),
                        lhs: check.lhs,
                        rhs: check.rhs,
                        pass: check.holds(),
                    })
                })(),
            ));
        }
    }

    let grid = make_grid(1.0, 10).expect("valid grid");
    let sd = grid.sqrt_delta();
    let walk = move |beta: &[i8]| scaled_prefix_sums(beta, sd);
    let rvs: [(&str, TerminalRv); 3] = [
        ("W_n", Box::new(move |b| *walk(b).last().unwrap())),
        ("W_n^2", Box::new(move |b| walk(b).last().unwrap().powi(2))),
        (
            "max_W",
            Box::new(move |b| walk(b).into_iter().fold(f64::NEG_INFINITY, f64::max)),
        ),
    ];
    for (name, rv) in rvs {
        let claim = format!("martingale/{name}/n=10");
        out.push(record(
            &claim,
            (|| {
                let tree = martingale_representation(rv, &grid)?;
                Ok(OracleRecord::at_most(
                    &claim,
                    representation_residual(&tree, &grid),
                    1e-12,
                ))
            })(),
        ));
    }
    out
}

/// Builtins plus a small linear model that passes the bound's step gate on
/// coarse grids.
pub fn apriori_specs() -> Vec<ProblemSpec> {
    vec![
        model::transport(),
        model::time_integral(),
        model::zero(),
        model::sine(),
        model::linear(0.05, 0.05, 0.05, 0.2),
        model::linear(0.1, 0.0, 0.1, 0.0),
    ]
}
