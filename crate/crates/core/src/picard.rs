//! Discrete Picard iteration: the unknowns inside `f` and `g` are frozen at
//! the previous iterate, so every sweep is explicit.
//!
//! ```text
//! y'_j = y'_{j+1} + f(y^p_j, z^p_j) delta + g(y^p_{j+1}, z^p_{j+1}) sqrt(delta) eps - z'_j sqrt(delta) beta
//! ```
//!
//! Successive differences are measured in the weighted norm
//!
//! ```text
//! ||(dy, dz)||^2 = E[ sup_k gamma^{k delta} |dy_k|^2 + delta sum_{k<n} gamma^{k delta} |dz_k|^2 ]
//! ```
//!
//! where the expectation runs over forward paths through the tree (the
//! backward path is fixed). The `z` part is linear in the path law and is
//! computed exactly from node probabilities; the `sup` part is enumerated
//! exactly up to [`ENUMERATION_CAP`] steps and sampled beyond.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_noise::{node_probabilities, pairwise_sum, TimeGrid, ENUMERATION_CAP};
use crate::model::ValidatedSpec;
use crate::tree_solver::{check_eps, terminal_layer, LevelValues};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardIterate {
    pub p: usize,
    /// Levels `0..=n`.
    pub levels: Vec<LevelValues>,
}

impl PicardIterate {
    /// The identically zero starting iterate.
    pub fn zero(grid: &TimeGrid) -> Self {
        Self {
            p: 0,
            levels: (0..=grid.steps()).map(LevelValues::zeros).collect(),
        }
    }

    /// Node-wise `self - other`.
    pub fn difference(&self, other: &PicardIterate) -> Vec<LevelValues> {
        self.levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| LevelValues {
                level: a.level,
                y: a.y.iter().zip(&b.y).map(|(u, v)| u - v).collect(),
                z: a.z.iter().zip(&b.z).map(|(u, v)| u - v).collect(),
            })
            .collect()
    }
}

pub fn picard_step(
    prev: &PicardIterate,
    spec: &ValidatedSpec,
    grid: &TimeGrid,
    eps: &[i8],
) -> Result<PicardIterate> {
    check_eps(eps, grid)?;
    let n = grid.steps();
    if prev.levels.len() != n + 1 {
        return Err(Error::InvalidArgument(format!(
            "previous iterate has {} levels, grid needs {}",
            prev.levels.len(),
            n + 1
        )));
    }
    let sd = grid.sqrt_delta();
    let delta = grid.delta();
    let mut levels = vec![terminal_layer(spec, grid)?];

    for j in (0..n).rev() {
        let next = levels.last().expect("terminal level present");
        let (frozen, frozen_next) = (&prev.levels[j], &prev.levels[j + 1]);
        let e = f64::from(eps[j]);
        let (t_j, t_next) = (grid.time(j), grid.time(j + 1));
        let mut out = LevelValues::zeros(j);
        for i in 0..=j {
            let g_up = spec.g.value(
                t_next,
                grid.node_value(j + 1, i + 1),
                frozen_next.y[i + 1],
                frozen_next.z[i + 1],
            );
            let g_dn = spec.g.value(
                t_next,
                grid.node_value(j + 1, i),
                frozen_next.y[i],
                frozen_next.z[i],
            );
            let f = spec
                .f
                .value(t_j, grid.node_value(j, i), frozen.y[i], frozen.z[i]);
            let (y_up, y_dn) = (next.y[i + 1], next.y[i]);
            out.z[i] = (y_up - y_dn) / (2.0 * sd) + 0.5 * (g_up - g_dn) * e;
            out.y[i] = 0.5 * (y_up + y_dn) + f * delta + 0.5 * sd * (g_up + g_dn) * e;
        }
        levels.push(out);
    }
    levels.reverse();
    if levels.iter().any(|lv| !lv.is_finite()) {
        return Err(Error::NumericFailure {
            level: 0,
            node: 0,
            residual: f64::INFINITY,
        });
    }
    Ok(PicardIterate {
        p: prev.p + 1,
        levels,
    })
}

/// How the expectation over forward paths is taken in [`weighted_norm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathExpectation {
    /// Exact when `n <= ENUMERATION_CAP`, otherwise sampled with the given
    /// path count and seed.
    Auto {
        paths: usize,
        seed: u64,
    },
    Exact,
    Sampled {
        paths: usize,
        seed: u64,
    },
}

impl Default for PathExpectation {
    fn default() -> Self {
        PathExpectation::Auto {
            paths: 20_000,
            seed: 0x5eed,
        }
    }
}

/// Weighted norm of a difference tree, see the module docs.
pub fn weighted_norm(
    diff: &[LevelValues],
    gamma: f64,
    grid: &TimeGrid,
    expectation: PathExpectation,
) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "weight base must be positive, got {gamma}"
        )));
    }
    let n = grid.steps();
    if diff.len() != n + 1 {
        return Err(Error::InvalidArgument(format!(
            "difference tree has {} levels, grid needs {}",
            diff.len(),
            n + 1
        )));
    }
    let delta = grid.delta();
    let weights: Vec<f64> = (0..=n).map(|k| gamma.powf(k as f64 * delta)).collect();

    let z_part = delta
        * pairwise_sum(
            &(0..n)
                .map(|k| {
                    let p = node_probabilities(k);
                    weights[k]
                        * pairwise_sum(
                            &p.iter()
                                .zip(&diff[k].z)
                                .map(|(p, z)| p * z * z)
                                .collect::<Vec<_>>(),
                        )
                })
                .collect::<Vec<_>>(),
        );

    let y_weighted: Vec<Vec<f64>> = diff
        .iter()
        .enumerate()
        .map(|(k, lv)| lv.y.iter().map(|y| weights[k] * y * y).collect())
        .collect();

    let sup_part = match expectation {
        PathExpectation::Exact => exact_expected_sup(&y_weighted)?,
        PathExpectation::Auto { .. } if n <= ENUMERATION_CAP => exact_expected_sup(&y_weighted)?,
        PathExpectation::Auto { paths, seed } | PathExpectation::Sampled { paths, seed } => {
            sampled_expected_sup(&y_weighted, paths, seed)?
        }
    };
    Ok(sup_part + z_part)
}

/// `E[max_k a_k(node_k)]` over all forward paths by depth-first enumeration.
fn exact_expected_sup(a: &[Vec<f64>]) -> Result<f64> {
    let n = a.len() - 1;
    if n > ENUMERATION_CAP {
        return Err(Error::ResourceLimit {
            requested: n,
            cap: ENUMERATION_CAP,
        });
    }
    fn descend(a: &[Vec<f64>], k: usize, node: usize, running: f64) -> f64 {
        let running = running.max(a[k][node]);
        if k + 1 == a.len() {
            return running;
        }
        0.5 * (descend(a, k + 1, node + 1, running) + descend(a, k + 1, node, running))
    }
    Ok(descend(a, 0, 0, f64::NEG_INFINITY))
}

fn sampled_expected_sup(a: &[Vec<f64>], paths: usize, seed: u64) -> Result<f64> {
    if paths == 0 {
        return Err(Error::EmptyReport);
    }
    let n = a.len() - 1;
    let per_path: Vec<f64> = (0..paths as u64)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index);
            let mut node = 0;
            let mut best = a[0][0];
            for level in a.iter().take(n + 1).skip(1) {
                if rng.random::<bool>() {
                    node += 1;
                }
                best = best.max(level[node]);
            }
            best
        })
        .collect();
    Ok(pairwise_sum(&per_path) / paths as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    pub p_max: usize,
    /// Stop once the squared norm of a successive difference drops below.
    pub tol: f64,
    pub gamma: f64,
    pub expectation: PathExpectation,
    /// Ratios are reported only when the previous norm exceeds this.
    pub ratio_floor: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            p_max: 50,
            tol: 1e-16,
            gamma: std::f64::consts::E,
            expectation: PathExpectation::default(),
            ratio_floor: 1e-28,
        }
    }
}

/// Row `p` holds `||iterate_{p+1} - iterate_p||^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionDiagnostics {
    pub gamma: f64,
    pub delta: f64,
    pub norms: Vec<f64>,
    /// Same differences with unit weights.
    pub norms_unit_weight: Vec<f64>,
    /// `ratios[p] = norms[p] / norms[p - 1]`; `None` at `p = 0` and when the
    /// denominator is below the floor.
    pub ratios: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardOutcome {
    pub iterate: PicardIterate,
    pub diagnostics: ContractionDiagnostics,
    /// Row index at which the norm fell below `tol`, if it did.
    pub converged_at: Option<usize>,
}

pub fn picard_solve(
    spec: &ValidatedSpec,
    grid: &TimeGrid,
    eps: &[i8],
    opts: &PicardOptions,
) -> Result<PicardOutcome> {
    let mut current = PicardIterate::zero(grid);
    let mut diagnostics = ContractionDiagnostics {
        gamma: opts.gamma,
        delta: grid.delta(),
        norms: Vec::new(),
        norms_unit_weight: Vec::new(),
        ratios: Vec::new(),
    };
    let mut converged_at = None;

    for p in 0..opts.p_max {
        let next = picard_step(&current, spec, grid, eps)?;
        let diff = next.difference(&current);
        let norm = weighted_norm(&diff, opts.gamma, grid, opts.expectation)?;
        let unit = weighted_norm(&diff, 1.0, grid, opts.expectation)?;
        let ratio = diagnostics
            .norms
            .last()
            .filter(|&&prev| prev > opts.ratio_floor)
            .map(|prev| norm / prev);
        diagnostics.norms.push(norm);
        diagnostics.norms_unit_weight.push(unit);
        diagnostics.ratios.push(ratio);
        current = next;
        if norm < opts.tol {
            converged_at = Some(p);
            break;
        }
    }
    if converged_at.is_none() {
        log::warn!(
            "{}: Picard iteration stopped at p_max = {} above tolerance {:e}",
            spec.name,
            opts.p_max,
            opts.tol
        );
    }
    Ok(PicardOutcome {
        iterate: current,
        diagnostics,
        converged_at,
    })
}

/// Diagnostics CSV rows `(p, norm_sq, ratio)`.
pub fn diagnostics_rows(diag: &ContractionDiagnostics) -> Vec<Vec<String>> {
    diag.norms
        .iter()
        .zip(&diag.ratios)
        .enumerate()
        .map(|(p, (norm, ratio))| {
            vec![
                p.to_string(),
                crate::table::float(*norm),
                ratio.map(crate::table::float).unwrap_or_default(),
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_noise::{make_grid, sample_path_at};
    use crate::model::{self, validate_spec};
    use crate::tree_solver::{solve_backward, SolveOptions};

    fn max_gap(a: &[LevelValues], b: &[LevelValues]) -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(u, v)| u.y.iter().zip(&v.y).chain(u.z.iter().zip(&v.z)))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn first_iterate_of_zero_model_is_the_tree() {
        let grid = make_grid(1.0, 6).unwrap();
        let spec = validate_spec(&model::zero(), &grid).unwrap();
        let eps = sample_path_at(&grid, 1, 0).eps;
        let it = picard_step(&PicardIterate::zero(&grid), &spec, &grid, &eps).unwrap();
        let tree = solve_backward(&spec, &grid, &eps, &SolveOptions::keep_tree()).unwrap();
        assert_eq!(it.p, 1);
        assert_eq!(it.levels, tree.levels.unwrap());
    }

    #[test]
    fn step_keeps_terminal_layer() {
        let grid = make_grid(1.0, 8).unwrap();
        let spec = validate_spec(&model::sine(), &grid).unwrap();
        let eps = sample_path_at(&grid, 2, 0).eps;
        let terminal = terminal_layer(&spec, &grid).unwrap();
        let mut it = PicardIterate::zero(&grid);
        for _ in 0..3 {
            it = picard_step(&it, &spec, &grid, &eps).unwrap();
            assert_eq!(it.levels[8], terminal);
        }
    }

    #[test]
    fn implicit_solution_is_a_fixed_point() {
        let grid = make_grid(1.0, 16).unwrap();
        for spec in [
            model::sine(),
            model::linear(0.3, 0.2, 0.1, 0.2),
            model::transport(),
        ] {
            let spec = validate_spec(&spec, &grid).unwrap();
            let eps = sample_path_at(&grid, 8, 0).eps;
            let tree = solve_backward(&spec, &grid, &eps, &SolveOptions::keep_tree())
                .unwrap()
                .levels
                .unwrap();
            let it = PicardIterate {
                p: 7,
                levels: tree.clone(),
            };
            let again = picard_step(&it, &spec, &grid, &eps).unwrap();
            assert!(max_gap(&again.levels, &tree) < 1e-12, "{}", spec.name);
        }
    }

    #[test]
    fn iterates_approach_the_implicit_solution() {
        let grid = make_grid(1.0, 10).unwrap();
        let spec = validate_spec(&model::linear(0.5, 0.3, 0.2, 0.4), &grid).unwrap();
        let eps = sample_path_at(&grid, 4, 0).eps;
        let tree = solve_backward(&spec, &grid, &eps, &SolveOptions::keep_tree())
            .unwrap()
            .levels
            .unwrap();
        let mut it = PicardIterate::zero(&grid);
        let mut gaps = Vec::new();
        for _ in 0..15 {
            it = picard_step(&it, &spec, &grid, &eps).unwrap();
            gaps.push(max_gap(&it.levels, &tree));
        }
        assert!(gaps[14] < 1e-6 * gaps[0]);
        assert!(gaps.windows(2).skip(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_model_converges_immediately() {
        let grid = make_grid(1.0, 8).unwrap();
        let spec = validate_spec(&model::zero(), &grid).unwrap();
        let eps = sample_path_at(&grid, 9, 0).eps;
        let out = picard_solve(&spec, &grid, &eps, &PicardOptions::default()).unwrap();
        assert_eq!(out.converged_at, Some(1));
        assert_eq!(out.diagnostics.norms[1], 0.0);
    }

    #[test]
    fn linear_model_matches_implicit() {
        let grid = make_grid(1.0, 16).unwrap();
        let spec = validate_spec(&model::linear(0.3, 0.2, 0.1, 0.2), &grid).unwrap();
        let eps = sample_path_at(&grid, 21, 0).eps;
        let opts = PicardOptions {
            tol: 1e-28,
            p_max: 200,
            ..PicardOptions::default()
        };
        let out = picard_solve(&spec, &grid, &eps, &opts).unwrap();
        assert!(out.converged_at.is_some());
        let tree = solve_backward(&spec, &grid, &eps, &SolveOptions::keep_tree())
            .unwrap()
            .levels
            .unwrap();
        assert!(max_gap(&out.iterate.levels, &tree) < 1e-8);
    }

    #[test]
    fn sine_ratios_settle_below_nine_tenths() {
        let grid = make_grid(1.0, 32).unwrap();
        let spec = validate_spec(&model::sine(), &grid).unwrap();
        let eps = sample_path_at(&grid, 5, 0).eps;
        let out = picard_solve(&spec, &grid, &eps, &PicardOptions::default()).unwrap();
        let ratios: Vec<f64> = out.diagnostics.ratios.iter().flatten().copied().collect();
        assert!(!ratios.is_empty());
        assert!(*ratios.last().unwrap() <= 0.9, "{ratios:?}");
    }

    #[test]
    fn norm_hand_values() {
        let grid = make_grid(1.0, 1).unwrap(); // delta = 1
        let zeros = vec![LevelValues::zeros(0), LevelValues::zeros(1)];
        assert_eq!(
            weighted_norm(&zeros, 1.0, &grid, PathExpectation::Exact).unwrap(),
            0.0
        );

        let mut root_only = zeros.clone();
        root_only[0].y[0] = 3.0;
        assert_eq!(
            weighted_norm(&root_only, 1.0, &grid, PathExpectation::Exact).unwrap(),
            9.0
        );

        let mut d = zeros.clone();
        d[0].y[0] = 1.0;
        d[0].z[0] = 2.0;
        assert_eq!(
            weighted_norm(&d, 1.0, &grid, PathExpectation::Exact).unwrap(),
            5.0
        );

        assert!(matches!(
            weighted_norm(&d, 0.0, &grid, PathExpectation::Exact),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn sampled_norm_tracks_exact() {
        let grid = make_grid(1.0, 12).unwrap();
        let spec = validate_spec(&model::sine(), &grid).unwrap();
        let eps = sample_path_at(&grid, 3, 0).eps;
        let it = picard_step(&PicardIterate::zero(&grid), &spec, &grid, &eps).unwrap();
        let diff = it.difference(&PicardIterate::zero(&grid));
        let exact = weighted_norm(&diff, 1.0, &grid, PathExpectation::Exact).unwrap();
        let sampled = weighted_norm(
            &diff,
            1.0,
            &grid,
            PathExpectation::Sampled {
                paths: 200_000,
                seed: 1,
            },
        )
        .unwrap();
        assert!(
            (exact - sampled).abs() < 0.02 * exact,
            "{exact} vs {sampled}"
        );
    }

    #[test]
    fn diagnostics_csv_rows() {
        let diag = ContractionDiagnostics {
            gamma: 1.0,
            delta: 0.5,
            norms: vec![4.0, 1.0],
            norms_unit_weight: vec![4.0, 1.0],
            ratios: vec![None, Some(0.25)],
        };
        let rows = diagnostics_rows(&diag);
        assert_eq!(rows[0][2], "");
        assert_eq!(rows[1][0], "1");
        assert_eq!(rows[1][2].parse::<f64>().unwrap(), 0.25);
    }
}
