//! Monte Carlo over backward-noise paths. Every sample draws its own
//! `(eps, beta)` pair from a dedicated RNG stream, runs one tree solve for
//! `eps`, and reads the forward path `beta` off the tree when a pathwise
//! metric is needed. Reductions use fixed-order pairwise sums, so results do
//! not depend on the thread count.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_noise::{make_grid, pairwise_sum, sample_path_at, NoisePath, TimeGrid};
use crate::model::{validate_spec, ProblemSpec, ValidatedSpec};
use crate::oracle::exact_solution;
use crate::table;
use crate::tree_solver::{solve_with_scheme, values_along, LevelValues, Scheme, SolveOptions};

/// Normal quantile for two-sided 95% intervals.
pub const Z95: f64 = 1.96;

/// Sample mean, unbiased variance and 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub ci_halfwidth: f64,
}

impl SampleStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyReport);
        }
        let count = values.len();
        let mean = pairwise_sum(values) / count as f64;
        let variance = if count > 1 {
            let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
            pairwise_sum(&dev) / (count - 1) as f64
        } else {
            0.0
        };
        Ok(Self {
            count,
            mean,
            variance,
            ci_halfwidth: Z95 * (variance / count as f64).sqrt(),
        })
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.mean - self.ci_halfwidth, self.mean + self.ci_halfwidth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub steps: usize,
    pub n_samples: usize,
    pub mean_y0: f64,
    pub var_y0: f64,
    pub ci_halfwidth: f64,
    /// Mean of `(y0 - Y0)^2` against the closed form, when there is one.
    pub l2_error_vs_oracle: Option<f64>,
    /// Mean of `sup_j |y_j - Y_j|^2 + delta sum_j |z_j - Z_j|^2` along the
    /// sampled forward path, when there is a closed form.
    pub path_error: Option<f64>,
    pub seed: u64,
    pub scheme: Scheme,
    /// Samples whose solve failed; they are excluded from the statistics.
    pub failures: usize,
}

/// `sup_j |y_j - y'_j|^2 + delta sum_{j<n} |z_j - z'_j|^2`.
pub fn path_metric(y: &[f64], z: &[f64], y_ref: &[f64], z_ref: &[f64], delta: f64) -> f64 {
    let sup = y
        .iter()
        .zip(y_ref)
        .map(|(a, b)| (a - b).powi(2))
        .fold(0.0, f64::max);
    let dz: Vec<f64> = z.iter().zip(z_ref).map(|(a, b)| (a - b).powi(2)).collect();
    sup + delta * pairwise_sum(&dz)
}

struct Sample {
    y0: f64,
    oracle: Option<(f64, f64)>,
}

fn run_sample(
    spec: &ValidatedSpec,
    grid: &TimeGrid,
    path: &NoisePath,
    scheme: Scheme,
) -> Result<Sample> {
    let Some(model) = spec.exact else {
        let rep = solve_with_scheme(scheme, spec, grid, &path.eps, &SolveOptions::default())?;
        return Ok(Sample {
            y0: rep.y0,
            oracle: None,
        });
    };
    let rep = solve_with_scheme(scheme, spec, grid, &path.eps, &SolveOptions::keep_tree())?;
    let (y, z) = values_along(&rep.levels.expect("tree kept"), &path.beta);
    let exact = exact_solution(model, grid, path)?;
    let sq = (rep.y0 - exact.y_path[0]).powi(2);
    let metric = path_metric(&y, &z, &exact.y_path, &exact.z_path, grid.delta());
    Ok(Sample {
        y0: rep.y0,
        oracle: Some((sq, metric)),
    })
}

fn mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// Root statistics over `n_samples` independent paths drawn from `seed`.
pub fn estimate(
    spec: &ValidatedSpec,
    grid: &TimeGrid,
    n_samples: usize,
    seed: u64,
    scheme: Scheme,
) -> Result<McReport> {
    if n_samples == 0 {
        return Err(Error::EmptyReport);
    }
    let outcomes: Vec<Result<Sample>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|index| run_sample(spec, grid, &sample_path_at(grid, seed, index), scheme))
        .collect();
    let mut samples = Vec::with_capacity(n_samples);
    let mut failures = 0;
    for (index, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(s) => samples.push(s),
            Err(e) => {
                log::warn!("sample {index} failed: {e}");
                failures += 1;
            }
        }
    }
    let y0: Vec<f64> = samples.iter().map(|s| s.y0).collect();
    let stats = SampleStats::from_values(&y0)?;
    let oracle: Option<Vec<(f64, f64)>> = samples.iter().map(|s| s.oracle).collect();
    let (l2, path) = match oracle {
        Some(pairs) => {
            let (sq, metric): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            (Some(mean(&sq)), Some(mean(&metric)))
        }
        None => (None, None),
    };
    Ok(McReport {
        steps: grid.steps(),
        n_samples,
        mean_y0: stats.mean,
        var_y0: stats.variance,
        ci_halfwidth: stats.ci_halfwidth,
        l2_error_vs_oracle: l2,
        path_error: path,
        seed,
        scheme,
        failures,
    })
}

/// Monte Carlo counterpart of [`crate::oracle::brute_force_expectation`]:
/// the same functional, averaged over sampled backward paths instead of all
/// of them. Failed solves are errors here.
pub fn estimate_functional<F>(
    spec: &ValidatedSpec,
    grid: &TimeGrid,
    n_samples: usize,
    seed: u64,
    scheme: Scheme,
    functional: F,
) -> Result<SampleStats>
where
    F: Fn(&[LevelValues], &[i8]) -> f64 + Sync,
{
    if n_samples == 0 {
        return Err(Error::EmptyReport);
    }
    let values = (0..n_samples as u64)
        .into_par_iter()
        .map(|index| {
            let eps = sample_path_at(grid, seed, index).eps;
            let rep = solve_with_scheme(scheme, spec, grid, &eps, &SolveOptions::keep_tree())?;
            Ok(functional(&rep.levels.expect("tree kept"), &eps))
        })
        .collect::<Result<Vec<f64>>>()?;
    SampleStats::from_values(&values)
}

/// What a convergence table measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    /// Implicit scheme against the closed form.
    VersusClosedForm,
    /// Implicit against explicit scheme on the same paths.
    SchemeGap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub error: f64,
    pub samples: usize,
    pub ci_halfwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub metric: ErrorMetric,
    pub seed: u64,
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `log error` against `log n`; `None` when some
    /// error is at round-off level or there are fewer than two rows.
    pub slope: Option<f64>,
}

/// Errors below this are treated as exact and suppress the slope fit.
pub const ROUND_OFF_ERROR: f64 = 1e-24;

/// Pathwise error metric per `n`, averaged over `samples` paths.
pub fn convergence_study(
    spec: &ProblemSpec,
    horizon: f64,
    n_list: &[usize],
    samples: usize,
    seed: u64,
) -> Result<ConvergenceTable> {
    if n_list.is_empty() {
        return Err(Error::InvalidArgument("n list is empty".into()));
    }
    if n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!(
            "n list must be strictly increasing: {n_list:?}"
        )));
    }
    if samples == 0 {
        return Err(Error::EmptyReport);
    }
    let metric = if spec.exact.is_some() {
        ErrorMetric::VersusClosedForm
    } else {
        ErrorMetric::SchemeGap
    };

    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let grid = make_grid(horizon, n)?;
        let spec = validate_spec(spec, &grid)?;
        let values = (0..samples as u64)
            .into_par_iter()
            .map(|index| {
                let path = sample_path_at(&grid, seed, index);
                match metric {
                    ErrorMetric::VersusClosedForm => {
                        run_sample(&spec, &grid, &path, Scheme::Implicit)
                            .map(|s| s.oracle.expect("closed form present").1)
                    }
                    ErrorMetric::SchemeGap => scheme_gap(&spec, &grid, &path),
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let stats = SampleStats::from_values(&values)?;
        rows.push(ConvergenceRow {
            n,
            error: stats.mean,
            samples,
            ci_halfwidth: stats.ci_halfwidth,
        });
    }
    let slope = fit_slope(&rows);
    Ok(ConvergenceTable {
        metric,
        seed,
        rows,
        slope,
    })
}

fn scheme_gap(spec: &ValidatedSpec, grid: &TimeGrid, path: &NoisePath) -> Result<f64> {
    let opts = SolveOptions::keep_tree();
    let a = solve_with_scheme(Scheme::Implicit, spec, grid, &path.eps, &opts)?;
    let b = solve_with_scheme(Scheme::Explicit, spec, grid, &path.eps, &opts)?;
    let (ya, za) = values_along(&a.levels.expect("tree kept"), &path.beta);
    let (yb, zb) = values_along(&b.levels.expect("tree kept"), &path.beta);
    Ok(path_metric(&ya, &za, &yb, &zb, grid.delta()))
}

fn fit_slope(rows: &[ConvergenceRow]) -> Option<f64> {
    if rows.len() < 2 || rows.iter().any(|r| !(r.error > ROUND_OFF_ERROR)) {
        return None;
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.error.ln()).collect();
    let (mx, my) = (mean(&xs), mean(&ys));
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Columns `n,samples,mean,var,ci,l2err`; `l2err` is empty without a closed
/// form.
pub fn write_mc_csv<W: Write>(out: &mut W, reports: &[McReport]) -> io::Result<()> {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.steps.to_string(),
                r.n_samples.to_string(),
                table::float(r.mean_y0),
                table::float(r.var_y0),
                table::float(r.ci_halfwidth),
                r.l2_error_vs_oracle.map(table::float).unwrap_or_default(),
            ]
        })
        .collect();
    table::write_csv(out, &["n", "samples", "mean", "var", "ci", "l2err"], &rows)
}

/// Columns `n,err,ci`; the slope goes in the sidecar.
pub fn write_convergence_csv<W: Write>(out: &mut W, table: &ConvergenceTable) -> io::Result<()> {
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                table::float(r.error),
                table::float(r.ci_halfwidth),
            ]
        })
        .collect();
    table::write_csv(out, &["n", "err", "ci"], &rows)
}
