//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Tolerances are fixed here, not configurable.

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use bdsde::explicit_solver::{explicit_residual, solve_backward_explicit};
use bdsde::grid_noise::{scaled_prefix_sums, NoisePath};
use bdsde::model::{self, ExactModel, ProblemSpec};
use bdsde::montecarlo::{convergence_study, estimate_functional};
use bdsde::oracle::{
    apriori_check, apriori_rate, apriori_specs, brute_force_expectation, exact_time_integral,
    exact_tree, gronwall_epsilon, level_mean, martingale_representation, representation_residual,
    walk_moments,
};
use bdsde::picard::{picard_solve, PicardOptions};
use bdsde::spde::{backward_noise_term, linspace, u_surface, ForwardSpec, Volatility};
use bdsde::tree_solver::implicit_residual;
use bdsde::{
    make_grid, sample_path_at, solve_backward, validate_spec, Coefficient, Error, LevelValues,
    Scheme, SolveOptions, TerminalFunctional,
};

const TRANSPORT_TOL: f64 = 1e-12;
const TIME_INTEGRAL_TOL: f64 = 1e-12;
const RESIDUAL_TOL: f64 = 1e-12;
const PICARD_AGREEMENT_TOL: f64 = 1e-8;
const GRONWALL_TOL: f64 = 0.01;
const MARTINGALE_TOL: f64 = 1e-12;
const WALK_LAW_TOL: f64 = 1e-14;
const MC_CI_MULTIPLE: f64 = 5.0;
const SPDE_TOL: f64 = 1e-12;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
type TreeFunctional = (&'static str, fn(&[LevelValues], &[i8]) -> f64);
type TerminalRv = Box<dyn Fn(&[i8]) -> f64 + Sync>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_gap(a: &[LevelValues], b: &[LevelValues]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(u, v)| u.y.iter().zip(&v.y).chain(u.z.iter().zip(&v.z)))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn tree(spec: &bdsde::ValidatedSpec, grid: &bdsde::TimeGrid, eps: &[i8]) -> Vec<LevelValues> {
    solve_backward(spec, grid, eps, &SolveOptions::keep_tree())
        .unwrap()
        .levels
        .unwrap()
}

fn transport_exactness() -> Outcome {
    let mut worst = 0.0_f64;
    for n in [4, 16, 64, 256] {
        let grid = make_grid(1.0, n).unwrap();
        let spec = validate_spec(&model::transport(), &grid).unwrap();
        for seed in 0..100 {
            let eps = sample_path_at(&grid, seed, 0).eps;
            let exact = exact_tree(ExactModel::Transport, &grid, &eps).unwrap();
            worst = worst.max(max_gap(&tree(&spec, &grid, &eps), &exact));
        }
    }
    check(
        worst < TRANSPORT_TOL,
        format!("max node error {worst:.3e} over n in {{4,16,64,256}} x 100 seeds"),
    )
}

fn time_integral_exactness() -> Outcome {
    let (mut root, mut z_max) = (0.0_f64, 0.0_f64);
    for n in [4, 8, 16, 32, 64, 128, 256] {
        let grid = make_grid(1.0, n).unwrap();
        let spec = validate_spec(&model::time_integral(), &grid).unwrap();
        for seed in 0..100 {
            let path = sample_path_at(&grid, seed, 0);
            let levels = tree(&spec, &grid, &path.eps);
            let exact = exact_time_integral(&grid, &path).unwrap();
            root = root.max((levels[0].y[0] - exact.y_path[0]).abs());
            z_max = levels
                .iter()
                .flat_map(|lv| lv.z.iter())
                .fold(z_max, |m, z| m.max(z.abs()));
        }
    }
    check(
        root < TIME_INTEGRAL_TOL && z_max < TIME_INTEGRAL_TOL,
        format!("root error {root:.3e}, max |z| {z_max:.3e} over n = 4..256 x 100 seeds"),
    )
}

fn scheme_residuals() -> Outcome {
    let specs = [
        model::transport(),
        model::time_integral(),
        model::linear(0.3, 0.2, 0.1, 0.2),
        model::sine(),
        model::zero(),
    ];
    let (mut implicit, mut explicit) = (0.0_f64, 0.0_f64);
    for spec in &specs {
        for n in [4, 8, 16, 32] {
            let grid = make_grid(1.0, n).unwrap();
            let spec = validate_spec(spec, &grid).unwrap();
            for seed in 0..20 {
                let eps = sample_path_at(&grid, seed, 0).eps;
                implicit = implicit.max(implicit_residual(
                    &tree(&spec, &grid, &eps),
                    &eps,
                    &spec,
                    &grid,
                ));
                let levels =
                    solve_backward_explicit(&spec, &grid, &eps, &SolveOptions::keep_tree())
                        .unwrap()
                        .levels
                        .unwrap();
                explicit = explicit.max(explicit_residual(&levels, &eps, &spec, &grid));
            }
        }
    }
    check(
        implicit < RESIDUAL_TOL && explicit < RESIDUAL_TOL,
        format!("implicit {implicit:.3e}, explicit {explicit:.3e} (5 builtins, n <= 32, 20 seeds)"),
    )
}

fn picard_models() -> [ProblemSpec; 2] {
    [model::linear(0.3, 0.2, 0.1, 0.2), model::sine()]
}

fn picard_agreement() -> Outcome {
    let grid = make_grid(1.0, 16).unwrap();
    let opts = PicardOptions {
        p_max: 200,
        tol: 1e-28,
        ..PicardOptions::default()
    };
    let mut worst = 0.0_f64;
    for spec in picard_models() {
        let spec = validate_spec(&spec, &grid).unwrap();
        for seed in 0..5 {
            let eps = sample_path_at(&grid, seed, 0).eps;
            let out = picard_solve(&spec, &grid, &eps, &opts).unwrap();
            if out.converged_at.is_none() {
                return Err(format!(
                    "{} seed {seed}: no convergence in {} sweeps",
                    spec.name, opts.p_max
                ));
            }
            worst = worst.max(max_gap(&out.iterate.levels, &tree(&spec, &grid, &eps)));
        }
    }
    check(
        worst < PICARD_AGREEMENT_TOL,
        format!("max node difference {worst:.3e} (n = 16, 5 seeds, 2 models)"),
    )
}

fn picard_contraction() -> Outcome {
    let grid = make_grid(1.0, 64).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for spec in picard_models() {
        let spec = validate_spec(&spec, &grid).unwrap();
        for seed in 0..3 {
            let eps = sample_path_at(&grid, seed, 0).eps;
            let out = picard_solve(&spec, &grid, &eps, &PicardOptions::default()).unwrap();
            let ratios: Vec<(usize, f64)> = out
                .diagnostics
                .ratios
                .iter()
                .enumerate()
                .filter_map(|(p, r)| r.map(|r| (p, r)))
                .collect();
            let worst = ratios
                .iter()
                .filter(|(p, _)| *p >= 2)
                .map(|&(_, r)| r)
                .fold(0.0, f64::max);
            ok &= ratios.iter().any(|(p, _)| *p >= 2) && worst < 1.0;
            let shown: Vec<String> = ratios.iter().map(|(p, r)| format!("{p}:{r:.3}")).collect();
            lines.push(format!(
                "{} seed {seed}: worst {worst:.3} [{}]",
                spec.name,
                shown.join(" ")
            ));
        }
    }
    check(
        ok,
        format!(
            "ratios at n = 64, gamma = e\n      {}",
            lines.join("\n      ")
        ),
    )
}

fn gronwall() -> Outcome {
    let e = std::f64::consts::E;
    let gap = (gronwall_epsilon(1e-3, 1.0).map_err(|e| e.to_string())? - e).abs();
    let mut gate_ok = true;
    for b in [0.5, 1.0, 2.0, 4.0] {
        for delta in [
            0.05,
            0.1,
            0.25,
            1.0 / b * (1.0 - 1e-9),
            1.0 / b,
            1.0 / b * (1.0 + 1e-9),
            2.0 / b,
        ] {
            let diverges = matches!(
                gronwall_epsilon(delta, b),
                Err(Error::DivergentSeries { .. })
            );
            gate_ok &= diverges == (b * delta >= 1.0);
        }
    }
    check(
        gap <= GRONWALL_TOL && gate_ok,
        format!("|eps_0.001(1) - e| = {gap:.3e}; divergence gate exact: {gate_ok}"),
    )
}

fn apriori_bound() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut checked = 0;
    for spec in apriori_specs() {
        for n in [2, 4, 8] {
            let grid = make_grid(1.0, n).unwrap();
            if apriori_rate(&spec) * grid.delta() >= 1.0 {
                lines.push(format!(
                    "{} n={n}: skipped, step too coarse for the bound",
                    spec.name
                ));
                continue;
            }
            let spec = validate_spec(&spec, &grid).unwrap();
            let c = apriori_check(&spec, &grid).map_err(|e| e.to_string())?;
            ok &= c.holds();
            checked += 1;
            lines.push(format!("{} n={n}: {:.4} < {:.4}", spec.name, c.lhs, c.rhs));
        }
    }
    check(
        ok && checked > 0,
        format!("{checked} gated cases\n      {}", lines.join("\n      ")),
    )
}

fn martingale() -> Outcome {
    let mut worst = 0.0_f64;
    for n in 1..=10 {
        let grid = make_grid(1.0, n).unwrap();
        let sd = grid.sqrt_delta();
        let rvs: [TerminalRv; 3] = [
            Box::new(move |b| scaled_prefix_sums(b, sd)[n]),
            Box::new(move |b| scaled_prefix_sums(b, sd)[n].powi(2)),
            Box::new(move |b| {
                scaled_prefix_sums(b, sd)
                    .into_iter()
                    .fold(f64::NEG_INFINITY, f64::max)
            }),
        ];
        for rv in rvs {
            let t = martingale_representation(rv, &grid).unwrap();
            worst = worst.max(representation_residual(&t, &grid));
        }
    }
    check(
        worst < MARTINGALE_TOL,
        format!("max representation residual {worst:.3e} (W_n, W_n^2, max W; n <= 10)"),
    )
}

fn walk_law() -> Outcome {
    let mut worst = 0.0_f64;
    for horizon in [1.0, 2.5] {
        for n in 1..=12 {
            let grid = make_grid(horizon, n).unwrap();
            let (m1, m2) = walk_moments(&grid).unwrap();
            worst = worst.max(m1.abs()).max((m2 - horizon).abs());
        }
    }
    check(
        worst < WALK_LAW_TOL,
        format!("max moment error {worst:.3e} (n <= 12, T in {{1, 2.5}})"),
    )
}

fn monte_carlo_consistency() -> Outcome {
    let grid = make_grid(1.0, 8).unwrap();
    let spec = validate_spec(&model::sine(), &grid).unwrap();
    // y0 itself is identically zero here: y is odd in W for an odd terminal
    let functionals: [TreeFunctional; 2] = [
        ("E[max(y_4, 0)]", |lv, _| {
            level_mean(&lv[4], |y, _| y.max(0.0))
        }),
        ("E[y_4^2 + z_4]", |lv, _| {
            level_mean(&lv[4], |y, z| y * y + z)
        }),
    ];
    let mut ok = true;
    let mut lines = Vec::new();
    for (name, functional) in functionals {
        let exact = brute_force_expectation(&spec, &grid, Scheme::Implicit, functional).unwrap();
        let mc =
            estimate_functional(&spec, &grid, 100_000, 2024, Scheme::Implicit, functional).unwrap();
        let k = (mc.mean - exact).abs() / mc.ci_halfwidth;
        ok &= k <= MC_CI_MULTIPLE;
        lines.push(format!(
            "{name}: exact {exact:.6}, mc {:.6} +- {:.2e} ({k:.2} half-widths)",
            mc.mean, mc.ci_halfwidth
        ));
    }
    check(
        ok,
        format!("sine, n = 8, 1e5 samples\n      {}", lines.join("\n      ")),
    )
}

fn convergence_trend() -> Outcome {
    let table =
        convergence_study(&model::sine(), 1.0, &[8, 64], 10_000, 7).map_err(|e| e.to_string())?;
    let (a, b) = (table.rows[0], table.rows[1]);
    check(
        b.error + b.ci_halfwidth < a.error - a.ci_halfwidth,
        format!(
            "scheme gap n=8: {:.4e} +- {:.1e}, n=64: {:.4e} +- {:.1e}",
            a.error, a.ci_halfwidth, b.error, b.ci_halfwidth
        ),
    )
}

fn spde_example() -> Outcome {
    let (horizon, n, sigma) = (1.0, 16, 0.8);
    let grid = make_grid(horizon, n).unwrap();
    let spec = ProblemSpec::new(
        "additive",
        Coefficient::Zero,
        Coefficient::Constant(1.0),
        TerminalFunctional::Identity,
        0.0,
        0.0,
    );
    let spec = validate_spec(&spec, &grid).unwrap();
    let fwd = ForwardSpec {
        drift: (0.0, 0.0),
        volatility: Volatility::Constant(sigma),
        h: TerminalFunctional::Square,
    };
    let xs = linspace(-2.0, 2.0, 11);
    let mut cores: Vec<Vec<f64>> = Vec::new();
    let mut worst = 0.0_f64;
    let paths: Vec<NoisePath> = (0..2)
        .map(|seed| sample_path_at(&grid, 100 + seed, 0))
        .collect();
    if paths[0].eps == paths[1].eps {
        return Err("the two backward paths coincide".into());
    }
    for path in &paths {
        let s = u_surface(&fwd, &spec, &grid, &xs, &path.eps, path.seed.to_string()).unwrap();
        let noise = backward_noise_term(&path.eps, &grid);
        let core: Vec<f64> = s.u.iter().map(|u| u - noise).collect();
        for (x, c) in xs.iter().zip(&core) {
            worst = worst.max((c - (x * x + sigma * sigma * horizon)).abs());
        }
        cores.push(core);
    }
    let spread = cores[0]
        .iter()
        .zip(&cores[1])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(
        worst < SPDE_TOL && spread < SPDE_TOL,
        format!(
            "max |u - B_T - (x^2 + sigma^2 T)| = {worst:.3e}, path spread {spread:.3e} (11 points)"
        ),
    )
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("transport exactness", transport_exactness),
        ("time-integral exactness", time_integral_exactness),
        ("scheme residuals", scheme_residuals),
        ("implicit-Picard agreement", picard_agreement),
        ("Picard contraction", picard_contraction),
        ("Gronwall series", gronwall),
        ("a-priori L2 bound", apriori_bound),
        ("martingale representation", martingale),
        ("walk law", walk_law),
        ("Monte Carlo consistency", monte_carlo_consistency),
        ("convergence trend", convergence_trend),
        ("SPDE example", spde_example),
    ];
    let started = Instant::now();
    let mut failures = 0;
    for (k, (name, criterion)) in criteria.iter().enumerate() {
        let clock = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(criterion))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = clock.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{:2}] {name} ({secs:.1}s): {detail}", k + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL [{:2}] {name} ({secs:.1}s): {detail}", k + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1}s",
        criteria.len() - failures,
        criteria.len(),
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
