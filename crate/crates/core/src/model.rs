//! Problem specification: generator `f`, backward-noise coefficient `g`,
//! terminal functional `Phi`, declared Lipschitz constants and the builtin
//! registry.
//!
//! Coefficients are evaluated as `value(t, x, y, z)`. The state `x` is the
//! forward walk value at the node for plain tree solves and the forward SDE
//! state for surface computations; most kinds ignore it.

use std::fmt;
use std::ops::Deref;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_noise::TimeGrid;

/// Closed-form coefficient kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Coefficient {
    Zero,
    Constant(f64),
    /// `a y + b z`
    LinearYz {
        a: f64,
        b: f64,
    },
    /// The time argument itself, `t`.
    TimeOnly,
    /// `amplitude * sin(y)`
    ScaledSine {
        amplitude: f64,
    },
    /// `a(t) y + b(t) z` with `a`, `b` constant on `[breaks[k], breaks[k+1])`.
    TabulatedAffine {
        breaks: Vec<f64>,
        a: Vec<f64>,
        b: Vec<f64>,
    },
    /// `c0 + cx x + cy y + cz z`
    StateAffine {
        c0: f64,
        cx: f64,
        cy: f64,
        cz: f64,
    },
}

impl Coefficient {
    pub fn value(&self, t: f64, x: f64, y: f64, z: f64) -> f64 {
        match self {
            Coefficient::Zero => 0.0,
            Coefficient::Constant(c) => *c,
            Coefficient::LinearYz { a, b } => a * y + b * z,
            Coefficient::TimeOnly => t,
            Coefficient::ScaledSine { amplitude } => amplitude * y.sin(),
            Coefficient::TabulatedAffine { .. } => {
                let (a, b) = self.tabulated_at(t);
                a * y + b * z
            }
            Coefficient::StateAffine { c0, cx, cy, cz } => c0 + cx * x + cy * y + cz * z,
        }
    }

    fn tabulated_at(&self, t: f64) -> (f64, f64) {
        match self {
            Coefficient::TabulatedAffine { breaks, a, b } => {
                let k = breaks.partition_point(|&s| s <= t).saturating_sub(1);
                (a[k], b[k])
            }
            _ => unreachable!("tabulated_at on a non-tabulated coefficient"),
        }
    }

    /// When the coefficient is affine in `y` at fixed `(t, x, z)`, returns
    /// `(slope, offset)` with `value = slope * y + offset`.
    pub fn affine_in_y(&self, t: f64, x: f64, z: f64) -> Option<(f64, f64)> {
        match self {
            Coefficient::Zero => Some((0.0, 0.0)),
            Coefficient::Constant(c) => Some((0.0, *c)),
            Coefficient::LinearYz { a, b } => Some((*a, b * z)),
            Coefficient::TimeOnly => Some((0.0, t)),
            Coefficient::ScaledSine { amplitude } if *amplitude == 0.0 => Some((0.0, 0.0)),
            Coefficient::ScaledSine { .. } => None,
            Coefficient::TabulatedAffine { .. } => {
                let (a, b) = self.tabulated_at(t);
                Some((a, b * z))
            }
            Coefficient::StateAffine { c0, cx, cy, cz } => Some((*cy, c0 + cx * x + cz * z)),
        }
    }

    pub fn depends_on_y(&self) -> bool {
        match self {
            Coefficient::Zero | Coefficient::Constant(_) | Coefficient::TimeOnly => false,
            Coefficient::LinearYz { a, .. } => *a != 0.0,
            Coefficient::ScaledSine { amplitude } => *amplitude != 0.0,
            Coefficient::TabulatedAffine { a, .. } => a.iter().any(|&v| v != 0.0),
            Coefficient::StateAffine { cy, .. } => *cy != 0.0,
        }
    }

    pub fn depends_on_z(&self) -> bool {
        match self {
            Coefficient::Zero
            | Coefficient::Constant(_)
            | Coefficient::TimeOnly
            | Coefficient::ScaledSine { .. } => false,
            Coefficient::LinearYz { b, .. } => *b != 0.0,
            Coefficient::TabulatedAffine { b, .. } => b.iter().any(|&v| v != 0.0),
            Coefficient::StateAffine { cz, .. } => *cz != 0.0,
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        matches!(
            self,
            Coefficient::TimeOnly | Coefficient::TabulatedAffine { .. }
        )
    }

    /// `sup_j |value(t_j, 0, 0, 0)|` over the grid times.
    pub fn sup_at_origin(&self, grid: &TimeGrid) -> f64 {
        grid.times()
            .into_iter()
            .map(|t| self.value(t, 0.0, 0.0, 0.0).abs())
            .fold(0.0, f64::max)
    }

    fn check(&self) -> Result<()> {
        if let Coefficient::TabulatedAffine { breaks, a, b } = self {
            if breaks.is_empty() || breaks.len() != a.len() || breaks.len() != b.len() {
                return Err(Error::InvalidModel(
                    "tabulated coefficient needs equal, non-empty breaks/a/b".into(),
                ));
            }
            if breaks[0] > 0.0 || breaks.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidModel(
                    "tabulated breaks must start at or before 0 and increase".into(),
                ));
            }
        }
        Ok(())
    }
}

/// The terminal value as a function of the forward walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TerminalFunctional {
    /// `W_T`
    Identity,
    Constant(f64),
    /// `(W_T - strike)^+`
    Call {
        strike: f64,
    },
    /// `W_T^2`
    Square,
    /// `weight * delta * sum_{j=1..n} W_j`, a Riemann sum of the path.
    PathSum {
        weight: f64,
    },
}

impl TerminalFunctional {
    /// Value at a terminal node, `None` for path-dependent functionals.
    pub fn at_terminal(&self, w: f64) -> Option<f64> {
        match self {
            TerminalFunctional::Identity => Some(w),
            TerminalFunctional::Constant(c) => Some(*c),
            TerminalFunctional::Call { strike } => Some((w - strike).max(0.0)),
            TerminalFunctional::Square => Some(w * w),
            TerminalFunctional::PathSum { .. } => None,
        }
    }

    /// Value on a full forward-walk path `w[0..=n]`.
    pub fn on_path(&self, w: &[f64], grid: &TimeGrid) -> f64 {
        match self {
            TerminalFunctional::PathSum { weight } => {
                weight * grid.delta() * w.iter().skip(1).sum::<f64>()
            }
            other => other
                .at_terminal(*w.last().expect("non-empty path"))
                .expect("markovian functional"),
        }
    }

    pub fn is_path_dependent(&self) -> bool {
        matches!(self, TerminalFunctional::PathSum { .. })
    }
}

/// Builtins with a closed-form solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExactModel {
    /// `Y_t = (B_T - B_t) + W_t`, `Z = 1`.
    Transport,
    /// `Y_t = int_t^T s dB_s`, `Z = 0`.
    TimeIntegral,
    /// `Y_t = W_t`, `Z = 1`.
    Walk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecFlags {
    pub f_time_dependent: bool,
    pub g_time_dependent: bool,
    pub f_depends_y: bool,
    pub g_depends_z: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub name: String,
    pub f: Coefficient,
    pub g: Coefficient,
    pub phi: TerminalFunctional,
    /// Lipschitz constant of `f` and of the `y`-part of `g`.
    pub lipschitz: f64,
    /// `z`-Lipschitz constant of `g`.
    pub alpha: f64,
    /// Skip the `alpha < 1` gate; used for exact examples outside (H.1).
    pub exactness_only: bool,
    pub exact: Option<ExactModel>,
}

impl ProblemSpec {
    pub fn new(
        name: impl Into<String>,
        f: Coefficient,
        g: Coefficient,
        phi: TerminalFunctional,
        lipschitz: f64,
        alpha: f64,
    ) -> Self {
        Self {
            name: name.into(),
            f,
            g,
            phi,
            lipschitz,
            alpha,
            exactness_only: false,
            exact: None,
        }
    }

    pub fn flags(&self) -> SpecFlags {
        SpecFlags {
            f_time_dependent: self.f.is_time_dependent(),
            g_time_dependent: self.g.is_time_dependent(),
            f_depends_y: self.f.depends_on_y(),
            g_depends_z: self.g.depends_on_z(),
        }
    }

    /// Checks the declared constants against random argument pairs.
    /// Returns the worst ratio `|difference| / bound` seen (`<= 1` passes).
    pub fn audit_lipschitz(&self, pairs: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..pairs {
            let t = rng.random_range(0.0..2.0);
            let x = rng.random_range(-5.0..5.0);
            let (y1, y2): (f64, f64) =
                (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let (z1, z2): (f64, f64) =
                (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let (dy, dz) = ((y1 - y2).abs(), (z1 - z2).abs());

            let df = (self.f.value(t, x, y1, z1) - self.f.value(t, x, y2, z2)).abs();
            let dg = (self.g.value(t, x, y1, z1) - self.g.value(t, x, y2, z2)).abs();
            let slack = 1e-12 * (1.0 + dy + dz);
            let bound_f = self.lipschitz * (dy + dz) + slack;
            let bound_g = self.lipschitz * dy + self.alpha * dz + slack;
            worst = worst.max(df / bound_f).max(dg / bound_g);
        }
        worst
    }
}

impl fmt::Display for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (K = {}, alpha = {})",
            self.name, self.lipschitz, self.alpha
        )
    }
}

/// A spec that passed [`validate_spec`] for a particular grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidatedSpec {
    spec: ProblemSpec,
    contraction: f64,
}

impl ValidatedSpec {
    /// Contraction factor `delta * K` of the implicit fixed-point map.
    pub fn contraction(&self) -> f64 {
        self.contraction
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn into_inner(self) -> ProblemSpec {
        self.spec
    }
}

impl Deref for ValidatedSpec {
    type Target = ProblemSpec;

    fn deref(&self) -> &ProblemSpec {
        &self.spec
    }
}

pub fn validate_spec(spec: &ProblemSpec, grid: &TimeGrid) -> Result<ValidatedSpec> {
    if !(spec.lipschitz >= 0.0) || !spec.lipschitz.is_finite() {
        return Err(Error::InvalidModel(format!(
            "Lipschitz constant must be finite and non-negative, got {}",
            spec.lipschitz
        )));
    }
    if !(spec.alpha >= 0.0) {
        return Err(Error::InvalidModel(format!(
            "alpha must be non-negative, got {}",
            spec.alpha
        )));
    }
    if spec.alpha >= 1.0 {
        if spec.exactness_only {
            log::warn!(
                "{}: alpha = {} violates the z-Lipschitz bound, running as an exactness-only model",
                spec.name,
                spec.alpha
            );
        } else {
            return Err(Error::InvalidModel(format!(
                "alpha must be < 1, got {}",
                spec.alpha
            )));
        }
    }
    spec.f.check()?;
    spec.g.check()?;

    let contraction = grid.delta() * spec.lipschitz;
    if contraction >= 1.0 {
        let min_steps = (grid.horizon() * spec.lipschitz).floor() as usize + 1;
        return Err(Error::StepTooCoarse {
            contraction,
            min_steps,
        });
    }
    Ok(ValidatedSpec {
        spec: spec.clone(),
        contraction,
    })
}

/// `f = 0`, `g(y, z) = z`, `Phi = W_T`. Solution `Y_t = (B_T - B_t) + W_t`.
pub fn transport() -> ProblemSpec {
    let mut spec = ProblemSpec::new(
        "transport",
        Coefficient::Zero,
        Coefficient::LinearYz { a: 0.0, b: 1.0 },
        TerminalFunctional::Identity,
        0.0,
        1.0,
    );
    spec.exactness_only = true;
    spec.exact = Some(ExactModel::Transport);
    spec
}

/// `f = 0`, `g = t`, `Phi = 0`. Solution `Y_t = int_t^T s dB_s`.
pub fn time_integral() -> ProblemSpec {
    let mut spec = ProblemSpec::new(
        "time_integral",
        Coefficient::Zero,
        Coefficient::TimeOnly,
        TerminalFunctional::Constant(0.0),
        0.0,
        0.0,
    );
    spec.exact = Some(ExactModel::TimeIntegral);
    spec
}

/// `f = a y + b z`, `g = c y + d z`, `Phi = W_T`.
pub fn linear(a: f64, b: f64, c: f64, d: f64) -> ProblemSpec {
    ProblemSpec::new(
        format!("linear({a},{b},{c},{d})"),
        Coefficient::LinearYz { a, b },
        Coefficient::LinearYz { a: c, b: d },
        TerminalFunctional::Identity,
        a.abs().max(b.abs()).max(c.abs()),
        d.abs(),
    )
}

/// `f = sin(y)`, `g = y / 2`, `Phi = W_T`.
pub fn sine() -> ProblemSpec {
    ProblemSpec::new(
        "sine",
        Coefficient::ScaledSine { amplitude: 1.0 },
        Coefficient::LinearYz { a: 0.5, b: 0.0 },
        TerminalFunctional::Identity,
        1.0,
        0.0,
    )
}

/// `f = g = 0`, `Phi = W_T`.
pub fn zero() -> ProblemSpec {
    let mut spec = ProblemSpec::new(
        "zero",
        Coefficient::Zero,
        Coefficient::Zero,
        TerminalFunctional::Identity,
        0.0,
        0.0,
    );
    spec.exact = Some(ExactModel::Walk);
    spec
}

/// Registry keys accepted by [`builtin`] (`linear` takes four arguments).
pub const REGISTRY: [&str; 5] = ["transport", "time_integral", "linear", "sine", "zero"];

/// Looks up a builtin. `linear` is written `linear(a,b,c,d)`.
pub fn builtin(key: &str) -> Result<ProblemSpec> {
    let key = key.trim();
    match key {
        "transport" => return Ok(transport()),
        "time_integral" => return Ok(time_integral()),
        "sine" => return Ok(sine()),
        "zero" => return Ok(zero()),
        _ => {}
    }
    let args = key
        .strip_prefix("linear(")
        .and_then(|rest| rest.strip_suffix(')'))
        .ok_or_else(|| Error::NotFound(key.to_string()))?;
    let params = args
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::InvalidArgument(format!("linear parameters: {e}")))?;
    match params[..] {
        [a, b, c, d] => Ok(linear(a, b, c, d)),
        _ => Err(Error::InvalidArgument(format!(
            "linear takes 4 parameters, got {}",
            params.len()
        ))),
    }
}
