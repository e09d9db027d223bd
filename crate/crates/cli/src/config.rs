//! Experiment configuration: defaults, then a flat `key = value` file, then
//! command-line overrides. Every value goes through [`ExperimentConfig::set`]
//! so the file and the flags accept exactly the same spellings.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use bdsde::tree_solver::TerminalZ;
use bdsde::{builtin, Scheme, TerminalFunctional};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    /// Registry key, `linear(a,b,c,d)` for the linear family.
    pub model: String,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n: usize,
    pub n_list: Vec<usize>,
    pub scheme: Scheme,
    pub samples: usize,
    pub seed: u64,
    /// Fixed-point tolerance of the implicit step.
    pub tol: f64,
    pub max_iterations: usize,
    pub terminal_z: String,
    pub keep_tree: bool,
    pub p_max: usize,
    /// Stop tolerance on the squared Picard difference norm.
    pub picard_tol: f64,
    pub gamma: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub x_points: usize,
    pub sigma: f64,
    pub drift_b0: f64,
    pub drift_b1: f64,
    /// Terminal function of the forward state for `spde`.
    pub h: String,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: "sine".into(),
            horizon: 1.0,
            n: 16,
            n_list: vec![8, 16, 32, 64],
            scheme: Scheme::Implicit,
            samples: 1000,
            seed: 0,
            tol: 1e-12,
            max_iterations: 100,
            terminal_z: "central".into(),
            keep_tree: false,
            p_max: 50,
            picard_tol: 1e-16,
            gamma: std::f64::consts::E,
            x_min: -2.0,
            x_max: 2.0,
            x_points: 11,
            sigma: 1.0,
            drift_b0: 0.0,
            drift_b1: 0.0,
            h: "square".into(),
            out: PathBuf::from("out"),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("{key}: cannot parse {value:?}: {e}"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("{key}: expected true or false, got {value:?}"),
    }
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim().trim_matches('"');
        match key.trim().replace('-', "_").as_str() {
            "model" => self.model = value.to_string(),
            "T" | "horizon" => self.horizon = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "n_list" => {
                self.n_list = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "scheme" => self.scheme = value.parse().map_err(|e| anyhow!("scheme: {e}"))?,
            "samples" => self.samples = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "tol" => self.tol = num(key, value)?,
            "max_iterations" => self.max_iterations = num(key, value)?,
            "terminal_z" => self.terminal_z = value.to_string(),
            "keep_tree" => self.keep_tree = flag(key, value)?,
            "p_max" => self.p_max = num(key, value)?,
            "picard_tol" => self.picard_tol = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "x_min" => self.x_min = num(key, value)?,
            "x_max" => self.x_max = num(key, value)?,
            "x_points" => self.x_points = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "drift_b0" => self.drift_b0 = num(key, value)?,
            "drift_b1" => self.drift_b1 = num(key, value)?,
            "h" => self.h = value.to_string(),
            "out" => self.out = PathBuf::from(value),
            other => bail!("unknown configuration key {other:?}"),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", lineno + 1))?;
            self.set(key, value)
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text)
            .with_context(|| format!("in {}", path.display()))
    }

    /// Checks everything that can be checked without running a solver.
    pub fn validate(&self) -> Result<()> {
        builtin(&self.model).map_err(|e| anyhow!("model: {e}"))?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            bail!("T must be positive, got {}", self.horizon);
        }
        if self.n == 0 {
            bail!("n must be at least 1");
        }
        if self.n_list.is_empty() || self.n_list.windows(2).any(|w| w[1] <= w[0]) {
            bail!(
                "n_list must be non-empty and strictly increasing: {:?}",
                self.n_list
            );
        }
        if self.samples == 0 {
            bail!("samples must be at least 1");
        }
        if self.gamma.is_nan() || self.gamma <= 0.0 {
            bail!("gamma must be positive, got {}", self.gamma);
        }
        if self.x_points == 0
            || self.x_min.is_nan()
            || self.x_max.is_nan()
            || self.x_min > self.x_max
        {
            bail!("x grid needs x_points >= 1 and x_min <= x_max");
        }
        self.terminal_z_mode()?;
        self.forward_terminal()?;
        Ok(())
    }

    pub fn terminal_z_mode(&self) -> Result<TerminalZ> {
        match self.terminal_z.as_str() {
            "central" => Ok(TerminalZ::CentralDifference),
            "psi" => Ok(TerminalZ::PsiFixedPoint),
            other => bail!("terminal_z: expected central or psi, got {other:?}"),
        }
    }

    /// `identity`, `square`, `constant(c)` or `call(k)`.
    pub fn forward_terminal(&self) -> Result<TerminalFunctional> {
        let h = self.h.trim();
        let arg = |prefix: &str| {
            h.strip_prefix(prefix)
                .and_then(|rest| rest.strip_suffix(')'))
                .map(|s| num::<f64>("h", s.trim()))
        };
        match h {
            "identity" | "x" => Ok(TerminalFunctional::Identity),
            "square" | "x^2" => Ok(TerminalFunctional::Square),
            _ => {
                if let Some(c) = arg("constant(") {
                    Ok(TerminalFunctional::Constant(c?))
                } else if let Some(k) = arg("call(") {
                    Ok(TerminalFunctional::Call { strike: k? })
                } else {
                    bail!("h: unknown terminal function {h:?}")
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(
            "# demo\nmodel = \"linear(0.3,0.2,0.1,0.2)\"\nT = 2\nn_list = 4, 8\nkeep_tree = true\n",
        )
        .unwrap();
        cfg.set("n", "32").unwrap();
        cfg.set("n-list", "8,16").unwrap();
        assert_eq!(cfg.model, "linear(0.3,0.2,0.1,0.2)");
        assert_eq!(cfg.horizon, 2.0);
        assert_eq!(cfg.n, 32);
        assert_eq!(cfg.n_list, vec![8, 16]);
        assert!(cfg.keep_tree);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.set("colour", "blue").is_err());
        assert!(cfg.set("n", "many").is_err());
        assert!(cfg.apply_text("n 4").is_err());
        cfg.model = "nonsense".into();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            n_list: vec![16, 8],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn terminal_spellings() {
        let mut cfg = ExperimentConfig::default();
        for (text, expect) in [
            ("x", TerminalFunctional::Identity),
            ("square", TerminalFunctional::Square),
            ("constant(1.5)", TerminalFunctional::Constant(1.5)),
            ("call(0.2)", TerminalFunctional::Call { strike: 0.2 }),
        ] {
            cfg.h = text.into();
            assert_eq!(cfg.forward_terminal().unwrap(), expect);
        }
        cfg.h = "cube".into();
        assert!(cfg.forward_terminal().is_err());
    }
}
