//! Plain-text `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is validated
//! before any computation starts; unknown or repeated keys are rejected.

use std::collections::BTreeSet;
use std::str::FromStr;

use serde::Serialize;

use crate::presets::PRESET_NAMES;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Wild,
    Dissipative,
    Weakstrong,
    Verify,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wild" => Ok(Scenario::Wild),
            "dissipative" => Ok(Scenario::Dissipative),
            "weakstrong" => Ok(Scenario::Weakstrong),
            "verify" => Ok(Scenario::Verify),
            other => Err(Error::Config(format!("unknown scenario '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub dim: usize,
    pub n_space: usize,
    pub n_time: usize,
    pub t_final: f64,
    pub preset: String,
    /// Time excluded from the energy functional; defaults to `T/10`.
    pub eps: Option<f64>,
    pub max_steps: usize,
    /// Stop the iteration once the remaining defect is below `tol`.
    pub tol: f64,
    pub box_cap: usize,
    /// Margin used when choosing the constant energy level of the wild run.
    pub chi_margin: f64,
    pub depth: usize,
    pub chi_bar: Option<f64>,
    #[serde(rename = "K")]
    pub k: f64,
    /// Horizon of the classical reference solution; defaults to `T/20`.
    pub t_short: Option<f64>,
    pub seed: u64,
    /// Number of random samples used by the `verify` audits.
    pub samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::Verify,
            dim: 2,
            n_space: 32,
            n_time: 41,
            t_final: 0.25,
            preset: "mild".into(),
            eps: None,
            max_steps: 10,
            tol: 0.0,
            box_cap: 64,
            chi_margin: 0.1,
            depth: 6,
            chi_bar: None,
            k: 20.0,
            t_short: None,
            seed: 0,
            samples: 10_000,
        }
    }
}

const KEYS: &[&str] = &[
    "scenario", "dim", "n_space", "n_time", "t_final", "preset", "eps", "max_steps", "tol", "box_cap", "chi_margin",
    "depth", "chi_bar", "K", "t_short", "seed", "samples",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

impl ExperimentConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key '{key}'", no + 1)));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: repeated key '{key}'", no + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "scenario" => self.scenario = value.parse()?,
            "dim" => self.dim = parse(key, value)?,
            "n_space" => self.n_space = parse(key, value)?,
            "n_time" => self.n_time = parse(key, value)?,
            "t_final" => self.t_final = parse(key, value)?,
            "preset" => self.preset = value.to_string(),
            "eps" => self.eps = Some(parse(key, value)?),
            "max_steps" => self.max_steps = parse(key, value)?,
            "tol" => self.tol = parse(key, value)?,
            "box_cap" => self.box_cap = parse(key, value)?,
            "chi_margin" => self.chi_margin = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "chi_bar" => self.chi_bar = Some(parse(key, value)?),
            "K" => self.k = parse(key, value)?,
            "t_short" => self.t_short = Some(parse(key, value)?),
            "seed" => self.seed = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            _ => unreachable!("key list and setter disagree"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim != 2 && self.dim != 3 {
            return bad(format!("dim must be 2 or 3, got {}", self.dim));
        }
        if self.n_space < 8 || self.n_space % 2 != 0 {
            return bad(format!("n_space must be even and >= 8, got {}", self.n_space));
        }
        if self.n_time < 3 {
            return bad(format!("n_time must be >= 3, got {}", self.n_time));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return bad(format!("t_final must be positive, got {}", self.t_final));
        }
        if !PRESET_NAMES.contains(&self.preset.as_str()) {
            return bad(format!("unknown preset '{}'", self.preset));
        }
        if let Some(e) = self.eps {
            if !(e > 0.0 && e < self.t_final) {
                return Err(Error::Precondition(format!("eps = {e} must lie in (0, T = {})", self.t_final)));
            }
        }
        if let Some(t) = self.t_short {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("t_short must be positive, got {t}"));
            }
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return bad(format!("K must be positive, got {}", self.k));
        }
        if self.depth > crate::dissipdata::LEVEL_WAVES.len() {
            return bad(format!("depth must be <= {}", crate::dissipdata::LEVEL_WAVES.len()));
        }
        if !(self.chi_margin > 0.0 && self.chi_margin < 1.0) {
            return bad(format!("chi_margin must lie in (0, 1), got {}", self.chi_margin));
        }
        if self.box_cap == 0 || self.samples == 0 {
            return bad("box_cap and samples must be positive".into());
        }
        Ok(())
    }

    pub fn eps(&self) -> f64 {
        self.eps.unwrap_or(self.t_final / 10.0)
    }

    pub fn t_short(&self) -> f64 {
        self.t_short.unwrap_or(self.t_final / 20.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = ExperimentConfig::parse("# comment\nscenario = wild\n\nn_space=16\nK = 3.5\nchi_bar = 9\n").unwrap();
        assert_eq!(c.scenario, Scenario::Wild);
        assert_eq!(c.n_space, 16);
        assert_eq!(c.k, 3.5);
        assert_eq!(c.chi_bar, Some(9.0));
        assert_eq!(c.eps(), 0.025);
        assert_eq!(c.t_short(), 0.0125);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "bogus = 1",
            "dim = 4",
            "n_space = 7",
            "n_time = x",
            "no equals sign",
            "dim = 2\ndim = 3",
            "preset = nope",
            "scenario = fly",
            "depth = 9",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
        assert!(matches!(ExperimentConfig::parse("eps = 0.3"), Err(Error::Precondition(_))));
    }
}
