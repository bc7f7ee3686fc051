//! Experiment configuration files (JSON) and their validation.
//!
//! Errors carry the line of the offending key so the CLI can point at it.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::certify::{check_setup, Constants, Mode, StabilitySetup};
use crate::control::{ControlMethod, ControlOptions};
use crate::error::{Error, Result};
use crate::grid::{CoefficientSet, Grid2D, Point};
use crate::measures::{MeasurePair, SamplingSpec};
use crate::ot::CostSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "default_rect")]
    pub rect: [Point; 2],
    #[serde(default = "one")]
    pub kappa_expr: String,
    #[serde(default = "one")]
    pub q_expr: String,
    #[serde(default = "default_sobolev")]
    pub sobolev_order: usize,
}

fn default_rect() -> [Point; 2] {
    [[-0.5, -0.5], [0.5, 0.5]]
}

fn one() -> String {
    "1".into()
}

fn default_sobolev() -> usize {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingBlock {
    #[serde(rename = "M")]
    pub m: usize,
    pub eta1_min: f64,
    pub eta2_min: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// atoms shared between μ and ν
    #[serde(default)]
    pub shared: usize,
}

fn default_margin() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeBlock {
    #[serde(rename = "T")]
    pub t_final: f64,
    #[serde(rename = "T_star", default)]
    pub t_star: f64,
    pub nt: usize,
    #[serde(rename = "K", default)]
    pub band: usize,
    /// time samples per atom in the space-time transport problem; 4(2K+1) if absent
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_samples: Option<usize>,
}

impl TimeBlock {
    pub fn event_samples(&self) -> usize {
        self.event_samples.unwrap_or(4 * (2 * self.band + 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlBlock {
    pub method: ControlMethod,
    pub epsilon: f64,
    pub terminal_tol: f64,
    pub cg_tol: f64,
    pub max_iter: usize,
}

impl Default for ControlBlock {
    fn default() -> Self {
        let o = ControlOptions::default();
        ControlBlock { method: o.method, epsilon: o.epsilon, terminal_tol: o.terminal_tol, cg_tol: o.cg_tol, max_iter: o.max_iter }
    }
}

impl ControlBlock {
    pub fn options(&self) -> ControlOptions {
        ControlOptions {
            method: self.method,
            epsilon: self.epsilon,
            terminal_tol: self.terminal_tol,
            cg_tol: self.cg_tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub grid: GridBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measures: Option<MeasurePair>,
    pub cost: CostSpec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<TimeBlock>,
    #[serde(default)]
    pub control: ControlBlock,
    /// fixed |ρ|; absent means the separation formula
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default)]
    pub constants: Constants,
    #[serde(default)]
    pub calibrate: bool,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

fn default_trials() -> usize {
    1
}

/// 1-based line of the first occurrence of `"key"` in the source text.
pub fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

fn anchored(text: Option<&str>, key: &str, msg: impl std::fmt::Display) -> Error {
    match text.and_then(|t| line_of(t, key)) {
        Some(l) => Error::Config(format!("line {l}: {msg}")),
        None => Error::Config(format!("{key}: {msg}")),
    }
}

impl ExperimentConfig {
    /// Parse and validate.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate(Some(text))?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Check mode-dependent requirements; `text` (the source) anchors messages to lines.
    pub fn validate(&self, text: Option<&str>) -> Result<()> {
        if self.trials == 0 {
            return Err(anchored(text, "trials", "trials must be at least 1"));
        }
        Grid2D::new(self.grid.nx, self.grid.ny, self.grid.rect).map_err(|e| anchored(text, "grid", e))?;
        for (key, src) in [("kappa_expr", &self.grid.kappa_expr), ("q_expr", &self.grid.q_expr)] {
            crate::expr::Expr::parse(src).map_err(|e| anchored(text, key, e))?;
        }
        self.cost.validate().map_err(|e| anchored(text, "cost", e))?;
        if self.sampling.is_none() && self.measures.is_none() {
            return Err(anchored(text, "mode", "need a sampling block or explicit measures"));
        }
        if let Some(s) = &self.sampling {
            if s.m == 0 || s.shared > s.m {
                return Err(anchored(text, "sampling", "need M ≥ 1 and shared ≤ M"));
            }
            if !(s.eta1_min > 0.0 && s.eta2_min > 0.0 && s.margin >= 0.0) {
                return Err(anchored(text, "sampling", "separations must be positive"));
            }
        }
        if let Some(r) = self.r {
            if !(r > 0.0 && r.is_finite()) {
                return Err(anchored(text, "r", format!("|rho| = {r} must be positive")));
            }
        }
        match (self.mode, &self.time) {
            (Mode::Elliptic, _) => {}
            (_, None) => return Err(anchored(text, "mode", format!("{} mode needs a time block", self.mode.name()))),
            (m, Some(t)) => {
                if !(t.t_final > 0.0) || t.nt < 2 {
                    return Err(anchored(text, "time", "need T > 0 and nt ≥ 2"));
                }
                if m == Mode::Parabolic && !(t.t_star > 0.0 && t.t_star < t.t_final) {
                    return Err(anchored(text, "T_star", format!("need 0 < T* < T, got T* = {}, T = {}", t.t_star, t.t_final)));
                }
            }
        }
        if !(self.control.epsilon > 0.0) {
            return Err(anchored(text, "epsilon", "epsilon must be positive"));
        }
        check_setup(&self.setup()).map_err(|e| anchored(text, "mode", e))
    }

    pub fn build_grid(&self) -> Result<Grid2D> {
        Grid2D::new(self.grid.nx, self.grid.ny, self.grid.rect)
    }

    pub fn coefficients(&self, g: &Grid2D) -> Result<CoefficientSet> {
        CoefficientSet::from_exprs(g, &self.grid.kappa_expr, &self.grid.q_expr, self.grid.sobolev_order)
    }

    /// The sampling constraints; with explicit measures and no sampling block
    /// they are read off the measures themselves.
    pub fn sampling_spec(&self) -> SamplingSpec {
        if let Some(s) = &self.sampling {
            return SamplingSpec { m: s.m, eta1_min: s.eta1_min, eta2_min: s.eta2_min, margin: s.margin };
        }
        let mut pts: Vec<Point> = Vec::new();
        if let Some(p) = &self.measures {
            for l in p.mu.iter().chain(&p.nu) {
                if !pts.iter().any(|q| q[0] == l.x1 && q[1] == l.x2) {
                    pts.push([l.x1, l.x2]);
                }
            }
        }
        let m = self.measures.as_ref().map_or(1, |p| p.mu.len().max(p.nu.len()));
        let eta2 = pts.iter().map(|p| p[0].hypot(p[1])).fold(f64::INFINITY, f64::min);
        let mut eta1 = f64::INFINITY;
        for (i, a) in pts.iter().enumerate() {
            for b in &pts[i + 1..] {
                eta1 = eta1.min((a[0] - b[0]).hypot(a[1] - b[1]));
            }
        }
        SamplingSpec { m, eta1_min: eta1, eta2_min: eta2, margin: 0.0 }
    }

    pub fn setup(&self) -> StabilitySetup {
        let t = self.time.unwrap_or(TimeBlock { t_final: 1.0, t_star: 0.5, nt: 2, band: 0, event_samples: None });
        StabilitySetup {
            mode: self.mode,
            trials: self.trials,
            seed: self.seed,
            sampling: self.sampling_spec(),
            shared: self.sampling.map_or(0, |s| s.shared),
            cost: self.cost,
            r: self.r,
            constants: self.constants,
            calibrate: self.calibrate,
            t_final: t.t_final,
            t_star: t.t_star,
            nt: t.nt,
            band: t.band,
            event_samples: t.event_samples(),
            epsilon: self.control.epsilon,
            measures: self.measures.clone(),
        }
    }

    /// Canonical serialization of the effective configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
  "mode": "elliptic",
  "grid": {"nx": 33, "ny": 33, "q_expr": "1 + 0.5*x1^2"},
  "sampling": {"M": 2, "eta1_min": 0.25, "eta2_min": 0.2},
  "cost": {"kind": "truncated_euclidean", "cap": 2.0},
  "trials": 3,
  "seed": 7
}"#;

    #[test]
    fn parses_and_fills_defaults() {
        let c = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(c.grid.rect, default_rect());
        assert_eq!(c.grid.kappa_expr, "1");
        assert_eq!(c.constants, Constants::default());
        let s = c.setup();
        assert_eq!(s.trials, 3);
        assert_eq!(s.sampling.m, 2);
        assert_eq!(s.sampling.margin, 0.05);
    }

    #[test]
    fn syntax_errors_carry_the_line() {
        let bad = BASE.replace("\"cap\": 2.0", "\"cap\": ");
        let e = ExperimentConfig::parse(&bad).unwrap_err().to_string();
        assert!(e.contains("line 5"), "{e}");
    }

    #[test]
    fn malformed_cost_is_rejected_at_its_line() {
        let bad = BASE.replace("truncated_euclidean", "manhattan");
        let e = ExperimentConfig::parse(&bad).unwrap_err().to_string();
        assert!(e.contains("line 5"), "{e}");
        let neg = BASE.replace("\"cap\": 2.0", "\"cap\": -1.0");
        let e = ExperimentConfig::parse(&neg).unwrap_err().to_string();
        assert!(e.contains("line 5"), "{e}");
    }

    #[test]
    fn mode_requirements() {
        let para = BASE
            .replace("\"elliptic\"", "\"parabolic\"")
            .replace("truncated_euclidean\", \"cap\": 2.0", "spacetime\", \"weight\": 1.0, \"cap\": 2.0");
        let e = ExperimentConfig::parse(&para).unwrap_err().to_string();
        assert!(e.contains("time block"), "{e}");
        let timed = para.replace("\"trials\": 3", "\"time\": {\"T\": 1.0, \"T_star\": 1.5, \"nt\": 64, \"K\": 1},\n  \"trials\": 3");
        let e = ExperimentConfig::parse(&timed).unwrap_err().to_string();
        assert!(e.contains("T*"), "{e}");
        let ok = timed.replace("1.5", "0.5");
        let c = ExperimentConfig::parse(&ok).unwrap();
        assert_eq!(c.setup().event_samples, 12);
        let zero = BASE.replace("\"trials\": 3", "\"trials\": 0");
        assert!(ExperimentConfig::parse(&zero).unwrap_err().to_string().contains("line 6"));
    }

    #[test]
    fn unknown_keys_and_bad_expressions() {
        let typo = BASE.replace("\"seed\"", "\"sead\"");
        assert!(ExperimentConfig::parse(&typo).is_err());
        let expr = BASE.replace("0.5*x1^2", "0.5*x3");
        let e = ExperimentConfig::parse(&expr).unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
    }

    #[test]
    fn explicit_measures_define_the_spec() {
        let text = BASE.replace(
            "\"sampling\": {\"M\": 2, \"eta1_min\": 0.25, \"eta2_min\": 0.2},",
            "\"measures\": {\"mu\": [{\"x1\": 0.2, \"x2\": 0.1, \"amplitude\": 1.0}], \"nu\": [{\"x1\": -0.1, \"x2\": 0.3, \"amplitude\": 1.0}]},",
        );
        let c = ExperimentConfig::parse(&text).unwrap();
        let s = c.sampling_spec();
        assert_eq!(s.m, 1);
        assert!((s.eta1_min - 0.3f64.hypot(0.2)).abs() < 1e-15);
        assert!((s.eta2_min - 0.2f64.hypot(0.1)).abs() < 1e-15);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::parse(BASE).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
