//! Declarative study configuration (TOML), its validation into engine
//! objects, and the run manifest written next to every output.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{CalibrationOptions, EtaRule};
use crate::contrast::{contrast_weights, true_delta, ContrastWeights, Estimand};
use crate::copula::{validate_dependence, DependenceSpec, Structure};
use crate::design::{Arm, Edtr, Ets, EtsGrid, OutcomeSlot, TrialDesign};
use crate::distributions::{solve_dispersion_from_zero_mass, NbParams, ResponseRule};
use crate::error::{Error, Result};
use crate::power::PowerConfig;

fn half() -> f64 {
    0.5
}

fn is_half(v: &f64) -> bool {
    *v == 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub occasions: usize,
    pub split: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    pub response_rule: ResponseRule,
    #[serde(default = "half", skip_serializing_if = "is_half")]
    pub p_a1: f64,
    #[serde(default = "half", skip_serializing_if = "is_half")]
    pub p_a2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub ets: String,
    pub time: usize,
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispersion: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_proportion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DependenceSection {
    pub structure: Structure,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_tau_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub pair: [String; 2],
    pub estimand: Estimand,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_n_star")]
    pub n_star: usize,
    #[serde(default = "default_step")]
    pub grid_step: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self { m: default_m(), n_star: default_n_star(), grid_step: default_step() }
    }
}

fn default_m() -> usize {
    1000
}

fn default_n_star() -> usize {
    1000
}

fn default_step() -> f64 {
    0.05
}

fn default_seed() -> u64 {
    20_240_601
}

pub fn default_n_grid() -> Vec<usize> {
    (100..=550).step_by(50).collect()
}

fn default_target_power() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_n_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n4_override: Option<usize>,
    #[serde(default = "default_target_power")]
    pub target_power: f64,
    #[serde(default)]
    pub calibration: CalibrationSection,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        Self {
            m: default_m(),
            seed: default_seed(),
            n_grid: default_n_grid(),
            n4_override: None,
            target_power: default_target_power(),
            calibration: CalibrationSection::default(),
        }
    }
}

/// The declarative study document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub design: DesignSection,
    pub dependence: DependenceSection,
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub monte_carlo: MonteCarloSection,
    pub grid: Vec<GridCell>,
}

impl StudyConfig {
    pub fn from_toml(doc: &str) -> Result<Self> {
        toml::from_str(doc).map_err(|e| {
            let msg = e.message().to_string();
            let path = e
                .span()
                .map(|s| {
                    let line = doc[..s.start.min(doc.len())].matches('\n').count() + 1;
                    format!("line {line}")
                })
                .unwrap_or_else(|| "document".into());
            Error::config(path, msg)
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// SHA-256 of the canonical serialisation.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn resolve(&self) -> Result<Study> {
        Study::from_config(self.clone())
    }
}

/// Parse and validate a document, applying all derivations.
pub fn parse_config(doc: &str) -> Result<Study> {
    StudyConfig::from_toml(doc)?.resolve()
}

/// Latent dependence as configured: fixed, or to be calibrated to a target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DependenceChoice {
    Fixed(DependenceSpec),
    Target { structure: Structure, tau_max: f64, eta: Option<f64> },
}

/// A validated study with derived quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub config: StudyConfig,
    pub design: TrialDesign,
    pub grid: EtsGrid,
    pub dependence: DependenceChoice,
    pub pair: (Edtr, Edtr),
    pub weights: ContrastWeights,
    pub alpha: f64,
    /// Responder rate under `+1`.
    pub p: f64,
    /// Responder rate under `-1`.
    pub q: f64,
    pub true_delta: f64,
}

impl Study {
    fn from_config(config: StudyConfig) -> Result<Self> {
        let d = &config.design;
        let times = match &d.times {
            Some(t) => {
                if t.len() != d.occasions {
                    return Err(Error::config(
                        "design.times",
                        format!("{} times given for {} occasions", t.len(), d.occasions),
                    ));
                }
                t.clone()
            }
            None => (1..=d.occasions).map(|j| j as f64).collect(),
        };
        let design = TrialDesign::new(times, d.split, d.response_rule, d.p_a1, d.p_a2)
            .map_err(|e| Error::config("design", e.to_string()))?;

        let mut entries = Vec::with_capacity(config.grid.len());
        for (i, cell) in config.grid.iter().enumerate() {
            let path = |f: &str| format!("grid[{i}].{f}");
            let ets: Ets = cell.ets.parse().map_err(|e: Error| Error::config(path("ets"), e.to_string()))?;
            let slot = OutcomeSlot::new(ets, cell.time);
            if !slot.is_valid(design.split(), design.occasions()) {
                return Err(Error::config(path("time"), format!("{slot} does not exist in this design")));
            }
            let zeta = match (cell.dispersion, cell.zero_proportion) {
                (Some(z), None) => z,
                (None, Some(pi0)) => solve_dispersion_from_zero_mass(cell.mean, pi0)
                    .map_err(|e| Error::config(path("zero_proportion"), e.to_string()))?,
                _ => {
                    return Err(Error::config(
                        format!("grid[{i}]"),
                        "exactly one of `dispersion` and `zero_proportion` is required",
                    ))
                }
            };
            let nb = NbParams::new(cell.mean, zeta).map_err(|e| Error::config(format!("grid[{i}]"), e.to_string()))?;
            entries.push((slot, nb));
        }
        let grid = EtsGrid::new(&design, entries).map_err(|e| Error::config("grid", e.to_string()))?;

        let dep = &config.dependence;
        let dependence = match (dep.rho, dep.target_tau_max) {
            (Some(rho), None) => {
                let spec = match dep.eta {
                    Some(eta) => DependenceSpec::with_eta(dep.structure, rho, eta),
                    None => DependenceSpec::new(dep.structure, rho),
                }
                .map_err(|e| Error::config("dependence", e.to_string()))?;
                validate_dependence(&design, &spec).map_err(|e| Error::config("dependence", e.to_string()))?;
                DependenceChoice::Fixed(spec)
            }
            (None, Some(tau)) => {
                if !(0.0..1.0).contains(&tau) {
                    return Err(Error::config("dependence.target_tau_max", "must lie in [0, 1)"));
                }
                DependenceChoice::Target { structure: dep.structure, tau_max: tau, eta: dep.eta }
            }
            _ => {
                return Err(Error::config(
                    "dependence",
                    "exactly one of `rho` and `target_tau_max` is required",
                ))
            }
        };

        let a = &config.analysis;
        let parse_edtr = |i: usize| -> Result<Edtr> {
            a.pair[i].parse().map_err(|e: Error| Error::config(format!("analysis.pair[{i}]"), e.to_string()))
        };
        let pair = (parse_edtr(0)?, parse_edtr(1)?);
        if pair.0 == pair.1 {
            return Err(Error::config("analysis.pair", "the two regimens must differ"));
        }
        let weights = match (a.estimand, &a.weights) {
            (Estimand::Custom, Some(w)) => {
                if w.len() != design.occasions() {
                    return Err(Error::config(
                        "analysis.weights",
                        format!("{} weights for {} occasions", w.len(), design.occasions()),
                    ));
                }
                ContrastWeights::custom(w.clone()).map_err(|e| Error::config("analysis.weights", e.to_string()))?
            }
            (Estimand::Custom, None) => {
                return Err(Error::config("analysis.weights", "required when estimand = \"custom\""))
            }
            (_, Some(_)) => {
                return Err(Error::config("analysis.weights", "only allowed when estimand = \"custom\""))
            }
            (kind, None) => contrast_weights(kind, design.times()).map_err(|e| Error::config("analysis", e.to_string()))?,
        };
        if !(a.alpha > 0.0 && a.alpha <= 1.0) {
            return Err(Error::config("analysis.alpha", format!("must lie in (0, 1], got {}", a.alpha)));
        }

        let mc = &config.monte_carlo;
        if mc.m == 0 {
            return Err(Error::config("monte_carlo.m", "must be at least 1"));
        }
        if mc.n_grid.is_empty() || mc.n_grid.contains(&0) {
            return Err(Error::config("monte_carlo.n_grid", "must list positive sample sizes"));
        }
        if !(0.0..=1.0).contains(&mc.target_power) {
            return Err(Error::config("monte_carlo.target_power", "must lie in [0, 1]"));
        }
        let cal = &mc.calibration;
        if cal.m == 0 || cal.n_star < 4 || !(cal.grid_step > 0.0 && cal.grid_step < 1.0) {
            return Err(Error::config(
                "monte_carlo.calibration",
                "needs m >= 1, n_star >= 4 and 0 < grid_step < 1",
            ));
        }

        let p = grid.response_probability(Arm::Plus, &design.rule);
        let q = grid.response_probability(Arm::Minus, &design.rule);
        for (name, v) in [("+1", p), ("-1", q)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(
                    "design.response_rule",
                    format!("responder probability under {name} is {v}; both response states must be possible"),
                ));
            }
        }
        if let Some(n4) = mc.n4_override {
            let n_max = *mc.n_grid.iter().max().unwrap();
            crate::trial::subgroup_sizes(n_max, p, q, Some(n4))
                .map_err(|e| Error::config("monte_carlo.n4_override", e.to_string()))?;
        }
        let delta = true_delta(&grid, &design, &weights, pair)?;
        Ok(Self {
            pair,
            weights,
            alpha: a.alpha,
            p,
            q,
            true_delta: delta,
            design,
            grid,
            dependence,
            config,
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.monte_carlo.seed
    }

    pub fn m(&self) -> usize {
        self.config.monte_carlo.m
    }

    pub fn n_grid(&self) -> &[usize] {
        &self.config.monte_carlo.n_grid
    }

    pub fn calibration_options(&self) -> CalibrationOptions {
        let (structure, eta) = match self.dependence {
            DependenceChoice::Fixed(s) => (s.structure, EtaRule::HalfRho),
            DependenceChoice::Target { structure, eta, .. } => {
                (structure, eta.map_or(EtaRule::HalfRho, EtaRule::Fixed))
            }
        };
        let c = &self.config.monte_carlo.calibration;
        CalibrationOptions {
            structure,
            eta,
            m: c.m,
            n_star: c.n_star,
            grid_step: c.grid_step,
            seed: self.seed(),
            ..CalibrationOptions::default()
        }
    }

    pub fn power_config(&self, dependence: DependenceSpec) -> PowerConfig {
        PowerConfig {
            design: self.design.clone(),
            grid: self.grid.clone(),
            dependence,
            pair: self.pair,
            weights: self.weights.clone(),
            alpha: self.alpha,
            m: self.m(),
            master_seed: self.seed(),
            n4_override: self.config.monte_carlo.n4_override,
        }
    }

    /// Derived quantities to show before any simulation.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("responder rate p (a1 = +1): {:.4}\n", self.p));
        s.push_str(&format!("responder rate q (a1 = -1): {:.4}\n", self.q));
        s.push_str(&format!(
            "contrast {} vs {} ({}): true delta = {:.4}\n",
            self.pair.0, self.pair.1, self.weights.kind, self.true_delta
        ));
        match self.dependence {
            DependenceChoice::Fixed(d) => s.push_str(&format!(
                "dependence: {} rho = {}, eta = {}\n",
                d.structure, d.rho, d.eta
            )),
            DependenceChoice::Target { structure, tau_max, .. } => {
                s.push_str(&format!("dependence: {structure}, rho to be calibrated to tau_max = {tau_max}\n"))
            }
        }
        s.push_str("grid (slot: mean, dispersion, zero proportion):\n");
        for (slot, nb) in self.grid.entries() {
            s.push_str(&format!(
                "  {slot}: {:.4}, {:.4}, {:.4}\n",
                nb.mu(),
                nb.zeta(),
                nb.zero_mass()
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Everything needed to re-run an invocation bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software: String,
    pub version: String,
    pub command: Vec<String>,
    pub config_hash: Option<String>,
    pub master_seed: Option<u64>,
    pub threads: usize,
    pub timings: Vec<StageTiming>,
    pub warnings: Vec<String>,
    pub derived: serde_json::Map<String, serde_json::Value>,
    pub config: Option<StudyConfig>,
}

impl RunManifest {
    pub fn new(command: Vec<String>, threads: usize) -> Self {
        Self {
            software: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            config_hash: None,
            master_seed: None,
            threads,
            timings: Vec::new(),
            warnings: Vec::new(),
            derived: serde_json::Map::new(),
            config: None,
        }
    }

    pub fn attach(&mut self, study: &Study) {
        self.config_hash = Some(study.config.hash());
        self.master_seed = Some(study.seed());
        self.config = Some(study.config.clone());
        self.derive("p", study.p);
        self.derive("q", study.q);
        self.derive("true_delta", study.true_delta);
    }

    pub fn derive(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.derived.insert(key.into(), value.into());
    }

    pub fn time(&mut self, stage: &str, seconds: f64) {
        self.timings.push(StageTiming { stage: stage.into(), seconds });
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }
}
