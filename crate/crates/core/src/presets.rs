//! Built-in scenario configurations.

use crate::config::{AnalysisSection, DependenceSection, DesignSection, GridCell, MonteCarloSection, StudyConfig};
use crate::contrast::Estimand;
use crate::copula::Structure;
use crate::design::{Arm, Ets, TrialDesign};
use crate::distributions::ResponseRule;
use crate::error::{Error, Result};

const OCCASIONS: usize = 6;
const SPLIT: usize = 2;
const BASE_POST: [f64; 4] = [2.6, 2.7, 2.75, 2.8];

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: String,
    pub config: StudyConfig,
    pub warnings: Vec<String>,
}

pub fn preset_names() -> Vec<String> {
    let mut v: Vec<String> = (1..=10).map(|k| format!("table3-scenario-{k}")).collect();
    v.extend((1..=3).map(|k| format!("webtable6-scenario-{k}")));
    v
}

pub fn preset(name: &str) -> Result<Preset> {
    let unknown = || Error::config("preset", format!("unknown preset `{name}`; see `presets`"));
    let (family, k) = name.rsplit_once('-').ok_or_else(unknown)?;
    let k: usize = k.parse().map_err(|_| unknown())?;
    match family {
        "table3-scenario" if (1..=10).contains(&k) => Ok(Preset {
            name: name.into(),
            config: effect_scenario(k),
            warnings: Vec::new(),
        }),
        "webtable6-scenario" if (1..=3).contains(&k) => {
            let warnings = if k == 2 {
                Vec::new()
            } else {
                let implied = if k == 1 { 0.20 } else { 0.60 };
                vec![format!(
                    "{name}: the listed zero proportions (0.40 at t1 and t2) disagree with the listed dispersions, \
                     which imply about {implied:.2} everywhere; the dispersions are used"
                )]
            };
            Ok(Preset { name: name.into(), config: null_scenario(k), warnings })
        }
        _ => Err(unknown()),
    }
}

fn design_section() -> DesignSection {
    DesignSection {
        occasions: OCCASIONS,
        split: SPLIT,
        times: None,
        response_rule: ResponseRule::AtMost { c: 0 },
        p_a1: 0.5,
        p_a2: 0.5,
    }
}

fn analysis_section() -> AnalysisSection {
    AnalysisSection {
        pair: ["(+1,+1)".into(), "(-1,+1)".into()],
        estimand: Estimand::EndOfStudy,
        weights: None,
        alpha: 0.05,
    }
}

fn slots() -> Vec<(Ets, usize)> {
    let design = TrialDesign::monthly(OCCASIONS, SPLIT, ResponseRule::AtMost { c: 0 }).expect("valid design");
    design.all_slots().into_iter().map(|s| (s.ets, s.time)).collect()
}

fn base_mean(j: usize) -> f64 {
    match j {
        1 => 2.5,
        2 => 4.8,
        _ => BASE_POST[j - 3],
    }
}

/// Scenario `k` raises the `+1` first-stage means after the split by
/// `7k%` at t3..t5 and `10k%` at t6; every zero proportion is 0.40.
pub fn effect_scenario(k: usize) -> StudyConfig {
    let grid = slots()
        .into_iter()
        .map(|(ets, j)| {
            let lift = match ets {
                Ets::Stage2(c) if c.a1() == Arm::Plus => {
                    if j == OCCASIONS {
                        1.0 + 0.10 * k as f64
                    } else {
                        1.0 + 0.07 * k as f64
                    }
                }
                _ => 1.0,
            };
            GridCell {
                ets: ets.to_string(),
                time: j,
                mean: round6(base_mean(j) * lift),
                dispersion: None,
                zero_proportion: Some(0.40),
            }
        })
        .collect();
    StudyConfig {
        design: design_section(),
        dependence: DependenceSection { structure: Structure::Ar1, rho: Some(0.6), target_tau_max: None, eta: None },
        analysis: analysis_section(),
        monte_carlo: MonteCarloSection::default(),
        grid,
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

const NULL_DISPERSIONS: [[f64; 6]; 3] = [
    [0.51, 1.18, 0.55, 0.60, 0.62, 0.63],
    [1.92, 2.98, 1.98, 2.05, 2.08, 2.11],
    [5.15, 6.91, 5.26, 5.36, 5.41, 5.46],
];

/// Null scenario `s`: identical means and dispersions under every regimen.
pub fn null_scenario(s: usize) -> StudyConfig {
    let zeta = NULL_DISPERSIONS[s - 1];
    let grid = slots()
        .into_iter()
        .map(|(ets, j)| GridCell {
            ets: ets.to_string(),
            time: j,
            mean: base_mean(j),
            dispersion: Some(zeta[j - 1]),
            zero_proportion: None,
        })
        .collect();
    StudyConfig {
        design: design_section(),
        dependence: DependenceSection { structure: Structure::Ar1, rho: Some(0.2), target_tau_max: None, eta: None },
        analysis: analysis_section(),
        monte_carlo: MonteCarloSection::default(),
        grid,
    }
}
