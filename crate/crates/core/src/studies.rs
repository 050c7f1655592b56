//! Simulation-study harnesses: power curves, calibration, null behaviour and
//! the two working-assumption sweeps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::calibration::{CalibrationOptions, CalibrationRun, EtaRule};
use crate::config::Study;
use crate::contrast::{contrast_weights, true_delta, ContrastWeights, Estimand};
use crate::copula::{DependenceSpec, Structure};
use crate::error::{Error, Result};
use crate::power::{PowerConfig, PowerEngine, ReplicateSummary};
use crate::presets::{effect_scenario, null_scenario};

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub m: usize,
    pub seed: u64,
    pub scenarios: Vec<usize>,
    pub structures: Vec<Structure>,
    pub rhos: Vec<f64>,
    pub n_grid: Vec<usize>,
    /// Swept values (eta or n4) for the sensitivity studies.
    pub values: Vec<f64>,
    /// Individuals per calibration dataset.
    pub n_star: usize,
}

impl Plan {
    /// Defaults for study `id`; `full` switches to 5000 replicates.
    pub fn for_study(id: u8, full: bool) -> Result<Self> {
        let desk_m = match id {
            1 | 4 | 5 => 200,
            2 => 200,
            3 => 500,
            _ => return Err(Error::config("replicate-study", format!("unknown study {id}; expected 1 to 5"))),
        };
        let all: Vec<usize> = (1..=10).collect();
        let mut plan = Plan {
            m: if full { 5000 } else { desk_m },
            seed: 20_240_601,
            scenarios: all,
            structures: vec![Structure::Ar1, Structure::Exchangeable],
            rhos: vec![0.2, 0.4, 0.6],
            n_grid: crate::config::default_n_grid(),
            values: Vec::new(),
            n_star: 1000,
        };
        match id {
            2 => plan.scenarios = if full { (1..=10).collect() } else { vec![10] },
            3 => {
                plan.scenarios = vec![1, 2, 3];
                plan.structures = vec![Structure::Ar1];
            }
            4 => {
                plan.structures = vec![Structure::Ar1];
                plan.rhos = vec![0.6];
                plan.n_grid = vec![500];
                plan.values = (0..=9).map(|i| i as f64 * 0.05).collect();
            }
            5 => {
                plan.structures = vec![Structure::Ar1];
                plan.rhos = vec![0.6];
                plan.n_grid = vec![500];
                plan.values = vec![100.0, 150.0, 200.0, 250.0, 300.0];
            }
            _ => {}
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerRow {
    pub scenario: usize,
    pub structure: Structure,
    pub rho: f64,
    pub eta: f64,
    pub n4: Option<usize>,
    pub n: usize,
    pub estimand: Estimand,
    pub true_delta: f64,
    pub power: f64,
    pub mc_se: f64,
    pub failed: usize,
    pub mean_delta: f64,
    pub bias: f64,
    pub empirical_sd: f64,
    pub mean_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauRow {
    pub scenario: usize,
    pub structure: Structure,
    pub rho: f64,
    pub tau_hat: f64,
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathRow {
    pub scenario: usize,
    pub structure: Structure,
    pub rho: f64,
    pub path: char,
    pub i: usize,
    pub j: usize,
    pub corr: f64,
}

fn both_weights(study: &Study) -> Result<[ContrastWeights; 2]> {
    let t = study.design.times();
    Ok([contrast_weights(Estimand::EndOfStudy, t)?, contrast_weights(Estimand::Auc, t)?])
}

/// Both estimands on shared datasets at one configuration and sample size.
#[allow(clippy::too_many_arguments)]
fn power_point(
    study: &Study,
    scenario: usize,
    dependence: DependenceSpec,
    n4: Option<usize>,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<PowerRow>> {
    let weights = both_weights(study)?;
    let cfg = PowerConfig {
        m,
        master_seed: seed,
        n4_override: n4,
        ..study.power_config(dependence)
    };
    let engine = PowerEngine::new(cfg)?;
    let start = Instant::now();
    let res = engine.replicate_results(n, &weights)?;
    let elapsed = start.elapsed().as_secs_f64();
    weights
        .iter()
        .enumerate()
        .map(|(w, l)| {
            let truth = true_delta(&study.grid, &study.design, l, study.pair)?;
            let s = ReplicateSummary::from_results(n, res.iter().map(|r| &r[w]), truth, elapsed);
            Ok(PowerRow {
                scenario,
                structure: dependence.structure,
                rho: dependence.rho,
                eta: dependence.eta,
                n4,
                n,
                estimand: l.kind,
                true_delta: truth,
                power: s.estimate.power,
                mc_se: s.estimate.mc_se,
                failed: s.estimate.failed,
                mean_delta: s.mean_delta,
                bias: s.bias,
                empirical_sd: s.empirical_sd,
                mean_se: s.mean_se,
            })
        })
        .collect()
}

/// Power curves over the sample-size grid.
pub fn power_curves(plan: &Plan) -> Result<Vec<PowerRow>> {
    let mut rows = Vec::new();
    for &k in &plan.scenarios {
        let study = effect_scenario(k).resolve()?;
        for &structure in &plan.structures {
            for &rho in &plan.rhos {
                let dep = DependenceSpec::new(structure, rho)?;
                for &n in &plan.n_grid {
                    rows.extend(power_point(&study, k, dep, None, n, plan.m, plan.seed)?);
                }
            }
        }
    }
    Ok(rows)
}

/// Empirical tau_max and path correlations at each latent correlation.
pub fn calibration_replication(plan: &Plan) -> Result<(Vec<TauRow>, Vec<PathRow>)> {
    let (mut taus, mut paths) = (Vec::new(), Vec::new());
    for &k in &plan.scenarios {
        let study = effect_scenario(k).resolve()?;
        for &structure in &plan.structures {
            let run = CalibrationRun {
                design: &study.design,
                grid: &study.grid,
                opts: CalibrationOptions {
                    structure,
                    eta: EtaRule::HalfRho,
                    m: plan.m,
                    n_star: plan.n_star,
                    seed: plan.seed,
                    ..CalibrationOptions::default()
                },
            };
            for (gi, &rho) in plan.rhos.iter().enumerate() {
                let (pt, pc) = run.tau_and_paths_at(rho, gi)?;
                taus.push(TauRow { scenario: k, structure, rho, tau_hat: pt.tau_hat, mc_se: pt.mc_se });
                paths.extend(pc.long_rows().into_iter().map(|(path, i, j, corr)| PathRow {
                    scenario: k,
                    structure,
                    rho,
                    path,
                    i,
                    j,
                    corr,
                }));
            }
        }
    }
    Ok((taus, paths))
}

/// Rejection rate, bias and standard-error behaviour under the null scenarios.
pub fn null_behaviour(plan: &Plan) -> Result<Vec<PowerRow>> {
    let mut rows = Vec::new();
    for &s in &plan.scenarios {
        let study = null_scenario(s).resolve()?;
        for &structure in &plan.structures {
            for &rho in &plan.rhos {
                let dep = DependenceSpec::new(structure, rho)?;
                for &n in &plan.n_grid {
                    rows.extend(power_point(&study, s, dep, None, n, plan.m, plan.seed)?);
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Eta,
    N4,
}

/// Power at fixed N as eta or n4 departs from its working value.
pub fn assumption_sweep(plan: &Plan, sweep: Sweep) -> Result<Vec<PowerRow>> {
    let mut rows = Vec::new();
    for &k in &plan.scenarios {
        let study = effect_scenario(k).resolve()?;
        for &structure in &plan.structures {
            for &rho in &plan.rhos {
                for &v in &plan.values {
                    let (dep, n4) = match sweep {
                        Sweep::Eta => (DependenceSpec::with_eta(structure, rho, v)?, None),
                        Sweep::N4 => (DependenceSpec::new(structure, rho)?, Some(v as usize)),
                    };
                    for &n in &plan.n_grid {
                        rows.extend(power_point(&study, k, dep, n4, n, plan.m, plan.seed)?);
                    }
                }
            }
        }
    }
    Ok(rows)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Run study `id` and write its tables into `dir`; returns the files written.
pub fn run_study(id: u8, plan: &Plan, dir: &Path) -> Result<Vec<PathBuf>> {
    let file = |name: &str| dir.join(name);
    let written = match id {
        1 => {
            let p = file("study1_power.csv");
            write_rows(&p, &power_curves(plan)?)?;
            vec![p]
        }
        2 => {
            let (taus, paths) = calibration_replication(plan)?;
            let (a, b) = (file("study2_calibration.csv"), file("study2_path_correlations.csv"));
            write_rows(&a, &taus)?;
            write_rows(&b, &paths)?;
            vec![a, b]
        }
        3 => {
            let p = file("study3_null.csv");
            write_rows(&p, &null_behaviour(plan)?)?;
            vec![p]
        }
        4 => {
            let p = file("study4_eta.csv");
            write_rows(&p, &assumption_sweep(plan, Sweep::Eta)?)?;
            vec![p]
        }
        5 => {
            let p = file("study5_n4.csv");
            write_rows(&p, &assumption_sweep(plan, Sweep::N4)?)?;
            vec![p]
        }
        _ => return Err(Error::config("replicate-study", format!("unknown study {id}; expected 1 to 5"))),
    };
    Ok(written)
}
