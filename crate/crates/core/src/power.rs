//! Monte Carlo power: simulate `M` trials at a sample size, analyse each and
//! report the rejection fraction; plus curves, sample-size search and
//! sensitivity sweeps.

use std::time::Instant;

use rayon::prelude::*;

use crate::contrast::{critical_value, z_test, ContrastWeights, TestResult};
use crate::copula::{validate_dependence, DependenceSpec};
use crate::design::{Edtr, EtsGrid, TrialDesign};
use crate::error::{Error, Result};
use crate::ipwre::fit_trial;
use crate::streams::replicate_stream;
use crate::trial::{ObservedTrial, SubgroupSizes, TrialGenerator};

#[derive(Debug, Clone, PartialEq)]
pub struct PowerConfig {
    pub design: TrialDesign,
    pub grid: EtsGrid,
    pub dependence: DependenceSpec,
    pub pair: (Edtr, Edtr),
    pub weights: ContrastWeights,
    pub alpha: f64,
    pub m: usize,
    pub master_seed: u64,
    pub n4_override: Option<usize>,
}

impl PowerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pair.0 == self.pair.1 {
            return Err(Error::Domain(format!("the compared regimens must differ, got {} twice", self.pair.0)));
        }
        if self.m == 0 {
            return Err(Error::Domain("at least one Monte Carlo replicate is required".into()));
        }
        if self.weights.len() != self.design.occasions() {
            return Err(Error::Shape(format!(
                "{} contrast weights for {} occasions",
                self.weights.len(),
                self.design.occasions()
            )));
        }
        critical_value(self.alpha)?;
        validate_dependence(&self.design, &self.dependence)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerEstimate {
    pub n: usize,
    pub power: f64,
    pub mc_se: f64,
    pub failed: usize,
    pub replicates: usize,
    pub elapsed_seconds: f64,
}

impl PowerEstimate {
    fn from_results<'a>(n: usize, results: impl Iterator<Item = &'a Result<TestResult>>, elapsed: f64) -> Self {
        let (mut ok, mut rej, mut failed) = (0usize, 0usize, 0usize);
        for r in results {
            match r {
                Ok(t) => {
                    ok += 1;
                    rej += usize::from(t.reject);
                }
                Err(_) => failed += 1,
            }
        }
        let (power, mc_se) = if ok == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let p = rej as f64 / ok as f64;
            (p, (p * (1.0 - p) / ok as f64).sqrt())
        };
        Self { n, power, mc_se, failed, replicates: ok + failed, elapsed_seconds: elapsed }
    }

    /// Equality ignoring wall-clock time.
    pub fn same_result(&self, other: &Self) -> bool {
        self.n == other.n
            && self.power.to_bits() == other.power.to_bits()
            && self.mc_se.to_bits() == other.mc_se.to_bits()
            && self.failed == other.failed
            && self.replicates == other.replicates
    }
}

/// Rejection rate together with the sampling behaviour of the estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSummary {
    pub estimate: PowerEstimate,
    pub mean_delta: f64,
    pub bias: f64,
    /// Monte Carlo standard deviation of the estimated contrast.
    pub empirical_sd: f64,
    /// Average of the estimated standard errors.
    pub mean_se: f64,
}

impl ReplicateSummary {
    pub fn from_results<'a>(
        n: usize,
        results: impl Iterator<Item = &'a Result<TestResult>> + Clone,
        truth: f64,
        elapsed: f64,
    ) -> Self {
        let estimate = PowerEstimate::from_results(n, results.clone(), elapsed);
        let ok: Vec<&TestResult> = results.filter_map(|r| r.as_ref().ok()).collect();
        let k = ok.len() as f64;
        let mean_delta = ok.iter().map(|t| t.delta_hat).sum::<f64>() / k;
        let var = ok.iter().map(|t| (t.delta_hat - mean_delta).powi(2)).sum::<f64>() / (k - 1.0);
        let mean_se = ok.iter().map(|t| t.std_error()).sum::<f64>() / k;
        Self { estimate, mean_delta, bias: mean_delta - truth, empirical_sd: var.sqrt(), mean_se }
    }
}

/// A configuration with its samplers prepared.
#[derive(Debug, Clone)]
pub struct PowerEngine {
    cfg: PowerConfig,
    generator: TrialGenerator,
}

impl PowerEngine {
    pub fn new(cfg: PowerConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = TrialGenerator::new(&cfg.design, &cfg.grid, &cfg.dependence)?;
        Ok(Self { cfg, generator })
    }

    pub fn config(&self) -> &PowerConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &TrialGenerator {
        &self.generator
    }

    pub fn sizes(&self, n: usize) -> Result<SubgroupSizes> {
        self.generator.sizes(n, self.cfg.n4_override)
    }

    /// The observed trial of replicate `rep` at sample size `n`.
    pub fn simulate(&self, n: usize, rep: usize) -> Result<ObservedTrial> {
        let sizes = self.sizes(n)?;
        Ok(self.simulate_with(&sizes, n, rep))
    }

    fn simulate_with(&self, sizes: &SubgroupSizes, n: usize, rep: usize) -> ObservedTrial {
        let mut rng = replicate_stream(self.cfg.master_seed, n, rep);
        self.generator.simulate(sizes, &mut rng)
    }

    /// Fit and test one dataset under each weight vector.
    pub fn analyze(&self, trial: &ObservedTrial, weights: &[ContrastWeights]) -> Vec<Result<TestResult>> {
        match fit_trial(trial, &self.cfg.design) {
            Ok(fit) => weights
                .iter()
                .map(|l| z_test(&fit.beta, &fit.covariance, self.cfg.pair, l, &self.cfg.design, self.cfg.alpha))
                .collect(),
            Err(e) => vec![Err(e); weights.len()],
        }
    }

    /// Per-replicate test results, indexed `[replicate][weight]`.
    pub fn replicate_results(&self, n: usize, weights: &[ContrastWeights]) -> Result<Vec<Vec<Result<TestResult>>>> {
        for l in weights {
            if l.len() != self.cfg.design.occasions() {
                return Err(Error::Shape("contrast weights do not match the design".into()));
            }
        }
        let sizes = self.sizes(n)?;
        Ok((0..self.cfg.m)
            .into_par_iter()
            .map(|rep| self.analyze(&self.simulate_with(&sizes, n, rep), weights))
            .collect())
    }

    /// Power under several weight vectors, sharing the simulated datasets.
    pub fn estimate_multi(&self, n: usize, weights: &[ContrastWeights]) -> Result<Vec<PowerEstimate>> {
        let start = Instant::now();
        let res = self.replicate_results(n, weights)?;
        let elapsed = start.elapsed().as_secs_f64();
        Ok((0..weights.len())
            .map(|w| PowerEstimate::from_results(n, res.iter().map(|r| &r[w]), elapsed))
            .collect())
    }

    pub fn estimate(&self, n: usize) -> Result<PowerEstimate> {
        let w = [self.cfg.weights.clone()];
        Ok(self.estimate_multi(n, &w)?.remove(0))
    }

    pub fn curve(&self, n_grid: &[usize]) -> Result<Vec<PowerEstimate>> {
        n_grid.iter().map(|&n| self.estimate(n)).collect()
    }
}

pub fn estimate_power(cfg: &PowerConfig, n: usize) -> Result<PowerEstimate> {
    PowerEngine::new(cfg.clone())?.estimate(n)
}

pub fn power_curve(cfg: &PowerConfig, n_grid: &[usize]) -> Result<Vec<PowerEstimate>> {
    PowerEngine::new(cfg.clone())?.curve(n_grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSizeSearch {
    pub target_power: f64,
    /// Smallest grid size reaching the target, if any.
    pub n: Option<usize>,
    pub curve: Vec<PowerEstimate>,
}

/// Smallest sample size on the grid whose estimated power reaches `target_power`.
pub fn find_sample_size(cfg: &PowerConfig, target_power: f64, n_grid: &[usize]) -> Result<SampleSizeSearch> {
    if !(0.0..=1.0).contains(&target_power) {
        return Err(Error::Domain(format!("target power must lie in [0, 1], got {target_power}")));
    }
    let mut grid = n_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() {
        return Err(Error::Domain("sample-size grid is empty".into()));
    }
    let curve = power_curve(cfg, &grid)?;
    let n = curve.iter().find(|e| e.power >= target_power).map(|e| e.n);
    Ok(SampleSizeSearch { target_power, n, curve })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Eta,
    N4,
}

/// Power at a fixed sample size as one working assumption varies.
pub fn sensitivity_sweep(cfg: &PowerConfig, axis: SweepAxis, values: &[f64], n: usize) -> Vec<Result<PowerEstimate>> {
    values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            match axis {
                SweepAxis::Eta => {
                    c.dependence = DependenceSpec::with_eta(c.dependence.structure, c.dependence.rho, v)?;
                }
                SweepAxis::N4 => {
                    if !(v >= 0.0 && v.fract() == 0.0) {
                        return Err(Error::Domain(format!("n4 must be a nonnegative integer, got {v}")));
                    }
                    c.n4_override = Some(v as usize);
                }
            }
            estimate_power(&c, n)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrast::{contrast_weights, Estimand};
    use crate::copula::Structure;
    use crate::distributions::{NbParams, ResponseRule};

    fn cfg(effect: f64, m: usize) -> PowerConfig {
        let design = TrialDesign::monthly(4, 2, ResponseRule::AtMost { c: 1 }).unwrap();
        let grid = EtsGrid::from_fn(&design, |s| {
            let bump = match s.ets {
                crate::design::Ets::Stage2(c) if c.a1() == crate::design::Arm::Plus => effect,
                _ => 0.0,
            };
            NbParams::new(2.0 + bump, 0.8)
        })
        .unwrap();
        PowerConfig {
            weights: contrast_weights(Estimand::EndOfStudy, design.times()).unwrap(),
            design,
            grid,
            dependence: DependenceSpec::new(Structure::Ar1, 0.4).unwrap(),
            pair: ("(+1,+1)".parse().unwrap(), "(-1,+1)".parse().unwrap()),
            alpha: 0.05,
            m,
            master_seed: 42,
            n4_override: None,
        }
    }

    #[test]
    fn alpha_one_gives_full_power() {
        let mut c = cfg(0.0, 30);
        c.alpha = 1.0;
        let e = estimate_power(&c, 120).unwrap();
        assert_eq!(e.power, 1.0);
        assert_eq!(e.failed, 0);
        assert_eq!(e.mc_se, 0.0);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let c = cfg(0.5, 40);
        let run = |k| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .unwrap()
                .install(|| estimate_power(&c, 150).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert!(a.same_result(&b));
    }

    #[test]
    fn larger_effect_has_more_power() {
        let lo = estimate_power(&cfg(0.2, 150), 200).unwrap();
        let hi = estimate_power(&cfg(1.5, 150), 200).unwrap();
        assert!(hi.power > lo.power);
        assert!(hi.power > 0.8);
    }

    #[test]
    fn single_value_sweep_equals_estimate() {
        let c = cfg(0.5, 25);
        let direct = estimate_power(&c, 100).unwrap();
        let sw = sensitivity_sweep(&c, SweepAxis::Eta, &[c.dependence.eta], 100);
        assert!(sw[0].as_ref().unwrap().same_result(&direct));
    }

    #[test]
    fn sample_size_search_definition() {
        let c = cfg(1.0, 40);
        let s = find_sample_size(&c, 0.0, &[200, 100, 150]).unwrap();
        assert_eq!(s.n, Some(100));
        assert_eq!(s.curve.len(), 3);
        let s = find_sample_size(&c, 1.0 + 1e-12, &[100]);
        assert!(s.is_err());
    }

    #[test]
    fn config_errors_abort() {
        let mut c = cfg(0.0, 10);
        c.pair.1 = c.pair.0;
        assert!(estimate_power(&c, 100).is_err());
        let mut c = cfg(0.0, 10);
        c.dependence = DependenceSpec::with_eta(Structure::Ar1, 0.6, 0.95).unwrap();
        assert!(matches!(estimate_power(&c, 100), Err(Error::NotPositiveDefinite { .. })));
    }
}
