//! Shared fixtures for the benchmarks.

use smartsize_core::config::DependenceChoice;
use smartsize_core::presets::effect_scenario;
use smartsize_core::{PowerEngine, Study};

/// A resolved effect scenario with its engine at `m` replicates.
pub fn fixture(scenario: usize, m: usize) -> (Study, PowerEngine) {
    let mut cfg = effect_scenario(scenario);
    cfg.monte_carlo.m = m;
    let study = cfg.resolve().expect("preset resolves");
    let dep = match study.dependence {
        DependenceChoice::Fixed(d) => d,
        DependenceChoice::Target { .. } => unreachable!("presets fix rho"),
    };
    let engine = PowerEngine::new(study.power_config(dep)).expect("preset is valid");
    (study, engine)
}
