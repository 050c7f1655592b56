//! Monte Carlo power and sample-size engine for two-stage restricted SMARTs
//! comparing embedded dynamic treatment regimens on longitudinal
//! overdispersed counts.
//!
//! The pipeline per simulated trial is: potential outcomes for four
//! responder subgroups drawn through a Gaussian copula with negative
//! binomial marginals ([`trial`], [`copula`], [`distributions`]), simulated
//! randomisations, an inverse-probability weighted and replicated GEE fit
//! ([`ipwre`]), and a delta-method Wald test of a weighted contrast
//! ([`contrast`]). [`power`] repeats this over counter-keyed random streams;
//! [`calibration`] maps the latent correlation to a count-scale one.

pub mod calibration;
pub mod config;
pub mod contrast;
pub mod copula;
pub mod design;
pub mod distributions;
pub mod error;
pub mod ipwre;
pub mod power;
pub mod presets;
pub mod streams;
pub mod studies;
pub mod trial;

pub use config::{parse_config, RunManifest, Study, StudyConfig};
pub use contrast::{contrast_weights, true_delta, z_test, ContrastWeights, Estimand, TestResult};
pub use copula::{DependenceSpec, Structure};
pub use design::{Arm, Cell, Edtr, Ets, EtsGrid, OutcomeSlot, Subgroup, TrialDesign};
pub use distributions::{NbParams, ResponseRule};
pub use error::{Error, Result};
pub use power::{PowerConfig, PowerEngine, PowerEstimate};
pub use trial::{ObservedTrial, SubgroupSizes, TrialGenerator};
