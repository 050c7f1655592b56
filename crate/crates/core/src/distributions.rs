//! Negative binomial machinery: mass, cumulative and quantile functions,
//! region-truncated variants, dispersion solving from a zero proportion, and
//! responder probabilities under a cut-point rule.
//!
//! The parametrisation is mean/dispersion: `Y ~ NB(mu, zeta)` has mean `mu`
//! and variance `mu + zeta * mu^2`. With size `r = 1/zeta` and success
//! probability `pi = r / (mu + r)` the mass is
//! `Gamma(r + y) / (Gamma(r) y!) * pi^r * (1 - pi)^y`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Smallest admissible mass for a truncation region.
pub const MIN_REGION_MASS: f64 = 1e-12;

/// Hard cap on the support scanned by quantile and table routines.
const MAX_SUPPORT: u64 = 50_000_000;

/// Relative tail mass at which precomputed tables stop.
const TABLE_TAIL: f64 = 1e-15;

/// Mean and dispersion of a negative binomial count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NbParams {
    mu: f64,
    zeta: f64,
}

impl NbParams {
    pub fn new(mu: f64, zeta: f64) -> Result<Self> {
        if !(mu.is_finite() && mu >= 0.0) {
            return Err(Error::Domain(format!("mean must be finite and >= 0, got {mu}")));
        }
        if !(zeta.is_finite() && zeta > 0.0) {
            return Err(Error::Domain(format!("dispersion must be finite and > 0, got {zeta}")));
        }
        Ok(Self { mu, zeta })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    /// Size parameter `1/zeta`.
    pub fn size(&self) -> f64 {
        1.0 / self.zeta
    }

    /// `pi = zeta^-1 / (mu + zeta^-1)`.
    pub fn success_probability(&self) -> f64 {
        1.0 / (1.0 + self.zeta * self.mu)
    }

    pub fn variance(&self) -> f64 {
        self.mu + self.zeta * self.mu * self.mu
    }

    /// `P(Y = 0) = (1 + zeta mu)^(-1/zeta)`.
    pub fn zero_mass(&self) -> f64 {
        zero_mass(self.mu, self.zeta)
    }

    fn ln_pmf(&self, y: u64) -> f64 {
        if self.mu == 0.0 {
            return if y == 0 { 0.0 } else { f64::NEG_INFINITY };
        }
        let r = self.size();
        let zm = self.zeta * self.mu;
        let yf = y as f64;
        let log_pi_term = -zm.ln_1p() / self.zeta;
        let log_q = zm.ln() - zm.ln_1p();
        let comb = ln_gamma(r + yf) - ln_gamma(r) - ln_gamma(yf + 1.0);
        if y == 0 {
            log_pi_term
        } else {
            comb + log_pi_term + yf * log_q
        }
    }
}

/// `P(Y = 0)` for `NB(mu, zeta)`.
pub fn zero_mass(mu: f64, zeta: f64) -> f64 {
    (-(zeta * mu).ln_1p() / zeta).exp()
}

/// Negative binomial probability mass at `y`.
pub fn nb_pmf(y: u64, p: &NbParams) -> f64 {
    p.ln_pmf(y).exp()
}

/// `P(Y <= y)`.
pub fn nb_cdf(y: u64, p: &NbParams) -> f64 {
    let mut acc = 0.0;
    for k in 0..=y {
        acc += nb_pmf(k, p);
        if acc >= 1.0 {
            return 1.0;
        }
    }
    acc
}

/// Smallest `y` with `nb_cdf(y) >= u`.
pub fn nb_quantile(u: f64, p: &NbParams) -> Result<u64> {
    truncated_nb_quantile(u, &CountRegion::All, p)
}

/// Response status definition at the last pre-rerandomisation occasion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResponseRule {
    /// Responder iff `y <= c`.
    AtMost { c: u64 },
    /// Responder iff `y > c`.
    GreaterThan { c: u64 },
    /// Responder iff `lo <= y <= hi`.
    Interval { lo: u64, hi: u64 },
}

impl ResponseRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ResponseRule::Interval { lo, hi } if lo > hi => Err(Error::Domain(format!(
                "interval rule requires lo <= hi, got [{lo}, {hi}]"
            ))),
            _ => Ok(()),
        }
    }

    pub fn is_responder(&self, y: u64) -> bool {
        match *self {
            ResponseRule::AtMost { c } => y <= c,
            ResponseRule::GreaterThan { c } => y > c,
            ResponseRule::Interval { lo, hi } => lo <= y && y <= hi,
        }
    }
}

/// Subset of the nonnegative integers a marginal is truncated to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountRegion {
    All,
    Responder(ResponseRule),
    NonResponder(ResponseRule),
}

impl CountRegion {
    pub fn contains(&self, y: u64) -> bool {
        match self {
            CountRegion::All => true,
            CountRegion::Responder(rule) => rule.is_responder(y),
            CountRegion::NonResponder(rule) => !rule.is_responder(y),
        }
    }

    /// Largest member if the region is bounded above.
    fn upper_bound(&self) -> Option<u64> {
        match *self {
            CountRegion::Responder(ResponseRule::AtMost { c }) => Some(c),
            CountRegion::Responder(ResponseRule::Interval { hi, .. }) => Some(hi),
            CountRegion::NonResponder(ResponseRule::GreaterThan { c }) => Some(c),
            _ => None,
        }
    }

    /// Probability of the region under `p`.
    pub fn mass(&self, p: &NbParams) -> f64 {
        match self {
            CountRegion::All => 1.0,
            CountRegion::Responder(rule) => response_probability(p, rule),
            CountRegion::NonResponder(rule) => 1.0 - response_probability(p, rule),
        }
    }

    fn checked_mass(&self, p: &NbParams) -> Result<f64> {
        let mass = self.mass(p);
        if mass < MIN_REGION_MASS {
            return Err(Error::DegenerateRegion { mass });
        }
        Ok(mass)
    }
}

/// Mass of the responder region of `rule` under `p`.
pub fn response_probability(p: &NbParams, rule: &ResponseRule) -> f64 {
    match *rule {
        ResponseRule::AtMost { c } => nb_cdf(c, p),
        ResponseRule::GreaterThan { c } => 1.0 - nb_cdf(c, p),
        ResponseRule::Interval { lo, hi } => {
            let below = if lo == 0 { 0.0 } else { nb_cdf(lo - 1, p) };
            (nb_cdf(hi, p) - below).max(0.0)
        }
    }
}

pub fn truncated_nb_pmf(y: u64, region: &CountRegion, p: &NbParams) -> Result<f64> {
    let mass = region.checked_mass(p)?;
    if !region.contains(y) {
        return Ok(0.0);
    }
    Ok((nb_pmf(y, p) / mass).min(1.0))
}

pub fn truncated_nb_cdf(y: u64, region: &CountRegion, p: &NbParams) -> Result<f64> {
    let mass = region.checked_mass(p)?;
    let mut acc = 0.0;
    for k in 0..=y {
        if region.contains(k) {
            acc += nb_pmf(k, p);
        }
    }
    Ok((acc / mass).min(1.0))
}

/// Smallest `y` in the region with truncated cdf `>= u`.
pub fn truncated_nb_quantile(u: f64, region: &CountRegion, p: &NbParams) -> Result<u64> {
    if !(0.0..1.0).contains(&u) {
        return Err(Error::Domain(format!("quantile level must lie in [0, 1), got {u}")));
    }
    let mass = region.checked_mass(p)?;
    let target = u.max(f64::MIN_POSITIVE) * mass;
    let mean = p.mu();
    let mut acc = 0.0;
    let mut last_member = None;
    for y in 0..MAX_SUPPORT {
        if !region.contains(y) {
            if region.upper_bound().is_some_and(|b| y > b) {
                break;
            }
            continue;
        }
        let f = nb_pmf(y, p);
        acc += f;
        last_member = Some(y);
        if acc >= target {
            return Ok(y);
        }
        // Past the mode the mass has underflowed: rounding kept the sum below target.
        if f == 0.0 && (y as f64) > mean {
            return Ok(y);
        }
    }
    last_member.ok_or(Error::DegenerateRegion { mass })
}

/// Solve `(1 + zeta mu)^(-1/zeta) = pi0` for the dispersion.
///
/// The zero mass is strictly increasing in `zeta`, from the Poisson floor
/// `exp(-mu)` at `zeta -> 0` towards 1, so bisection on a fixed bracket is safe.
pub fn solve_dispersion_from_zero_mass(mu: f64, pi0: f64) -> Result<f64> {
    const LO: f64 = 1e-8;
    const HI: f64 = 1e4;
    const TOL: f64 = 1e-9;
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::Domain(format!("mean must be finite and > 0, got {mu}")));
    }
    if !(pi0 > 0.0 && pi0 < 1.0) {
        return Err(Error::Domain(format!("zero proportion must lie in (0, 1), got {pi0}")));
    }
    let floor = (-mu).exp();
    if pi0 <= floor {
        return Err(Error::NotNbRepresentable { mu, pi0, floor });
    }
    let f = |z: f64| zero_mass(mu, z) - pi0;
    let (mut lo, mut hi) = (LO, HI);
    if f(lo) > TOL {
        return Err(Error::NotNbRepresentable { mu, pi0, floor });
    }
    if f(hi) < -TOL {
        return Err(Error::Domain(format!(
            "zero proportion {pi0} requires dispersion above {HI} at mean {mu}"
        )));
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if v.abs() <= TOL * 1e-3 || (hi - lo) <= 1e-14 * mid.max(1.0) {
            return Ok(mid);
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// A count marginal with a precomputed cumulative table, used for fast
/// inverse-cdf sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMarginal {
    params: NbParams,
    region: CountRegion,
    cdf: Vec<f64>,
}

impl DiscreteMarginal {
    pub fn new(params: NbParams, region: CountRegion) -> Result<Self> {
        let mass = region.checked_mass(&params)?;
        let mut cdf = Vec::new();
        let mut acc = 0.0;
        let bound = region.upper_bound();
        let mut y = 0u64;
        loop {
            if bound.is_some_and(|b| y > b) {
                break;
            }
            if region.contains(y) {
                let f = nb_pmf(y, &params);
                acc += f;
                if acc >= mass * (1.0 - TABLE_TAIL) || (f == 0.0 && y as f64 > params.mu()) {
                    cdf.push(acc);
                    break;
                }
            }
            cdf.push(acc);
            y += 1;
            if y >= MAX_SUPPORT {
                return Err(Error::Domain(format!(
                    "support of {params:?} exceeds {MAX_SUPPORT} points"
                )));
            }
        }
        let total = *cdf.last().expect("region has positive mass");
        for c in cdf.iter_mut() {
            *c /= total;
        }
        *cdf.last_mut().unwrap() = 1.0;
        Ok(Self { params, region, cdf })
    }

    pub fn untruncated(params: NbParams) -> Result<Self> {
        Self::new(params, CountRegion::All)
    }

    pub fn params(&self) -> &NbParams {
        &self.params
    }

    pub fn region(&self) -> &CountRegion {
        &self.region
    }

    pub fn cdf(&self, y: u64) -> f64 {
        self.cdf.get(y as usize).copied().unwrap_or(1.0)
    }

    pub fn pmf(&self, y: u64) -> f64 {
        let i = y as usize;
        match i {
            0 => self.cdf(0),
            _ if i < self.cdf.len() => self.cdf[i] - self.cdf[i - 1],
            _ => 0.0,
        }
    }

    /// Smallest `y` with `cdf(y) >= u`; `u` is clamped into `(0, 1]`.
    #[inline]
    pub fn quantile(&self, u: f64) -> u32 {
        let u = u.max(f64::MIN_POSITIVE);
        self.cdf.partition_point(|&c| c < u) as u32
    }

    pub fn mean(&self) -> f64 {
        (0..self.cdf.len() as u64).map(|y| y as f64 * self.pmf(y)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nb(mu: f64, zeta: f64) -> NbParams {
        NbParams::new(mu, zeta).unwrap()
    }

    /// Mass by the ratio recurrence f(y+1)/f(y) = (r + y)(1 - pi)/(y + 1).
    fn recurrence_pmf(y: u64, mu: f64, zeta: f64) -> f64 {
        let r = 1.0 / zeta;
        let pi = r / (mu + r);
        let mut f = pi.powf(r);
        for k in 0..y {
            f *= (r + k as f64) * (1.0 - pi) / (k as f64 + 1.0);
        }
        f
    }

    fn summed_cdf(y: u64, mu: f64, zeta: f64) -> f64 {
        (0..=y).map(|k| recurrence_pmf(k, mu, zeta)).sum()
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(NbParams::new(-0.1, 1.0).is_err());
        assert!(NbParams::new(1.0, 0.0).is_err());
        assert!(NbParams::new(f64::NAN, 1.0).is_err());
        assert!(ResponseRule::Interval { lo: 3, hi: 2 }.validate().is_err());
    }

    #[test]
    fn pmf_matches_table_zero_proportion() {
        assert!((nb_pmf(0, &nb(2.5, 1.92)) - 0.40).abs() < 0.005);
        assert!((nb_cdf(0, &nb(2.5, 1.92)) - 0.40).abs() < 0.005);
    }

    #[test]
    fn mean_zero_is_point_mass() {
        let p = nb(0.0, 3.0);
        assert_eq!(nb_pmf(0, &p), 1.0);
        assert_eq!(nb_pmf(1, &p), 0.0);
        assert_eq!(nb_quantile(0.9, &p).unwrap(), 0);
    }

    #[test]
    fn pmf_agrees_with_recurrence() {
        let v = nb_pmf(3, &nb(2.5, 1.92));
        assert!((v - recurrence_pmf(3, 2.5, 1.92)).abs() < 1e-10);
        for (mu, zeta) in [(0.3, 0.1), (4.8, 2.98), (9.0, 6.9)] {
            for y in [0, 1, 7, 25] {
                let a = nb_pmf(y, &nb(mu, zeta));
                let b = recurrence_pmf(y, mu, zeta);
                assert!((a - b).abs() < 1e-12, "{mu} {zeta} {y}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn cdf_agrees_with_summation() {
        let v = nb_cdf(5, &nb(4.8, 2.98));
        assert!((v - summed_cdf(5, 4.8, 2.98)).abs() < 1e-10);
        let p = nb(2.5, 1.92);
        let far = nb_quantile(0.999_999_9, &p).unwrap();
        assert!(1.0 - nb_cdf(far + 10, &p) < 1e-6);
    }

    #[test]
    fn quantile_examples() {
        let p = nb(2.5, 1.92);
        assert_eq!(nb_quantile(0.0, &p).unwrap(), 0);
        assert_eq!(nb_quantile(0.39, &p).unwrap(), 0);
        // cdf scan oracle
        let mut scan = 0;
        while summed_cdf(scan, 2.5, 1.92) < 0.41 {
            scan += 1;
        }
        assert_eq!(nb_quantile(0.41, &p).unwrap(), scan);
        assert!(scan >= 1);
        assert!(nb_quantile(1.0, &p).is_err());
    }

    #[test]
    fn truncated_examples() {
        let p = nb(2.5, 1.92);
        let at_most0 = CountRegion::Responder(ResponseRule::AtMost { c: 0 });
        assert_eq!(truncated_nb_pmf(0, &at_most0, &p).unwrap(), 1.0);
        assert_eq!(truncated_nb_pmf(1, &at_most0, &p).unwrap(), 0.0);
        assert_eq!(truncated_nb_quantile(0.999, &at_most0, &p).unwrap(), 0);

        for y in 0..6 {
            assert_eq!(
                truncated_nb_pmf(y, &CountRegion::All, &p).unwrap(),
                nb_pmf(y, &p)
            );
        }

        let above0 = CountRegion::NonResponder(ResponseRule::AtMost { c: 0 });
        let expected = recurrence_pmf(1, 2.5, 1.92) / (1.0 - recurrence_pmf(0, 2.5, 1.92));
        assert!((truncated_nb_pmf(1, &above0, &p).unwrap() - expected).abs() < 1e-10);
        assert_eq!(truncated_nb_pmf(0, &above0, &p).unwrap(), 0.0);
        assert!(truncated_nb_quantile(0.0, &above0, &p).unwrap() >= 1);
    }

    #[test]
    fn zero_mass_region_is_degenerate() {
        let p = nb(0.0, 1.0);
        let region = CountRegion::NonResponder(ResponseRule::AtMost { c: 0 });
        assert!(matches!(
            truncated_nb_pmf(1, &region, &p),
            Err(Error::DegenerateRegion { .. })
        ));
        assert!(DiscreteMarginal::new(p, region).is_err());
    }

    #[test]
    fn dispersion_solver_reproduces_tabulated_values() {
        for (mu, pi0, zeta) in [(2.5, 0.40, 1.92), (4.8, 0.40, 2.98), (2.5, 0.60, 5.15)] {
            let z = solve_dispersion_from_zero_mass(mu, pi0).unwrap();
            assert!((z - zeta).abs() < 0.01, "{mu} {pi0}: {z}");
            assert!((zero_mass(mu, z) - pi0).abs() <= 1e-9);
        }
    }

    #[test]
    fn dispersion_solver_rejects_poisson_floor() {
        let floor = (-2.5f64).exp();
        assert!(matches!(
            solve_dispersion_from_zero_mass(2.5, floor),
            Err(Error::NotNbRepresentable { .. })
        ));
        assert!(matches!(
            solve_dispersion_from_zero_mass(2.5, 0.05),
            Err(Error::NotNbRepresentable { .. })
        ));
        assert!(matches!(solve_dispersion_from_zero_mass(2.5, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn response_probability_examples() {
        let p = nb(4.8, 2.98);
        let v = response_probability(&p, &ResponseRule::AtMost { c: 0 });
        assert!((v - 0.40).abs() < 0.005);

        let q = nb(2.5, 1.92);
        let hi = nb_quantile(1.0 - 1e-9, &q).unwrap() + 50;
        assert!(response_probability(&q, &ResponseRule::GreaterThan { c: hi }) < 1e-9);

        let v = response_probability(&q, &ResponseRule::Interval { lo: 0, hi: 2 });
        assert!((v - summed_cdf(2, 2.5, 1.92)).abs() < 1e-10);
    }

    #[test]
    fn table_marginal_matches_scans() {
        let p = nb(4.8, 2.98);
        for region in [
            CountRegion::All,
            CountRegion::Responder(ResponseRule::AtMost { c: 2 }),
            CountRegion::NonResponder(ResponseRule::AtMost { c: 2 }),
            CountRegion::NonResponder(ResponseRule::Interval { lo: 2, hi: 4 }),
        ] {
            let m = DiscreteMarginal::new(p, region).unwrap();
            for u in [1e-9, 0.05, 0.3, 0.5, 0.77, 0.99, 0.999_99] {
                assert_eq!(
                    m.quantile(u) as u64,
                    truncated_nb_quantile(u, &region, &p).unwrap(),
                    "{region:?} {u}"
                );
            }
        }
    }
}
