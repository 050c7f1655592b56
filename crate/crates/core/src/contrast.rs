//! Contrast weights, regimen selector matrices, the planned effect size and
//! the delta-method Wald test comparing two embedded regimens.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::copula::std_normal_cdf;
use crate::design::{Edtr, Ets, EtsGrid, TrialDesign};
use crate::error::{Error, Result};
use crate::ipwre::{coefficient_indices, design_row};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    EndOfStudy,
    Auc,
    Custom,
}

impl std::fmt::Display for Estimand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimand::EndOfStudy => "end_of_study",
            Estimand::Auc => "auc",
            Estimand::Custom => "custom",
        })
    }
}

/// Weights `l_1..l_T` of the contrast `sum_j l_j (mu'_j - mu''_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastWeights {
    pub kind: Estimand,
    pub l: Vec<f64>,
}

impl ContrastWeights {
    pub fn custom(l: Vec<f64>) -> Result<Self> {
        if l.is_empty() || l.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("custom weights must be finite and nonempty".into()));
        }
        Ok(Self { kind: Estimand::Custom, l })
    }

    pub fn len(&self) -> usize {
        self.l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l.is_empty()
    }
}

/// End-of-study or trapezoidal AUC weights over the measurement times.
pub fn contrast_weights(kind: Estimand, times: &[f64]) -> Result<ContrastWeights> {
    let t = times.len();
    if t < 2 || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("need at least two strictly increasing times".into()));
    }
    let l = match kind {
        Estimand::EndOfStudy => {
            let mut l = vec![0.0; t];
            l[t - 1] = 1.0;
            l
        }
        Estimand::Auc => (0..t)
            .map(|j| {
                let lo = times[j.saturating_sub(1)];
                let hi = times[(j + 1).min(t - 1)];
                (hi - lo) / 2.0
            })
            .collect(),
        Estimand::Custom => {
            return Err(Error::Domain("custom weights must be supplied explicitly".into()))
        }
    };
    Ok(ContrastWeights { kind, l })
}

/// `T x p` matrix whose row `j` is the model row of `edtr` at occasion `j`.
pub fn selector_matrix(edtr: Edtr, design: &TrialDesign) -> DMatrix<f64> {
    let t = design.occasions();
    let p = design.n_coefficients();
    let mut c = DMatrix::zeros(t, p);
    for j in 1..=t {
        c.set_row(j - 1, &design_row(edtr, j, design).transpose());
    }
    c
}

/// Fitted mean trajectory `exp(C beta)` of a regimen.
pub fn mean_trajectory(beta: &DVector<f64>, edtr: Edtr, design: &TrialDesign) -> Vec<f64> {
    (1..=design.occasions())
        .map(|j| {
            let (a, b) = coefficient_indices(edtr, j, design);
            (beta[a] + b.map_or(0.0, |b| beta[b])).exp()
        })
        .collect()
}

fn check_weights(l: &ContrastWeights, design: &TrialDesign) -> Result<()> {
    if l.len() != design.occasions() {
        return Err(Error::Shape(format!(
            "{} contrast weights for {} occasions",
            l.len(),
            design.occasions()
        )));
    }
    Ok(())
}

/// `L exp(C' beta) - L exp(C'' beta)`.
pub fn delta_of_beta(beta: &DVector<f64>, pair: (Edtr, Edtr), l: &ContrastWeights, design: &TrialDesign) -> f64 {
    let m1 = mean_trajectory(beta, pair.0, design);
    let m2 = mean_trajectory(beta, pair.1, design);
    l.l.iter().zip(m1.iter().zip(&m2)).map(|(w, (a, b))| w * (a - b)).sum()
}

/// Gradient of [`delta_of_beta`] in `beta`: the row vector `D U C`.
pub fn delta_gradient(beta: &DVector<f64>, pair: (Edtr, Edtr), l: &ContrastWeights, design: &TrialDesign) -> DVector<f64> {
    let mut g = DVector::zeros(beta.len());
    for (edtr, sign) in [(pair.0, 1.0), (pair.1, -1.0)] {
        let mu = mean_trajectory(beta, edtr, design);
        for j in 1..=design.occasions() {
            let v = sign * l.l[j - 1] * mu[j - 1];
            let (a, b) = coefficient_indices(edtr, j, design);
            g[a] += v;
            if let Some(b) = b {
                g[b] += v;
            }
        }
    }
    g
}

/// Regimen-marginal mean at occasion `j` implied by the elicited grid.
pub fn edtr_mean(grid: &EtsGrid, design: &TrialDesign, edtr: Edtr, j: usize) -> f64 {
    let k = design.split();
    if j == 1 {
        grid.at(Ets::Baseline, 1).mu()
    } else if j <= k {
        grid.at(Ets::Stage1(edtr.a1), j).mu()
    } else {
        let p = grid.response_probability(edtr.a1, &design.rule);
        let resp = grid.at(Ets::Stage2(edtr.responder_cell()), j).mu();
        let non = grid.at(Ets::Stage2(edtr.non_responder_cell()), j).mu();
        p * resp + (1.0 - p) * non
    }
}

/// Planned contrast between two regimens computed from the design inputs.
pub fn true_delta(grid: &EtsGrid, design: &TrialDesign, l: &ContrastWeights, pair: (Edtr, Edtr)) -> Result<f64> {
    check_weights(l, design)?;
    Ok((1..=design.occasions())
        .map(|j| l.l[j - 1] * (edtr_mean(grid, design, pair.0, j) - edtr_mean(grid, design, pair.1, j)))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub delta_hat: f64,
    pub variance_hat: f64,
    pub z: f64,
    pub p_value: f64,
    pub reject: bool,
}

impl TestResult {
    pub fn std_error(&self) -> f64 {
        self.variance_hat.sqrt()
    }
}

/// Two-sided critical value `z_{1 - alpha/2}`.
pub fn critical_value(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - alpha / 2.0))
}

/// Delta-method Wald test of `Delta_Q = 0`.
///
/// `sigma` is the covariance of `beta` itself, so no further division by `N` is applied.
pub fn z_test(
    beta: &DVector<f64>,
    sigma: &DMatrix<f64>,
    pair: (Edtr, Edtr),
    l: &ContrastWeights,
    design: &TrialDesign,
    alpha: f64,
) -> Result<TestResult> {
    check_weights(l, design)?;
    let p = design.n_coefficients();
    if beta.len() != p || sigma.nrows() != p || sigma.ncols() != p {
        return Err(Error::Shape(format!("coefficients and covariance must have dimension {p}")));
    }
    let crit = critical_value(alpha)?;
    let delta_hat = delta_of_beta(beta, pair, l, design);
    let g = delta_gradient(beta, pair, l, design);
    let variance_hat = (g.transpose() * sigma * &g)[(0, 0)];
    if !(variance_hat > 0.0 && variance_hat.is_finite()) {
        return Err(Error::DegenerateVariance(variance_hat));
    }
    let z = delta_hat / variance_hat.sqrt();
    let p_value = (2.0 * std_normal_cdf(-z.abs())).min(1.0);
    Ok(TestResult { delta_hat, variance_hat, z, p_value, reject: z.abs() > crit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{NbParams, ResponseRule};

    fn design() -> TrialDesign {
        TrialDesign::monthly(6, 2, ResponseRule::AtMost { c: 0 }).unwrap()
    }

    fn pair() -> (Edtr, Edtr) {
        ("(+1,+1)".parse().unwrap(), "(-1,+1)".parse().unwrap())
    }

    #[test]
    fn weight_examples() {
        let t: Vec<f64> = (1..=6).map(f64::from).collect();
        assert_eq!(contrast_weights(Estimand::Auc, &t).unwrap().l, [0.5, 1.0, 1.0, 1.0, 1.0, 0.5]);
        assert_eq!(contrast_weights(Estimand::EndOfStudy, &t).unwrap().l, [0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(contrast_weights(Estimand::Auc, &[0.0, 2.0]).unwrap().l, [1.0, 1.0]);
        let uneven = contrast_weights(Estimand::Auc, &[0.0, 1.0, 3.0]).unwrap();
        assert_eq!(uneven.l, [0.5, 1.5, 1.0]);
        assert!(contrast_weights(Estimand::Auc, &[1.0]).is_err());
    }

    #[test]
    fn selector_block_structure() {
        let d = design();
        let c = selector_matrix(pair().0, &d);
        assert_eq!(c.shape(), (6, 19));
        // first column all ones, stage-one +1 coefficient at t2, arm block (+1,+1) in columns 3..7
        assert!(c.column(0).iter().all(|&v| v == 1.0));
        assert_eq!(c[(1, 1)], 1.0);
        for j in 2..6 {
            assert_eq!(c[(j, 3 + j - 2)], 1.0);
            assert_eq!(c.row(j).sum(), 2.0);
        }
        assert!(c.columns(7, 12).iter().all(|&v| v == 0.0));
        assert_eq!(c.row(0).sum(), 1.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = design();
        let l = contrast_weights(Estimand::Auc, d.times()).unwrap();
        let beta = DVector::from_fn(19, |i, _| 0.9 - 0.05 * i as f64);
        let g = delta_gradient(&beta, pair(), &l, &d);
        let h = 1e-6;
        for i in 0..19 {
            let mut up = beta.clone();
            let mut dn = beta.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (delta_of_beta(&up, pair(), &l, &d) - delta_of_beta(&dn, pair(), &l, &d)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn symmetric_trajectories_give_zero() {
        let d = design();
        let l = contrast_weights(Estimand::EndOfStudy, d.times()).unwrap();
        let beta = DVector::from_element(19, 0.3);
        let sigma = DMatrix::identity(19, 19) * 0.01;
        let r = z_test(&beta, &sigma, pair(), &l, &d, 0.5).unwrap();
        assert_eq!(r.delta_hat, 0.0);
        assert!(!r.reject);
        assert_eq!(r.p_value, 1.0);
        let zero = DMatrix::zeros(19, 19);
        assert!(matches!(z_test(&beta, &zero, pair(), &l, &d, 0.05), Err(Error::DegenerateVariance(_))));
    }

    #[test]
    fn scaling_weights_keeps_decision() {
        let d = design();
        let l = contrast_weights(Estimand::Auc, d.times()).unwrap();
        let l3 = ContrastWeights::custom(l.l.iter().map(|v| 3.0 * v).collect()).unwrap();
        let beta = DVector::from_fn(19, |i, _| 0.2 * ((i * 7) % 5) as f64);
        let sigma = DMatrix::from_fn(19, 19, |i, j| if i == j { 0.02 } else { 0.002 });
        let a = z_test(&beta, &sigma, pair(), &l, &d, 0.05).unwrap();
        let b = z_test(&beta, &sigma, pair(), &l3, &d, 0.05).unwrap();
        assert!((b.delta_hat - 3.0 * a.delta_hat).abs() < 1e-12);
        assert!((b.variance_hat - 9.0 * a.variance_hat).abs() < 1e-12);
        assert!((a.z - b.z).abs() < 1e-12);
        assert_eq!(a.reject, b.reject);
    }

    #[test]
    fn alpha_one_always_rejects_nonzero() {
        let d = design();
        let l = contrast_weights(Estimand::EndOfStudy, d.times()).unwrap();
        let mut beta = DVector::zeros(19);
        beta[6] = 1e-3;
        let r = z_test(&beta, &DMatrix::identity(19, 19), pair(), &l, &d, 1.0).unwrap();
        assert!(r.reject);
    }

    #[test]
    fn identical_grids_have_no_effect() {
        let d = design();
        let grid = EtsGrid::from_fn(&d, |s| NbParams::new(2.0 + s.time as f64, 1.0)).unwrap();
        for kind in [Estimand::EndOfStudy, Estimand::Auc] {
            let l = contrast_weights(kind, d.times()).unwrap();
            assert_eq!(true_delta(&grid, &d, &l, pair()).unwrap(), 0.0);
        }
    }
}
