//! Inverse-probability weighted and replicated (IPWRE) estimation of the
//! log-linear marginal mean model for embedded regimens.
//!
//! Coefficients are ordered `β_{1,1}`, `β_{2,2..K}` (first stage `+1`),
//! `β_{3,2..K}` (first stage `-1`), then one block of length `T - K` per
//! regimen in the order (+1,+1), (+1,-1), (-1,+1), (-1,-1).

use nalgebra::{DMatrix, DVector};

use crate::design::{Arm, Edtr, TrialDesign};
use crate::error::{Error, Result};
use crate::trial::ObservedTrial;

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-8;
const MAX_HALVINGS: usize = 40;

/// One row of the weighted, replicated analysis dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicatedRow {
    /// Position of the individual in the trial; the sandwich clustering unit.
    pub cluster: usize,
    pub edtr: Edtr,
    /// Occasion index, 1-based.
    pub time: usize,
    pub y: f64,
    pub weight: f64,
}

/// Responders are replicated under both regimens sharing their first-stage
/// option with weight `1/P(A1)`; non-responders appear once with weight
/// `1/(P(A1) P(A2))`.
pub fn build_weighted_replicated_dataset(trial: &ObservedTrial, design: &TrialDesign) -> Vec<ReplicatedRow> {
    let t = design.occasions();
    let mut rows = Vec::with_capacity(trial.len() * t * 2);
    for (cluster, p) in trial.participants.iter().enumerate() {
        let w1 = 1.0 / design.prob_a1(p.a1);
        let mut push = |edtr: Edtr, w: f64| {
            for (j, &y) in p.y.iter().enumerate() {
                rows.push(ReplicatedRow { cluster, edtr, time: j + 1, y: f64::from(y), weight: w });
            }
        };
        match p.a2 {
            None => {
                for a2 in Arm::BOTH {
                    push(Edtr::new(p.a1, a2), w1);
                }
            }
            Some(a2) => push(Edtr::new(p.a1, a2), w1 / design.prob_a2(a2)),
        }
    }
    rows
}

/// Coefficients selected by the model row for `edtr` at occasion `j`.
pub fn coefficient_indices(edtr: Edtr, j: usize, design: &TrialDesign) -> (usize, Option<usize>) {
    let (k, t) = (design.split(), design.occasions());
    debug_assert!((1..=t).contains(&j));
    if j == 1 {
        (0, None)
    } else if j <= k {
        let offset = match edtr.a1 {
            Arm::Plus => 0,
            Arm::Minus => k - 1,
        };
        (0, Some(1 + offset + (j - 2)))
    } else {
        (0, Some(1 + 2 * (k - 1) + edtr.index() * (t - k) + (j - k - 1)))
    }
}

/// Indicator row of the design matrix for `edtr` at occasion `j`.
pub fn design_row(edtr: Edtr, j: usize, design: &TrialDesign) -> DVector<f64> {
    let mut x = DVector::zeros(design.n_coefficients());
    let (a, b) = coefficient_indices(edtr, j, design);
    x[a] = 1.0;
    if let Some(b) = b {
        x[b] = 1.0;
    }
    x
}

/// Human-readable coefficient labels in model order.
pub fn coefficient_names(design: &TrialDesign) -> Vec<String> {
    let (k, t) = (design.split(), design.occasions());
    let mut out = vec!["beta_1_1".to_string()];
    for s in [2, 3] {
        out.extend((2..=k).map(|j| format!("beta_{s}_{j}")));
    }
    for e in Edtr::ALL {
        out.extend((k + 1..=t).map(|j| format!("beta{e}_{j}")));
    }
    out
}

/// Estimating-equation solution with its clustered sandwich covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GeeFit {
    pub beta: DVector<f64>,
    /// Covariance of `beta` itself (not of `sqrt(N) beta`).
    pub covariance: DMatrix<f64>,
    pub iterations: usize,
    /// Largest absolute component of the estimating function at `beta`.
    pub score_norm: f64,
}

struct Prepared {
    idx: Vec<(usize, Option<usize>)>,
}

fn eta(beta: &DVector<f64>, (a, b): (usize, Option<usize>)) -> f64 {
    beta[a] + b.map_or(0.0, |b| beta[b])
}

fn objective(rows: &[ReplicatedRow], prep: &Prepared, beta: &DVector<f64>) -> f64 {
    rows.iter()
        .zip(&prep.idx)
        .map(|(r, &ix)| {
            let e = eta(beta, ix);
            r.weight * (r.y * e - e.exp())
        })
        .sum()
}

fn score_and_information(
    rows: &[ReplicatedRow],
    prep: &Prepared,
    beta: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let p = beta.len();
    let mut u = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    for (r, &(a, b)) in rows.iter().zip(&prep.idx) {
        let mu = eta(beta, (a, b)).exp();
        let res = r.weight * (r.y - mu);
        let wm = r.weight * mu;
        u[a] += res;
        info[(a, a)] += wm;
        if let Some(b) = b {
            u[b] += res;
            info[(b, b)] += wm;
            info[(a, b)] += wm;
            info[(b, a)] += wm;
        }
    }
    (u, info)
}

fn invert_information(info: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    info.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::SingularDesign("information matrix is not positive definite".into()))
}

/// Solve the weighted log-link estimating equations by damped Fisher scoring
/// and return the individual-clustered sandwich covariance.
pub fn fit_gee(rows: &[ReplicatedRow], design: &TrialDesign) -> Result<GeeFit> {
    let p = design.n_coefficients();
    let prep = Prepared {
        idx: rows.iter().map(|r| coefficient_indices(r.edtr, r.time, design)).collect(),
    };

    let mut reach = vec![0.0; p];
    for (r, &(a, b)) in rows.iter().zip(&prep.idx) {
        if !(r.weight > 0.0 && r.y >= 0.0 && r.y.is_finite()) {
            return Err(Error::Domain(format!("row with weight {} and count {}", r.weight, r.y)));
        }
        reach[a] += r.weight;
        if let Some(b) = b {
            reach[b] += r.weight;
        }
    }
    if let Some(i) = reach.iter().position(|&w| w == 0.0) {
        return Err(Error::SingularDesign(format!(
            "coefficient {} has no supporting observations",
            coefficient_names(design)[i]
        )));
    }

    let (sw, swy) = rows.iter().fold((0.0, 0.0), |(a, b), r| (a + r.weight, b + r.weight * r.y));
    let mut beta = DVector::zeros(p);
    beta[0] = (swy / sw + 0.5).ln();

    let mut q = objective(rows, &prep, &beta);
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (u, info) = score_and_information(rows, &prep, &beta);
        let chol = info
            .cholesky()
            .ok_or_else(|| Error::SingularDesign("information matrix is not positive definite".into()))?;
        let delta = chol.solve(&u);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = &beta + &delta * scale;
            let qc = objective(rows, &prep, &cand);
            if qc.is_finite() && qc >= q - 1e-12 * q.abs().max(1.0) {
                accepted = Some((cand, qc));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, qc)) = accepted else {
            return Err(Error::Divergence { iterations, last_step });
        };
        last_step = delta.amax() * scale;
        beta = cand;
        q = qc;
        if last_step < TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Divergence { iterations, last_step });
    }

    let (u, info) = score_and_information(rows, &prep, &beta);
    let a_inv = invert_information(&info)?;
    let n_clusters = rows.iter().map(|r| r.cluster + 1).max().unwrap_or(0);
    let mut per_cluster = DMatrix::<f64>::zeros(p, n_clusters);
    for (r, &(a, b)) in rows.iter().zip(&prep.idx) {
        let res = r.weight * (r.y - eta(&beta, (a, b)).exp());
        per_cluster[(a, r.cluster)] += res;
        if let Some(b) = b {
            per_cluster[(b, r.cluster)] += res;
        }
    }
    let meat = &per_cluster * per_cluster.transpose();
    let mut covariance = &a_inv * meat * &a_inv;
    covariance = (&covariance + covariance.transpose()) * 0.5;
    Ok(GeeFit { beta, covariance, iterations, score_norm: u.amax() })
}

/// Weighting, replication and fitting in one call.
pub fn fit_trial(trial: &ObservedTrial, design: &TrialDesign) -> Result<GeeFit> {
    if trial.occasions != design.occasions() {
        return Err(Error::Shape(format!(
            "dataset has {} occasions, design has {}",
            trial.occasions,
            design.occasions()
        )));
    }
    fit_gee(&build_weighted_replicated_dataset(trial, design), design)
}
