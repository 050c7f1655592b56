//! Latent correlation matrices over a subgroup's potential-outcome slots and
//! Gaussian-copula sampling of correlated counts.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::{Ets, OutcomeSlot, Subgroup, TrialDesign};
use crate::distributions::DiscreteMarginal;
use crate::error::{Error, Result};
use crate::trial::enumerate_slots;

/// Smallest eigenvalue a latent correlation matrix must exceed.
pub const PD_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Ar1,
    Exchangeable,
}

impl std::fmt::Display for Structure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Structure::Ar1 => "ar1",
            Structure::Exchangeable => "exchangeable",
        })
    }
}

/// Within-path latent dependence `rho` and cross-path dependence `eta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DependenceSpec {
    pub structure: Structure,
    pub rho: f64,
    pub eta: f64,
}

impl DependenceSpec {
    /// `eta` defaults to `rho / 2`.
    pub fn new(structure: Structure, rho: f64) -> Result<Self> {
        Self::with_eta(structure, rho, rho / 2.0)
    }

    pub fn with_eta(structure: Structure, rho: f64, eta: f64) -> Result<Self> {
        if !(rho > -1.0 && rho < 1.0) {
            return Err(Error::Domain(format!("rho must lie in (-1, 1), got {rho}")));
        }
        if !(eta > -1.0 && eta < 1.0) {
            return Err(Error::Domain(format!("eta must lie in (-1, 1), got {eta}")));
        }
        Ok(Self { structure, rho, eta })
    }

    pub fn independent() -> Self {
        Self { structure: Structure::Ar1, rho: 0.0, eta: 0.0 }
    }
}

/// Whether two slots lie on a common root-to-leaf path of the SMART.
pub fn same_path(a: &OutcomeSlot, b: &OutcomeSlot) -> bool {
    match (a.ets, b.ets) {
        (Ets::Baseline, _) | (_, Ets::Baseline) => true,
        (Ets::Stage1(x), Ets::Stage1(y)) => x == y,
        (Ets::Stage1(x), Ets::Stage2(c)) | (Ets::Stage2(c), Ets::Stage1(x)) => c.a1() == x,
        (Ets::Stage2(c), Ets::Stage2(d)) => c == d,
    }
}

/// A subgroup's latent correlation matrix, indexed by its ordered slots.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCorrelation {
    pub subgroup: Subgroup,
    pub slots: Vec<OutcomeSlot>,
    pub matrix: DMatrix<f64>,
}

impl LatentCorrelation {
    pub fn dim(&self) -> usize {
        self.slots.len()
    }
}

pub fn build_latent_correlation(
    subgroup: Subgroup,
    design: &TrialDesign,
    spec: &DependenceSpec,
) -> LatentCorrelation {
    let slots = enumerate_slots(subgroup, design);
    let d = slots.len();
    let matrix = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            return 1.0;
        }
        let (a, b) = (&slots[i], &slots[j]);
        if !same_path(a, b) {
            return spec.eta;
        }
        match spec.structure {
            Structure::Ar1 => {
                let lag = (design.time(a.time) - design.time(b.time)).abs();
                spec.rho.powf(lag)
            }
            Structure::Exchangeable => spec.rho,
        }
    });
    LatentCorrelation { subgroup, slots, matrix }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn check_positive_definite(m: &LatentCorrelation) -> Result<f64> {
    min_eigenvalue(&m.matrix)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Shape(format!("matrix is {}x{}", m.nrows(), m.ncols())));
    }
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (m[(i, j)], m[(j, i)]);
            if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::Shape(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    if n == 0 {
        return Ok(f64::INFINITY);
    }
    let eig = SymmetricEigen::new(m.clone());
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Validate positive definiteness of all four subgroup matrices for a design.
pub fn validate_dependence(design: &TrialDesign, spec: &DependenceSpec) -> Result<()> {
    for g in Subgroup::ALL {
        let m = build_latent_correlation(g, design, spec);
        let ev = check_positive_definite(&m)?;
        if ev <= PD_THRESHOLD {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: ev });
        }
    }
    Ok(())
}

/// Standard normal cdf via the complementary error function.
#[inline]
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Row-major `rows x cols` count table.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CountMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u32>,
}

impl CountMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [u32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.data[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = u32> + '_ {
        (0..self.rows).map(move |i| self.get(i, j))
    }
}

/// Cholesky factor and marginals, prepared once and reused across draws.
#[derive(Debug, Clone)]
pub struct CopulaSampler {
    dim: usize,
    /// Packed lower triangle, row by row.
    lower: Vec<f64>,
    marginals: Vec<DiscreteMarginal>,
}

impl CopulaSampler {
    pub fn new(m: &DMatrix<f64>, marginals: Vec<DiscreteMarginal>) -> Result<Self> {
        let d = m.nrows();
        if marginals.len() != d {
            return Err(Error::Shape(format!(
                "{} marginals supplied for a {d}-dimensional correlation matrix",
                marginals.len()
            )));
        }
        let ev = min_eigenvalue(m)?;
        if ev <= PD_THRESHOLD {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: ev });
        }
        let chol = m
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { min_eigenvalue: ev })?;
        let l = chol.l();
        let mut lower = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in 0..=i {
                lower.push(l[(i, j)]);
            }
        }
        Ok(Self { dim: d, lower, marginals })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn marginals(&self) -> &[DiscreteMarginal] {
        &self.marginals
    }

    /// Draw one count vector into `out`, using `eps` as scratch.
    pub fn sample_row<R: Rng + ?Sized>(&self, rng: &mut R, eps: &mut [f64], out: &mut [u32]) {
        let d = self.dim;
        for e in eps.iter_mut().take(d) {
            *e = StandardNormal.sample(rng);
        }
        let mut k = 0;
        for i in 0..d {
            let mut z = 0.0;
            for e in &eps[..=i] {
                z += self.lower[k] * e;
                k += 1;
            }
            out[i] = self.marginals[i].quantile(std_normal_cdf(z));
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> CountMatrix {
        let mut out = CountMatrix::zeros(n, self.dim);
        let mut eps = vec![0.0; self.dim];
        for i in 0..n {
            self.sample_row(rng, &mut eps, out.row_mut(i));
        }
        out
    }
}

/// Draw `n` independent count vectors whose latent normal scores have correlation `m`.
pub fn sample_copula<R: Rng + ?Sized>(
    n: usize,
    m: &LatentCorrelation,
    marginals: &[DiscreteMarginal],
    rng: &mut R,
) -> Result<CountMatrix> {
    Ok(CopulaSampler::new(&m.matrix, marginals.to_vec())?.sample(n, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Cell;
    use crate::distributions::{NbParams, ResponseRule};
    use rand::rngs::ChaCha8Rng;
    use rand::SeedableRng;

    fn design(t: usize, k: usize) -> TrialDesign {
        TrialDesign::monthly(t, k, ResponseRule::AtMost { c: 0 }).unwrap()
    }

    fn slot(ets: &str, t: usize) -> OutcomeSlot {
        OutcomeSlot::new(ets.parse().unwrap(), t)
    }

    #[test]
    fn same_path_examples() {
        assert!(same_path(&slot("(+1)", 2), &slot("(+1,0,+1)", 3)));
        assert!(!same_path(&slot("(+1)", 2), &slot("(-1,0,+1)", 3)));
        for s in [slot("(-1)", 2), slot("(+1,1,0)", 3), slot("(-1,0,-1)", 5)] {
            assert!(same_path(&slot("(.)", 1), &s));
        }
        assert!(!same_path(&slot("(+1,0,+1)", 3), &slot("(+1,0,-1)", 4)));
    }

    /// The 7x7 matrix for the neither-responds subgroup at T=3, K=2, written out by hand.
    #[test]
    fn subgroup4_matrix_matches_hand_layout() {
        let (r, e) = (0.5, 0.2);
        let spec = DependenceSpec::with_eta(Structure::Ar1, r, e).unwrap();
        let m = build_latent_correlation(Subgroup::Neither, &design(3, 2), &spec);
        // order: (.)1, (+1)2, (-1)2, B3, C3, E3, F3
        let r2 = r * r;
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(7, 7, &[
            1.0, r,   r,   r2,  r2,  r2,  r2,
            r,   1.0, e,   r,   r,   e,   e,
            r,   e,   1.0, e,   e,   r,   r,
            r2,  r,   e,   1.0, e,   e,   e,
            r2,  r,   e,   e,   1.0, e,   e,
            r2,  e,   r,   e,   e,   1.0, e,
            r2,  e,   r,   e,   e,   e,   1.0,
        ]);
        assert_eq!(m.matrix, expected);
        assert_eq!(
            m.slots[3],
            OutcomeSlot::new(Ets::Stage2(Cell::B), 3)
        );
    }

    #[test]
    fn independence_gives_identity() {
        let d = design(6, 2);
        for g in Subgroup::ALL {
            let m = build_latent_correlation(g, &d, &DependenceSpec::independent());
            assert_eq!(m.matrix, DMatrix::identity(m.dim(), m.dim()));
            assert_eq!(check_positive_definite(&m).unwrap(), 1.0);
        }
    }

    #[test]
    fn exchangeable_rule_enumeration() {
        let spec = DependenceSpec::with_eta(Structure::Exchangeable, 0.4, 0.2).unwrap();
        let m = build_latent_correlation(Subgroup::Both, &design(3, 2), &spec);
        assert_eq!(m.dim(), 5);
        for i in 0..5 {
            for j in 0..5 {
                let (a, b) = (m.slots[i], m.slots[j]);
                let oracle = if i == j {
                    1.0
                } else {
                    let a1_of = |s: OutcomeSlot| match s.ets {
                        Ets::Baseline => None,
                        Ets::Stage1(x) => Some(x),
                        Ets::Stage2(c) => Some(c.a1()),
                    };
                    match (a1_of(a), a1_of(b)) {
                        (Some(x), Some(y)) if x != y => 0.2,
                        _ => 0.4,
                    }
                };
                assert_eq!(m.matrix[(i, j)], oracle, "{a} {b}");
            }
        }
    }

    #[test]
    fn pd_boundary_for_cross_path_dependence() {
        let d = design(6, 2);
        let bad = DependenceSpec::with_eta(Structure::Ar1, 0.6, 0.5).unwrap();
        let good = DependenceSpec::with_eta(Structure::Ar1, 0.6, 0.3).unwrap();
        let m_bad = build_latent_correlation(Subgroup::Neither, &d, &bad);
        let m_good = build_latent_correlation(Subgroup::Neither, &d, &good);
        assert!(check_positive_definite(&m_bad).unwrap() <= PD_THRESHOLD);
        assert!(check_positive_definite(&m_good).unwrap() > PD_THRESHOLD);
        assert!(validate_dependence(&d, &bad).is_err());
        assert!(validate_dependence(&d, &good).is_ok());
    }

    #[test]
    fn asymmetric_input_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.2, 1.0]);
        assert!(matches!(min_eigenvalue(&m), Err(Error::Shape(_))));
    }

    #[test]
    fn normal_cdf_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert!((std_normal_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-12, "{}", std_normal_cdf(1.959_963_984_540_054) - 0.975);
        assert!((std_normal_cdf(-3.0) - 0.001_349_898_031_630_094_6).abs() < 1e-15);
    }

    #[test]
    fn one_dimensional_zero_fraction() {
        let nb = NbParams::new(2.5, 1.92).unwrap();
        let marg = DiscreteMarginal::untruncated(nb).unwrap();
        let s = CopulaSampler::new(&DMatrix::identity(1, 1), vec![marg]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let x = s.sample(n, &mut rng);
        let p0 = nb.zero_mass();
        let frac = x.column(0).filter(|&v| v == 0).count() as f64 / n as f64;
        let se = (p0 * (1.0 - p0) / n as f64).sqrt();
        assert!((frac - p0).abs() < 3.0 * se, "{frac} vs {p0}");
    }

    #[test]
    fn marginal_count_correlation_attenuated() {
        let nb = NbParams::new(2.8, 2.11).unwrap();
        let marg = DiscreteMarginal::untruncated(nb).unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]);
        let s = CopulaSampler::new(&m, vec![marg.clone(), marg]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = s.sample(200_000, &mut rng);
        let a: Vec<f64> = x.column(0).map(f64::from).collect();
        let b: Vec<f64> = x.column(1).map(f64::from).collect();
        let r = crate::calibration::pearson(&a, &b).unwrap();
        assert!(r < 0.6 && r > 0.45, "{r}");
    }

    #[test]
    fn non_pd_factorisation_fails() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let marg = DiscreteMarginal::untruncated(NbParams::new(1.0, 1.0).unwrap()).unwrap();
        assert!(matches!(
            CopulaSampler::new(&m, vec![marg.clone(), marg]),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn arm_symmetry_of_subgroup_dims() {
        let d = design(6, 2);
        let dims: Vec<_> = Subgroup::ALL
            .iter()
            .map(|&g| build_latent_correlation(g, &d, &DependenceSpec::independent()).dim())
            .collect();
        assert_eq!(dims, vec![11, 15, 15, 19]);
    }
}
