//! Count-scale within-person correlation implied by a latent `rho`, and the
//! grid search that picks `rho` for a target maximum correlation.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::copula::{validate_dependence, DependenceSpec, Structure};
use crate::design::{Cell, EtsGrid, OutcomeSlot, TrialDesign};
use crate::error::{Error, Result};
use crate::streams::calibration_stream;
use crate::trial::{PotentialOutcomes, TrialGenerator};

/// Sample Pearson correlation; `None` when either series is constant or too short.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || b.len() != n {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Outcomes along one terminal-cell path: `columns[j]` holds occasion `j + 1`
/// for every individual whose potential outcomes cover the path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathVectors {
    pub cell: Cell,
    pub columns: Vec<Vec<f64>>,
}

impl PathVectors {
    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Assemble the six path vectors from one potential-outcome table.
pub fn path_vectors(po: &PotentialOutcomes, design: &TrialDesign) -> Vec<PathVectors> {
    let t = design.occasions();
    Cell::ALL
        .iter()
        .map(|&cell| {
            let mut columns = vec![Vec::new(); t];
            for grp in po.groups.iter().filter(|g| g.subgroup.responds(cell.a1()) == cell.responder()) {
                let cols: Vec<usize> = (1..=t)
                    .map(|j| {
                        grp.column_of(&OutcomeSlot::new(design.ets_on_path(cell, j), j))
                            .expect("path slot is feasible for this subgroup")
                    })
                    .collect();
                for i in 0..grp.counts.rows() {
                    let row = grp.counts.row(i);
                    for (j, &c) in cols.iter().enumerate() {
                        columns[j].push(f64::from(row[c]));
                    }
                }
            }
            PathVectors { cell, columns }
        })
        .collect()
}

/// Per-path `T x T` correlation matrices of one dataset; undefined entries are NaN.
pub fn dataset_path_correlations(po: &PotentialOutcomes, design: &TrialDesign) -> Result<Vec<(Cell, DMatrix<f64>)>> {
    let t = design.occasions();
    path_vectors(po, design)
        .into_iter()
        .map(|pv| {
            if pv.len() < 2 {
                return Err(Error::InsufficientData(format!(
                    "path {} has {} individuals",
                    pv.cell.label(),
                    pv.len()
                )));
            }
            let m = DMatrix::from_fn(t, t, |i, j| {
                if i == j {
                    1.0
                } else {
                    pearson(&pv.columns[i], &pv.columns[j]).unwrap_or(f64::NAN)
                }
            });
            Ok((pv.cell, m))
        })
        .collect()
}

/// Largest defined off-diagonal path correlation of one dataset.
pub fn dataset_tau_max(po: &PotentialOutcomes, design: &TrialDesign) -> Result<f64> {
    tau_max_of(&dataset_path_correlations(po, design)?)
}

fn tau_max_of(mats: &[(Cell, DMatrix<f64>)]) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for (_, m) in mats {
        for i in 0..m.nrows() {
            for j in 0..i {
                if m[(i, j)].is_finite() {
                    best = best.max(m[(i, j)]);
                }
            }
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::InsufficientData("no path has two non-constant occasions".into()))
    }
}

/// Mean of a statistic over Monte Carlo datasets with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McMean {
    pub mean: f64,
    pub mc_se: f64,
}

impl McMean {
    pub fn from_values(v: &[f64]) -> Self {
        let m = v.len() as f64;
        let mean = v.iter().sum::<f64>() / m;
        if v.len() < 2 {
            return Self { mean, mc_se: f64::NAN };
        }
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
        Self { mean, mc_se: (var / m).sqrt() }
    }
}

/// Average of per-dataset maxima.
pub fn empirical_tau_max(datasets: &[PotentialOutcomes], design: &TrialDesign) -> Result<McMean> {
    if datasets.is_empty() {
        return Err(Error::InsufficientData("no datasets supplied".into()));
    }
    let v = datasets
        .iter()
        .map(|po| dataset_tau_max(po, design))
        .collect::<Result<Vec<_>>>()?;
    Ok(McMean::from_values(&v))
}

/// How per-dataset correlation matrices are reduced to one `tau_hat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TauEstimator {
    /// Largest entry of the dataset-averaged path correlation matrices.
    #[default]
    MaxOfAverage,
    /// Average over datasets of each dataset's largest entry.
    AverageOfMaxima,
}

impl TauEstimator {
    pub fn reduce(&self, per_dataset: &[Vec<(Cell, DMatrix<f64>)>]) -> Result<McMean> {
        match self {
            TauEstimator::AverageOfMaxima => {
                let v = per_dataset.iter().map(|m| tau_max_of(m)).collect::<Result<Vec<_>>>()?;
                Ok(McMean::from_values(&v))
            }
            TauEstimator::MaxOfAverage => {
                let avg = PathCorrelations::average(per_dataset)?;
                let mut best: Option<(usize, usize, usize, f64)> = None;
                for (p, (_, m)) in avg.matrices.iter().enumerate() {
                    for i in 0..m.nrows() {
                        for j in 0..i {
                            let v = m[(i, j)];
                            if v.is_finite() && best.is_none_or(|b| v > b.3) {
                                best = Some((p, i, j, v));
                            }
                        }
                    }
                }
                let (p, i, j, _) =
                    best.ok_or_else(|| Error::InsufficientData("no path has two non-constant occasions".into()))?;
                let v: Vec<f64> = per_dataset.iter().map(|d| d[p].1[(i, j)]).filter(|v| v.is_finite()).collect();
                Ok(McMean::from_values(&v))
            }
        }
    }
}

/// `tau_hat` as the largest entry of the averaged path correlations.
pub fn empirical_tau_max_of_average(datasets: &[PotentialOutcomes], design: &TrialDesign) -> Result<McMean> {
    let per = datasets
        .iter()
        .map(|po| dataset_path_correlations(po, design))
        .collect::<Result<Vec<_>>>()?;
    TauEstimator::MaxOfAverage.reduce(&per)
}

/// Per-path correlation matrices averaged over datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct PathCorrelations {
    pub matrices: Vec<(Cell, DMatrix<f64>)>,
}

impl PathCorrelations {
    pub fn get(&self, cell: Cell) -> &DMatrix<f64> {
        &self.matrices.iter().find(|(c, _)| *c == cell).expect("all six paths present").1
    }

    /// Average per-dataset matrices; an entry is averaged over the datasets where it is defined.
    pub fn average(per_dataset: &[Vec<(Cell, DMatrix<f64>)>]) -> Result<Self> {
        let first = per_dataset
            .first()
            .ok_or_else(|| Error::InsufficientData("no datasets supplied".into()))?;
        let matrices = first
            .iter()
            .enumerate()
            .map(|(p, (cell, m0))| {
                let (r, c) = m0.shape();
                let mut sum = DMatrix::<f64>::zeros(r, c);
                let mut cnt = DMatrix::<f64>::zeros(r, c);
                for ds in per_dataset {
                    for (k, v) in ds[p].1.iter().enumerate() {
                        if v.is_finite() {
                            sum[k] += v;
                            cnt[k] += 1.0;
                        }
                    }
                }
                let avg = DMatrix::from_fn(r, c, |i, j| {
                    if cnt[(i, j)] > 0.0 {
                        sum[(i, j)] / cnt[(i, j)]
                    } else {
                        f64::NAN
                    }
                });
                (*cell, avg)
            })
            .collect();
        Ok(Self { matrices })
    }

    /// Long-format rows `(path, i, j, corr)` with 1-based occasion indices.
    pub fn long_rows(&self) -> Vec<(char, usize, usize, f64)> {
        let mut out = Vec::new();
        for (cell, m) in &self.matrices {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.push((cell.label(), i + 1, j + 1, m[(i, j)]));
                }
            }
        }
        out
    }
}

pub fn empirical_path_correlations(datasets: &[PotentialOutcomes], design: &TrialDesign) -> Result<PathCorrelations> {
    let per = datasets
        .iter()
        .map(|po| dataset_path_correlations(po, design))
        .collect::<Result<Vec<_>>>()?;
    PathCorrelations::average(&per)
}

/// How `eta` follows `rho` along the calibration grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaRule {
    HalfRho,
    Fixed(f64),
}

impl EtaRule {
    pub fn eta(&self, rho: f64) -> f64 {
        match *self {
            EtaRule::HalfRho => rho / 2.0,
            EtaRule::Fixed(e) => e,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub structure: Structure,
    pub eta: EtaRule,
    /// Datasets per grid point.
    pub m: usize,
    /// Individuals per dataset.
    pub n_star: usize,
    pub grid_step: f64,
    /// Largest grid value considered.
    pub max_rho: f64,
    /// Stop scanning once a grid point's estimate reaches the target.
    pub stop_after_crossing: bool,
    pub estimator: TauEstimator,
    pub seed: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            structure: Structure::Ar1,
            eta: EtaRule::HalfRho,
            m: 1000,
            n_star: 1000,
            grid_step: 0.05,
            max_rho: 0.95,
            stop_after_crossing: true,
            estimator: TauEstimator::default(),
            seed: 1,
        }
    }
}

/// Estimates at one latent correlation value.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPoint {
    pub rho: f64,
    pub tau_hat: f64,
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    pub target: f64,
    pub points: Vec<CalibrationPoint>,
    pub selected_rho: f64,
}

/// Simulated potential-outcome datasets (no randomisation step) at one `rho`.
pub struct CalibrationRun<'a> {
    pub design: &'a TrialDesign,
    pub grid: &'a EtsGrid,
    pub opts: CalibrationOptions,
}

impl CalibrationRun<'_> {
    fn generator(&self, rho: f64) -> Result<TrialGenerator> {
        let spec = DependenceSpec::with_eta(self.opts.structure, rho, self.opts.eta.eta(rho))?;
        validate_dependence(self.design, &spec)?;
        TrialGenerator::new(self.design, self.grid, &spec)
    }

    fn apply<T: Send>(
        &self,
        rho: f64,
        grid_index: usize,
        f: impl Fn(&PotentialOutcomes) -> Result<T> + Sync,
    ) -> Result<Vec<T>> {
        let gen = self.generator(rho)?;
        let sizes = gen.sizes(self.opts.n_star, None)?;
        (0..self.opts.m)
            .into_par_iter()
            .map(|rep| {
                let mut rng = calibration_stream(self.opts.seed, grid_index, rep);
                f(&gen.generate(&sizes, &mut rng))
            })
            .collect()
    }

    /// `tau_hat` at a latent value.
    pub fn tau_at(&self, rho: f64, grid_index: usize) -> Result<CalibrationPoint> {
        Ok(self.tau_and_paths_at(rho, grid_index)?.0)
    }

    /// Averaged per-path count correlations at a latent value.
    pub fn path_correlations_at(&self, rho: f64, grid_index: usize) -> Result<PathCorrelations> {
        Ok(self.tau_and_paths_at(rho, grid_index)?.1)
    }

    /// Both summaries from one set of datasets.
    pub fn tau_and_paths_at(&self, rho: f64, grid_index: usize) -> Result<(CalibrationPoint, PathCorrelations)> {
        let per = self.apply(rho, grid_index, |po| dataset_path_correlations(po, self.design))?;
        let s = self.opts.estimator.reduce(&per)?;
        Ok((CalibrationPoint { rho, tau_hat: s.mean, mc_se: s.mc_se }, PathCorrelations::average(&per)?))
    }

    /// `tau_hat` under both reductions plus the averaged matrices, from one set of datasets.
    pub fn tau_both_at(&self, rho: f64, grid_index: usize) -> Result<(McMean, McMean, PathCorrelations)> {
        let per = self.apply(rho, grid_index, |po| dataset_path_correlations(po, self.design))?;
        Ok((
            TauEstimator::MaxOfAverage.reduce(&per)?,
            TauEstimator::AverageOfMaxima.reduce(&per)?,
            PathCorrelations::average(&per)?,
        ))
    }

    /// Latent values `0, step, 2 step, ...` up to `max_rho` whose matrices are all positive definite.
    pub fn feasible_grid(&self) -> Result<Vec<f64>> {
        let step = self.opts.grid_step;
        if !(step > 0.0 && step < 1.0) {
            return Err(Error::Domain(format!("grid step must lie in (0, 1), got {step}")));
        }
        let mut out = Vec::new();
        for i in 0.. {
            let rho = (i as f64 * step * 1e9).round() / 1e9;
            if rho > self.opts.max_rho + 1e-12 || rho >= 1.0 {
                break;
            }
            match self.generator(rho) {
                Ok(_) => out.push(rho),
                Err(Error::NotPositiveDefinite { .. }) | Err(Error::Domain(_)) => break,
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}

/// Pick the grid `rho` whose `tau_hat` is closest to `target_tau` (ties to the smaller `rho`).
pub fn calibrate_rho(target_tau: f64, design: &TrialDesign, grid: &EtsGrid, opts: CalibrationOptions) -> Result<CalibrationTable> {
    if !(0.0..1.0).contains(&target_tau) {
        return Err(Error::Domain(format!("target must lie in [0, 1), got {target_tau}")));
    }
    if opts.m == 0 {
        return Err(Error::Domain("calibration needs at least one dataset".into()));
    }
    let run = CalibrationRun { design, grid, opts };
    let rhos = run.feasible_grid()?;
    let mut points: Vec<CalibrationPoint> = Vec::new();
    for (i, &rho) in rhos.iter().enumerate() {
        let pt = run.tau_at(rho, i)?;
        let crossed = pt.tau_hat >= target_tau;
        points.push(pt);
        if crossed && opts.stop_after_crossing {
            break;
        }
    }
    select(target_tau, points)
}

fn select(target: f64, points: Vec<CalibrationPoint>) -> Result<CalibrationTable> {
    let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
        (a.min(p.tau_hat), b.max(p.tau_hat))
    });
    if points.is_empty() || target > hi {
        return Err(Error::UnreachableTarget { target, min: lo, max: hi });
    }
    let mut best = &points[0];
    for p in &points[1..] {
        if (p.tau_hat - target).abs() < (best.tau_hat - target).abs() {
            best = p;
        }
    }
    let selected_rho = best.rho;
    Ok(CalibrationTable { target, points, selected_rho })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{NbParams, ResponseRule};

    fn pt(rho: f64, tau: f64) -> CalibrationPoint {
        CalibrationPoint { rho, tau_hat: tau, mc_se: 0.0 }
    }

    #[test]
    fn pearson_basics() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), Some(1.0));
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]), None);
        assert_eq!(pearson(&[1.0], &[1.0]), None);
    }

    #[test]
    fn selection_rule() {
        let pts = vec![pt(0.0, 0.05), pt(0.05, 0.10), pt(0.1, 0.15), pt(0.15, 0.20)];
        assert_eq!(select(0.11, pts.clone()).unwrap().selected_rho, 0.05);
        assert_eq!(select(0.125, pts.clone()).unwrap().selected_rho, 0.05);
        assert_eq!(select(0.0, pts.clone()).unwrap().selected_rho, 0.0);
        assert!(matches!(select(0.5, pts), Err(Error::UnreachableTarget { .. })));
    }

    fn small_design() -> (TrialDesign, EtsGrid) {
        let d = TrialDesign::monthly(4, 2, ResponseRule::AtMost { c: 1 }).unwrap();
        let g = EtsGrid::from_fn(&d, |s| NbParams::new(2.0 + 0.2 * s.time as f64, 1.0)).unwrap();
        (d, g)
    }

    #[test]
    fn path_vectors_use_covering_subgroups() {
        let (d, g) = small_design();
        let gen = TrialGenerator::new(&d, &g, &DependenceSpec::independent()).unwrap();
        let mut rng = calibration_stream(1, 0, 0);
        let po = gen.generate(&crate::trial::SubgroupSizes { n: [10, 20, 30, 40] }, &mut rng);
        let pv = path_vectors(&po, &d);
        let sizes: Vec<_> = pv.iter().map(PathVectors::len).collect();
        assert_eq!(sizes, [30, 70, 70, 40, 60, 60]);
    }

    #[test]
    fn independent_latent_gives_small_correlations() {
        let (d, g) = small_design();
        let opts = CalibrationOptions { m: 40, n_star: 800, ..Default::default() };
        let run = CalibrationRun { design: &d, grid: &g, opts };
        let pc = run.path_correlations_at(0.0, 0).unwrap();
        for (_, m) in &pc.matrices {
            for i in 0..4 {
                for j in 0..i {
                    if m[(i, j)].is_finite() {
                        // per-dataset sd ~ 1/sqrt(n), averaged over 40 datasets
                        assert!(m[(i, j)].abs() < 0.03, "{}", m[(i, j)]);
                    }
                }
            }
        }
    }

    #[test]
    fn reductions_at_independence() {
        let (d, g) = small_design();
        let opts = CalibrationOptions { m: 60, n_star: 600, ..Default::default() };
        let run = CalibrationRun { design: &d, grid: &g, opts };
        let (avg, maxima, _) = run.tau_both_at(0.0, 0).unwrap();
        // the maximum of near-zero averages stays near zero; the average of
        // per-dataset maxima is pushed up by selection
        assert!(avg.mean.abs() < 3.0 * avg.mc_se + 0.01, "{avg:?}");
        assert!(maxima.mean > avg.mean + 5.0 * maxima.mc_se, "{maxima:?}");
        assert_eq!(run.tau_at(0.0, 0).unwrap().tau_hat, avg.mean);
    }

    #[test]
    fn calibration_is_reproducible_and_selects_zero_for_zero() {
        let (d, g) = small_design();
        let opts = CalibrationOptions { m: 20, n_star: 300, grid_step: 0.2, ..Default::default() };
        let a = calibrate_rho(0.0, &d, &g, opts).unwrap();
        let b = calibrate_rho(0.0, &d, &g, opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.selected_rho, 0.0);
        assert_eq!(a.points.len(), 1);
        let full = calibrate_rho(0.3, &d, &g, CalibrationOptions { stop_after_crossing: false, ..opts }).unwrap();
        assert_eq!(full.points.len(), 5);
        for w in full.points.windows(2) {
            assert!(w[1].tau_hat > w[0].tau_hat - 3.0 * (w[0].mc_se + w[1].mc_se));
        }
        assert!(matches!(
            calibrate_rho(0.99, &d, &g, opts),
            Err(Error::UnreachableTarget { .. })
        ));
    }
}
