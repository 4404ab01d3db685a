//! Predictive quality on held-out data: mixture NLL, RMSE, calibration, and
//! CSV export of per-run results with a median/IQR summary.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{median, quantile_sorted};

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;
const CALIBRATION_DRAWS: usize = 1024;

/// Equal-weight Gaussian mixture per test point. Every component shares the
/// per-point, per-output standard deviation `std`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    /// One `k × d_y` matrix of component means per mixture component.
    pub means: Vec<DMatrix<f64>>,
    /// `k × d_y` component standard deviations.
    pub std: DMatrix<f64>,
}

impl PredictiveDistribution {
    pub fn new(means: Vec<DMatrix<f64>>, std: DMatrix<f64>) -> Result<Self> {
        let first = means.first().ok_or_else(|| invalid("predictive needs at least one component"))?;
        if means.iter().any(|m| m.shape() != first.shape()) || std.shape() != first.shape() {
            return Err(invalid("predictive component shapes disagree"));
        }
        if !std.iter().all(|s| *s > 0.0) {
            return Err(invalid("predictive standard deviations must be positive"));
        }
        Ok(Self { means, std })
    }

    /// Components share one noise level per output dimension.
    pub fn with_noise(means: Vec<DMatrix<f64>>, noise_std: &[f64]) -> Result<Self> {
        let (k, dy) = means.first().map_or((0, 0), |m| m.shape());
        if noise_std.len() != dy {
            return Err(invalid("one noise level per output dimension required"));
        }
        Self::new(means, DMatrix::from_fn(k, dy, |_, j| noise_std[j]))
    }

    pub fn len(&self) -> usize {
        self.std.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.std.nrows() == 0
    }

    pub fn mean(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.std.nrows(), self.std.ncols());
        for c in &self.means {
            m += c;
        }
        m / self.means.len() as f64
    }

    /// Single Gaussian with the mixture's mean and variance.
    pub fn moment_matched(&self) -> PredictiveDistribution {
        let mean = self.mean();
        let l = self.means.len() as f64;
        let std = DMatrix::from_fn(mean.nrows(), mean.ncols(), |i, j| {
            let spread: f64 = self.means.iter().map(|c| (c[(i, j)] - mean[(i, j)]).powi(2)).sum::<f64>() / l;
            (self.std[(i, j)].powi(2) + spread).sqrt()
        });
        PredictiveDistribution { means: vec![mean], std }
    }

    /// `−log p(y_i)` per test row, joint over output dimensions.
    pub fn row_nll(&self, y: &DMatrix<f64>) -> Result<Vec<f64>> {
        if y.shape() != self.std.shape() {
            return Err(invalid(format!(
                "targets {:?} do not match predictive {:?}",
                y.shape(),
                self.std.shape()
            )));
        }
        let ln_l = (self.means.len() as f64).ln();
        let mut logs = vec![0.0; self.means.len()];
        Ok((0..y.nrows())
            .map(|i| {
                for (c, lp) in self.means.iter().zip(logs.iter_mut()) {
                    *lp = (0..y.ncols())
                        .map(|j| {
                            let s = self.std[(i, j)];
                            let r = (y[(i, j)] - c[(i, j)]) / s;
                            -0.5 * r * r - s.ln() - HALF_LOG_2PI
                        })
                        .sum();
                }
                -(log_sum_exp(&logs) - ln_l)
            })
            .collect())
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Anything that yields a predictive distribution at query inputs.
pub trait Predictor {
    fn predict(&self, x: &DMatrix<f64>) -> Result<PredictiveDistribution>;
}

/// Mean over test points of the mixture negative log-likelihood.
pub fn predictive_nll(pred: &PredictiveDistribution, y: &DMatrix<f64>) -> Result<f64> {
    if y.nrows() == 0 {
        return Err(invalid("empty test set"));
    }
    let rows = pred.row_nll(y)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Root mean squared error of the predictive mean over all entries.
pub fn rmse(pred: &PredictiveDistribution, y: &DMatrix<f64>) -> Result<f64> {
    if y.nrows() == 0 || y.shape() != pred.std.shape() {
        return Err(invalid("targets must be non-empty and match the predictive"));
    }
    Ok(((pred.mean() - y).norm_squared() / y.len() as f64).sqrt())
}

/// Fraction of targets inside the central interval at each level, per
/// output dimension marginal. Interval ends are empirical quantiles of 1024
/// mixture draws; the same draws serve every level, so coverage is monotone.
pub fn calibration<R: Rng + ?Sized>(
    pred: &PredictiveDistribution,
    y: &DMatrix<f64>,
    levels: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    if y.shape() != pred.std.shape() || y.nrows() == 0 {
        return Err(invalid("targets must be non-empty and match the predictive"));
    }
    if let Some(l) = levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
        return Err(invalid(format!("confidence levels must lie in (0, 1), got {l}")));
    }
    let mut hits = vec![0usize; levels.len()];
    let mut draws = vec![0.0; CALIBRATION_DRAWS];
    let nc = pred.means.len();
    for i in 0..y.nrows() {
        for j in 0..y.ncols() {
            for d in draws.iter_mut() {
                let c = rng.random_range(0..nc);
                let z: f64 = StandardNormal.sample(rng);
                *d = pred.means[c][(i, j)] + pred.std[(i, j)] * z;
            }
            draws.sort_by(|a, b| a.total_cmp(b));
            for (h, level) in hits.iter_mut().zip(levels) {
                let lo = quantile_sorted(&draws, 0.5 * (1.0 - level));
                let hi = quantile_sorted(&draws, 0.5 * (1.0 + level));
                if (lo..=hi).contains(&y[(i, j)]) {
                    *h += 1;
                }
            }
        }
    }
    let total = y.len() as f64;
    Ok(hits.into_iter().map(|h| h as f64 / total).collect())
}

/// One evaluated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub n_train: usize,
    pub seed: u64,
    pub nll: f64,
    pub rmse: f64,
    pub coverage_90: f64,
}

/// Median and interquartile range of each metric per `(method, n_train)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub method: String,
    pub n_train: usize,
    pub runs: usize,
    pub nll_median: f64,
    pub nll_q25: f64,
    pub nll_q75: f64,
    pub rmse_median: f64,
    pub rmse_q25: f64,
    pub rmse_q75: f64,
    pub coverage_90_median: f64,
    pub coverage_90_q25: f64,
    pub coverage_90_q75: f64,
}

/// `results.csv` → `results.agg.csv`.
pub fn aggregate_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.agg.csv"))
}

pub fn aggregate(results: &[EvalRecord]) -> Vec<AggregateRecord> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in results {
        let key = (r.method.clone(), r.n_train);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.sort();
    keys.into_iter()
        .map(|(method, n_train)| {
            let group: Vec<&EvalRecord> = results
                .iter()
                .filter(|r| r.method == method && r.n_train == n_train)
                .collect();
            let stats = |f: fn(&EvalRecord) -> f64| {
                let mut v: Vec<f64> = group.iter().map(|r| f(r)).collect();
                let m = median(&mut v);
                (m, quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.75))
            };
            let nll = stats(|r| r.nll);
            let rmse = stats(|r| r.rmse);
            let cov = stats(|r| r.coverage_90);
            AggregateRecord {
                method,
                n_train,
                runs: group.len(),
                nll_median: nll.0,
                nll_q25: nll.1,
                nll_q75: nll.2,
                rmse_median: rmse.0,
                rmse_q25: rmse.1,
                rmse_q75: rmse.2,
                coverage_90_median: cov.0,
                coverage_90_q25: cov.1,
                coverage_90_q75: cov.2,
            }
        })
        .collect()
}

/// Writes the per-run CSV and its `.agg.csv` summary.
pub fn export_curves(results: &[EvalRecord], path: &Path) -> Result<()> {
    write_records(path, results, &["method", "n_train", "seed", "nll", "rmse", "coverage_90"])?;
    write_records(
        &aggregate_path(path),
        &aggregate(results),
        &[
            "method",
            "n_train",
            "runs",
            "nll_median",
            "nll_q25",
            "nll_q75",
            "rmse_median",
            "rmse_q25",
            "rmse_q75",
            "coverage_90_median",
            "coverage_90_q25",
            "coverage_90_q75",
        ],
    )
}

fn write_records<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    // Written explicitly so an empty file still carries its header.
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_curves(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn nll_at_the_mean_is_half_log_two_pi() {
        let y = col(&[0.3, -1.0]);
        let p = PredictiveDistribution::with_noise(vec![y.clone()], &[1.0]).unwrap();
        let nll = predictive_nll(&p, &y).unwrap();
        assert!((nll - 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn identical_components_equal_single_gaussian() {
        let m = col(&[0.0, 1.0, 2.0]);
        let y = col(&[0.5, 0.5, 0.5]);
        let single = PredictiveDistribution::with_noise(vec![m.clone()], &[0.7]).unwrap();
        let triple = PredictiveDistribution::with_noise(vec![m.clone(), m.clone(), m], &[0.7]).unwrap();
        let a = predictive_nll(&single, &y).unwrap();
        let b = predictive_nll(&triple, &y).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mixture_is_no_worse_than_worst_component() {
        let y = col(&[0.0, 2.0]);
        let comps = vec![col(&[0.1, 1.5]), col(&[3.0, -1.0])];
        let mix = PredictiveDistribution::with_noise(comps.clone(), &[0.5]).unwrap();
        let worst = comps
            .iter()
            .map(|c| predictive_nll(&PredictiveDistribution::with_noise(vec![c.clone()], &[0.5]).unwrap(), &y).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(predictive_nll(&mix, &y).unwrap() <= worst);
    }

    #[test]
    fn nll_blows_up_as_noise_vanishes() {
        let y = col(&[1.0]);
        let nll = |s| predictive_nll(&PredictiveDistribution::with_noise(vec![col(&[0.0])], &[s]).unwrap(), &y).unwrap();
        assert!(nll(1e-3) > nll(1e-2));
        assert!(nll(1e-4) > 1e7);
    }

    #[test]
    fn rmse_examples() {
        let y = col(&[1.0, -1.0, 1.0]);
        let perfect = PredictiveDistribution::with_noise(vec![y.clone()], &[1.0]).unwrap();
        assert_eq!(rmse(&perfect, &y).unwrap(), 0.0);
        let zero = PredictiveDistribution::with_noise(vec![col(&[0.0; 3])], &[1.0]).unwrap();
        assert_eq!(rmse(&zero, &y).unwrap(), 1.0);
        // Mean of the two components: (1, 0, 2); errors (0, 1, 1).
        let two = PredictiveDistribution::with_noise(vec![col(&[0.0, 0.0, 2.0]), col(&[2.0, 0.0, 2.0])], &[1.0]).unwrap();
        assert!((rmse(&two, &y).unwrap() - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn calibrated_predictor_covers_nominally() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 10_000;
        let mean = DMatrix::from_fn(n, 1, |i, _| (i as f64 * 0.01).sin());
        let y = DMatrix::from_fn(n, 1, |i, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            mean[(i, 0)] + 0.3 * z
        });
        let p = PredictiveDistribution::with_noise(vec![mean], &[0.3]).unwrap();
        let cov = calibration(&p, &y, &[0.5, 0.9, 0.999_999], &mut rng).unwrap();
        assert!((0.88..=0.92).contains(&cov[1]), "{cov:?}");
        assert!(cov[0] <= cov[1] && cov[1] <= cov[2]);
        assert!(cov[2] > 0.995);
        assert!(calibration(&p, &y, &[1.0], &mut rng).is_err());
    }

    #[test]
    fn overconfident_predictor_covers_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = DMatrix::from_fn(200, 1, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let p = PredictiveDistribution::with_noise(vec![DMatrix::zeros(200, 1)], &[1e-9]).unwrap();
        assert_eq!(calibration(&p, &y, &[0.9], &mut rng).unwrap(), vec![0.0]);
    }

    #[test]
    fn moment_matching_preserves_mean_and_variance() {
        let p = PredictiveDistribution::with_noise(vec![col(&[0.0]), col(&[2.0])], &[1.0]).unwrap();
        let mm = p.moment_matched();
        assert_eq!(mm.means[0][(0, 0)], 1.0);
        assert!((mm.std[(0, 0)] - 2f64.sqrt()).abs() < 1e-15);
    }

    fn record(method: &str, n: usize, seed: u64, nll: f64) -> EvalRecord {
        EvalRecord {
            method: method.into(),
            n_train: n,
            seed,
            nll,
            rmse: nll / 10.0,
            coverage_90: 0.9,
        }
    }

    #[test]
    fn export_round_trip_and_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        export_curves(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "method,n_train,seed,nll,rmse,coverage_90\n");
        assert!(load_curves(&path).unwrap().is_empty());

        let rows = vec![record("fsvgd", 20, 0, 1.0), record("fsvgd", 20, 1, 3.0), record("fsvgd", 20, 2, 2.0)];
        export_curves(&rows, &path).unwrap();
        assert_eq!(load_curves(&path).unwrap(), rows);
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].nll_median, 2.0);
        assert_eq!(agg[0].runs, 3);
        assert!(dir.path().join("curves.agg.csv").exists());
    }

    proptest! {
        #[test]
        fn nll_is_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let mut draw = || DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
            let comps = vec![draw(), draw(), draw()];
            let y = draw();
            let p = PredictiveDistribution::with_noise(comps.clone(), &[0.4, 1.3]).unwrap();
            let perm = [4, 2, 0, 5, 1, 3];
            let pick = |m: &DMatrix<f64>| DMatrix::from_fn(n, 2, |i, j| m[(perm[i], j)]);
            let pp = PredictiveDistribution::with_noise(comps.iter().map(pick).collect(), &[0.4, 1.3]).unwrap();
            let a = predictive_nll(&p, &y).unwrap();
            let b = predictive_nll(&pp, &pick(&y)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
