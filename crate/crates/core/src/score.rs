//! Score estimation: approximate `∇ₓ log p(x)` from i.i.d. samples of `p`.
//!
//! Four estimators share the [`ScoreModel`] interface:
//!
//! - [`GaussianScoreModel`]: fit mean and covariance, return `-Σ⁻¹(x - μ)`.
//! - [`SsgeModel`]: spectral Stein gradient estimator. Eigenfunctions of the
//!   sample Gram matrix are extended with the Nyström formula and the score is
//!   expanded in the leading ones, with coefficients from Stein's identity.
//! - ν-method and Tikhonov: regression of the score in the RKHS of a curl-free
//!   kernel. Both produce a [`CurlFreeExpansion`]
//!   `ŝ(x) = a·ζ̂(x) + Σₗ K(x, xₗ) cₗ` with `ζ̂(x) = -(1/M) Σₗ div K(x, xₗ)`.

use std::fs::File;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Result};
use crate::kernels::{median_heuristic, CurlFreeKernel, GramKernel, IsotropicKernel, KernelFamily};
use crate::linalg::{all_finite, rows, sq_dist};

/// `m × d` matrix of i.i.d. samples, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch(DMatrix<f64>);

impl SampleBatch {
    pub fn new(samples: DMatrix<f64>) -> Result<Self> {
        if samples.nrows() < 2 {
            return Err(invalid(format!(
                "score estimation needs at least 2 samples, got {}",
                samples.nrows()
            )));
        }
        if samples.ncols() == 0 {
            return Err(invalid("samples must have dimension >= 1"));
        }
        if !all_finite(samples.iter()) {
            return Err(invalid("samples contain non-finite entries"));
        }
        Ok(Self(samples))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Estimated scores at query points; row `i` of `scores` belongs to row `i` of `queries`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField {
    pub queries: DMatrix<f64>,
    pub scores: DMatrix<f64>,
}

impl ScoreField {
    /// Writes `x_1..x_d, s_1..s_d` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.queries.ncols();
        let mut w = csv::Writer::from_writer(File::create(path)?);
        let header: Vec<String> = (1..=d)
            .map(|i| format!("x_{i}"))
            .chain((1..=d).map(|i| format!("s_{i}")))
            .collect();
        w.write_record(&header)?;
        for i in 0..self.queries.nrows() {
            let rec: Vec<String> = self
                .queries
                .row(i)
                .iter()
                .chain(self.scores.row(i).iter())
                .map(|v| v.to_string())
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A fitted score estimator.
pub trait ScoreModel {
    fn dim(&self) -> usize;

    /// Score at each row of `queries`, as a `k × d` matrix.
    fn score_matrix(&self, queries: &DMatrix<f64>) -> Result<DMatrix<f64>>;

    fn score(&self, queries: &DMatrix<f64>) -> Result<ScoreField> {
        let scores = self.score_matrix(queries)?;
        Ok(ScoreField {
            queries: queries.clone(),
            scores,
        })
    }
}

fn check_queries(queries: &DMatrix<f64>, dim: usize) -> Result<()> {
    if queries.ncols() != dim {
        return Err(invalid(format!(
            "query dimension {} does not match estimator dimension {dim}",
            queries.ncols()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gaussian
// ---------------------------------------------------------------------------

/// Diagonal regularization added to the empirical covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Jitter {
    Absolute(f64),
    /// `value · trace(Σ) / d`
    TraceRelative(f64),
}

#[derive(Debug, Clone)]
pub struct GaussianScoreModel {
    pub mean: DVector<f64>,
    /// Regularized covariance (jitter already added).
    pub covariance: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

pub fn gaussian_score_fit(samples: &SampleBatch, jitter: f64) -> Result<GaussianScoreModel> {
    gaussian_score_fit_with(samples, Jitter::Absolute(jitter))
}

pub fn gaussian_score_fit_with(samples: &SampleBatch, jitter: Jitter) -> Result<GaussianScoreModel> {
    let x = samples.matrix();
    let (m, d) = (x.nrows(), x.ncols());
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.tr_mul(&centered) / (m as f64 - 1.0);
    let jitter = match jitter {
        Jitter::Absolute(j) => j,
        Jitter::TraceRelative(r) => r * cov.trace() / d as f64,
    };
    if !(jitter >= 0.0) {
        return Err(invalid(format!("jitter must be >= 0, got {jitter}")));
    }
    for i in 0..d {
        cov[(i, i)] += jitter;
    }
    // Identical samples leave only rounding noise in Σ; treat that as zero.
    let noise_floor = d as f64 * (1e-10 * x.amax()).powi(2);
    if cov.trace() <= noise_floor {
        return Err(numeric(format!(
            "covariance of {m} samples in dimension {d} is zero (samples are deterministic)"
        )));
    }
    let chol = Cholesky::new(cov.clone()).ok_or_else(|| {
        numeric(format!(
            "covariance of {m} samples in dimension {d} is singular after jitter {jitter:e} \
             (trace {:e}); samples may be (near-)deterministic",
            cov.trace()
        ))
    })?;
    Ok(GaussianScoreModel {
        mean,
        covariance: cov,
        chol,
    })
}

impl ScoreModel for GaussianScoreModel {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn score_matrix(&self, queries: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_queries(queries, self.dim())?;
        // Σ⁻¹ (x - μ) for all queries at once: solve Σ Z = (X - μ)ᵀ.
        let mut centered = queries.transpose();
        for mut col in centered.column_iter_mut() {
            col -= &self.mean;
        }
        let z = self.chol.solve(&centered);
        Ok(-z.transpose())
    }
}

// ---------------------------------------------------------------------------
// SSGE
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthMode {
    Fixed,
    MedianHeuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsgeConfig {
    pub kernel: IsotropicKernel,
    /// Eigenvalue mass threshold `r̄ ∈ (0, 1]`.
    pub eigenvalue_coverage: f64,
    pub max_eigenfunctions: Option<usize>,
    pub bandwidth_mode: BandwidthMode,
}

impl Default for SsgeConfig {
    fn default() -> Self {
        Self {
            kernel: IsotropicKernel {
                family: KernelFamily::Rbf,
                variance: 1.0,
                lengthscale: 1.0,
            },
            eigenvalue_coverage: 0.99,
            max_eigenfunctions: None,
            bandwidth_mode: BandwidthMode::MedianHeuristic,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SsgeModel {
    pub kernel: IsotropicKernel,
    /// Retained eigenvalues of the Gram matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// All eigenvalues of the Gram matrix, descending (for diagnostics).
    pub spectrum: Vec<f64>,
    /// `m × J`, column `j` is the eigenvector `u_j`.
    pub eigenvectors: DMatrix<f64>,
    /// `d × J` Stein coefficients `β̂`.
    pub beta: DMatrix<f64>,
    samples: Vec<Vec<f64>>,
    dim: usize,
}

/// Relative eigenvalue floor below which Nyström eigenfunctions are discarded.
const EIGEN_FLOOR: f64 = 1e-8;

/// Sorted (descending) eigen-decomposition with deterministic signs: the first
/// component of magnitude above 1e-12 in each eigenvector is made positive.
pub(crate) fn sorted_eigen(matrix: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(matrix);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(eig.eigenvectors.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).clone_owned();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// Number of eigenfunctions to keep: the largest `J'` whose cumulative
/// eigenvalue fraction stays strictly below `coverage` (at least 1). A coverage
/// of 1 keeps every eigenvalue that survived the floor.
pub(crate) fn select_truncation(eigenvalues: &[f64], coverage: f64) -> usize {
    let total: f64 = eigenvalues.iter().sum();
    if coverage >= 1.0 {
        return eigenvalues.len().max(1);
    }
    let mut cum = 0.0;
    let mut j = 0;
    for &l in eigenvalues {
        cum += l;
        if cum / total < coverage {
            j += 1;
        } else {
            break;
        }
    }
    j.max(1)
}

pub fn ssge_fit(samples: &SampleBatch, cfg: &SsgeConfig) -> Result<SsgeModel> {
    if !(cfg.eigenvalue_coverage > 0.0 && cfg.eigenvalue_coverage <= 1.0) {
        return Err(invalid(format!(
            "eigenvalue coverage must lie in (0, 1], got {}",
            cfg.eigenvalue_coverage
        )));
    }
    let x = samples.matrix();
    let (m, d) = (x.nrows(), x.ncols());
    let kernel = match cfg.bandwidth_mode {
        BandwidthMode::Fixed => cfg.kernel,
        BandwidthMode::MedianHeuristic => cfg.kernel.with_lengthscale(median_heuristic(x)?),
    };
    kernel.validate()?;
    let gram = kernel.gram(x, x)?.entries;
    let (spectrum, vectors) = sorted_eigen(gram);
    if !all_finite(spectrum.iter()) {
        return Err(numeric("Gram matrix has non-finite eigenvalues"));
    }
    let top = spectrum[0];
    if !(top > 0.0) {
        return Err(numeric("Gram matrix has no positive eigenvalue"));
    }
    let kept: Vec<f64> = spectrum
        .iter()
        .copied()
        .take_while(|&l| l > EIGEN_FLOOR * top)
        .collect();
    let mut j = select_truncation(&kept, cfg.eigenvalue_coverage);
    if let Some(cap) = cfg.max_eigenfunctions {
        j = j.min(cap.max(1));
    }
    let eigenvalues = kept[..j].to_vec();
    let u = vectors.columns(0, j).clone_owned();

    // D[l', i] = Σ_l ∂k(x_l, x_l')/∂x_l,i
    let pts = rows(x);
    let mut grad_sum = DMatrix::zeros(m, d);
    let mut g = vec![0.0; d];
    for (lp, xp) in pts.iter().enumerate() {
        for xl in &pts {
            kernel.grad_x_into(xl, xp, &mut g);
            for i in 0..d {
                grad_sum[(lp, i)] += g[i];
            }
        }
    }
    // β̂_ij = -(1/m) Σ_l ∂_i ψ̂_j(x_l) = -(1/(√m λ_j)) Σ_l' u_jl' D[l', i]
    let mut beta = grad_sum.tr_mul(&u);
    let sqrt_m = (m as f64).sqrt();
    for (jj, lam) in eigenvalues.iter().enumerate() {
        beta.column_mut(jj).scale_mut(-1.0 / (sqrt_m * lam));
    }
    if !all_finite(beta.iter()) {
        return Err(numeric("SSGE coefficients are non-finite"));
    }
    Ok(SsgeModel {
        kernel,
        eigenvalues,
        spectrum,
        eigenvectors: u,
        beta,
        samples: pts,
        dim: d,
    })
}

impl SsgeModel {
    pub fn num_eigenfunctions(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Nyström eigenfunctions `ψ̂_j(x) = (√m/λ_j) Σ_l u_jl k(x, x_l)`, as a `k × J` matrix.
    pub fn eigenfunctions(&self, queries: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_queries(queries, self.dim)?;
        let q = rows(queries);
        let kq = DMatrix::from_fn(q.len(), self.samples.len(), |a, l| {
            self.kernel.eval_sq_dist(sq_dist(&q[a], &self.samples[l]))
        });
        let mut psi = kq * &self.eigenvectors;
        let sqrt_m = (self.samples.len() as f64).sqrt();
        for (j, lam) in self.eigenvalues.iter().enumerate() {
            psi.column_mut(j).scale_mut(sqrt_m / lam);
        }
        Ok(psi)
    }

    /// Writes `index, eigenvalue` rows for the full Gram spectrum.
    pub fn write_spectrum_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(File::create(path)?);
        w.write_record(["index", "eigenvalue"])?;
        for (i, l) in self.spectrum.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl ScoreModel for SsgeModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_matrix(&self, queries: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let psi = self.eigenfunctions(queries)?;
        Ok(psi * self.beta.transpose())
    }
}

// ---------------------------------------------------------------------------
// Curl-free nonparametric estimators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuMethodConfig {
    /// Base RBF kernel of the curl-free kernel. With
    /// [`BandwidthMode::MedianHeuristic`] the lengthscale is replaced by the
    /// median pairwise distance times `bandwidth_scale` and the variance by
    /// `ℓ²`, so `K(x, x) = I`.
    pub kernel: IsotropicKernel,
    pub bandwidth_mode: BandwidthMode,
    /// Multiplier on the median distance. The plain median is too narrow for
    /// the second-derivative kernel: the regression overfits sample noise.
    #[serde(default = "default_curl_free_scale")]
    pub bandwidth_scale: f64,
    pub nu: f64,
    pub iterations: usize,
    pub tikhonov_lambda: Option<f64>,
}

impl Default for NuMethodConfig {
    fn default() -> Self {
        Self {
            kernel: IsotropicKernel {
                family: KernelFamily::Rbf,
                variance: 1.0,
                lengthscale: 1.0,
            },
            bandwidth_mode: BandwidthMode::MedianHeuristic,
            bandwidth_scale: default_curl_free_scale(),
            nu: 1.0,
            iterations: 50,
            tikhonov_lambda: None,
        }
    }
}

fn default_curl_free_scale() -> f64 {
    3.0
}

impl NuMethodConfig {
    fn curl_free_kernel(&self, samples: &DMatrix<f64>) -> Result<CurlFreeKernel> {
        let base = match self.bandwidth_mode {
            BandwidthMode::Fixed => self.kernel,
            BandwidthMode::MedianHeuristic => {
                if !(self.bandwidth_scale > 0.0 && self.bandwidth_scale.is_finite()) {
                    return Err(invalid("bandwidth_scale must be positive"));
                }
                let l = self.bandwidth_scale * median_heuristic(samples)?;
                IsotropicKernel {
                    family: self.kernel.family,
                    variance: l * l,
                    lengthscale: l,
                }
            }
        };
        CurlFreeKernel::new(base, samples.ncols())
    }
}

/// `ŝ(x) = a·ζ̂(x) + Σ_l K(x, x_l) c_l`.
#[derive(Debug, Clone)]
pub struct CurlFreeExpansion {
    pub kernel: CurlFreeKernel,
    pub a: f64,
    /// Stacked coefficient blocks, length `M·d`.
    pub c: DVector<f64>,
    samples: Vec<Vec<f64>>,
}

impl CurlFreeExpansion {
    /// `ζ̂(x) = -(1/M) Σ_l div K(x, x_l)` at each query row.
    pub fn zeta(&self, queries: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_queries(queries, self.kernel.dim)?;
        Ok(zeta_at(&self.kernel, &self.samples, &rows(queries)))
    }
}

fn zeta_at(kernel: &CurlFreeKernel, samples: &[Vec<f64>], queries: &[Vec<f64>]) -> DMatrix<f64> {
    let d = kernel.dim;
    let inv_m = 1.0 / samples.len() as f64;
    let mut out = DMatrix::zeros(queries.len(), d);
    let mut div = vec![0.0; d];
    for (a, q) in queries.iter().enumerate() {
        for s in samples {
            kernel.divergence_into(q, s, &mut div);
            for i in 0..d {
                out[(a, i)] -= inv_m * div[i];
            }
        }
    }
    out
}

impl ScoreModel for CurlFreeExpansion {
    fn dim(&self) -> usize {
        self.kernel.dim
    }

    fn score_matrix(&self, queries: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_queries(queries, self.kernel.dim)?;
        let q = rows(queries);
        let d = self.kernel.dim;
        let mut out = zeta_at(&self.kernel, &self.samples, &q) * self.a;
        for (a, qa) in q.iter().enumerate() {
            for (l, s) in self.samples.iter().enumerate() {
                let c = &self.c.as_slice()[l * d..(l + 1) * d];
                self.kernel.block_into(qa, s, |i, j, v| out[(a, i)] += v * c[j]);
            }
        }
        Ok(out)
    }
}

/// Iterates of the ν-method together with the final estimator.
#[derive(Debug, Clone)]
pub struct NuMethodState {
    pub iterations: usize,
    pub nu: f64,
    pub a: f64,
    pub c: DVector<f64>,
    /// Stacked `ζ̂(x_l)`, length `M·d`.
    pub h: DVector<f64>,
    pub gram: DMatrix<f64>,
    pub estimator: CurlFreeExpansion,
}

/// Momentum coefficient `u_t` of the ν-method.
pub fn nu_method_u(t: usize, nu: f64) -> f64 {
    if t <= 1 {
        return 0.0;
    }
    let t = t as f64;
    (t - 1.0) * (2.0 * t - 3.0) * (2.0 * t + 2.0 * nu - 1.0)
        / ((t + 2.0 * nu - 1.0) * (2.0 * t + 4.0 * nu - 1.0) * (2.0 * t + 2.0 * nu - 3.0))
}

/// Step size `ω_t` of the ν-method.
pub fn nu_method_omega(t: usize, nu: f64) -> f64 {
    let t = t as f64;
    4.0 * (2.0 * t + 2.0 * nu - 1.0) * (t + nu - 1.0)
        / ((t + 2.0 * nu - 1.0) * (2.0 * t + 4.0 * nu - 1.0))
}

const DIVERGENCE_LIMIT: f64 = 1e8;

pub fn nu_method_fit(samples: &SampleBatch, cfg: &NuMethodConfig) -> Result<NuMethodState> {
    if cfg.iterations == 0 {
        return Err(invalid("ν-method needs at least one iteration"));
    }
    if !(cfg.nu > 0.0) {
        return Err(invalid(format!("ν must be > 0, got {}", cfg.nu)));
    }
    let x = samples.matrix();
    let kernel = cfg.curl_free_kernel(x)?;
    let pts = rows(x);
    let m = pts.len();
    let d = kernel.dim;
    let gram = kernel.gram(x, x)?.entries;
    let h = DVector::from_iterator(m * d, zeta_at(&kernel, &pts, &pts).transpose().iter().copied());

    let inv_m = 1.0 / m as f64;
    let omega1 = nu_method_omega(1, cfg.nu);
    // (a_{t-2}, a_{t-1}) and (c_{t-2}, c_{t-1}), starting at t = 2.
    let (mut a_prev2, mut a_prev) = (0.0, -omega1);
    let mut c_prev2 = DVector::zeros(m * d);
    let mut c_prev = DVector::zeros(m * d);
    for t in 2..=cfg.iterations {
        let u = nu_method_u(t, cfg.nu);
        let w = nu_method_omega(t, cfg.nu);
        let a_t = (1.0 + u) * a_prev - u * a_prev2 - w;
        let mut inner = &gram * &c_prev;
        inner.axpy(a_prev, &h, 1.0);
        let mut c_t = c_prev.scale(1.0 + u);
        c_t.axpy(-w * inv_m, &inner, 1.0);
        c_t.axpy(-u, &c_prev2, 1.0);
        if !a_t.is_finite() || !(a_t.abs() <= DIVERGENCE_LIMIT) || !(c_t.amax() <= DIVERGENCE_LIMIT) {
            return Err(numeric(format!(
                "ν-method iterates diverged at t = {t}; use fewer iterations or a larger bandwidth"
            )));
        }
        a_prev2 = a_prev;
        a_prev = a_t;
        c_prev2 = std::mem::replace(&mut c_prev, c_t);
    }
    let estimator = CurlFreeExpansion {
        kernel,
        a: a_prev,
        c: c_prev.clone(),
        samples: pts,
    };
    Ok(NuMethodState {
        iterations: cfg.iterations,
        nu: cfg.nu,
        a: a_prev,
        c: c_prev,
        h,
        gram,
        estimator,
    })
}

/// Tikhonov-regularized estimator `(L̂ + λI)⁻¹(-ζ̂)` in the finite representation:
/// `a = -1/λ`, `(K/M + λI) c = h / (λM)`.
pub fn tikhonov_fit(samples: &SampleBatch, cfg: &NuMethodConfig) -> Result<CurlFreeExpansion> {
    let lambda = cfg
        .tikhonov_lambda
        .ok_or_else(|| invalid("Tikhonov estimator requires tikhonov_lambda"))?;
    if !(lambda > 0.0) {
        return Err(invalid(format!("tikhonov_lambda must be > 0, got {lambda}")));
    }
    let x = samples.matrix();
    let kernel = cfg.curl_free_kernel(x)?;
    let pts = rows(x);
    let m = pts.len();
    let d = kernel.dim;
    let mut system = kernel.gram(x, x)?.entries / m as f64;
    for i in 0..m * d {
        system[(i, i)] += lambda;
    }
    let h = DVector::from_iterator(m * d, zeta_at(&kernel, &pts, &pts).transpose().iter().copied());
    let chol = Cholesky::new(system)
        .ok_or_else(|| numeric(format!("Tikhonov system is singular (λ = {lambda:e})")))?;
    let c = chol.solve(&(h / (lambda * m as f64)));
    if !all_finite(c.iter()) {
        return Err(numeric("Tikhonov solution is non-finite"));
    }
    Ok(CurlFreeExpansion {
        kernel,
        a: -1.0 / lambda,
        c,
        samples: pts,
    })
}

// ---------------------------------------------------------------------------
// Facade
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "estimator")]
pub enum ScoreEstimator {
    Gaussian { jitter: Jitter },
    Ssge(SsgeConfig),
    NuMethod(NuMethodConfig),
    Tikhonov(NuMethodConfig),
}

impl ScoreEstimator {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreEstimator::Gaussian { .. } => "gaussian",
            ScoreEstimator::Ssge(_) => "ssge",
            ScoreEstimator::NuMethod(_) => "nu_method",
            ScoreEstimator::Tikhonov(_) => "tikhonov",
        }
    }

    pub fn fit(&self, samples: &SampleBatch) -> Result<FittedScore> {
        Ok(match self {
            ScoreEstimator::Gaussian { jitter } => {
                FittedScore::Gaussian(gaussian_score_fit_with(samples, *jitter)?)
            }
            ScoreEstimator::Ssge(cfg) => FittedScore::Ssge(ssge_fit(samples, cfg)?),
            ScoreEstimator::NuMethod(cfg) => {
                FittedScore::CurlFree(nu_method_fit(samples, cfg)?.estimator)
            }
            ScoreEstimator::Tikhonov(cfg) => FittedScore::CurlFree(tikhonov_fit(samples, cfg)?),
        })
    }
}

#[derive(Debug, Clone)]
pub enum FittedScore {
    Gaussian(GaussianScoreModel),
    Ssge(SsgeModel),
    CurlFree(CurlFreeExpansion),
}

impl ScoreModel for FittedScore {
    fn dim(&self) -> usize {
        match self {
            FittedScore::Gaussian(m) => m.dim(),
            FittedScore::Ssge(m) => m.dim(),
            FittedScore::CurlFree(m) => m.dim(),
        }
    }

    fn score_matrix(&self, queries: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            FittedScore::Gaussian(m) => m.score_matrix(queries),
            FittedScore::Ssge(m) => m.score_matrix(queries),
            FittedScore::CurlFree(m) => m.score_matrix(queries),
        }
    }
}

pub fn estimate_score(
    estimator: &ScoreEstimator,
    samples: &SampleBatch,
    queries: &DMatrix<f64>,
) -> Result<ScoreField> {
    let field = estimator.fit(samples)?.score(queries)?;
    if !all_finite(field.scores.iter()) {
        return Err(numeric(format!("{} estimator produced non-finite scores", estimator.name())));
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_samples(m: usize, d: usize, seed: u64) -> SampleBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SampleBatch::new(DMatrix::from_fn(m, d, |_, _| StandardNormal.sample(&mut rng))).unwrap()
    }

    fn grid_1d(lo: f64, hi: f64, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 1, |i, _| lo + (hi - lo) * i as f64 / (n - 1) as f64)
    }

    fn rel_l2(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
        (est - truth).norm() / truth.norm()
    }

    #[test]
    fn sample_batch_validation() {
        assert!(SampleBatch::new(DMatrix::zeros(1, 2)).is_err());
        assert!(SampleBatch::new(DMatrix::from_element(3, 1, f64::NAN)).is_err());
    }

    #[test]
    fn gaussian_score_is_zero_at_mean_and_exact() {
        let s = normal_samples(50, 3, 1);
        let model = gaussian_score_fit(&s, 1e-6).unwrap();
        let at_mean = model.score_matrix(&DMatrix::from_row_slice(1, 3, model.mean.as_slice())).unwrap();
        assert_eq!(at_mean.amax(), 0.0);

        // closed form -(Σ̂ + jitter I)⁻¹ (x - μ̂) via an independent inverse
        let x = s.matrix();
        let mu = x.row_mean();
        let mut cov = DMatrix::zeros(3, 3);
        for r in x.row_iter() {
            let c = r - &mu;
            cov += c.transpose() * &c;
        }
        cov /= 49.0;
        for i in 0..3 {
            cov[(i, i)] += 1e-6;
        }
        let inv = cov.try_inverse().unwrap();
        let q = DMatrix::from_row_slice(2, 3, &[0.5, -1.0, 2.0, 0.0, 0.3, -0.2]);
        let est = model.score_matrix(&q).unwrap();
        for i in 0..2 {
            let expect = -&inv * (q.row(i) - &mu).transpose();
            for j in 0..3 {
                assert_relative_eq!(est[(i, j)], expect[j], epsilon = 1e-10, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn gaussian_zero_covariance_limit_pulls_to_mean() {
        let s = SampleBatch::new(DMatrix::zeros(5, 2)).unwrap();
        let model = gaussian_score_fit(&s, 1e-3).unwrap();
        let est = model.score_matrix(&DMatrix::from_row_slice(1, 2, &[1.0, -2.0])).unwrap();
        assert_relative_eq!(est[(0, 0)], -1e3, max_relative = 1e-9);
        assert_relative_eq!(est[(0, 1)], 2e3, max_relative = 1e-9);
        assert!(matches!(gaussian_score_fit(&s, 0.0), Err(crate::Error::NumericFailure(_))));
    }

    #[test]
    fn gaussian_standard_normal_oracle() {
        let s = normal_samples(10_000, 2, 2);
        let model = gaussian_score_fit(&s, 1e-8).unwrap();
        let est = model.score_matrix(&DMatrix::from_row_slice(1, 2, &[1.0, 1.0])).unwrap();
        for j in 0..2 {
            assert!((est[(0, j)] + 1.0).abs() <= 0.1);
        }
    }

    #[test]
    fn truncation_rule() {
        assert_eq!(select_truncation(&[2.0], 0.97), 1);
        assert_eq!(select_truncation(&[5.0, 3.0, 2.0], 1.0), 3);
        // fractions 0.5, 0.8, 1.0
        assert_eq!(select_truncation(&[5.0, 3.0, 2.0], 0.85), 2);
        assert_eq!(select_truncation(&[5.0, 3.0, 2.0], 0.8), 1);
        assert_eq!(select_truncation(&[5.0, 3.0, 2.0], 0.1), 1);
    }

    #[test]
    fn ssge_duplicate_points_keep_one_eigenfunction() {
        let s = SampleBatch::new(DMatrix::from_element(2, 1, 0.7)).unwrap();
        let cfg = SsgeConfig {
            eigenvalue_coverage: 0.97,
            ..Default::default()
        };
        let model = ssge_fit(&s, &cfg).unwrap();
        assert_eq!(model.num_eigenfunctions(), 1);
    }

    #[test]
    fn ssge_full_coverage_keeps_positive_spectrum() {
        let s = normal_samples(40, 1, 3);
        let cfg = SsgeConfig {
            eigenvalue_coverage: 1.0,
            ..Default::default()
        };
        let model = ssge_fit(&s, &cfg).unwrap();
        let positive = model
            .spectrum
            .iter()
            .filter(|&&l| l > EIGEN_FLOOR * model.spectrum[0])
            .count();
        assert_eq!(model.num_eigenfunctions(), positive);
        for w in model.eigenvalues.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn ssge_eigenfunctions_orthonormal_on_samples() {
        let s = normal_samples(300, 1, 4);
        let model = ssge_fit(&s, &SsgeConfig::default()).unwrap();
        let psi = model.eigenfunctions(s.matrix()).unwrap();
        let gram = psi.tr_mul(&psi) / 300.0;
        let j = model.num_eigenfunctions();
        assert!(j >= 2);
        assert!((gram - DMatrix::identity(j, j)).amax() <= 1e-6);
    }

    #[test]
    fn ssge_coverage_rule_is_maximal() {
        let s = normal_samples(200, 2, 5);
        let cfg = SsgeConfig {
            eigenvalue_coverage: 0.95,
            ..Default::default()
        };
        let model = ssge_fit(&s, &cfg).unwrap();
        let floor = EIGEN_FLOOR * model.spectrum[0];
        let kept: Vec<f64> = model.spectrum.iter().copied().filter(|&l| l > floor).collect();
        let total: f64 = kept.iter().sum();
        let j = model.num_eigenfunctions();
        let frac = |n: usize| kept[..n].iter().sum::<f64>() / total;
        assert!(frac(j) < 0.95);
        assert!(frac(j + 1) >= 0.95);
    }

    #[test]
    fn ssge_standard_normal_cosine() {
        let s = normal_samples(1000, 1, 6);
        let model = ssge_fit(&s, &SsgeConfig::default()).unwrap();
        let q = grid_1d(-2.0, 2.0, 41);
        let est = model.score_matrix(&q).unwrap();
        let truth = -&q;
        let mean_cos = (0..41)
            .map(|i| crate::linalg::cosine_similarity(&[est[(i, 0)]], &[truth[(i, 0)]]))
            .sum::<f64>()
            / 41.0;
        // the grid contains 0 where the cosine is undefined; drop it
        let mean_cos_nonzero = (mean_cos * 41.0 - crate::linalg::cosine_similarity(&[est[(20, 0)]], &[0.0])) / 40.0;
        assert!(mean_cos_nonzero >= 0.99, "{mean_cos_nonzero}");
    }

    #[test]
    fn ssge_shifted_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::from_fn(2000, 1, |_, _| {
            3.0 + 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let model = ssge_fit(&SampleBatch::new(x).unwrap(), &SsgeConfig::default()).unwrap();
        let q = grid_1d(1.0, 5.0, 41);
        let est = model.score_matrix(&q).unwrap();
        let truth = q.map(|v| -(v - 3.0) / 4.0);
        assert!(rel_l2(&est, &truth) <= 0.15, "{}", rel_l2(&est, &truth));
    }

    #[test]
    fn ssge_correlated_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rho: f64 = 0.5;
        let x: DMatrix<f64> = DMatrix::from_fn(2000, 2, |_, _| StandardNormal.sample(&mut rng));
        // L = chol([[1, ρ], [ρ, 1]])
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, rho, (1.0 - rho * rho).sqrt()]);
        let samples = x * l.transpose();
        let model = ssge_fit(&SampleBatch::new(samples).unwrap(), &SsgeConfig::default()).unwrap();
        let q = DMatrix::from_fn(25, 2, |i, j| if j == 0 { -1.0 + 0.5 * (i % 5) as f64 } else { -1.0 + 0.5 * (i / 5) as f64 });
        let est = model.score_matrix(&q).unwrap();
        let sigma_inv = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]).try_inverse().unwrap();
        let truth = -(&q * sigma_inv);
        assert!(rel_l2(&est, &truth) <= 0.2, "{}", rel_l2(&est, &truth));
    }

    #[test]
    fn nu_method_coefficients() {
        assert_relative_eq!(nu_method_omega(1, 1.0), 1.2, epsilon = 1e-15);
        for nu in [0.5, 1.0, 2.5] {
            assert_eq!(nu_method_u(1, nu), 0.0);
        }
    }

    #[test]
    fn nu_method_first_iterate_identity() {
        let s = normal_samples(60, 2, 9);
        let cfg = NuMethodConfig {
            iterations: 1,
            ..Default::default()
        };
        let state = nu_method_fit(&s, &cfg).unwrap();
        assert_eq!(state.c.amax(), 0.0);
        let q = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -1.0, 0.5, 1.5, -0.3]);
        let est = state.estimator.score_matrix(&q).unwrap();
        let zeta = state.estimator.zeta(&q).unwrap();
        assert_eq!(est, zeta * -1.2);
        // The regression target on a Gaussian is -x: T = 1 must point the same way.
        let truth = -&q;
        let cos = crate::linalg::cosine_similarity(est.as_slice(), truth.as_slice());
        assert!(cos > 0.5, "{cos}");
    }

    #[test]
    fn nu_method_standard_normal_2d() {
        let s = normal_samples(500, 2, 10);
        let state = nu_method_fit(&s, &NuMethodConfig::default()).unwrap();
        let q = DMatrix::from_fn(25, 2, |i, j| if j == 0 { -1.0 + 0.5 * (i % 5) as f64 } else { -1.0 + 0.5 * (i / 5) as f64 });
        let est = state.estimator.score_matrix(&q).unwrap();
        let err = rel_l2(&est, &-&q);
        assert!(err <= 0.15, "{err}");
    }

    #[test]
    fn tikhonov_standard_normal_1d() {
        let s = normal_samples(500, 1, 11);
        let cfg = NuMethodConfig {
            tikhonov_lambda: Some(1e-3),
            ..Default::default()
        };
        let model = tikhonov_fit(&s, &cfg).unwrap();
        let q = grid_1d(-2.0, 2.0, 41);
        let err = rel_l2(&model.score_matrix(&q).unwrap(), &-&q);
        assert!(err <= 0.15, "{err}");
    }

    #[test]
    fn tikhonov_vanishes_under_heavy_regularization() {
        let s = normal_samples(100, 1, 12);
        let q = grid_1d(-2.0, 2.0, 9);
        let fit = |lambda: f64| {
            let cfg = NuMethodConfig {
                tikhonov_lambda: Some(lambda),
                ..Default::default()
            };
            tikhonov_fit(&s, &cfg).unwrap().score_matrix(&q).unwrap()
        };
        let big = fit(1e6);
        let bigger = fit(1e7);
        assert!(big.amax() < 1e-5);
        // scales as 1/λ
        assert_relative_eq!(big.norm() / bigger.norm(), 10.0, max_relative = 1e-4);
        let missing = NuMethodConfig::default();
        assert!(tikhonov_fit(&s, &missing).is_err());
    }

    #[test]
    fn tikhonov_agrees_with_nu_method() {
        let s = normal_samples(500, 1, 13);
        let lambda: f64 = 1e-3;
        let tik = tikhonov_fit(
            &s,
            &NuMethodConfig {
                tikhonov_lambda: Some(lambda),
                ..Default::default()
            },
        )
        .unwrap();
        // iteration count matched to the regularization strength, T ≈ λ^(-1/2)
        let t = (1.0 / lambda.sqrt()).ceil() as usize;
        let nu = nu_method_fit(
            &s,
            &NuMethodConfig {
                iterations: t,
                ..Default::default()
            },
        )
        .unwrap();
        let q = grid_1d(-2.0, 2.0, 41);
        let a = tik.score_matrix(&q).unwrap();
        let b = nu.estimator.score_matrix(&q).unwrap();
        assert!(rel_l2(&b, &a) <= 0.2, "{}", rel_l2(&b, &a));
    }

    #[test]
    fn curl_free_estimates_have_vanishing_loop_integrals() {
        let s = normal_samples(200, 2, 14);
        let nu = nu_method_fit(&s, &NuMethodConfig::default()).unwrap().estimator;
        let tik = tikhonov_fit(
            &s,
            &NuMethodConfig {
                tikhonov_lambda: Some(1e-2),
                ..Default::default()
            },
        )
        .unwrap();
        for model in [&nu, &tik] {
            for &(cx, cy) in &[(0.0, 0.0), (0.5, -0.7), (-1.0, 1.0)] {
                let loop_integral = square_circulation(model, cx, cy, 0.1, 200);
                assert!(loop_integral.abs() <= 1e-3, "{loop_integral}");
            }
        }
    }

    // Midpoint rule for ∮ s·dl around an axis-aligned square.
    fn square_circulation(model: &CurlFreeExpansion, cx: f64, cy: f64, half: f64, n: usize) -> f64 {
        let corners = [
            (cx - half, cy - half),
            (cx + half, cy - half),
            (cx + half, cy + half),
            (cx - half, cy + half),
        ];
        let mut total = 0.0;
        for k in 0..4 {
            let (x0, y0) = corners[k];
            let (x1, y1) = corners[(k + 1) % 4];
            let pts = DMatrix::from_fn(n, 2, |i, j| {
                let t = (i as f64 + 0.5) / n as f64;
                if j == 0 { x0 + t * (x1 - x0) } else { y0 + t * (y1 - y0) }
            });
            let s = model.score_matrix(&pts).unwrap();
            for i in 0..n {
                total += (s[(i, 0)] * (x1 - x0) + s[(i, 1)] * (y1 - y0)) / n as f64;
            }
        }
        total
    }

    #[test]
    fn facade_examples() {
        let s = SampleBatch::new(DMatrix::from_row_slice(2, 1, &[-1.0, 1.0])).unwrap();
        let field = estimate_score(
            &ScoreEstimator::Gaussian {
                jitter: Jitter::Absolute(1e-6),
            },
            &s,
            &DMatrix::zeros(1, 1),
        )
        .unwrap();
        assert_eq!(field.scores[(0, 0)], 0.0);

        let s = normal_samples(30, 2, 15);
        let cfg = SsgeConfig {
            eigenvalue_coverage: 1.0,
            max_eigenfunctions: Some(30),
            ..Default::default()
        };
        let field = estimate_score(&ScoreEstimator::Ssge(cfg), &s, s.matrix()).unwrap();
        assert!(all_finite(field.scores.iter()));
        assert!(estimate_score(&ScoreEstimator::Ssge(cfg), &s, &DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn csv_dumps() {
        let dir = tempfile::tempdir().unwrap();
        let s = normal_samples(20, 1, 16);
        let model = ssge_fit(&s, &SsgeConfig::default()).unwrap();
        let spec_path = dir.path().join("spectrum.csv");
        model.write_spectrum_csv(&spec_path).unwrap();
        let text = std::fs::read_to_string(&spec_path).unwrap();
        assert!(text.starts_with("index,eigenvalue\n"));
        assert_eq!(text.lines().count(), 21);
        let field = model.score(&grid_1d(-1.0, 1.0, 3)).unwrap();
        let field_path = dir.path().join("field.csv");
        field.write_csv(&field_path).unwrap();
        assert!(std::fs::read_to_string(&field_path).unwrap().starts_with("x_1,s_1\n"));
    }
}
