//! Simulator-informed function priors.
//!
//! A [`CombinedPrior`] is a stochastic process defined only through its
//! marginals: draw simulator parameters `φ ~ p(φ)`, evaluate the simulator at
//! every point of a measurement set, and add an independent draw of a
//! zero-mean GP per output dimension. Scores of these marginals are then
//! estimated from samples with any [`ScoreEstimator`].

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Result};
use crate::kernels::IsotropicKernel;
use crate::linalg::{all_finite, cholesky_with_jitter, rows};
use crate::score::{Jitter, SampleBatch, ScoreEstimator, ScoreModel};

const GP_JITTER_START: f64 = 1e-8;
const GP_JITTER_MAX: f64 = 1e-2;
const MAX_REDRAWS: usize = 10;

/// Function values of several functions on one measurement set: one `k × d_y`
/// matrix per function (prior draw or particle).
pub type FunctionValues = Vec<DMatrix<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ParamDist {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
    /// Point mass; useful for pinning a parameter known exactly.
    Fixed { value: f64 },
}

impl ParamDist {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ParamDist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            ParamDist::LogUniform { lo, hi } => lo > 0.0 && hi.is_finite() && lo < hi,
            ParamDist::Normal { mean, std } => mean.is_finite() && std > 0.0 && std.is_finite(),
            ParamDist::Fixed { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid parameter distribution {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ParamDist::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            ParamDist::LogUniform { lo, hi } => {
                (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp()
            }
            ParamDist::Normal { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + std * z
            }
            ParamDist::Fixed { value } => value,
        }
    }

    /// Interval searched by local refinement: the support for bounded
    /// distributions, `mean ± 3 std` for the normal.
    pub fn search_interval(&self) -> (f64, f64) {
        match *self {
            ParamDist::Uniform { lo, hi } | ParamDist::LogUniform { lo, hi } => (lo, hi),
            ParamDist::Normal { mean, std } => (mean - 3.0 * std, mean + 3.0 * std),
            ParamDist::Fixed { value } => (value, value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    #[serde(flatten)]
    pub dist: ParamDist,
}

/// Independent prior over simulator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPrior {
    pub params: Vec<NamedParam>,
}

impl ParamPrior {
    pub fn new<S: Into<String>>(params: impl IntoIterator<Item = (S, ParamDist)>) -> Result<Self> {
        let prior = Self {
            params: params
                .into_iter()
                .map(|(name, dist)| NamedParam {
                    name: name.into(),
                    dist,
                })
                .collect(),
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn empty() -> Self {
        Self { params: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.params {
            p.dist.validate().map_err(|e| e.context(&p.name))?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.params.iter().map(|p| p.dist.sample(rng)).collect()
    }
}

/// Black-box simulator `g(x, φ)`.
pub trait DomainModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    /// Writes `g(x, φ)` into `out` (length `output_dim`). Must be
    /// deterministic; non-finite outputs are handled by the caller.
    fn query(&self, x: &[f64], phi: &[f64], out: &mut [f64]);

    /// Evaluate at every row of `x`, giving a `k × d_y` matrix.
    fn query_set(&self, x: &DMatrix<f64>, phi: &[f64]) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(invalid(format!(
                "domain model expects inputs of dimension {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        if phi.len() != self.param_dim() {
            return Err(invalid(format!(
                "domain model expects {} parameters, got {}",
                self.param_dim(),
                phi.len()
            )));
        }
        let dy = self.output_dim();
        let mut out = DMatrix::zeros(x.nrows(), dy);
        let mut buf = vec![0.0; dy];
        let mut xi = vec![0.0; x.ncols()];
        for i in 0..x.nrows() {
            for (j, v) in xi.iter_mut().enumerate() {
                *v = x[(i, j)];
            }
            self.query(&xi, phi, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
        if !all_finite(out.iter()) {
            return Err(numeric(format!("simulator returned non-finite output for φ = {phi:?}")));
        }
        Ok(out)
    }
}

/// The simulator that always returns zero: a combined prior over it is the
/// gap GP alone.
#[derive(Debug, Clone, Copy)]
pub struct ZeroDomain {
    pub input_dim: usize,
    pub output_dim: usize,
}

impl DomainModel for ZeroDomain {
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn output_dim(&self) -> usize {
        self.output_dim
    }
    fn param_dim(&self) -> usize {
        0
    }
    fn query(&self, _x: &[f64], _phi: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Zero-mean GP with one isotropic kernel per output dimension. A kernel
/// variance of exactly zero switches the gap off for that dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimToRealGP {
    pub kernels: Vec<IsotropicKernel>,
}

impl SimToRealGP {
    pub fn new(kernels: Vec<IsotropicKernel>) -> Result<Self> {
        let gp = Self { kernels };
        gp.validate()?;
        Ok(gp)
    }

    /// Same kernel for every output dimension.
    pub fn shared(kernel: IsotropicKernel, output_dim: usize) -> Result<Self> {
        Self::new(vec![kernel; output_dim])
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(invalid("gap GP needs at least one output dimension"));
        }
        for (i, k) in self.kernels.iter().enumerate() {
            if !(k.variance >= 0.0 && k.variance.is_finite()) {
                return Err(invalid(format!("gap variance for output {i} must be >= 0")));
            }
            if !(k.lengthscale > 0.0 && k.lengthscale.is_finite()) {
                return Err(invalid(format!("gap lengthscale for output {i} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.kernels.len()
    }

    pub fn gram(&self, dim: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let k = &self.kernels[dim];
        let pts = rows(x);
        DMatrix::from_fn(x.nrows(), x.nrows(), |a, b| {
            k.eval_sq_dist(crate::linalg::sq_dist(&pts[a], &pts[b]))
        })
    }

    /// Cholesky factor of the Gram matrix on `x`, jittered if needed.
    pub fn cholesky(&self, dim: usize, x: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
        let (chol, jitter) = cholesky_with_jitter(&self.gram(dim, x), GP_JITTER_START, GP_JITTER_MAX)
            .map_err(|e| e.context(format!("gap GP output {dim}")))?;
        if jitter > 0.0 {
            log::debug!("gap GP output {dim}: added jitter {jitter:e}");
        }
        Ok(chol)
    }
}

/// Simulator plus gap process, factorized over output dimensions.
#[derive(Clone)]
pub struct CombinedPrior {
    pub domain: Arc<dyn DomainModel>,
    pub params: ParamPrior,
    pub gap: SimToRealGP,
}

impl fmt::Debug for CombinedPrior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CombinedPrior")
            .field("input_dim", &self.domain.input_dim())
            .field("output_dim", &self.domain.output_dim())
            .field("params", &self.params)
            .field("gap", &self.gap)
            .finish()
    }
}

impl CombinedPrior {
    pub fn new(domain: Arc<dyn DomainModel>, params: ParamPrior, gap: SimToRealGP) -> Result<Self> {
        params.validate()?;
        gap.validate()?;
        if params.dim() != domain.param_dim() {
            return Err(invalid(format!(
                "parameter prior has {} entries but the simulator takes {}",
                params.dim(),
                domain.param_dim()
            )));
        }
        if gap.output_dim() != domain.output_dim() {
            return Err(invalid(format!(
                "gap GP has {} output dimensions but the simulator has {}",
                gap.output_dim(),
                domain.output_dim()
            )));
        }
        Ok(Self {
            domain,
            params,
            gap,
        })
    }

    /// GP-only prior (no simulator).
    pub fn gp_only(input_dim: usize, gap: SimToRealGP) -> Result<Self> {
        let domain = ZeroDomain {
            input_dim,
            output_dim: gap.output_dim(),
        };
        Self::new(Arc::new(domain), ParamPrior::empty(), gap)
    }

    pub fn input_dim(&self) -> usize {
        self.domain.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.domain.output_dim()
    }
}

/// Axis-aligned box. Zero-width dimensions are allowed and pin that input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let b = Self { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() {
            return Err(invalid("input box needs matching, non-empty lo/hi vectors"));
        }
        for (i, (l, h)) in self.lo.iter().zip(&self.hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(invalid(format!("input box dimension {i}: need lo <= hi, got [{l}, {h}]")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// `n` i.i.d. uniform draws as an `n × d` matrix.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                out[(i, j)] = self.lo[j] + (self.hi[j] - self.lo[j]) * rng.random::<f64>();
            }
        }
        out
    }
}

/// Measurement-set distribution: `k` uniform points in a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSampler {
    pub bounds: InputBox,
    pub k: usize,
}

impl MeasurementSampler {
    pub fn new(bounds: InputBox, k: usize) -> Result<Self> {
        bounds.validate()?;
        if k == 0 {
            return Err(invalid("measurement set size k must be >= 1"));
        }
        Ok(Self { bounds, k })
    }
}

pub fn sample_measurement_set<R: Rng + ?Sized>(s: &MeasurementSampler, rng: &mut R) -> DMatrix<f64> {
    s.bounds.sample(s.k, rng)
}

/// `P` joint draws of the combined process at the rows of `x`.
///
/// Each draw gets its own ChaCha stream derived from one value of `rng`, so
/// the result does not depend on how draws are scheduled across threads.
pub fn sample_prior_functions<R: RngCore + ?Sized>(
    prior: &CombinedPrior,
    x: &DMatrix<f64>,
    p: usize,
    rng: &mut R,
) -> Result<FunctionValues> {
    if p < 2 {
        return Err(invalid(format!("need at least 2 prior draws, got {p}")));
    }
    if x.nrows() == 0 {
        return Err(invalid("measurement set is empty"));
    }
    let dy = prior.output_dim();
    let factors: Vec<Option<DMatrix<f64>>> = (0..dy)
        .map(|i| {
            if prior.gap.kernels[i].variance == 0.0 {
                Ok(None)
            } else {
                prior.gap.cholesky(i, x).map(|c| Some(c.unpack()))
            }
        })
        .collect::<Result<_>>()?;
    let base = rng.next_u64();
    let k = x.nrows();
    (0..p)
        .into_par_iter()
        .map(|j| {
            let mut r = ChaCha8Rng::seed_from_u64(base);
            r.set_stream(j as u64);
            let mut sim = None;
            for _ in 0..=MAX_REDRAWS {
                let phi = prior.params.sample(&mut r);
                if let Ok(v) = prior.domain.query_set(x, &phi) {
                    sim = Some(v);
                    break;
                }
            }
            let mut f = sim.ok_or_else(|| {
                numeric(format!(
                    "simulator produced non-finite output for {} consecutive parameter draws",
                    MAX_REDRAWS + 1
                ))
            })?;
            for (i, l) in factors.iter().enumerate() {
                if let Some(l) = l {
                    let z = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut r));
                    let g = l * z;
                    for a in 0..k {
                        f[(a, i)] += g[a];
                    }
                }
            }
            Ok(f)
        })
        .collect()
}

/// The default prior-score estimator: Gaussian fit with covariance jitter
/// `1e-4 · trace(Σ)/k`.
pub fn default_prior_estimator() -> ScoreEstimator {
    ScoreEstimator::Gaussian {
        jitter: Jitter::TraceRelative(1e-4),
    }
}

/// Output dimension `dim` of each function as the rows of an `n × k` matrix.
pub fn output_slice(values: &[DMatrix<f64>], dim: usize) -> DMatrix<f64> {
    let k = values.first().map_or(0, |m| m.nrows());
    DMatrix::from_fn(values.len(), k, |a, b| values[a][(b, dim)])
}

/// Fit `estimator` separately to each output dimension of `samples` and
/// evaluate it at the function values `h`.
pub fn prior_score_from_samples(
    samples: &[DMatrix<f64>],
    h: &[DMatrix<f64>],
    estimator: &ScoreEstimator,
) -> Result<FunctionValues> {
    let first = samples.first().ok_or_else(|| invalid("no prior samples"))?;
    let (k, dy) = (first.nrows(), first.ncols());
    for m in h {
        if m.nrows() != k || m.ncols() != dy {
            return Err(invalid(format!(
                "function values have shape {}x{}, prior samples {k}x{dy}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    let mut out: FunctionValues = vec![DMatrix::zeros(k, dy); h.len()];
    for i in 0..dy {
        let ctx = || format!("prior score for output dimension {i}");
        let batch = SampleBatch::new(output_slice(samples, i)).map_err(|e| e.context(ctx()))?;
        let model = estimator.fit(&batch).map_err(|e| e.context(ctx()))?;
        let s = model
            .score_matrix(&output_slice(h, i))
            .map_err(|e| e.context(ctx()))?;
        if !all_finite(s.iter()) {
            return Err(numeric(format!("{}: non-finite {} score", ctx(), estimator.name())));
        }
        for (l, o) in out.iter_mut().enumerate() {
            for a in 0..k {
                o[(a, i)] = s[(l, a)];
            }
        }
    }
    Ok(out)
}

/// Estimated `∇ log p(h)` of the combined prior's marginal on `x`, for each
/// function in `h` (each `k × d_y`), from `p` fresh prior draws.
pub fn prior_score<R: RngCore + ?Sized>(
    prior: &CombinedPrior,
    x: &DMatrix<f64>,
    h: &[DMatrix<f64>],
    p: usize,
    estimator: &ScoreEstimator,
    rng: &mut R,
) -> Result<FunctionValues> {
    if let ScoreEstimator::Gaussian { .. } = estimator {
        if p < x.nrows() + 2 {
            return Err(invalid(format!(
                "gaussian prior score needs P >= k + 2 = {}, got {p}",
                x.nrows() + 2
            )));
        }
    }
    let samples = sample_prior_functions(prior, x, p, rng)?;
    prior_score_from_samples(&samples, h, estimator)
}

/// Exact `−K⁻¹h` per output dimension of the GP marginal on `x`.
pub fn gp_marginal_score(gp: &SimToRealGP, x: &DMatrix<f64>, h: &[DMatrix<f64>]) -> Result<FunctionValues> {
    let mut out: FunctionValues = h.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect();
    if h.is_empty() {
        return Ok(out);
    }
    check_gp_shapes(gp, x, h)?;
    for i in 0..gp.output_dim() {
        let chol = gp.cholesky(i, x)?;
        let rhs = output_slice(h, i).transpose();
        let sol = chol.solve(&rhs);
        for (l, o) in out.iter_mut().enumerate() {
            for a in 0..x.nrows() {
                o[(a, i)] = -sol[(a, l)];
            }
        }
    }
    Ok(out)
}

/// Log-density of one function's values under the GP marginal on `x`,
/// summed over output dimensions (same jittered factor as the score).
pub fn gp_marginal_log_density(gp: &SimToRealGP, x: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<f64> {
    check_gp_shapes(gp, x, std::slice::from_ref(h))?;
    let k = x.nrows() as f64;
    let mut total = 0.0;
    for i in 0..gp.output_dim() {
        let chol = gp.cholesky(i, x)?;
        let v = h.column(i).into_owned();
        let quad = v.dot(&chol.solve(&v));
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        total += -0.5 * quad - 0.5 * logdet - 0.5 * k * (2.0 * std::f64::consts::PI).ln();
    }
    Ok(total)
}

fn check_gp_shapes(gp: &SimToRealGP, x: &DMatrix<f64>, h: &[DMatrix<f64>]) -> Result<()> {
    for m in h {
        if m.nrows() != x.nrows() || m.ncols() != gp.output_dim() {
            return Err(invalid(format!(
                "function values {}x{} do not match {} points and {} outputs",
                m.nrows(),
                m.ncols(),
                x.nrows(),
                gp.output_dim()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cosine_similarity;
    use crate::score::SsgeConfig;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// `g(x; a, b) = a·sin(b·x)`, two outputs `(g, -g)`.
    struct Wave;

    impl DomainModel for Wave {
        fn input_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            2
        }
        fn param_dim(&self) -> usize {
            2
        }
        fn query(&self, x: &[f64], phi: &[f64], out: &mut [f64]) {
            out[0] = phi[0] * (phi[1] * x[0]).sin();
            out[1] = -out[0];
        }
    }

    fn wave_prior(gap_var: f64) -> CombinedPrior {
        let params = ParamPrior::new([
            ("a", ParamDist::Uniform { lo: 0.5, hi: 2.0 }),
            ("b", ParamDist::Normal { mean: 1.0, std: 0.2 }),
        ])
        .unwrap();
        let gap = SimToRealGP::shared(IsotropicKernel::rbf(1.0, 0.5).unwrap().with_variance(gap_var), 2).unwrap();
        CombinedPrior::new(Arc::new(Wave), params, gap).unwrap()
    }

    fn grid(k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(k, 1, |i, _| -1.0 + 2.0 * i as f64 / (k.max(2) - 1) as f64)
    }

    #[test]
    fn degenerate_box_pins_coordinate() {
        let s = MeasurementSampler::new(InputBox::new(vec![0.0, 0.0], vec![0.0, 1.0]).unwrap(), 50).unwrap();
        let x = sample_measurement_set(&s, &mut rng(0));
        assert!(x.column(0).iter().all(|&v| v == 0.0));
        assert!(x.column(1).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn measurement_sets_are_seeded() {
        let s = MeasurementSampler::new(InputBox::new(vec![-1.0, 2.0], vec![1.0, 3.0]).unwrap(), 20).unwrap();
        let a = sample_measurement_set(&s, &mut rng(5));
        let b = sample_measurement_set(&s, &mut rng(5));
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn measurement_mean_law_of_large_numbers() {
        let s = MeasurementSampler::new(InputBox::new(vec![0.0; 3], vec![1.0; 3]).unwrap(), 10_000).unwrap();
        let x = sample_measurement_set(&s, &mut rng(1));
        for j in 0..3 {
            let mean = x.column(j).mean();
            assert!((0.48..=0.52).contains(&mean), "dim {j} mean {mean}");
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(InputBox::new(vec![1.0], vec![0.0]).is_err());
        assert!(MeasurementSampler::new(InputBox::new(vec![0.0], vec![1.0]).unwrap(), 0).is_err());
        assert!(ParamDist::Uniform { lo: 1.0, hi: 1.0 }.validate().is_err());
        assert!(ParamDist::Normal { mean: 0.0, std: 0.0 }.validate().is_err());
        assert!(ParamDist::LogUniform { lo: 0.0, hi: 1.0 }.validate().is_err());
        let prior = wave_prior(1.0);
        assert!(sample_prior_functions(&prior, &grid(4), 1, &mut rng(0)).is_err());
    }

    #[test]
    fn zero_gap_gives_pure_simulator_outputs() {
        let prior = wave_prior(0.0);
        let x = grid(6);
        let draws = sample_prior_functions(&prior, &x, 8, &mut rng(3)).unwrap();
        for f in &draws {
            // Recover (a, b) is unnecessary: outputs must be exactly (g, -g)
            // with g = a sin(bx) for some a, b, so the two columns cancel.
            for r in 0..x.nrows() {
                assert_eq!(f[(r, 0)], -f[(r, 1)]);
            }
        }
    }

    #[test]
    fn point_mass_without_gap_is_deterministic() {
        let params = ParamPrior::new([
            ("a", ParamDist::Fixed { value: 1.5 }),
            ("b", ParamDist::Fixed { value: 0.7 }),
        ])
        .unwrap();
        let gap = SimToRealGP::shared(IsotropicKernel::rbf(1.0, 1.0).unwrap().with_variance(0.0), 2).unwrap();
        let prior = CombinedPrior::new(Arc::new(Wave), params, gap).unwrap();
        let x = grid(5);
        let draws = sample_prior_functions(&prior, &x, 16, &mut rng(0)).unwrap();
        assert!(draws.iter().all(|d| d == &draws[0]));
        let expected = Wave.query_set(&x, &[1.5, 0.7]).unwrap();
        assert_eq!(draws[0], expected);

        // The Gaussian estimator has nothing to fit and must refuse.
        let err = prior_score(&prior, &x, &draws[..2], 64, &default_prior_estimator(), &mut rng(1))
            .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, crate::Error::NumericFailure(_)), "{msg}");
        assert!(msg.contains("output dimension 0"), "{msg}");
    }

    #[test]
    fn prior_draws_are_reproducible() {
        let prior = wave_prior(0.3);
        let x = grid(7);
        let a = sample_prior_functions(&prior, &x, 33, &mut rng(9)).unwrap();
        let b = sample_prior_functions(&prior, &x, 33, &mut rng(9)).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.as_slice(), v.as_slice());
        }
    }

    #[test]
    fn nonfinite_simulator_fails_after_redraws() {
        struct Broken;
        impl DomainModel for Broken {
            fn input_dim(&self) -> usize {
                1
            }
            fn output_dim(&self) -> usize {
                1
            }
            fn param_dim(&self) -> usize {
                0
            }
            fn query(&self, _x: &[f64], _phi: &[f64], out: &mut [f64]) {
                out[0] = f64::NAN;
            }
        }
        let gap = SimToRealGP::shared(IsotropicKernel::rbf(1.0, 1.0).unwrap(), 1).unwrap();
        let prior = CombinedPrior::new(Arc::new(Broken), ParamPrior::empty(), gap).unwrap();
        let err = sample_prior_functions(&prior, &grid(3), 4, &mut rng(0)).unwrap_err();
        assert!(matches!(err, crate::Error::NumericFailure(_)));
    }

    #[test]
    fn score_vanishes_at_empirical_mean() {
        let prior = wave_prior(0.2);
        let x = grid(4);
        let p = 256;
        let samples = sample_prior_functions(&prior, &x, p, &mut rng(11)).unwrap();
        let mut mean = DMatrix::zeros(4, 2);
        for s in &samples {
            mean += s;
        }
        mean /= p as f64;
        let score = prior_score(&prior, &x, &[mean], p, &default_prior_estimator(), &mut rng(11)).unwrap();
        assert!(score[0].amax() < 1e-9, "{}", score[0]);
    }

    fn gp_only(k: usize) -> (CombinedPrior, DMatrix<f64>) {
        let gap = SimToRealGP::shared(IsotropicKernel::rbf(1.0, 1.0).unwrap(), 1).unwrap();
        (CombinedPrior::gp_only(1, gap).unwrap(), grid(k))
    }

    fn gp_probes(gp: &SimToRealGP, x: &DMatrix<f64>, n: usize, seed: u64) -> FunctionValues {
        let prior = CombinedPrior::gp_only(x.ncols(), gp.clone()).unwrap();
        sample_prior_functions(&prior, x, n.max(2), &mut rng(seed)).unwrap()[..n].to_vec()
    }

    fn rel_err(est: &[DMatrix<f64>], exact: &[DMatrix<f64>]) -> f64 {
        let num: f64 = est.iter().zip(exact).map(|(a, b)| (a - b).norm_squared()).sum();
        let den: f64 = exact.iter().map(|b| b.norm_squared()).sum();
        (num / den).sqrt()
    }

    #[test]
    fn gaussian_prior_score_matches_gp_oracle() {
        let (prior, x) = gp_only(4);
        let h = gp_probes(&prior.gap, &x, 8, 100);
        let exact = gp_marginal_score(&prior.gap, &x, &h).unwrap();
        let est = prior_score(&prior, &x, &h, 4096, &default_prior_estimator(), &mut rng(2)).unwrap();
        let err = rel_err(&est, &exact);
        assert!(err <= 0.2, "rel err {err}");
    }

    #[test]
    fn ssge_prior_score_points_the_right_way() {
        let (prior, x) = gp_only(4);
        let h = gp_probes(&prior.gap, &x, 8, 100);
        let exact = gp_marginal_score(&prior.gap, &x, &h).unwrap();
        let est = prior_score(&prior, &x, &h, 1024, &ScoreEstimator::Ssge(SsgeConfig::default()), &mut rng(2))
            .unwrap();
        let flat = |v: &[DMatrix<f64>]| v.iter().flat_map(|m| m.iter().copied()).collect::<Vec<_>>();
        let cos = cosine_similarity(&flat(&est), &flat(&exact));
        assert!(cos >= 0.9, "cosine {cos}");
    }

    #[test]
    fn gaussian_prior_score_converges_with_more_draws() {
        let (prior, x) = gp_only(4);
        let h = gp_probes(&prior.gap, &x, 8, 7);
        let exact = gp_marginal_score(&prior.gap, &x, &h).unwrap();
        let mut ratios: Vec<f64> = (0..5)
            .map(|s| {
                let small = prior_score(&prior, &x, &h, 512, &default_prior_estimator(), &mut rng(s)).unwrap();
                let large =
                    prior_score(&prior, &x, &h, 8192, &default_prior_estimator(), &mut rng(100 + s)).unwrap();
                rel_err(&large, &exact) / rel_err(&small, &exact)
            })
            .collect();
        let ratio = crate::linalg::median(&mut ratios);
        assert!(ratio <= 0.7, "error ratio {ratio}");
    }

    #[test]
    fn gp_score_trivial_cases() {
        let gp = SimToRealGP::shared(IsotropicKernel::rbf(2.5, 0.3).unwrap(), 2).unwrap();
        let x = grid(3);
        let zero = gp_marginal_score(&gp, &x, &[DMatrix::zeros(3, 2)]).unwrap();
        assert_eq!(zero[0], DMatrix::zeros(3, 2));

        let x1 = DMatrix::from_element(1, 1, 0.4);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, -3.0]);
        let s = gp_marginal_score(&gp, &x1, &[h.clone()]).unwrap();
        assert!((s[0][(0, 0)] + 1.0 / 2.5).abs() < 1e-14);
        assert!((s[0][(0, 1)] - 3.0 / 2.5).abs() < 1e-14);
    }

    #[test]
    fn gp_score_matches_finite_differences() {
        let gp = SimToRealGP::new(vec![
            IsotropicKernel::rbf(1.3, 0.7).unwrap(),
            IsotropicKernel::imq(0.8, 1.1).unwrap(),
        ])
        .unwrap();
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.1, 0.5, -0.3, 1.0, 0.8, -0.6, 0.2]);
        let mut r = rng(4);
        let h = DMatrix::from_fn(4, 2, |_, _| StandardNormal.sample(&mut r));
        let s = gp_marginal_score(&gp, &x, &[h.clone()]).unwrap();
        let eps = 1e-5;
        for a in 0..4 {
            for i in 0..2 {
                let mut hp = h.clone();
                let mut hm = h.clone();
                hp[(a, i)] += eps;
                hm[(a, i)] -= eps;
                let fd = (gp_marginal_log_density(&gp, &x, &hp).unwrap()
                    - gp_marginal_log_density(&gp, &x, &hm).unwrap())
                    / (2.0 * eps);
                let an = s[0][(a, i)];
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "({a},{i}): {fd} vs {an}");
            }
        }
    }

    #[test]
    fn permuting_output_dimensions_permutes_scores() {
        let prior = wave_prior(0.4);
        let x = grid(5);
        let samples = sample_prior_functions(&prior, &x, 128, &mut rng(8)).unwrap();
        let h = sample_prior_functions(&prior, &x, 3, &mut rng(9)).unwrap();
        let swap = |v: &[DMatrix<f64>]| -> FunctionValues {
            v.iter()
                .map(|m| DMatrix::from_fn(m.nrows(), 2, |a, b| m[(a, 1 - b)]))
                .collect()
        };
        for est in [default_prior_estimator(), ScoreEstimator::Ssge(SsgeConfig::default())] {
            let s = prior_score_from_samples(&samples, &h, &est).unwrap();
            let t = prior_score_from_samples(&swap(&samples), &swap(&h), &est).unwrap();
            assert_eq!(swap(&s), t);
        }
    }

    #[test]
    fn pendulum_prior_mean_is_self_consistent() {
        use crate::simulators::{pendulum_param_prior, transition_model};
        let u = |lo, hi| ParamDist::Uniform { lo, hi };
        let params = pendulum_param_prior(u(0.5, 1.5), u(0.5, 1.5), u(0.5, 1.5), u(0.5, 1.5)).unwrap();
        let gap = SimToRealGP::shared(IsotropicKernel::rbf(0.01, 1.0).unwrap(), 2).unwrap();
        let prior = CombinedPrior::new(Arc::new(transition_model(9.81, 1.0 / 30.0).unwrap()), params, gap).unwrap();
        let bounds = InputBox::new(vec![-3.0, -6.0, -1.0], vec![3.0, 6.0, 1.0]).unwrap();
        let x = bounds.sample(8, &mut rng(0));
        let small = sample_prior_functions(&prior, &x, 512, &mut rng(1)).unwrap();
        let large = sample_prior_functions(&prior, &x, 8192, &mut rng(2)).unwrap();
        for i in 0..2 {
            let s = output_slice(&small, i);
            let l = output_slice(&large, i);
            for a in 0..8 {
                let col = l.column(a);
                let mean_l = col.mean();
                let sd = col.variance().sqrt();
                let se = sd / (512f64).sqrt();
                let mean_s = s.column(a).mean();
                assert!((mean_s - mean_l).abs() <= 3.0 * se, "point {a} dim {i}: {mean_s} vs {mean_l} (se {se})");
            }
        }
    }
}
