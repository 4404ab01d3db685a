//! Training procedures.
//!
//! - FSVGD / Sim-FSVGD: Stein variational gradient descent on function values
//!   at `X = [X_batch, X_measure]`, projected back to parameters with each
//!   particle's vector-Jacobian product. The two differ only in the prior
//!   score: exact GP marginal for FSVGD, estimated from simulator-plus-gap
//!   samples for Sim-FSVGD.
//! - Weight-space mean-field VI (negative ELBO) and functional VI (negative
//!   fELBO with SSGE estimates of the ensemble's own score).
//! - SysID (simulator parameter fit) and GreyBox (SysID plus an FSVGD
//!   residual ensemble under the gap GP prior).

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{ensemble_forward, init_particles, likelihood_score, FunctionModel, LikelihoodModel, ParticleEnsemble};
use crate::error::{invalid, numeric, Result};
use crate::evaluation::{PredictiveDistribution, Predictor};
use crate::kernels::{median_heuristic, IsotropicKernel};
use crate::linalg::{all_finite, flatten_rows, vstack};
use crate::score::{BandwidthMode, ScoreEstimator, ScoreModel, SsgeConfig};
use crate::sim_priors::{
    default_prior_estimator, gp_marginal_score, output_slice, prior_score, CombinedPrior, DomainModel,
    FunctionValues, InputBox, ParamPrior, SimToRealGP,
};
use crate::simulators::Dataset;

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain steps along the update direction.
    Sgd,
    /// First/second-moment preconditioning of the update direction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-row optimizer memory for a block of parameter vectors.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    m: DMatrix<f64>,
    v: DMatrix<f64>,
    t: i32,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, rows: usize, cols: usize) -> Self {
        Self {
            kind,
            m: DMatrix::zeros(rows, cols),
            v: DMatrix::zeros(rows, cols),
            t: 0,
        }
    }

    /// Turns raw ascent directions (one row per parameter vector) into the
    /// directions actually stepped along.
    pub fn directions(&mut self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        match self.kind {
            Optimizer::Sgd => raw.clone(),
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                self.m = &self.m * beta1 + raw * (1.0 - beta1);
                self.v = &self.v * beta2 + raw.map(|g| g * g) * (1.0 - beta2);
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                self.m.zip_map(&self.v, |m, v| (m / c1) / ((v / c2).sqrt() + eps))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub train_nll: f64,
    pub grad_norm: f64,
    pub prior_score_norm: f64,
    /// Seconds since the start of training; the only nondeterministic column.
    pub wallclock: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        w.write_record(["step", "train_nll", "grad_norm", "prior_score_norm", "wallclock"])?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_to(&self, out: impl Write) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(["step", "train_nll", "grad_norm", "prior_score_norm", "wallclock"])?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// FSVGD
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FsvgdConfig {
    pub step_size: f64,
    pub steps: usize,
    pub num_particles: usize,
    /// Data points per step; `None` uses the full dataset.
    pub batch_size: Option<usize>,
    /// Measurement points `k` drawn fresh each step.
    pub measurement_points: usize,
    /// Box the measurement points are drawn from; required when `k > 0`.
    pub measurement_box: Option<InputBox>,
    /// Kernel over stacked function values. Its variance is `K_ll`.
    pub kernel: IsotropicKernel,
    pub bandwidth_mode: BandwidthMode,
    /// Prior-score estimator for simulator priors.
    pub estimator: ScoreEstimator,
    /// Prior draws per step for simulator priors.
    pub prior_samples: usize,
    pub optimizer: Optimizer,
    /// If set, the step size decays geometrically from `step_size` to this
    /// value over the run. Off by default.
    pub final_step_size: Option<f64>,
    pub seed: u64,
    /// Record every `log_every`-th step (and the last one).
    pub log_every: usize,
}

impl Default for FsvgdConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            steps: 1000,
            num_particles: 10,
            batch_size: None,
            measurement_points: 16,
            measurement_box: None,
            kernel: IsotropicKernel {
                family: crate::kernels::KernelFamily::Rbf,
                variance: 1.0,
                lengthscale: 1.0,
            },
            bandwidth_mode: BandwidthMode::MedianHeuristic,
            estimator: default_prior_estimator(),
            prior_samples: 512,
            optimizer: Optimizer::Sgd,
            final_step_size: None,
            seed: 0,
            log_every: 1,
        }
    }
}

impl FsvgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(invalid("step size must be positive"));
        }
        if self.num_particles == 0 {
            return Err(invalid("need at least one particle"));
        }
        if let Some(f) = self.final_step_size {
            if !(f > 0.0 && f.is_finite()) {
                return Err(invalid("final step size must be positive"));
            }
        }
        if self.batch_size == Some(0) {
            return Err(invalid("batch size must be >= 1"));
        }
        if self.measurement_points > 0 {
            match &self.measurement_box {
                Some(b) => b.validate()?,
                None => return Err(invalid("measurement points requested without a measurement box")),
            }
        }
        self.kernel.validate()?;
        if self.log_every == 0 {
            return Err(invalid("log_every must be >= 1"));
        }
        Ok(())
    }

    /// Multiplier of the step size at `step` under the optional decay.
    pub fn step_scale(&self, step: usize) -> f64 {
        match self.final_step_size {
            Some(f) if self.steps > 1 => (f / self.step_size).powf(step as f64 / (self.steps - 1) as f64),
            _ => 1.0,
        }
    }
}

/// Function-space prior used by a particle trainer.
#[derive(Debug, Clone)]
pub enum FunctionPrior {
    /// Exact GP marginal score (vanilla FSVGD).
    Gp(SimToRealGP),
    /// Score estimated from simulator-plus-gap samples (Sim-FSVGD).
    Combined(CombinedPrior),
}

impl FunctionPrior {
    pub fn score(&self, x: &DMatrix<f64>, h: &[DMatrix<f64>], cfg: &FsvgdConfig, rng: &mut ChaCha8Rng) -> Result<FunctionValues> {
        match self {
            FunctionPrior::Gp(gp) => gp_marginal_score(gp, x, h),
            FunctionPrior::Combined(prior) => prior_score(prior, x, h, cfg.prior_samples, &cfg.estimator, rng),
        }
    }
}

/// Function-space kernel for one step: the configured kernel, with the
/// lengthscale set to the median pairwise distance of the stacked function
/// values in median mode (1 for a single particle).
pub fn function_kernel(h: &[DMatrix<f64>], cfg: &FsvgdConfig) -> Result<IsotropicKernel> {
    match cfg.bandwidth_mode {
        BandwidthMode::Fixed => Ok(cfg.kernel),
        BandwidthMode::MedianHeuristic => {
            if h.len() < 2 {
                return Ok(cfg.kernel.with_lengthscale(1.0));
            }
            let stacked = DMatrix::from_fn(h.len(), h[0].len(), |l, j| flatten_rows(&h[l])[j]);
            Ok(cfg.kernel.with_lengthscale(median_heuristic(&stacked)?))
        }
    }
}

/// SVGD transport `u_l = (1/L) Σ_i [k(h_i, h_l) s_i + ∇_{h_i} k(h_i, h_l)]`.
pub fn svgd_direction(h: &[DMatrix<f64>], scores: &[DMatrix<f64>], kernel: &IsotropicKernel) -> Result<FunctionValues> {
    if h.len() != scores.len() || h.is_empty() {
        return Err(invalid("need one score per particle"));
    }
    let flat: Vec<Vec<f64>> = h.iter().map(|m| flatten_rows(m).as_slice().to_vec()).collect();
    let sflat: Vec<Vec<f64>> = scores.iter().map(|m| flatten_rows(m).as_slice().to_vec()).collect();
    let n = flat[0].len();
    let inv_l = 1.0 / h.len() as f64;
    let (rows, cols) = h[0].shape();
    let mut grad = vec![0.0; n];
    Ok((0..h.len())
        .map(|l| {
            let mut u = vec![0.0; n];
            for i in 0..h.len() {
                let k = kernel.eval_sq_dist(crate::linalg::sq_dist(&flat[i], &flat[l]));
                kernel.grad_x_into(&flat[i], &flat[l], &mut grad);
                for j in 0..n {
                    u[j] += inv_l * (k * sflat[i][j] + grad[j]);
                }
            }
            DMatrix::from_row_slice(rows, cols, &u)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub train_nll: f64,
    pub grad_norm: f64,
    pub prior_score_norm: f64,
}

/// Mutable state of a particle trainer.
#[derive(Debug, Clone)]
pub struct ParticleState {
    pub ensemble: ParticleEnsemble,
    /// Current step size; halved once if an update turns non-finite.
    pub step_size: f64,
    /// Schedule multiplier applied on top of `step_size` for the next update.
    pub scale: f64,
    halved: bool,
    optimizer: OptimizerState,
}

impl ParticleState {
    pub fn new(ensemble: ParticleEnsemble, cfg: &FsvgdConfig) -> Self {
        let optimizer = OptimizerState::new(cfg.optimizer, ensemble.len(), ensemble.num_params());
        Self {
            ensemble,
            step_size: cfg.step_size,
            scale: 1.0,
            halved: false,
            optimizer,
        }
    }

    /// `θ_l += γ · direction_l`, retrying once with `γ/2` if that produces
    /// non-finite parameters.
    fn apply(&mut self, raw: &DMatrix<f64>) -> Result<()> {
        let dir = self.optimizer.directions(raw);
        loop {
            let next = &self.ensemble.particles + &dir * (self.step_size * self.scale);
            if all_finite(next.iter()) {
                self.ensemble.particles = next;
                return Ok(());
            }
            if self.halved {
                return Err(numeric(format!(
                    "particle update is non-finite even at step size {:e}",
                    self.step_size
                )));
            }
            log::warn!("non-finite particle update; halving step size to {:e}", self.step_size / 2.0);
            self.step_size /= 2.0;
            self.halved = true;
        }
    }
}

fn batch_indices(n: usize, batch: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match batch {
        Some(b) if b < n => {
            let mut idx = index::sample(rng, n, b).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Stacked inputs `[X_batch; X_measure]` plus the batch targets.
fn step_inputs(data: &Dataset, cfg: &FsvgdConfig, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    let batch = data.select(&batch_indices(data.len(), cfg.batch_size, rng));
    let xm = match (&cfg.measurement_box, cfg.measurement_points) {
        (Some(b), k) if k > 0 => b.sample(k, rng),
        _ => DMatrix::zeros(0, data.input_dim()),
    };
    (vstack(&batch.inputs, &xm), batch.targets)
}

/// Likelihood scores on the data rows scaled by `n/|batch|`, zero on the
/// measurement rows.
fn data_scores(h: &[DMatrix<f64>], y: &DMatrix<f64>, lik: &LikelihoodModel, n_total: usize) -> Result<FunctionValues> {
    let b = y.nrows();
    let scale = if b == 0 { 0.0 } else { n_total as f64 / b as f64 };
    h.iter()
        .map(|hl| {
            let mut s = DMatrix::zeros(hl.nrows(), hl.ncols());
            if b > 0 {
                let ls = likelihood_score(lik, &hl.rows(0, b).into_owned(), y)?;
                s.rows_mut(0, b).copy_from(&(ls * scale));
            }
            Ok(s)
        })
        .collect()
}

fn batch_nll(h: &[DMatrix<f64>], y: &DMatrix<f64>, lik: &LikelihoodModel) -> Result<f64> {
    if y.nrows() == 0 {
        return Ok(f64::NAN);
    }
    let means = h.iter().map(|m| m.rows(0, y.nrows()).into_owned()).collect();
    let pred = PredictiveDistribution::with_noise(means, &lik.noise_std)?;
    crate::evaluation::predictive_nll(&pred, y)
}

fn project(model: &dyn FunctionModel, ens: &ParticleEnsemble, x: &DMatrix<f64>, u: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let grads: Vec<DVector<f64>> = (0..ens.len())
        .into_par_iter()
        .map(|l| model.vjp(&ens.particle(l), x, &u[l]))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(grads.len(), ens.num_params(), |l, j| grads[l][j]))
}

fn frob_mean(v: &[DMatrix<f64>]) -> f64 {
    (v.iter().map(|m| m.norm_squared()).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// One FSVGD update of every particle.
pub fn fsvgd_step(
    model: &dyn FunctionModel,
    state: &mut ParticleState,
    data: &Dataset,
    prior: &FunctionPrior,
    lik: &LikelihoodModel,
    cfg: &FsvgdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let (x, y) = step_inputs(data, cfg, rng);
    if x.nrows() == 0 {
        return Err(invalid("step has neither data nor measurement points"));
    }
    let h = ensemble_forward(model, &state.ensemble, &x)?;
    let mut scores = data_scores(&h, &y, lik, data.len())?;
    let prior_scores = prior.score(&x, &h, cfg, rng)?;
    for (s, p) in scores.iter_mut().zip(&prior_scores) {
        *s += p;
    }
    let kernel = function_kernel(&h, cfg)?;
    let u = svgd_direction(&h, &scores, &kernel)?;
    let raw = project(model, &state.ensemble, &x, &u)?;
    let stats = StepStats {
        train_nll: batch_nll(&h, &y, lik)?,
        grad_norm: raw.norm(),
        prior_score_norm: frob_mean(&prior_scores),
    };
    state.apply(&raw)?;
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct TrainedEnsemble {
    pub ensemble: ParticleEnsemble,
    pub log: TrainingLog,
    /// Final step size (smaller than configured if it was halved).
    pub step_size: f64,
}

/// Runs `cfg.steps` FSVGD steps from particles initialized with `cfg.seed`.
pub fn train_particles(
    model: &dyn FunctionModel,
    data: &Dataset,
    prior: &FunctionPrior,
    lik: &LikelihoodModel,
    cfg: &FsvgdConfig,
) -> Result<TrainedEnsemble> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = init_particles(model, cfg.num_particles, &mut rng)?;
    train_particles_from(model, init, data, prior, lik, cfg, &mut rng)
}

pub fn train_particles_from(
    model: &dyn FunctionModel,
    init: ParticleEnsemble,
    data: &Dataset,
    prior: &FunctionPrior,
    lik: &LikelihoodModel,
    cfg: &FsvgdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainedEnsemble> {
    cfg.validate()?;
    if data.output_dim() != model.output_dim() || data.input_dim() != model.input_dim() {
        return Err(invalid("dataset and model dimensions disagree"));
    }
    let start = Instant::now();
    let mut state = ParticleState::new(init, cfg);
    let mut log = TrainingLog::default();
    for step in 0..cfg.steps {
        state.scale = cfg.step_scale(step);
        let stats = fsvgd_step(model, &mut state, data, prior, lik, cfg, rng)
            .map_err(|e| e.context(format!("step {step}")))?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.rows.push(LogRow {
                step,
                train_nll: stats.train_nll,
                grad_norm: stats.grad_norm,
                prior_score_norm: stats.prior_score_norm,
                wallclock: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(TrainedEnsemble {
        ensemble: state.ensemble,
        log,
        step_size: state.step_size,
    })
}

/// Sim-FSVGD: FSVGD under the simulator-plus-gap prior.
pub fn train_sim_fsvgd(
    model: &dyn FunctionModel,
    data: &Dataset,
    prior: &CombinedPrior,
    lik: &LikelihoodModel,
    cfg: &FsvgdConfig,
) -> Result<TrainedEnsemble> {
    train_particles(model, data, &FunctionPrior::Combined(prior.clone()), lik, cfg)
}

/// FSVGD under a GP prior with exact marginal scores.
pub fn train_fsvgd(
    model: &dyn FunctionModel,
    data: &Dataset,
    gp: &SimToRealGP,
    lik: &LikelihoodModel,
    cfg: &FsvgdConfig,
) -> Result<TrainedEnsemble> {
    train_particles(model, data, &FunctionPrior::Gp(gp.clone()), lik, cfg)
}

/// An ensemble together with its network and noise model.
#[derive(Clone)]
pub struct EnsemblePredictor {
    pub model: Arc<dyn FunctionModel>,
    pub ensemble: ParticleEnsemble,
    pub likelihood: LikelihoodModel,
}

impl Predictor for EnsemblePredictor {
    fn predict(&self, x: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        let means = ensemble_forward(self.model.as_ref(), &self.ensemble, x)?;
        PredictiveDistribution::with_noise(means, &self.likelihood.noise_std)
    }
}

// ---------------------------------------------------------------------------
// Weight-space VI
// ---------------------------------------------------------------------------

/// Mean-field Gaussian `q(θ) = N(mean, diag(exp(log_std))²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub mean: DVector<f64>,
    pub log_std: DVector<f64>,
}

impl VariationalParams {
    pub fn new(mean: DVector<f64>, log_std: DVector<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(invalid("mean and log-std lengths differ"));
        }
        if !all_finite(mean.iter().chain(log_std.iter())) {
            return Err(invalid("variational parameters must be finite"));
        }
        Ok(Self { mean, log_std })
    }

    pub fn std(&self) -> DVector<f64> {
        self.log_std.map(f64::exp)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let eps = crate::bnn::gaussian_vector(self.mean.len(), 1.0, rng);
        &self.mean + self.std().component_mul(&eps)
    }

    /// `l` parameter draws, used as an equal-weight predictive mixture.
    pub fn sample_ensemble<R: Rng>(&self, l: usize, rng: &mut R) -> Result<ParticleEnsemble> {
        let d = self.mean.len();
        let mut p = DMatrix::zeros(l, d);
        for i in 0..l {
            p.row_mut(i).copy_from(&self.sample(rng).transpose());
        }
        ParticleEnsemble::new(p)
    }
}

/// Isotropic Gaussian prior `N(0, std² I)` over parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightPrior {
    pub std: f64,
}

impl WeightPrior {
    pub fn new(std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) {
            return Err(invalid("weight prior std must be positive"));
        }
        Ok(Self { std })
    }
}

/// `KL[q ‖ p]` for diagonal `q` and isotropic zero-mean `p`, in closed form.
pub fn diag_gaussian_kl(vp: &VariationalParams, wp: &WeightPrior) -> f64 {
    let p2 = wp.std * wp.std;
    vp.mean
        .iter()
        .zip(vp.log_std.iter())
        .map(|(m, ls)| wp.std.ln() - ls + ((2.0 * ls).exp() + m * m) / (2.0 * p2) - 0.5)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEstimate {
    pub loss: f64,
    /// Monte-Carlo expected negative log-likelihood, scaled to the full data.
    pub expected_nll: f64,
    pub kl: f64,
}

/// Negative ELBO estimate and its reparameterization gradient with respect
/// to `(mean, log_std)`.
fn elbo_with_grad<R: Rng>(
    model: &dyn FunctionModel,
    vp: &VariationalParams,
    wp: &WeightPrior,
    batch: &Dataset,
    lik: &LikelihoodModel,
    n_total: usize,
    n_mc: usize,
    rng: &mut R,
) -> Result<(ElboEstimate, DVector<f64>, DVector<f64>)> {
    if n_mc == 0 {
        return Err(invalid("need at least one Monte-Carlo sample"));
    }
    let d = vp.mean.len();
    let std = vp.std();
    let p2 = wp.std * wp.std;
    let kl = diag_gaussian_kl(vp, wp);
    let mut g_mean = vp.mean.map(|m| m / p2);
    let mut g_log = std.map(|s| s * s / p2 - 1.0);
    let mut nll = 0.0;
    if !batch.is_empty() {
        let scale = n_total as f64 / batch.len() as f64;
        let w = 1.0 / n_mc as f64;
        for _ in 0..n_mc {
            let eps = crate::bnn::gaussian_vector(d, 1.0, rng);
            let theta = &vp.mean + std.component_mul(&eps);
            let h = model.forward(theta.as_slice(), &batch.inputs)?;
            nll -= w * scale * lik.log_likelihood(&h, &batch.targets)?;
            let s = likelihood_score(lik, &h, &batch.targets)?;
            // d(−log p)/dθ = −Jᵀ s.
            let g = -model.vjp(theta.as_slice(), &batch.inputs, &s)? * (w * scale);
            g_mean += &g;
            g_log += g.component_mul(&eps).component_mul(&std);
        }
    }
    Ok((
        ElboEstimate {
            loss: nll + kl,
            expected_nll: nll,
            kl,
        },
        g_mean,
        g_log,
    ))
}

/// Monte-Carlo negative ELBO on `batch`, likelihood scaled by
/// `n_total/|batch|`, KL in closed form.
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss<R: Rng>(
    model: &dyn FunctionModel,
    vp: &VariationalParams,
    wp: &WeightPrior,
    batch: &Dataset,
    lik: &LikelihoodModel,
    n_total: usize,
    n_mc: usize,
    rng: &mut R,
) -> Result<ElboEstimate> {
    elbo_with_grad(model, vp, wp, batch, lik, n_total, n_mc, rng).map(|r| r.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: Option<usize>,
    pub mc_samples: usize,
    pub init_log_std: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            steps: 1000,
            batch_size: None,
            mc_samples: 4,
            init_log_std: -3.0,
            optimizer: Optimizer::adam(),
            seed: 0,
            log_every: 1,
        }
    }
}

/// Stochastic minimization of the negative ELBO. The log's `train_nll`
/// column holds the loss estimate.
pub fn vi_train(
    model: &dyn FunctionModel,
    data: &Dataset,
    wp: &WeightPrior,
    lik: &LikelihoodModel,
    cfg: &ViConfig,
) -> Result<(VariationalParams, TrainingLog)> {
    if !(cfg.learning_rate > 0.0) || cfg.log_every == 0 {
        return Err(invalid("learning rate must be positive and log_every >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = model.num_params();
    let init = init_particles(model, 1, &mut rng)?;
    let mut vp = VariationalParams::new(
        DVector::from_vec(init.particle(0)),
        DVector::from_element(d, cfg.init_log_std),
    )?;
    let mut opt = OptimizerState::new(cfg.optimizer, 1, 2 * d);
    let start = Instant::now();
    let mut log = TrainingLog::default();
    for step in 0..cfg.steps {
        let batch = data.select(&batch_indices(data.len(), cfg.batch_size, &mut rng));
        let (est, gm, gl) = elbo_with_grad(model, &vp, wp, &batch, lik, data.len(), cfg.mc_samples, &mut rng)?;
        let raw = DMatrix::from_fn(1, 2 * d, |_, j| if j < d { -gm[j] } else { -gl[j - d] });
        let dir = opt.directions(&raw);
        for j in 0..d {
            vp.mean[j] += cfg.learning_rate * dir[(0, j)];
            vp.log_std[j] += cfg.learning_rate * dir[(0, d + j)];
        }
        if !all_finite(vp.mean.iter().chain(vp.log_std.iter())) {
            return Err(numeric(format!("variational parameters diverged at step {step}")));
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log.rows.push(LogRow {
                step,
                train_nll: est.loss,
                grad_norm: (gm.norm_squared() + gl.norm_squared()).sqrt(),
                prior_score_norm: est.kl,
                wallclock: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok((vp, log))
}

/// Predictive mixture from `components` draws of a variational posterior.
pub struct VariationalPredictor {
    pub model: Arc<dyn FunctionModel>,
    pub params: VariationalParams,
    pub likelihood: LikelihoodModel,
    pub components: usize,
    pub seed: u64,
}

impl Predictor for VariationalPredictor {
    fn predict(&self, x: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let ens = self.params.sample_ensemble(self.components, &mut rng)?;
        let means = ensemble_forward(self.model.as_ref(), &ens, x)?;
        PredictiveDistribution::with_noise(means, &self.likelihood.noise_std)
    }
}

// ---------------------------------------------------------------------------
// Functional VI
// ---------------------------------------------------------------------------

/// `∇_h KL = ∇ log q(h) − ∇ log p(h)` at each particle, with `∇ log q`
/// estimated by SSGE from the particles themselves (per output dimension).
pub fn functional_kl_gradient(h: &[DMatrix<f64>], prior_scores: &[DMatrix<f64>], ssge: &SsgeConfig) -> Result<FunctionValues> {
    let (k, dy) = h.first().map(|m| m.shape()).ok_or_else(|| invalid("no function samples"))?;
    let mut out: FunctionValues = prior_scores.iter().map(|p| -p).collect();
    for i in 0..dy {
        let samples = output_slice(h, i);
        let q = crate::score::ssge_fit(&crate::score::SampleBatch::new(samples.clone())?, ssge)
            .map_err(|e| e.context(format!("posterior score for output dimension {i}")))?;
        let s = q.score_matrix(&samples)?;
        for (l, o) in out.iter_mut().enumerate() {
            for a in 0..k {
                o[(a, i)] += s[(l, a)];
            }
        }
    }
    Ok(out)
}

const MIN_FELBO_SAMPLES: usize = 8;

/// One functional-VI step on an ensemble: ascend the likelihood score plus
/// `∇ log p − ∇ log q` on `[X_batch, X_measure]`. With no measurement points
/// the KL term is dropped. Returns `None` (ensemble untouched) if the SSGE
/// fit fails.
#[allow(clippy::too_many_arguments)]
pub fn felbo_grad_step(
    model: &dyn FunctionModel,
    state: &mut ParticleState,
    data: &Dataset,
    prior: &FunctionPrior,
    lik: &LikelihoodModel,
    cfg: &FsvgdConfig,
    ssge: &SsgeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<StepStats>> {
    let (x, y) = step_inputs(data, cfg, rng);
    if x.nrows() == 0 {
        return Err(invalid("step has neither data nor measurement points"));
    }
    let h = ensemble_forward(model, &state.ensemble, &x)?;
    let mut scores = data_scores(&h, &y, lik, data.len())?;
    let mut prior_norm = 0.0;
    if cfg.measurement_points > 0 {
        if h.len() < MIN_FELBO_SAMPLES {
            return Err(invalid(format!(
                "functional VI needs at least {MIN_FELBO_SAMPLES} particles, got {}",
                h.len()
            )));
        }
        let prior_scores = prior.score(&x, &h, cfg, rng)?;
        prior_norm = frob_mean(&prior_scores);
        match functional_kl_gradient(&h, &prior_scores, ssge) {
            Ok(kl) => {
                for (s, g) in scores.iter_mut().zip(&kl) {
                    *s -= g;
                }
            }
            Err(e) => {
                log::warn!("skipping functional VI step: {e}");
                return Ok(None);
            }
        }
    }
    let raw = project(model, &state.ensemble, &x, &scores)?;
    let stats = StepStats {
        train_nll: batch_nll(&h, &y, lik)?,
        grad_norm: raw.norm(),
        prior_score_norm: prior_norm,
    };
    state.apply(&raw)?;
    Ok(Some(stats))
}

/// Functional VI over an ensemble for `cfg.steps` steps. Fails if more than
/// 10% of steps had to be skipped.
pub fn train_felbo(
    model: &dyn FunctionModel,
    data: &Dataset,
    prior: &FunctionPrior,
    lik: &LikelihoodModel,
    cfg: &FsvgdConfig,
    ssge: &SsgeConfig,
) -> Result<TrainedEnsemble> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = init_particles(model, cfg.num_particles, &mut rng)?;
    let mut state = ParticleState::new(init, cfg);
    let start = Instant::now();
    let mut log = TrainingLog::default();
    let mut skipped = 0usize;
    for step in 0..cfg.steps {
        state.scale = cfg.step_scale(step);
        match felbo_grad_step(model, &mut state, data, prior, lik, cfg, ssge, &mut rng)? {
            Some(stats) => {
                if step % cfg.log_every == 0 || step + 1 == cfg.steps {
                    log.rows.push(LogRow {
                        step,
                        train_nll: stats.train_nll,
                        grad_norm: stats.grad_norm,
                        prior_score_norm: stats.prior_score_norm,
                        wallclock: start.elapsed().as_secs_f64(),
                    });
                }
            }
            None => skipped += 1,
        }
    }
    if skipped * 10 > cfg.steps {
        return Err(numeric(format!("functional VI skipped {skipped} of {} steps", cfg.steps)));
    }
    Ok(TrainedEnsemble {
        ensemble: state.ensemble,
        log,
        step_size: state.step_size,
    })
}

// ---------------------------------------------------------------------------
// SysID and GreyBox
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SysIdFit {
    pub phi: Vec<f64>,
    /// Mean squared residual over all targets and output dimensions.
    pub mse: f64,
    /// `y − g(x, φ̂)` on the training data.
    pub residuals: DMatrix<f64>,
    pub evaluations: usize,
}

impl SysIdFit {
    /// Root mean squared residual per output dimension.
    pub fn residual_std(&self) -> Vec<f64> {
        let n = self.residuals.nrows().max(1) as f64;
        self.residuals
            .column_iter()
            .map(|c| (c.norm_squared() / n).sqrt())
            .collect()
    }
}

fn sim_mse(domain: &dyn DomainModel, data: &Dataset, phi: &[f64]) -> f64 {
    match domain.query_set(&data.inputs, phi) {
        Ok(pred) => (&data.targets - pred).norm_squared() / data.targets.len() as f64,
        Err(_) => f64::INFINITY,
    }
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;
const REFINE_PASSES: usize = 3;

/// Least-squares simulator fit: `budget/2` random draws from the prior, then
/// three passes of per-coordinate golden-section search over each
/// parameter's search interval with the remaining evaluations. The best point
/// seen is always returned.
pub fn sysid_fit(
    data: &Dataset,
    domain: &dyn DomainModel,
    params: &ParamPrior,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SysIdFit> {
    if budget == 0 {
        return Err(invalid("SysID budget must be >= 1"));
    }
    if data.is_empty() {
        return Err(invalid("SysID needs data"));
    }
    if params.dim() != domain.param_dim() {
        return Err(invalid("parameter prior does not match the simulator"));
    }
    let mut evals = 0usize;
    let random = (budget / 2).max(1);
    let mut best = params.sample(rng);
    let mut best_mse = sim_mse(domain, data, &best);
    evals += 1;
    for _ in 1..random {
        let phi = params.sample(rng);
        let mse = sim_mse(domain, data, &phi);
        evals += 1;
        if mse < best_mse {
            best = phi;
            best_mse = mse;
        }
    }
    let free: Vec<usize> = (0..params.dim())
        .filter(|&j| {
            let (lo, hi) = params.params[j].dist.search_interval();
            hi > lo
        })
        .collect();
    let remaining = budget - evals;
    if !free.is_empty() && remaining >= 2 * REFINE_PASSES * free.len() {
        let per_coord = remaining / (REFINE_PASSES * free.len());
        for _ in 0..REFINE_PASSES {
            for &j in &free {
                let (lo, hi) = params.params[j].dist.search_interval();
                let mut f = |v: f64| {
                    let mut phi = best.clone();
                    phi[j] = v;
                    evals += 1;
                    sim_mse(domain, data, &phi)
                };
                let (v, mse) = golden_section(&mut f, lo, hi, per_coord);
                if mse < best_mse {
                    best[j] = v;
                    best_mse = mse;
                }
            }
        }
    }
    let residuals = &data.targets - domain.query_set(&data.inputs, &best)?;
    Ok(SysIdFit {
        phi: best,
        mse: best_mse,
        residuals,
        evaluations: evals,
    })
}

/// Golden-section minimization with exactly `evals` evaluations (≥ 2).
fn golden_section(f: &mut impl FnMut(f64) -> f64, mut a: f64, mut b: f64, evals: usize) -> (f64, f64) {
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 2..evals {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// SysID point prediction with Gaussian noise per output dimension.
#[derive(Clone)]
pub struct SysIdPredictor {
    pub domain: Arc<dyn DomainModel>,
    pub phi: Vec<f64>,
    pub noise_std: Vec<f64>,
}

impl SysIdPredictor {
    /// Predictive noise is the larger of the likelihood noise and the
    /// training residual spread, so unexplained mismatch widens the
    /// predictive instead of being reported with false confidence.
    pub fn new(domain: Arc<dyn DomainModel>, fit: &SysIdFit, lik: &LikelihoodModel) -> Self {
        let noise_std = fit
            .residual_std()
            .into_iter()
            .zip(&lik.noise_std)
            .map(|(r, s)| r.max(*s))
            .collect();
        Self {
            domain,
            phi: fit.phi.clone(),
            noise_std,
        }
    }
}

impl Predictor for SysIdPredictor {
    fn predict(&self, x: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        PredictiveDistribution::with_noise(vec![self.domain.query_set(x, &self.phi)?], &self.noise_std)
    }
}

/// Simulator at the SysID estimate plus a residual ensemble.
#[derive(Clone)]
pub struct GreyBoxModel {
    pub sysid: SysIdFit,
    pub domain: Arc<dyn DomainModel>,
    pub residual: EnsemblePredictor,
}

impl Predictor for GreyBoxModel {
    fn predict(&self, x: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        let sim = self.domain.query_set(x, &self.sysid.phi)?;
        let mut pred = self.residual.predict(x)?;
        for m in pred.means.iter_mut() {
            *m += &sim;
        }
        Ok(pred)
    }
}

/// SysID, then FSVGD with the gap GP prior on the residual targets.
#[allow(clippy::too_many_arguments)]
pub fn greybox_train(
    model: Arc<dyn FunctionModel>,
    data: &Dataset,
    domain: Arc<dyn DomainModel>,
    params: &ParamPrior,
    gp: &SimToRealGP,
    lik: &LikelihoodModel,
    cfg: &FsvgdConfig,
    budget: usize,
) -> Result<(GreyBoxModel, TrainingLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_5151d);
    let sysid = sysid_fit(data, domain.as_ref(), params, budget, &mut rng)?;
    let residual_data = Dataset::new(data.inputs.clone(), sysid.residuals.clone(), data.noise_std)?;
    let trained = train_fsvgd(model.as_ref(), &residual_data, gp, lik, cfg)?;
    Ok((
        GreyBoxModel {
            sysid,
            domain,
            residual: EnsemblePredictor {
                model,
                ensemble: trained.ensemble,
                likelihood: lik.clone(),
            },
        },
        trained.log,
    ))
}
