//! Configuration-driven experiment runners: score-estimator benchmark,
//! 1-D sinusoid study and pendulum sim-to-real study.
//!
//! A run is a grid of independent cells `(method, n_train, seed)`. Each cell
//! writes its own result file under `<out>/cells/`, so an interrupted run
//! resumes where it stopped; the combined `results.csv` (+ `.agg.csv`) and
//! `manifest.json` are rewritten at the end.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bnn::{Activation, Checkpoint, LikelihoodModel, Mlp, MlpArch, Normalizer};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{calibration, export_curves, load_curves, predictive_nll, rmse, EvalRecord, Predictor};
use crate::kernels::IsotropicKernel;
use crate::linalg::cosine_similarity;
use crate::score::{Jitter, NuMethodConfig, SampleBatch, ScoreEstimator, ScoreModel, SsgeConfig};
use crate::sim_priors::{CombinedPrior, DomainModel, InputBox, ParamDist, ParamPrior, SimToRealGP};
use crate::simulators::{
    generate_dataset, Dataset, PendulumTransition, RealPendulumParams, RealPendulumTransition, SinusoidSim,
    SinusoidTask,
};
use crate::trainers::{
    greybox_train, sysid_fit, train_felbo, train_fsvgd, train_sim_fsvgd, vi_train, EnsemblePredictor, FsvgdConfig,
    FunctionPrior, Optimizer, SysIdPredictor, TrainingLog, VariationalPredictor, ViConfig, WeightPrior,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

// ---------------------------------------------------------------------------
// Config loading
// ---------------------------------------------------------------------------

/// Builds a config from `default`, deep-merging the JSON document at `path`
/// (if any) and then applying `key.path=value` overrides. Values parse as
/// JSON, falling back to a plain string.
pub fn load_config<T: Serialize + DeserializeOwned>(default: &T, path: Option<&Path>, sets: &[String]) -> Result<T> {
    let mut value = serde_json::to_value(default)?;
    if let Some(path) = path {
        let text = fs::read_to_string(path)?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, doc);
    }
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, key, parsed)?;
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let at = e.path().to_string();
        Error::Config(format!("field `{at}`: {}", e.into_inner()))
    })
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(value: &mut Value, key: &str, new: Value) -> Result<()> {
    let mut cur = value;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config field `{key}`")))?,
            Value::Array(items) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("`{part}` in `{key}` is not an array index")))?;
                items
                    .get_mut(i)
                    .ok_or_else(|| Error::Config(format!("index {i} out of range in `{key}`")))?
            }
            _ => return Err(Error::Config(format!("`{key}` descends into a scalar"))),
        };
    }
    *cur = new;
    Ok(())
}

/// Hex SHA-256 of the config's canonical JSON.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

// ---------------------------------------------------------------------------
// Score benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreBenchConfig {
    pub estimators: Vec<ScoreEstimator>,
    pub dims: Vec<usize>,
    pub sample_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Query grid covers `[-half_width, half_width]^d`.
    pub half_width: f64,
    /// Approximate total number of grid points (per-axis count is rounded
    /// up to an even number, so the origin is never a query).
    pub grid_points: usize,
}

impl Default for ScoreBenchConfig {
    fn default() -> Self {
        Self {
            estimators: vec![
                ScoreEstimator::Gaussian {
                    jitter: Jitter::Absolute(1e-8),
                },
                ScoreEstimator::Ssge(SsgeConfig::default()),
                ScoreEstimator::NuMethod(NuMethodConfig::default()),
                ScoreEstimator::Tikhonov(NuMethodConfig {
                    tikhonov_lambda: Some(1e-3),
                    ..NuMethodConfig::default()
                }),
            ],
            dims: vec![1, 2],
            sample_sizes: vec![1000],
            seeds: vec![0, 1, 2, 3, 4],
            half_width: 2.0,
            grid_points: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBenchRow {
    pub estimator: String,
    pub dim: usize,
    pub m: usize,
    pub seed: u64,
    /// Mean over grid points of the cosine between estimated and true score.
    pub cosine: f64,
    /// `‖ŝ − s‖ / ‖s‖` over the whole grid.
    pub rel_l2: f64,
}

fn bench_grid(dim: usize, total: usize, half_width: f64) -> DMatrix<f64> {
    let mut per_axis = (total as f64).powf(1.0 / dim as f64).round().max(2.0) as usize;
    per_axis += per_axis % 2;
    let n = per_axis.pow(dim as u32);
    let axis = |i: usize| -half_width + 2.0 * half_width * i as f64 / (per_axis - 1) as f64;
    DMatrix::from_fn(n, dim, |r, c| axis((r / per_axis.pow(c as u32)) % per_axis))
}

/// One estimator on `m` draws from `N(0, I_d)`, compared against `−x`.
pub fn score_bench_cell(estimator: &ScoreEstimator, dim: usize, m: usize, seed: u64, cfg: &ScoreBenchConfig) -> Result<ScoreBenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = DMatrix::from_fn(m, dim, |_, _| StandardNormal.sample(&mut rng));
    let grid = bench_grid(dim, cfg.grid_points, cfg.half_width);
    let est = estimator
        .fit(&SampleBatch::new(samples)?)?
        .score_matrix(&grid)?;
    let truth = -&grid;
    let cosine = (0..grid.nrows())
        .map(|i| {
            let a: Vec<f64> = est.row(i).iter().copied().collect();
            let b: Vec<f64> = truth.row(i).iter().copied().collect();
            cosine_similarity(&a, &b)
        })
        .sum::<f64>()
        / grid.nrows() as f64;
    Ok(ScoreBenchRow {
        estimator: estimator.name().to_string(),
        dim,
        m,
        seed,
        cosine,
        rel_l2: (&est - &truth).norm() / truth.norm(),
    })
}

/// All `estimator × dim × m × seed` rows, in that nesting order.
pub fn score_bench(cfg: &ScoreBenchConfig) -> Result<Vec<ScoreBenchRow>> {
    if cfg.estimators.is_empty() || cfg.seeds.is_empty() || cfg.dims.is_empty() || cfg.sample_sizes.is_empty() {
        return Err(Error::Config("score-bench needs estimators, dims, sample sizes and seeds".into()));
    }
    let mut jobs = Vec::new();
    for e in &cfg.estimators {
        for &d in &cfg.dims {
            for &m in &cfg.sample_sizes {
                for &s in &cfg.seeds {
                    jobs.push((e, d, m, s));
                }
            }
        }
    }
    jobs.par_iter()
        .map(|(e, d, m, s)| score_bench_cell(e, *d, *m, *s, cfg))
        .collect()
}

pub fn run_score_bench(cfg: &ScoreBenchConfig, out: &Path, jobs: usize) -> Result<Vec<ScoreBenchRow>> {
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let rows = pool(jobs)?.install(|| score_bench(cfg))?;
    let mut w = csv::Writer::from_path(out.join("score_bench.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_manifest(out, "score-bench", cfg, &cfg.seeds, rows.len(), start.elapsed().as_secs_f64())?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Regression studies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SimFsvgd,
    Fsvgd,
    Vi,
    Fvi,
    Sysid,
    Greybox,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::SimFsvgd,
        Method::Fsvgd,
        Method::Vi,
        Method::Fvi,
        Method::Sysid,
        Method::Greybox,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::SimFsvgd => "sim-fsvgd",
            Method::Fsvgd => "fsvgd",
            Method::Vi => "vi",
            Method::Fvi => "fvi",
            Method::Sysid => "sysid",
            Method::Greybox => "greybox",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemConfig {
    /// Truth `A sin(ωx + phase) + offset + slope·x`; simulator `a sin(bx)`.
    Sinusoid { task: SinusoidTask },
    /// Data from the pendulum with drag, friction and motor lag; simulator is
    /// the ideal pendulum with parameters `[m, l, I, C_m]`.
    Pendulum {
        real: RealPendulumParams,
        dt: f64,
        substeps: usize,
        params: ParamPrior,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub width: usize,
    pub depth: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub system: SystemConfig,
    pub methods: Vec<Method>,
    pub n_train: Vec<usize>,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    /// Target noise std, used both to generate data and in the likelihood.
    pub noise_std: f64,
    /// Data inputs and measurement points are drawn uniformly from this box.
    pub input_box: InputBox,
    /// Per-dimension output scale of the network normalizer.
    pub output_scale: Vec<f64>,
    pub network: NetworkConfig,
    /// Sim-to-real gap process of the simulator prior (also GreyBox's
    /// residual prior).
    pub gap: SimToRealGP,
    /// GP prior of the plain FSVGD baseline.
    pub gp_prior: SimToRealGP,
    /// Particle trainer settings shared by sim-fsvgd, fsvgd, fvi and the
    /// GreyBox residual; `seed` and `measurement_box` are set per cell.
    pub fsvgd: FsvgdConfig,
    /// SSGE settings for the ensemble's own score in fvi.
    pub posterior_ssge: SsgeConfig,
    pub vi: ViConfig,
    pub weight_prior_std: f64,
    pub sysid_budget: usize,
    /// Grid size of the posterior dump (1-D inputs only; 0 disables it).
    pub posterior_grid: usize,
    pub save_checkpoints: bool,
}

fn rbf(variance: f64, lengthscale: f64) -> IsotropicKernel {
    IsotropicKernel {
        family: crate::kernels::KernelFamily::Rbf,
        variance,
        lengthscale,
    }
}

impl ExperimentConfig {
    pub fn sinusoid() -> Self {
        Self {
            experiment: "sinusoid1d".into(),
            system: SystemConfig::Sinusoid {
                task: SinusoidTask::default(),
            },
            methods: Method::ALL.to_vec(),
            n_train: vec![2, 5, 10],
            n_test: 200,
            seeds: (0..5).collect(),
            noise_std: 0.1,
            input_box: InputBox {
                lo: vec![-5.0],
                hi: vec![5.0],
            },
            output_scale: vec![2.0],
            network: NetworkConfig {
                width: 64,
                depth: 2,
                activation: Activation::Tanh,
            },
            gap: SimToRealGP {
                kernels: vec![rbf(1.0, 2.0)],
            },
            gp_prior: SimToRealGP {
                kernels: vec![rbf(4.0, 1.0)],
            },
            fsvgd: FsvgdConfig {
                step_size: 5e-3,
                steps: 1000,
                num_particles: 10,
                batch_size: None,
                measurement_points: 16,
                prior_samples: 256,
                optimizer: Optimizer::adam(),
                log_every: 10,
                ..FsvgdConfig::default()
            },
            posterior_ssge: SsgeConfig::default(),
            vi: ViConfig {
                learning_rate: 5e-3,
                steps: 1000,
                log_every: 10,
                ..ViConfig::default()
            },
            weight_prior_std: 1.0,
            sysid_budget: 400,
            posterior_grid: 200,
            save_checkpoints: false,
        }
    }

    pub fn pendulum() -> Self {
        let u = |lo, hi| ParamDist::Uniform { lo, hi };
        Self {
            experiment: "pendulum".into(),
            system: SystemConfig::Pendulum {
                real: RealPendulumParams::default(),
                dt: 1.0 / 30.0,
                substeps: 10,
                params: ParamPrior::new([
                    ("mass", u(0.5, 1.5)),
                    ("length", u(0.5, 1.5)),
                    ("inertia", u(0.5, 1.5)),
                    ("motor_gain", u(0.5, 1.5)),
                ])
                .expect("static prior"),
            },
            methods: vec![Method::SimFsvgd, Method::Fsvgd, Method::Sysid, Method::Greybox],
            n_train: vec![20, 50, 100, 200, 500],
            n_test: 500,
            seeds: (0..5).collect(),
            noise_std: 0.005,
            input_box: InputBox {
                lo: vec![-3.0, -6.0, -1.0],
                hi: vec![3.0, 6.0, 1.0],
            },
            output_scale: vec![0.1, 0.2],
            network: NetworkConfig {
                width: 64,
                depth: 2,
                activation: Activation::Tanh,
            },
            gap: SimToRealGP {
                kernels: vec![rbf(1e-5, 3.0), rbf(1e-3, 3.0)],
            },
            gp_prior: SimToRealGP {
                kernels: vec![rbf(0.01, 3.0), rbf(0.04, 3.0)],
            },
            fsvgd: FsvgdConfig {
                step_size: 1e-2,
                final_step_size: Some(1e-3),
                steps: 3000,
                num_particles: 10,
                batch_size: Some(32),
                measurement_points: 16,
                prior_samples: 128,
                optimizer: Optimizer::adam(),
                log_every: 10,
                ..FsvgdConfig::default()
            },
            posterior_ssge: SsgeConfig::default(),
            vi: ViConfig {
                learning_rate: 5e-3,
                steps: 3000,
                batch_size: Some(32),
                log_every: 10,
                ..ViConfig::default()
            },
            weight_prior_std: 1.0,
            sysid_budget: 400,
            posterior_grid: 0,
            save_checkpoints: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: &str| Err(Error::Config(m.to_string()));
        if self.methods.is_empty() {
            return cfg_err("method list is empty");
        }
        if self.seeds.is_empty() {
            return cfg_err("seed list is empty");
        }
        if self.n_train.is_empty() || self.n_train.contains(&0) {
            return cfg_err("n_train must be a non-empty list of positive sizes");
        }
        if self.n_test == 0 {
            return cfg_err("n_test must be positive");
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return cfg_err("noise_std must be positive");
        }
        if !(self.weight_prior_std > 0.0) || self.sysid_budget == 0 {
            return cfg_err("weight_prior_std and sysid_budget must be positive");
        }
        self.input_box.validate()?;
        let (domain, _) = self.domain()?;
        if domain.input_dim() != self.input_box.dim() {
            return cfg_err("input_box dimension does not match the system");
        }
        if self.output_scale.len() != domain.output_dim() {
            return cfg_err("output_scale needs one entry per output dimension");
        }
        for gp in [&self.gap, &self.gp_prior] {
            gp.validate()?;
            if gp.output_dim() != domain.output_dim() {
                return cfg_err("GP priors need one kernel per output dimension");
            }
        }
        self.cell_fsvgd(0).validate()?;
        Ok(())
    }

    /// Simulator family and its parameter prior.
    fn domain(&self) -> Result<(Arc<dyn DomainModel>, ParamPrior)> {
        match &self.system {
            SystemConfig::Sinusoid { task } => {
                task.validate()?;
                Ok((Arc::new(SinusoidSim), task.param_prior()?))
            }
            SystemConfig::Pendulum {
                real, dt, substeps, params,
            } => {
                params.validate()?;
                let sim = PendulumTransition::new(*dt, *substeps, real.base.gravity)?;
                Ok((Arc::new(sim), params.clone()))
            }
        }
    }

    /// The parameter-free system that generates data.
    fn truth(&self) -> Result<Arc<dyn DomainModel>> {
        Ok(match &self.system {
            SystemConfig::Sinusoid { task } => Arc::new(task.system()),
            SystemConfig::Pendulum { real, dt, substeps, .. } => {
                Arc::new(RealPendulumTransition::new(*real, *dt, *substeps)?)
            }
        })
    }

    fn cell_fsvgd(&self, seed: u64) -> FsvgdConfig {
        FsvgdConfig {
            seed,
            measurement_box: Some(self.input_box.clone()),
            ..self.fsvgd.clone()
        }
    }

    pub fn model(&self) -> Result<Mlp> {
        let (dx, dy) = (self.input_box.dim(), self.output_scale.len());
        let arch = MlpArch::uniform(dx, dy, self.network.width, self.network.depth, self.network.activation)?;
        Mlp::with_normalizer(
            arch,
            Normalizer::from_box(&self.input_box.lo, &self.input_box.hi, self.output_scale.clone()),
        )
    }

    pub fn likelihood(&self) -> Result<LikelihoodModel> {
        LikelihoodModel::shared(self.noise_std, self.output_scale.len())
    }

    /// Train/test split for one seed; train sets for different `n` are
    /// prefixes of each other and the test set is shared.
    pub fn dataset(&self, n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        let truth = self.truth()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let split = generate_dataset(truth.as_ref(), &self.input_box, n, self.n_test, self.noise_std, &mut rng)?;
        Ok((split.train, split.test))
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &n_train in &self.n_train {
                for &seed in &self.seeds {
                    out.push(Cell { method, n_train, seed });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub method: Method,
    pub n_train: usize,
    pub seed: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("{}_n{}_s{}", self.method.name(), self.n_train, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRow {
    pub x: f64,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub method: String,
    pub seed: u64,
}

pub struct CellOutcome {
    pub record: EvalRecord,
    pub log: Option<TrainingLog>,
    pub posterior: Vec<PosteriorRow>,
    pub checkpoint: Option<Checkpoint>,
}

/// Trains and evaluates one cell. Fully determined by `cfg` and `cell`.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<CellOutcome> {
    let (train, test) = cfg.dataset(cell.n_train, cell.seed)?;
    let (domain, params) = cfg.domain()?;
    let mlp = cfg.model()?;
    let model = Arc::new(mlp.clone());
    let lik = cfg.likelihood()?;
    let fcfg = cfg.cell_fsvgd(cell.seed);
    let prior = CombinedPrior::new(domain.clone(), params.clone(), cfg.gap.clone())?;
    let ensemble = |ens| EnsemblePredictor {
        model: model.clone(),
        ensemble: ens,
        likelihood: lik.clone(),
    };
    let mut checkpoint = None;
    let (predictor, log): (Box<dyn Predictor>, Option<TrainingLog>) = match cell.method {
        Method::SimFsvgd | Method::Fsvgd | Method::Fvi => {
            let out = match cell.method {
                Method::SimFsvgd => train_sim_fsvgd(model.as_ref(), &train, &prior, &lik, &fcfg)?,
                Method::Fsvgd => train_fsvgd(model.as_ref(), &train, &cfg.gp_prior, &lik, &fcfg)?,
                _ => train_felbo(
                    model.as_ref(),
                    &train,
                    &FunctionPrior::Combined(prior.clone()),
                    &lik,
                    &fcfg,
                    &cfg.posterior_ssge,
                )?,
            };
            if cfg.save_checkpoints {
                checkpoint = Some(Checkpoint::new(&mlp, &lik, &out.ensemble));
            }
            (Box::new(ensemble(out.ensemble)), Some(out.log))
        }
        Method::Vi => {
            let vcfg = ViConfig {
                seed: cell.seed,
                ..cfg.vi.clone()
            };
            let wp = WeightPrior::new(cfg.weight_prior_std)?;
            let (params, log) = vi_train(model.as_ref(), &train, &wp, &lik, &vcfg)?;
            let p = VariationalPredictor {
                model: model.clone(),
                params,
                likelihood: lik.clone(),
                components: cfg.fsvgd.num_particles,
                seed: cell.seed,
            };
            (Box::new(p), Some(log))
        }
        Method::Sysid => {
            let mut rng = ChaCha8Rng::seed_from_u64(cell.seed);
            let fit = sysid_fit(&train, domain.as_ref(), &params, cfg.sysid_budget, &mut rng)?;
            (Box::new(SysIdPredictor::new(domain.clone(), &fit, &lik)), None)
        }
        Method::Greybox => {
            let (gb, log) = greybox_train(
                model.clone(),
                &train,
                domain.clone(),
                &params,
                &cfg.gap,
                &lik,
                &fcfg,
                cfg.sysid_budget,
            )?;
            (Box::new(gb), Some(log))
        }
    };
    let pred = predictor.predict(&test.inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cell.seed);
    let record = EvalRecord {
        method: cell.method.name().to_string(),
        n_train: cell.n_train,
        seed: cell.seed,
        nll: predictive_nll(&pred, &test.targets)?,
        rmse: rmse(&pred, &test.targets)?,
        coverage_90: calibration(&pred, &test.targets, &[0.9], &mut rng)?[0],
    };
    let posterior = if cfg.posterior_grid > 0 && cfg.input_box.dim() == 1 && lik.noise_std.len() == 1 {
        posterior_dump(predictor.as_ref(), cfg, cell)?
    } else {
        Vec::new()
    };
    Ok(CellOutcome {
        record,
        log,
        posterior,
        checkpoint,
    })
}

/// Predictive mean ± 2 std (moment-matched mixture) on an even grid.
fn posterior_dump(predictor: &dyn Predictor, cfg: &ExperimentConfig, cell: &Cell) -> Result<Vec<PosteriorRow>> {
    let n = cfg.posterior_grid;
    let (lo, hi) = (cfg.input_box.lo[0], cfg.input_box.hi[0]);
    let x = DMatrix::from_fn(n, 1, |i, _| {
        if n == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    });
    let mm = predictor.predict(&x)?.moment_matched();
    let mean = mm.mean();
    Ok((0..n)
        .map(|i| PosteriorRow {
            x: x[(i, 0)],
            mean: mean[(i, 0)],
            lo: mean[(i, 0)] - 2.0 * mm.std[(i, 0)],
            hi: mean[(i, 0)] + 2.0 * mm.std[(i, 0)],
            method: cell.method.name().to_string(),
            seed: cell.seed,
        })
        .collect())
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| invalid(format!("cannot start worker pool: {e}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub config_hash: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub cells: usize,
    pub wallclock_seconds: f64,
}

fn write_manifest<T: Serialize>(out: &Path, experiment: &str, cfg: &T, seeds: &[u64], cells: usize, secs: f64) -> Result<()> {
    let m = Manifest {
        experiment: experiment.to_string(),
        config_hash: config_hash(cfg)?,
        version: VERSION.to_string(),
        seeds: seeds.to_vec(),
        cells,
        wallclock_seconds: secs,
    };
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cell_path(out: &Path, cell: &Cell) -> PathBuf {
    out.join("cells").join(format!("{}.csv", cell.id()))
}

/// Runs (or resumes) every cell of `cfg` into `out` on `jobs` workers and
/// writes the combined results. Returns records in cell order.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Vec<EvalRecord>> {
    cfg.validate()?;
    let hash = config_hash(cfg)?;
    if let Ok(text) = fs::read_to_string(out.join("manifest.json")) {
        let old: Manifest = serde_json::from_str(&text)?;
        if old.config_hash != hash {
            return Err(Error::Config(format!(
                "{} holds results of a different config (hash {}); use a fresh output directory",
                out.display(),
                old.config_hash
            )));
        }
    }
    for sub in ["cells", "logs", "data"] {
        fs::create_dir_all(out.join(sub))?;
    }
    if cfg.save_checkpoints {
        fs::create_dir_all(out.join("checkpoints"))?;
    }
    // Written up front so a resumed run can check it is the same experiment.
    write_manifest(out, &cfg.experiment, cfg, &cfg.seeds, 0, 0.0)?;
    save_datasets(cfg, out)?;

    let start = Instant::now();
    let cells = cfg.cells();
    let records: Vec<EvalRecord> = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let path = cell_path(out, cell);
                if let Ok(done) = load_curves(&path) {
                    if let [r] = done.as_slice() {
                        log::info!("{}: already done", cell.id());
                        return Ok(r.clone());
                    }
                }
                let t = Instant::now();
                let res = run_cell(cfg, cell).map_err(|e| e.context(cell.id()))?;
                if let Some(log) = &res.log {
                    log.write_csv(&out.join("logs").join(format!("{}.csv", cell.id())))?;
                }
                if let Some(ck) = &res.checkpoint {
                    ck.save(&out.join("checkpoints").join(format!("{}.json", cell.id())))?;
                }
                if !res.posterior.is_empty() {
                    write_csv_rows(&out.join("cells").join(format!("{}.posterior.csv", cell.id())), &res.posterior)?;
                }
                // The result file goes last: its presence marks the cell done.
                let tmp = path.with_extension("csv.tmp");
                write_csv_rows(&tmp, std::slice::from_ref(&res.record))?;
                fs::rename(&tmp, &path)?;
                log::info!(
                    "{}: nll {:.4} rmse {:.4} ({:.1}s)",
                    cell.id(),
                    res.record.nll,
                    res.record.rmse,
                    t.elapsed().as_secs_f64()
                );
                Ok(res.record)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    export_curves(&records, &out.join("results.csv"))?;
    if cfg.posterior_grid > 0 && cfg.input_box.dim() == 1 {
        collect_posteriors(cfg, out)?;
    }
    let secs = start.elapsed().as_secs_f64();
    log::info!("{}: {} cells in {:.1}s", cfg.experiment, cells.len(), secs);
    write_manifest(out, &cfg.experiment, cfg, &cfg.seeds, cells.len(), secs)?;
    Ok(records)
}

fn save_datasets(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let n_max = *cfg.n_train.iter().max().expect("validated");
    let system = serde_json::to_value(&cfg.system)?;
    for &seed in &cfg.seeds {
        let (train, test) = cfg.dataset(n_max, seed)?;
        train.save(&out.join("data").join(format!("train_s{seed}.csv")), seed, system.clone())?;
        test.save(&out.join("data").join(format!("test_s{seed}.csv")), seed, system.clone())?;
    }
    Ok(())
}

/// `posterior_n{n}.csv` per training size, rows in cell order.
fn collect_posteriors(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    for &n in &cfg.n_train {
        let mut rows: Vec<PosteriorRow> = Vec::new();
        for cell in cfg.cells().into_iter().filter(|c| c.n_train == n) {
            let path = out.join("cells").join(format!("{}.posterior.csv", cell.id()));
            let mut r = csv::Reader::from_path(&path)?;
            for row in r.deserialize() {
                rows.push(row?);
            }
        }
        write_csv_rows(&out.join(format!("posterior_n{n}.csv")), &rows)?;
    }
    Ok(())
}

/// Rebuilds `results.csv` and `results.agg.csv` from the cell files found in
/// `out` (sorted by file name).
pub fn export_dir(out: &Path) -> Result<Vec<EvalRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(out.join("cells"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv") && !p.to_string_lossy().ends_with(".posterior.csv"))
        .collect();
    paths.sort();
    let mut records = Vec::new();
    for p in paths {
        records.extend(load_curves(&p)?);
    }
    export_curves(&records, &out.join("results.csv"))?;
    Ok(records)
}

/// Evaluates a saved ensemble checkpoint on a saved dataset.
pub fn eval_checkpoint(checkpoint: &Path, data: &Path, method: &str, seed: u64) -> Result<EvalRecord> {
    let ck = Checkpoint::load(checkpoint)?;
    let (test, _) = Dataset::load(data)?;
    let predictor = EnsemblePredictor {
        model: Arc::new(ck.model.clone()),
        ensemble: ck.ensemble()?,
        likelihood: ck.likelihood.clone(),
    };
    let pred = predictor.predict(&test.inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(EvalRecord {
        method: method.to_string(),
        n_train: 0,
        seed,
        nll: predictive_nll(&pred, &test.targets)?,
        rmse: rmse(&pred, &test.targets)?,
        coverage_90: calibration(&pred, &test.targets, &[0.9], &mut rng)?[0],
    })
}
