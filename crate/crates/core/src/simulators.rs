//! Dynamical systems and dataset generation.
//!
//! The ideal pendulum is the simulator the priors are built from; the "real"
//! pendulum adds drag, friction and a first-order motor lag whose torque the
//! learner never observes. Angles are measured from the upright position, so
//! gravity pushes away from `θ = 0`.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Result};
use crate::sim_priors::{DomainModel, InputBox, ParamDist, ParamPrior};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub inertia: f64,
    pub motor_gain: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
}

fn default_gravity() -> f64 {
    9.81
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            length: 1.0,
            inertia: 1.0,
            motor_gain: 1.0,
            gravity: default_gravity(),
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mass, self.length, self.inertia, self.motor_gain, self.gravity];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(invalid(format!("pendulum parameters must be positive: {self:?}")))
        }
    }

    /// Parameter vector in simulator order `[m, l, I, C_m]`.
    pub fn to_phi(&self) -> [f64; 4] {
        [self.mass, self.length, self.inertia, self.motor_gain]
    }

    fn from_phi(phi: &[f64], gravity: f64) -> Self {
        Self {
            mass: phi[0],
            length: phi[1],
            inertia: phi[2],
            motor_gain: phi[3],
            gravity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealPendulumParams {
    #[serde(flatten)]
    pub base: PendulumParams,
    /// Quadratic aerodynamic drag `c_d·θ̇|θ̇|`.
    pub drag: f64,
    /// Smoothed Coulomb friction `μ_f·tanh(50·θ̇)`.
    pub friction: f64,
    /// Motor time constant `t_m` (s).
    pub motor_time_constant: f64,
}

impl Default for RealPendulumParams {
    fn default() -> Self {
        Self {
            base: PendulumParams::default(),
            drag: 0.05,
            friction: 0.02,
            motor_time_constant: 0.05,
        }
    }
}

impl RealPendulumParams {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if !(self.drag >= 0.0 && self.friction >= 0.0 && self.motor_time_constant > 0.0) {
            return Err(invalid(format!(
                "need drag, friction >= 0 and motor time constant > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// `(θ̇, θ̈)` with `θ̈ = (m·g·l·sin θ + C_m·u) / I`.
pub fn pendulum_rhs(p: &PendulumParams, state: &[f64; 2], u: f64) -> [f64; 2] {
    let [theta, omega] = *state;
    let acc = (p.mass * p.gravity * p.length * theta.sin() + p.motor_gain * u) / p.inertia;
    [omega, acc]
}

/// `(θ̇, θ̈, τ̇)` for state `(θ, θ̇, τ)` with motor torque `τ` lagging `C_m·u`.
pub fn real_pendulum_rhs(p: &RealPendulumParams, state: &[f64; 3], u: f64) -> [f64; 3] {
    let [theta, omega, tau] = *state;
    let b = &p.base;
    let acc = (b.mass * b.gravity * b.length * theta.sin() + tau
        - p.drag * omega * omega.abs()
        - p.friction * (50.0 * omega).tanh())
        / b.inertia;
    let tau_dot = (b.motor_gain * u - tau) / p.motor_time_constant;
    [omega, acc, tau_dot]
}

/// Conserved energy of the unforced ideal pendulum, `½Iθ̇² + m·g·l·cos θ`.
pub fn pendulum_energy(p: &PendulumParams, state: &[f64]) -> f64 {
    0.5 * p.inertia * state[1] * state[1] + p.mass * p.gravity * p.length * state[0].cos()
}

/// One classical Runge–Kutta step with the input held constant.
pub fn rk4_step<const N: usize>(
    rhs: impl Fn(&[f64; N], f64) -> [f64; N],
    state: &[f64; N],
    u: f64,
    dt: f64,
) -> Result<[f64; N]> {
    if !(dt > 0.0) {
        return Err(invalid(format!("time step must be positive, got {dt}")));
    }
    let next = rk4_unchecked(&rhs, state, u, dt);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(numeric(format!("integration produced non-finite state from {state:?}")))
    }
}

#[inline]
fn rk4_unchecked<const N: usize>(
    rhs: &impl Fn(&[f64; N], f64) -> [f64; N],
    s: &[f64; N],
    u: f64,
    dt: f64,
) -> [f64; N] {
    let shift = |k: &[f64; N], h: f64| -> [f64; N] { std::array::from_fn(|i| s[i] + h * k[i]) };
    let k1 = rhs(s, u);
    let k2 = rhs(&shift(&k1, 0.5 * dt), u);
    let k3 = rhs(&shift(&k2, 0.5 * dt), u);
    let k4 = rhs(&shift(&k3, dt), u);
    std::array::from_fn(|i| s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

fn check_step(dt: f64, substeps: usize) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid(format!("transition time step must be positive, got {dt}")));
    }
    if substeps == 0 {
        return Err(invalid("need at least one integration substep"));
    }
    Ok(())
}

/// Ideal-pendulum transition `[θ, θ̇, u] ↦ Δ[θ, θ̇]` over one control period,
/// parameterized by `φ = [m, l, I, C_m]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumTransition {
    pub dt: f64,
    pub substeps: usize,
    pub gravity: f64,
}

/// Ideal-pendulum simulator with `dt` per transition and 10 RK4 substeps.
pub fn transition_model(gravity: f64, dt: f64) -> Result<PendulumTransition> {
    PendulumTransition::new(dt, 10, gravity)
}

impl PendulumTransition {
    pub fn new(dt: f64, substeps: usize, gravity: f64) -> Result<Self> {
        check_step(dt, substeps)?;
        if !(gravity > 0.0) {
            return Err(invalid("gravity must be positive"));
        }
        Ok(Self { dt, substeps, gravity })
    }

    pub fn step(&self, p: &PendulumParams, x: &[f64]) -> [f64; 2] {
        let h = self.dt / self.substeps as f64;
        let s0 = [x[0], x[1]];
        let mut s = s0;
        for _ in 0..self.substeps {
            s = rk4_unchecked(&|s: &[f64; 2], u| pendulum_rhs(p, s, u), &s, x[2], h);
        }
        [s[0] - s0[0], s[1] - s0[1]]
    }
}

impl DomainModel for PendulumTransition {
    fn input_dim(&self) -> usize {
        3
    }
    fn output_dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        4
    }
    fn query(&self, x: &[f64], phi: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.step(&PendulumParams::from_phi(phi, self.gravity), x));
    }
}

/// Parameter prior over `[m, l, I, C_m]` for the pendulum simulator.
pub fn pendulum_param_prior(
    mass: ParamDist,
    length: ParamDist,
    inertia: ParamDist,
    motor_gain: ParamDist,
) -> Result<ParamPrior> {
    ParamPrior::new([("mass", mass), ("length", length), ("inertia", inertia), ("motor_gain", motor_gain)])
}

/// Real-pendulum transition. The motor torque starts from rest at the
/// beginning of every control period and is not part of the observed state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealPendulumTransition {
    pub params: RealPendulumParams,
    pub dt: f64,
    pub substeps: usize,
}

impl RealPendulumTransition {
    pub fn new(params: RealPendulumParams, dt: f64, substeps: usize) -> Result<Self> {
        params.validate()?;
        check_step(dt, substeps)?;
        Ok(Self { params, dt, substeps })
    }

    pub fn step(&self, x: &[f64]) -> [f64; 2] {
        let h = self.dt / self.substeps as f64;
        let mut s = [x[0], x[1], 0.0];
        for _ in 0..self.substeps {
            s = rk4_unchecked(&|s: &[f64; 3], u| real_pendulum_rhs(&self.params, s, u), &s, x[2], h);
        }
        [s[0] - x[0], s[1] - x[1]]
    }
}

impl DomainModel for RealPendulumTransition {
    fn input_dim(&self) -> usize {
        3
    }
    fn output_dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        0
    }
    fn query(&self, x: &[f64], _phi: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.step(x));
    }
}

/// 1-D regression task: truth `A·sin(ωx + phase) + offset + slope·x`, and a
/// simulator family `a·sin(b·x)` with uniform priors on `a` and `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinusoidTask {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub offset: f64,
    pub slope: f64,
    pub sim_amplitude: (f64, f64),
    pub sim_frequency: (f64, f64),
}

impl Default for SinusoidTask {
    fn default() -> Self {
        Self {
            amplitude: 2.0,
            frequency: 1.0,
            phase: 0.0,
            offset: 0.0,
            slope: 0.5,
            sim_amplitude: (0.5, 3.0),
            sim_frequency: (0.5, 2.0),
        }
    }
}

impl SinusoidTask {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0 && self.frequency > 0.0) {
            return Err(invalid("sinusoid amplitude and frequency must be positive"));
        }
        self.param_prior().map(|_| ())
    }

    pub fn truth(&self, x: f64) -> f64 {
        self.amplitude * (self.frequency * x + self.phase).sin() + self.offset + self.slope * x
    }

    pub fn param_prior(&self) -> Result<ParamPrior> {
        let (alo, ahi) = self.sim_amplitude;
        let (wlo, whi) = self.sim_frequency;
        if alo <= 0.0 || wlo <= 0.0 {
            return Err(invalid("sinusoid simulator priors must have positive support"));
        }
        ParamPrior::new([
            ("amplitude", ParamDist::Uniform { lo: alo, hi: ahi }),
            ("frequency", ParamDist::Uniform { lo: wlo, hi: whi }),
        ])
    }

    pub fn system(&self) -> SinusoidTruth {
        SinusoidTruth(*self)
    }
}

/// Simulator family `a·sin(b·x)`, `φ = [a, b]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SinusoidSim;

impl DomainModel for SinusoidSim {
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn query(&self, x: &[f64], phi: &[f64], out: &mut [f64]) {
        out[0] = phi[0] * (phi[1] * x[0]).sin();
    }
}

/// The true sinusoid as a parameter-free system.
#[derive(Debug, Clone, Copy)]
pub struct SinusoidTruth(pub SinusoidTask);

impl DomainModel for SinusoidTruth {
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        0
    }
    fn query(&self, x: &[f64], _phi: &[f64], out: &mut [f64]) {
        out[0] = self.0.truth(x[0]);
    }
}

/// A simulator with its parameters fixed, seen as a parameter-free system.
pub struct Pinned<'a> {
    pub model: &'a dyn DomainModel,
    pub phi: Vec<f64>,
}

impl DomainModel for Pinned<'_> {
    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.model.output_dim()
    }
    fn param_dim(&self) -> usize {
        0
    }
    fn query(&self, x: &[f64], _phi: &[f64], out: &mut [f64]) {
        self.model.query(x, &self.phi, out);
    }
}

/// Noisy input/target pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub noise_std: f64,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, targets: DMatrix<f64>, noise_std: f64) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(invalid(format!(
                "{} inputs but {} targets",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if !inputs.iter().chain(targets.iter()).all(|v| v.is_finite()) {
            return Err(invalid("dataset contains non-finite values"));
        }
        if !(noise_std >= 0.0) {
            return Err(invalid("noise std must be >= 0"));
        }
        Ok(Self {
            inputs,
            targets,
            noise_std,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    /// Rows selected by `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(idx.len(), m.ncols(), |a, b| m[(idx[a], b)]);
        Dataset {
            inputs: pick(&self.inputs),
            targets: pick(&self.targets),
            noise_std: self.noise_std,
        }
    }

    /// Writes `path` as CSV (`x_1..x_dx, y_1..y_dy`) and a JSON sidecar next
    /// to it with the noise level, seed and system description.
    pub fn save(&self, path: &Path, seed: u64, system: serde_json::Value) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<String> = (1..=self.input_dim())
            .map(|i| format!("x_{i}"))
            .chain((1..=self.output_dim()).map(|i| format!("y_{i}")))
            .collect();
        w.write_record(&header)?;
        for r in 0..self.len() {
            let row: Vec<String> = self
                .inputs
                .row(r)
                .iter()
                .chain(self.targets.row(r).iter())
                .map(|v| format!("{v:?}"))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        let meta = DatasetMeta {
            noise_std: self.noise_std,
            seed,
            system,
        };
        serde_json::to_writer_pretty(File::create(sidecar_path(path))?, &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Dataset, DatasetMeta)> {
        let meta: DatasetMeta = serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let dx = header.iter().filter(|h| h.starts_with("x_")).count();
        let dy = header.iter().filter(|h| h.starts_with("y_")).count();
        if dx + dy != header.len() || dx == 0 || dy == 0 {
            return Err(invalid(format!("unexpected dataset header {header:?}")));
        }
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for field in rec.iter() {
                values.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| invalid(format!("bad number {field:?}: {e}")))?,
                );
            }
        }
        let n = values.len() / (dx + dy);
        let all = DMatrix::from_row_slice(n, dx + dy, &values);
        let ds = Dataset::new(
            all.columns(0, dx).into_owned(),
            all.columns(dx, dy).into_owned(),
            meta.noise_std,
        )?;
        Ok((ds, meta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub noise_std: f64,
    pub seed: u64,
    pub system: serde_json::Value,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// `n` training and `n_test` held-out transitions of a parameter-free
/// system, with inputs uniform on `bounds` and i.i.d. Gaussian target noise.
///
/// Train and test sets come from separate streams of `rng`, so for a fixed
/// seed the test set does not depend on `n` and smaller training sets are
/// prefixes of larger ones.
pub fn generate_dataset<R: RngCore + ?Sized>(
    system: &dyn DomainModel,
    bounds: &InputBox,
    n: usize,
    n_test: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<DatasetSplit> {
    if n == 0 {
        return Err(invalid("need at least one training point"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(invalid(format!("noise std must be >= 0, got {noise_std}")));
    }
    if system.param_dim() != 0 {
        return Err(invalid("dataset system must have its parameters pinned"));
    }
    if bounds.dim() != system.input_dim() {
        return Err(invalid("input box dimension does not match the system"));
    }
    let base = rng.next_u64();
    let mut train_rng = ChaCha8Rng::seed_from_u64(base);
    train_rng.set_stream(0);
    let mut test_rng = ChaCha8Rng::seed_from_u64(base);
    test_rng.set_stream(1);

    let test = noisy_draws(system, bounds, n_test, noise_std, &mut test_rng, &DMatrix::zeros(0, bounds.dim()))?;
    let train = noisy_draws(system, bounds, n, noise_std, &mut train_rng, &test.inputs)?;
    Ok(DatasetSplit { train, test })
}

fn noisy_draws(
    system: &dyn DomainModel,
    bounds: &InputBox,
    n: usize,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
    exclude: &DMatrix<f64>,
) -> Result<Dataset> {
    let d = bounds.dim();
    let dy = system.output_dim();
    let noise = Normal::new(0.0, noise_std).map_err(|e| invalid(e.to_string()))?;
    let mut inputs = DMatrix::zeros(n, d);
    let mut eps = DMatrix::zeros(n, dy);
    let taken = |row: &[f64]| exclude.row_iter().any(|r| r.iter().zip(row).all(|(a, b)| a == b));
    // Noise is drawn row by row with the inputs, so a prefix of the stream
    // gives a prefix of the dataset.
    for i in 0..n {
        // Continuous draws collide only for degenerate boxes; give up after a
        // few attempts rather than loop forever.
        let mut x = vec![0.0; d];
        for _ in 0..100 {
            for (j, v) in x.iter_mut().enumerate() {
                *v = bounds.lo[j] + (bounds.hi[j] - bounds.lo[j]) * rng.random::<f64>();
            }
            if !taken(&x) {
                break;
            }
        }
        if taken(&x) {
            return Err(invalid("cannot draw test inputs disjoint from training inputs"));
        }
        for j in 0..d {
            inputs[(i, j)] = x[j];
        }
        if noise_std > 0.0 {
            for j in 0..dy {
                eps[(i, j)] = noise.sample(rng);
            }
        }
    }
    let targets = system.query_set(&inputs, &[])? + eps;
    Dataset::new(inputs, targets, noise_std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit() -> PendulumParams {
        PendulumParams::default()
    }

    #[test]
    fn ideal_rhs_examples() {
        assert_eq!(pendulum_rhs(&unit(), &[0.0, 0.0], 0.0), [0.0, 0.0]);
        let [_, acc] = pendulum_rhs(&unit(), &[PI / 2.0, 0.0], 0.0);
        assert!((acc - 9.81).abs() < 1e-12);
        let p = PendulumParams {
            motor_gain: 2.0,
            inertia: 4.0,
            ..unit()
        };
        assert_eq!(pendulum_rhs(&p, &[0.0, 0.0], 1.0)[1], 0.5);
    }

    #[test]
    fn real_rhs_reduces_to_ideal() {
        let base = PendulumParams {
            mass: 0.7,
            length: 1.3,
            inertia: 0.9,
            motor_gain: 1.7,
            gravity: 9.81,
        };
        let real = RealPendulumParams {
            base,
            drag: 0.0,
            friction: 0.0,
            motor_time_constant: 0.05,
        };
        for &(th, om, u) in &[(0.3, -1.2, 0.5), (-2.0, 3.0, -1.0), (1.0, 0.0, 0.0)] {
            let ideal = pendulum_rhs(&base, &[th, om], u);
            let r = real_pendulum_rhs(&real, &[th, om, base.motor_gain * u], u);
            assert_eq!(r[0], ideal[0]);
            assert!((r[1] - ideal[1]).abs() <= 1e-15 * ideal[1].abs().max(1.0));
            assert_eq!(r[2], 0.0);
        }
    }

    #[test]
    fn dissipation_reduces_acceleration() {
        let real = RealPendulumParams::default();
        for &om in &[0.1, 1.0, 5.0] {
            let ideal = pendulum_rhs(&real.base, &[0.4, om], 0.0)[1];
            assert!(real_pendulum_rhs(&real, &[0.4, om, 0.0], 0.0)[1] < ideal);
        }
    }

    #[test]
    fn rk4_trivial_and_linear() {
        let s = rk4_step(|_: &[f64; 2], _| [0.0, 0.0], &[1.5, -2.0], 0.0, 0.1).unwrap();
        assert_eq!(s, [1.5, -2.0]);
        let s = rk4_step(|x: &[f64; 1], _| [-x[0]], &[1.0], 0.0, 0.1).unwrap();
        assert!((s[0] - (-0.1f64).exp()).abs() <= 1e-6);
        assert!(rk4_step(|x: &[f64; 1], _| [-x[0]], &[1.0], 0.0, 0.0).is_err());
        assert!(rk4_step(|_: &[f64; 1], _| [f64::INFINITY], &[1.0], 0.0, 0.1).is_err());
    }

    fn rollout_ideal(p: &PendulumParams, s0: [f64; 2], u: f64, t: f64, dt: f64) -> [f64; 2] {
        let steps = (t / dt).round() as usize;
        let mut s = s0;
        for _ in 0..steps {
            s = rk4_step(|s: &[f64; 2], u| pendulum_rhs(p, s, u), &s, u, dt).unwrap();
        }
        s
    }

    #[test]
    fn rk4_is_fourth_order() {
        let p = unit();
        let s0 = [0.5, 0.0];
        let t = 1.0;
        let dt = 0.05;
        let reference = rollout_ideal(&p, s0, 0.2, t, dt / 10.0);
        let err = |dt: f64| {
            let s = rollout_ideal(&p, s0, 0.2, t, dt);
            ((s[0] - reference[0]).powi(2) + (s[1] - reference[1]).powi(2)).sqrt()
        };
        let ratio = err(dt) / err(dt / 2.0);
        assert!(ratio >= 8.0 * 0.8, "error ratio {ratio}");
    }

    #[test]
    fn ideal_pendulum_conserves_energy() {
        let p = PendulumParams {
            mass: 0.8,
            length: 1.2,
            inertia: 1.1,
            motor_gain: 1.0,
            gravity: 9.81,
        };
        let s0 = [2.5, 0.3];
        let e0 = pendulum_energy(&p, &s0);
        let s = rollout_ideal(&p, s0, 0.0, 10.0, 1e-3);
        let drift = (pendulum_energy(&p, &s) - e0).abs();
        assert!(drift <= 1e-5, "energy drift {drift}");
    }

    #[test]
    fn real_pendulum_dissipates_energy() {
        let real = RealPendulumParams::default();
        let mut s = [2.5, 0.5, 0.0];
        let mut e = pendulum_energy(&real.base, &s);
        for _ in 0..10_000 {
            s = rk4_step(|s: &[f64; 3], u| real_pendulum_rhs(&real, s, u), &s, 0.0, 1e-3).unwrap();
            let en = pendulum_energy(&real.base, &s);
            assert!(en <= e + 1e-12, "energy rose from {e} to {en}");
            e = en;
        }
    }

    #[test]
    fn transition_contract() {
        assert!(transition_model(9.81, 0.0).is_err());
        let tm = transition_model(9.81, 1.0 / 30.0).unwrap();
        let phi = unit().to_phi();
        let x = DMatrix::from_row_slice(2, 3, &[0.0, 0.0, 0.0, 0.4, -1.0, 0.7]);
        let a = tm.query_set(&x, &phi).unwrap();
        let b = tm.query_set(&x, &phi).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_eq!(a.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
    }

    #[test]
    fn transition_is_lipschitz_in_input() {
        let tm = transition_model(9.81, 1.0 / 30.0).unwrap();
        let p = PendulumParams {
            motor_gain: 1.5,
            inertia: 0.8,
            ..unit()
        };
        let bound = 2.0 * p.motor_gain * tm.dt / p.inertia;
        let eps = 1e-6;
        for &(th, om) in &[(0.0, 0.0), (1.0, -2.0), (-3.0, 4.0)] {
            for &u in &[-1.0, 0.0, 0.9] {
                let hi = tm.step(&p, &[th, om, u + eps]);
                let lo = tm.step(&p, &[th, om, u - eps]);
                for i in 0..2 {
                    let slope = ((hi[i] - lo[i]) / (2.0 * eps)).abs();
                    assert!(slope <= bound, "slope {slope} > {bound}");
                }
            }
        }
    }

    fn pendulum_box() -> InputBox {
        InputBox::new(vec![-PI, -6.0, -1.0], vec![PI, 6.0, 1.0]).unwrap()
    }

    #[test]
    fn noiseless_dataset_matches_system() {
        let sys = RealPendulumTransition::new(RealPendulumParams::default(), 1.0 / 30.0, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let split = generate_dataset(&sys, &pendulum_box(), 30, 10, 0.0, &mut rng).unwrap();
        let clean = sys.query_set(&split.train.inputs, &[]).unwrap();
        assert_eq!(clean, split.train.targets);
    }

    #[test]
    fn noise_level_matches() {
        let sys = RealPendulumTransition::new(RealPendulumParams::default(), 1.0 / 30.0, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let split = generate_dataset(&sys, &pendulum_box(), 1000, 1, 0.05, &mut rng).unwrap();
        let clean = sys.query_set(&split.train.inputs, &[]).unwrap();
        let resid = &split.train.targets - clean;
        for j in 0..2 {
            let c = resid.column(j);
            let std = (c.iter().map(|v| v * v).sum::<f64>() / 1000.0).sqrt();
            assert!((0.045..=0.055).contains(&std), "dim {j} std {std}");
        }
    }

    #[test]
    fn splits_are_disjoint_nested_and_seeded() {
        let sys = SinusoidTask::default().system();
        let b = InputBox::new(vec![-5.0], vec![5.0]).unwrap();
        let gen = |n| generate_dataset(&sys, &b, n, 50, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let small = gen(5);
        let large = gen(20);
        assert_eq!(small.test, large.test);
        assert_eq!(small.train, large.train.select(&[0, 1, 2, 3, 4]));
        for a in small.train.inputs.iter() {
            assert!(small.test.inputs.iter().all(|b| b != a));
        }
        assert_eq!(gen(5), small);
    }

    #[test]
    fn dataset_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        let sys = SinusoidTask::default().system();
        let b = InputBox::new(vec![-5.0], vec![5.0]).unwrap();
        let split = generate_dataset(&sys, &b, 7, 3, 0.1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let info = serde_json::to_value(SinusoidTask::default()).unwrap();
        split.train.save(&path, 2, info.clone()).unwrap();
        let (ds, meta) = Dataset::load(&path).unwrap();
        assert_eq!(ds, split.train);
        assert_eq!(meta.seed, 2);
        assert_eq!(meta.system, info);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("x_1,y_1\n"));
    }

    #[test]
    fn sinusoid_defaults() {
        let t = SinusoidTask::default();
        assert!((t.truth(PI / 2.0) - (2.0 + 0.25 * PI)).abs() < 1e-12);
        let prior = t.param_prior().unwrap();
        assert_eq!(prior.names(), vec!["amplitude", "frequency"]);
        let mut out = [0.0];
        SinusoidSim.query(&[1.0], &[2.0, 0.5], &mut out);
        assert_eq!(out[0], 2.0 * 0.5f64.sin());
    }
}
