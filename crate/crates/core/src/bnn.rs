//! Neural-network function class, particle ensembles and the Gaussian
//! likelihood.
//!
//! Parameters live in one flat vector per particle. For an MLP the layout is,
//! layer by layer, the `fan_in × fan_out` weight matrix in row-major order
//! followed by the `fan_out` biases.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Result};
use crate::linalg::all_finite;
use crate::sim_priors::FunctionValues;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Gelu => 0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh()),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let inner = GELU_C * (z + 0.044715 * z * z * z);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    /// `[d_x, w_1, ..., d_y]`.
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpArch {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let arch = Self { widths, activation };
        arch.validate()?;
        Ok(arch)
    }

    /// `depth` hidden layers of `width` units.
    pub fn uniform(input_dim: usize, output_dim: usize, width: usize, depth: usize, activation: Activation) -> Result<Self> {
        let mut widths = vec![input_dim];
        widths.extend(std::iter::repeat_n(width, depth));
        widths.push(output_dim);
        Self::new(widths, activation)
    }

    /// A hidden layer is required unless the activation is the identity, in
    /// which case a single affine layer is allowed.
    pub fn validate(&self) -> Result<()> {
        let min_len = if self.activation == Activation::Identity { 2 } else { 3 };
        if self.widths.len() < min_len {
            return Err(invalid(format!(
                "MLP needs at least one hidden layer, got widths {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(invalid(format!("layer widths must be >= 1, got {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `(weight offset, bias offset, fan_in, fan_out)` per layer.
    fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let entry = (off, off + i * o, i, o);
                off += i * o + o;
                entry
            })
            .collect()
    }
}

/// Affine rescaling of inputs and outputs around the raw network:
/// `h(x) = y_shift + y_scale ⊙ net((x − x_shift) / x_scale)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub x_shift: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_shift: Vec<f64>,
    pub y_scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(input_dim: usize, output_dim: usize) -> Self {
        Self {
            x_shift: vec![0.0; input_dim],
            x_scale: vec![1.0; input_dim],
            y_shift: vec![0.0; output_dim],
            y_scale: vec![1.0; output_dim],
        }
    }

    /// Maps the box `[lo, hi]` to `[-1, 1]` and scales outputs by `y_scale`.
    pub fn from_box(lo: &[f64], hi: &[f64], y_scale: Vec<f64>) -> Self {
        let x_shift = lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let x_scale = lo
            .iter()
            .zip(hi)
            .map(|(l, h)| if h > l { 0.5 * (h - l) } else { 1.0 })
            .collect();
        Self {
            x_shift,
            x_scale,
            y_shift: vec![0.0; y_scale.len()],
            y_scale,
        }
    }

    fn validate(&self, dx: usize, dy: usize) -> Result<()> {
        let ok = self.x_shift.len() == dx
            && self.x_scale.len() == dx
            && self.y_shift.len() == dy
            && self.y_scale.len() == dy
            && self.x_scale.iter().chain(&self.y_scale).all(|s| *s > 0.0 && s.is_finite());
        if ok {
            Ok(())
        } else {
            Err(invalid("normalizer shapes do not match the architecture or scales are not positive"))
        }
    }
}

/// A parametric function `h_θ: R^{d_x} → R^{d_y}` with a vector-Jacobian
/// product.
pub trait FunctionModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn num_params(&self) -> usize;

    /// `k × d_y` outputs at the rows of `x`.
    fn forward(&self, theta: &[f64], x: &DMatrix<f64>) -> Result<DMatrix<f64>>;

    /// `(∂ vec h / ∂θ)ᵀ vec(cotangent)` for a `k × d_y` cotangent.
    fn vjp(&self, theta: &[f64], x: &DMatrix<f64>, cotangent: &DMatrix<f64>) -> Result<DVector<f64>>;

    /// Draw one initial parameter vector.
    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
}

fn check_call(model: &dyn FunctionModel, theta: &[f64], x: &DMatrix<f64>) -> Result<()> {
    if theta.len() != model.num_params() {
        return Err(invalid(format!(
            "expected {} parameters, got {}",
            model.num_params(),
            theta.len()
        )));
    }
    if x.ncols() != model.input_dim() {
        return Err(invalid(format!(
            "expected inputs of dimension {}, got {}",
            model.input_dim(),
            x.ncols()
        )));
    }
    Ok(())
}

/// Multilayer perceptron with a fixed normalizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub arch: MlpArch,
    pub normalizer: Normalizer,
}

impl Mlp {
    pub fn new(arch: MlpArch) -> Result<Self> {
        let normalizer = Normalizer::identity(arch.input_dim(), arch.output_dim());
        Self::with_normalizer(arch, normalizer)
    }

    pub fn with_normalizer(arch: MlpArch, normalizer: Normalizer) -> Result<Self> {
        arch.validate()?;
        normalizer.validate(arch.input_dim(), arch.output_dim())?;
        Ok(Self { arch, normalizer })
    }

    fn normalized_inputs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = &self.normalizer;
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - n.x_shift[j]) / n.x_scale[j])
    }

    /// Pre-activations of every layer (the last one is the raw output).
    fn pre_activations(&self, theta: &[f64], x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let act = self.arch.activation;
        let layers = self.arch.layers();
        let mut zs: Vec<DMatrix<f64>> = Vec::with_capacity(layers.len());
        let mut a = self.normalized_inputs(x);
        for (li, &(w_off, b_off, fan_in, fan_out)) in layers.iter().enumerate() {
            let w = DMatrix::from_row_slice(fan_in, fan_out, &theta[w_off..b_off]);
            let mut z = &a * w;
            let b = &theta[b_off..b_off + fan_out];
            for mut row in z.row_iter_mut() {
                for (v, bj) in row.iter_mut().zip(b) {
                    *v += bj;
                }
            }
            if li + 1 < layers.len() {
                a = z.map(|v| act.apply(v));
            }
            zs.push(z);
        }
        zs
    }
}

impl FunctionModel for Mlp {
    fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.arch.output_dim()
    }

    fn num_params(&self) -> usize {
        self.arch.num_params()
    }

    fn forward(&self, theta: &[f64], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_call(self, theta, x)?;
        let mut out = self.pre_activations(theta, x).pop().unwrap();
        let n = &self.normalizer;
        for mut row in out.row_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = n.y_shift[j] + n.y_scale[j] * *v;
            }
        }
        if !all_finite(out.iter()) {
            return Err(numeric("network output is not finite"));
        }
        Ok(out)
    }

    fn vjp(&self, theta: &[f64], x: &DMatrix<f64>, cotangent: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_call(self, theta, x)?;
        if cotangent.nrows() != x.nrows() || cotangent.ncols() != self.output_dim() {
            return Err(invalid(format!(
                "cotangent has shape {}x{}, expected {}x{}",
                cotangent.nrows(),
                cotangent.ncols(),
                x.nrows(),
                self.output_dim()
            )));
        }
        let act = self.arch.activation;
        let layers = self.arch.layers();
        let zs = self.pre_activations(theta, x);
        let mut grad = DVector::zeros(theta.len());
        let n = &self.normalizer;
        let mut g = DMatrix::from_fn(cotangent.nrows(), cotangent.ncols(), |i, j| {
            cotangent[(i, j)] * n.y_scale[j]
        });
        for li in (0..layers.len()).rev() {
            let (w_off, b_off, fan_in, fan_out) = layers[li];
            let a_prev = if li == 0 {
                self.normalized_inputs(x)
            } else {
                zs[li - 1].map(|v| act.apply(v))
            };
            let dw = a_prev.tr_mul(&g);
            for r in 0..fan_in {
                for c in 0..fan_out {
                    grad[w_off + r * fan_out + c] = dw[(r, c)];
                }
            }
            for c in 0..fan_out {
                grad[b_off + c] = g.column(c).sum();
            }
            if li > 0 {
                let w = DMatrix::from_row_slice(fan_in, fan_out, &theta[w_off..b_off]);
                let mut back = g * w.transpose();
                back.zip_apply(&zs[li - 1], |b, z| *b *= act.derivative(z));
                g = back;
            }
        }
        if !all_finite(grad.iter()) {
            return Err(numeric("vector-Jacobian product is not finite"));
        }
        Ok(grad)
    }

    /// Weights `N(0, 2/fan_in)`, biases zero.
    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut theta = vec![0.0; self.num_params()];
        for (w_off, b_off, fan_in, _) in self.arch.layers() {
            let std = (2.0 / fan_in as f64).sqrt();
            for v in &mut theta[w_off..b_off] {
                let z: f64 = StandardNormal.sample(rng);
                *v = std * z;
            }
        }
        theta
    }
}

/// Linear map without bias, `h(x) = x Θ` with `Θ` of shape `d_x × d_y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Standard deviation of the initial parameters.
    pub init_std: f64,
}

impl FunctionModel for LinearModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn num_params(&self) -> usize {
        self.input_dim * self.output_dim
    }

    fn forward(&self, theta: &[f64], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_call(self, theta, x)?;
        Ok(x * DMatrix::from_row_slice(self.input_dim, self.output_dim, theta))
    }

    fn vjp(&self, theta: &[f64], x: &DMatrix<f64>, cotangent: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_call(self, theta, x)?;
        let g = x.tr_mul(cotangent);
        Ok(DVector::from_iterator(g.len(), g.transpose().iter().copied()))
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.num_params())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                self.init_std * z
            })
            .collect()
    }
}

/// `L` parameter vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub particles: DMatrix<f64>,
}

impl ParticleEnsemble {
    pub fn new(particles: DMatrix<f64>) -> Result<Self> {
        if particles.nrows() == 0 {
            return Err(invalid("an ensemble needs at least one particle"));
        }
        if !all_finite(particles.iter()) {
            return Err(invalid("particles contain non-finite entries"));
        }
        Ok(Self { particles })
    }

    pub fn len(&self) -> usize {
        self.particles.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.nrows() == 0
    }

    pub fn num_params(&self) -> usize {
        self.particles.ncols()
    }

    pub fn particle(&self, l: usize) -> Vec<f64> {
        self.particles.row(l).iter().copied().collect()
    }
}

/// `L` independent initial particles, each from its own ChaCha stream.
pub fn init_particles<R: RngCore + ?Sized>(
    model: &dyn FunctionModel,
    l: usize,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    if l == 0 {
        return Err(invalid("need at least one particle"));
    }
    let base = rng.next_u64();
    let d = model.num_params();
    let mut particles = DMatrix::zeros(l, d);
    for i in 0..l {
        let mut r = ChaCha8Rng::seed_from_u64(base);
        r.set_stream(i as u64);
        let theta = model.init(&mut r);
        for (j, v) in theta.into_iter().enumerate() {
            particles[(i, j)] = v;
        }
    }
    ParticleEnsemble::new(particles)
}

pub fn forward(model: &dyn FunctionModel, theta: &[f64], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    model.forward(theta, x)
}

pub fn vjp(
    model: &dyn FunctionModel,
    theta: &[f64],
    x: &DMatrix<f64>,
    cotangent: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    model.vjp(theta, x, cotangent)
}

/// Each particle's `k × d_y` outputs on `x`.
pub fn ensemble_forward(model: &dyn FunctionModel, ens: &ParticleEnsemble, x: &DMatrix<f64>) -> Result<FunctionValues> {
    (0..ens.len())
        .into_par_iter()
        .map(|l| model.forward(&ens.particle(l), x))
        .collect()
}

/// Gaussian observation noise with one standard deviation per output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodModel {
    pub noise_std: Vec<f64>,
    /// Reserved for a learned noise level; training keeps `noise_std` fixed.
    #[serde(default)]
    pub learnable: bool,
}

impl LikelihoodModel {
    pub fn new(noise_std: Vec<f64>) -> Result<Self> {
        let lik = Self {
            noise_std,
            learnable: false,
        };
        lik.validate()?;
        Ok(lik)
    }

    pub fn shared(noise_std: f64, output_dim: usize) -> Result<Self> {
        Self::new(vec![noise_std; output_dim])
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_std.is_empty() || !self.noise_std.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(invalid(format!("noise std must be positive, got {:?}", self.noise_std)));
        }
        Ok(())
    }

    fn check(&self, h: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
        if h.shape() != y.shape() || h.ncols() != self.noise_std.len() {
            return Err(invalid(format!(
                "predictions {:?}, targets {:?} and {} noise levels do not match",
                h.shape(),
                y.shape(),
                self.noise_std.len()
            )));
        }
        Ok(())
    }

    /// `Σ log N(y | h, σ²)` over all entries.
    pub fn log_likelihood(&self, h: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
        self.check(h, y)?;
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut total = 0.0;
        for j in 0..h.ncols() {
            let s = self.noise_std[j];
            for i in 0..h.nrows() {
                let r = (y[(i, j)] - h[(i, j)]) / s;
                total -= 0.5 * r * r + s.ln() + half_log_2pi;
            }
        }
        Ok(total)
    }
}

/// `∇_h log p(y | h) = (y − h) / σ²`, entrywise.
pub fn likelihood_score(lik: &LikelihoodModel, h: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    lik.check(h, y)?;
    Ok(DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| {
        let s = lik.noise_std[j];
        (y[(i, j)] - h[(i, j)]) / (s * s)
    }))
}

/// Ensemble checkpoint: architecture, normalizer, noise level and the flat
/// parameter vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: Mlp,
    pub likelihood: LikelihoodModel,
    pub particles: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(model: &Mlp, likelihood: &LikelihoodModel, ens: &ParticleEnsemble) -> Self {
        Self {
            model: model.clone(),
            likelihood: likelihood.clone(),
            particles: (0..ens.len()).map(|l| ens.particle(l)).collect(),
        }
    }

    pub fn ensemble(&self) -> Result<ParticleEnsemble> {
        let d = self.model.num_params();
        if self.particles.is_empty() || self.particles.iter().any(|p| p.len() != d) {
            return Err(invalid(format!("checkpoint particles must all have {d} parameters")));
        }
        let flat: Vec<f64> = self.particles.iter().flatten().copied().collect();
        ParticleEnsemble::new(DMatrix::from_row_slice(self.particles.len(), d, &flat))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        ck.model.arch.validate()?;
        ck.likelihood.validate()?;
        ck.ensemble()?;
        Ok(ck)
    }
}

/// Standard normal draws scaled by `std`, used for Gaussian noise in tests
/// and reparameterized sampling.
pub(crate) fn gaussian_vector(n: usize, std: f64, rng: &mut impl rand::Rng) -> DVector<f64> {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    DVector::from_fn(n, |_, _| dist.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_inputs(k: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng(seed);
        DMatrix::from_fn(k, d, |_, _| StandardNormal.sample(&mut r))
    }

    #[test]
    fn parameter_count_and_layout() {
        let arch = MlpArch::new(vec![3, 5, 2], Activation::Tanh).unwrap();
        assert_eq!(arch.num_params(), 3 * 5 + 5 + 5 * 2 + 2);
        assert!(MlpArch::new(vec![3, 2], Activation::Tanh).is_err());
        assert!(MlpArch::new(vec![3, 0, 2], Activation::Tanh).is_err());
        assert!(MlpArch::new(vec![3, 2], Activation::Identity).is_ok());
    }

    #[test]
    fn init_contract() {
        let mlp = Mlp::new(MlpArch::uniform(2, 1, 64, 2, Activation::Tanh).unwrap()).unwrap();
        let one = init_particles(&mlp, 1, &mut rng(0)).unwrap();
        assert_eq!(one.len(), 1);
        let a = init_particles(&mlp, 4, &mut rng(1)).unwrap();
        let b = init_particles(&mlp, 4, &mut rng(1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.particle(0), a.particle(1));

        // Second layer: 64 → 64 weights.
        let (w_off, b_off, fan_in, _) = mlp.arch.layers()[1];
        let w = &a.particle(0)[w_off..b_off];
        let std = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        let target = (2.0 / fan_in as f64).sqrt();
        assert!((std / target - 1.0).abs() <= 0.2, "std {std} vs {target}");
        assert!(a.particle(0)[b_off..b_off + 64].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        for act in [Activation::Tanh, Activation::Relu] {
            let mlp = Mlp::new(MlpArch::uniform(3, 2, 8, 2, act).unwrap()).unwrap();
            let out = mlp.forward(&vec![0.0; mlp.num_params()], &random_inputs(5, 3, 0)).unwrap();
            assert!(out.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn affine_layer_reproduces_matrix_product() {
        let mlp = Mlp::new(MlpArch::new(vec![3, 2], Activation::Identity).unwrap()).unwrap();
        let theta = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -0.5];
        let x = random_inputs(4, 3, 1);
        let w = DMatrix::from_row_slice(3, 2, &theta[..6]);
        let mut expected = &x * w;
        for mut row in expected.row_iter_mut() {
            row[0] += 0.5;
            row[1] -= 0.5;
        }
        let out = mlp.forward(&theta, &x).unwrap();
        assert!((out - expected).amax() < 1e-12);
    }

    #[test]
    fn rows_are_independent() {
        let mlp = Mlp::new(MlpArch::uniform(2, 2, 16, 2, Activation::Gelu).unwrap()).unwrap();
        let theta = mlp.init(&mut rng(2));
        let x = random_inputs(6, 2, 3);
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = DMatrix::from_fn(6, 2, |i, j| x[(perm[i], j)]);
        let out = mlp.forward(&theta, &x).unwrap();
        let outp = mlp.forward(&theta, &xp).unwrap();
        for i in 0..6 {
            assert_eq!(outp.row(i), out.row(perm[i]));
        }
    }

    #[test]
    fn ensemble_forward_matches_particles() {
        let mlp = Mlp::new(MlpArch::uniform(1, 2, 8, 1, Activation::Tanh).unwrap()).unwrap();
        let x = random_inputs(5, 1, 4);
        let ens = init_particles(&mlp, 3, &mut rng(5)).unwrap();
        let vals = ensemble_forward(&mlp, &ens, &x).unwrap();
        assert_eq!(vals.len(), 3);
        for (l, v) in vals.iter().enumerate() {
            assert_eq!(v.shape(), (5, 2));
            assert_eq!(v, &mlp.forward(&ens.particle(l), &x).unwrap());
        }
        let theta = ens.particle(0);
        let same = ParticleEnsemble::new(DMatrix::from_fn(4, theta.len(), |_, j| theta[j])).unwrap();
        let vals = ensemble_forward(&mlp, &same, &x).unwrap();
        assert!(vals.iter().all(|v| v == &vals[0]));
    }

    /// `⟨vjp(c), v⟩` against the central difference of `⟨c, h(θ + εv)⟩`.
    fn vjp_fd_error(mlp: &Mlp, seed: u64, directions: usize) -> f64 {
        let mut r = rng(seed);
        let theta = mlp.init(&mut r);
        let theta: Vec<f64> = theta
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut r);
                v + 0.1 * z
            })
            .collect();
        let x = random_inputs(7, mlp.input_dim(), seed + 1);
        let cot = random_inputs(7, mlp.output_dim(), seed + 2);
        let g = mlp.vjp(&theta, &x, &cot).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..directions {
            let v = gaussian_vector(theta.len(), 1.0, &mut r);
            let shifted = |s: f64| -> f64 {
                let t: Vec<f64> = theta.iter().zip(v.iter()).map(|(a, b)| a + s * b).collect();
                mlp.forward(&t, &x).unwrap().component_mul(&cot).sum()
            };
            let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            let an = g.dot(&v);
            worst = worst.max((fd - an).abs() / an.abs().max(1e-3));
        }
        worst
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for (width, depth) in [(32, 1), (64, 2)] {
            for act in [Activation::Tanh, Activation::Gelu] {
                let mlp = Mlp::with_normalizer(
                    MlpArch::uniform(3, 2, width, depth, act).unwrap(),
                    Normalizer {
                        x_shift: vec![0.1, -0.2, 0.3],
                        x_scale: vec![2.0, 0.5, 1.0],
                        y_shift: vec![0.5, -1.0],
                        y_scale: vec![0.3, 2.0],
                    },
                )
                .unwrap();
                let err = vjp_fd_error(&mlp, 10 + width as u64, 20);
                assert!(err <= 1e-4, "{width}x{depth} {act:?}: rel err {err}");
            }
        }
    }

    #[test]
    fn relu_vjp_away_from_kinks() {
        // Small perturbations rarely cross a kink; any crossing shows up as a
        // large error, so a pass certifies the smooth-region derivative.
        let mlp = Mlp::new(MlpArch::uniform(2, 1, 16, 2, Activation::Relu).unwrap()).unwrap();
        let err = vjp_fd_error(&mlp, 3, 20);
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn vjp_is_linear_in_cotangent() {
        let mlp = Mlp::new(MlpArch::uniform(2, 3, 16, 2, Activation::Tanh).unwrap()).unwrap();
        let theta = mlp.init(&mut rng(6));
        let x = random_inputs(5, 2, 7);
        let c1 = random_inputs(5, 3, 8);
        let c2 = random_inputs(5, 3, 9);
        let (a, b) = (0.7, -2.3);
        let lhs = mlp.vjp(&theta, &x, &(&c1 * a + &c2 * b)).unwrap();
        let rhs = mlp.vjp(&theta, &x, &c1).unwrap() * a + mlp.vjp(&theta, &x, &c2).unwrap() * b;
        assert!((lhs - rhs).amax() <= 1e-10);
        let zero = mlp.vjp(&theta, &x, &DMatrix::zeros(5, 3)).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_model_vjp_is_exact() {
        let m = LinearModel {
            input_dim: 2,
            output_dim: 2,
            init_std: 1.0,
        };
        let theta = m.init(&mut rng(0));
        let x = random_inputs(4, 2, 1);
        let c = random_inputs(4, 2, 2);
        let g = m.vjp(&theta, &x, &c).unwrap();
        for p in 0..4 {
            let mut e = vec![0.0; 4];
            e[p] = 1.0;
            let dir = m.forward(&e, &x).unwrap().component_mul(&c).sum();
            assert!((g[p] - dir).abs() < 1e-12);
        }
    }

    #[test]
    fn likelihood_score_examples() {
        let lik = LikelihoodModel::shared(1.0, 1).unwrap();
        let y = DMatrix::from_element(2, 1, 3.0);
        assert_eq!(likelihood_score(&lik, &y, &y).unwrap(), DMatrix::zeros(2, 1));
        let h = DMatrix::from_element(2, 1, 2.0);
        assert_eq!(likelihood_score(&lik, &h, &y).unwrap(), DMatrix::from_element(2, 1, 1.0));
    }

    #[test]
    fn likelihood_score_matches_finite_differences() {
        let lik = LikelihoodModel::new(vec![0.3, 1.7]).unwrap();
        let h = random_inputs(3, 2, 0);
        let y = random_inputs(3, 2, 1);
        let s = likelihood_score(&lik, &h, &y).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut hp = h.clone();
                let mut hm = h.clone();
                hp[(i, j)] += eps;
                hm[(i, j)] -= eps;
                let fd = (lik.log_likelihood(&hp, &y).unwrap() - lik.log_likelihood(&hm, &y).unwrap()) / (2.0 * eps);
                assert!((fd - s[(i, j)]).abs() <= 1e-6 * s[(i, j)].abs().max(1.0));
            }
        }
    }

    proptest! {
        #[test]
        fn likelihood_score_scales_inverse_square(sigma in 0.01f64..10.0, r in -5.0f64..5.0) {
            let h = DMatrix::from_element(1, 1, 0.0);
            let y = DMatrix::from_element(1, 1, r);
            let s1 = likelihood_score(&LikelihoodModel::shared(sigma, 1).unwrap(), &h, &y).unwrap()[(0, 0)];
            let s2 = likelihood_score(&LikelihoodModel::shared(2.0 * sigma, 1).unwrap(), &h, &y).unwrap()[(0, 0)];
            prop_assert_eq!(s2 * 4.0, s1);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ens.json");
        let mlp = Mlp::new(MlpArch::uniform(3, 2, 4, 1, Activation::Tanh).unwrap()).unwrap();
        let ens = init_particles(&mlp, 3, &mut rng(0)).unwrap();
        let lik = LikelihoodModel::shared(0.05, 2).unwrap();
        Checkpoint::new(&mlp, &lik, &ens).save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.model, mlp);
        assert_eq!(ck.likelihood, lik);
        assert_eq!(ck.ensemble().unwrap(), ens);
    }
}
