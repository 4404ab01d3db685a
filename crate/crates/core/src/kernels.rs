//! Scalar isotropic kernels and curl-free matrix-valued kernels.
//!
//! The RBF kernel is `ν² exp(-‖x - x'‖² / (2ℓ²))`. Writing it as `ρ(s)` with
//! `s = ‖x - x'‖²` gives `ρ(s) = ν² exp(-s / (2ℓ²))`, which is the form used for
//! the curl-free kernel `-∇²ρ(‖x - x'‖²) = -4ρ''(s) r rᵀ - 2ρ'(s) I` and its
//! divergence `-4[(d + 2)ρ''(s) + 2sρ'''(s)] r`, where `r = x - x'`.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{rows, sq_dist};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `ρ(r) = exp(-r²/2)`
    Rbf,
    /// `ρ(r) = (1 + r²)^(-1/2)`
    Imq,
}

/// `k(x, x') = variance · ρ(‖x - x'‖ / lengthscale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsotropicKernel {
    pub family: KernelFamily,
    pub variance: f64,
    pub lengthscale: f64,
}

impl IsotropicKernel {
    pub fn new(family: KernelFamily, variance: f64, lengthscale: f64) -> Result<Self> {
        let k = Self {
            family,
            variance,
            lengthscale,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn rbf(variance: f64, lengthscale: f64) -> Result<Self> {
        Self::new(KernelFamily::Rbf, variance, lengthscale)
    }

    pub fn imq(variance: f64, lengthscale: f64) -> Result<Self> {
        Self::new(KernelFamily::Imq, variance, lengthscale)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(invalid(format!("kernel variance must be > 0, got {}", self.variance)));
        }
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(invalid(format!(
                "kernel lengthscale must be > 0, got {}",
                self.lengthscale
            )));
        }
        Ok(())
    }

    pub fn with_lengthscale(&self, lengthscale: f64) -> Self {
        Self {
            lengthscale,
            ..*self
        }
    }

    pub fn with_variance(&self, variance: f64) -> Self {
        Self { variance, ..*self }
    }

    /// Kernel value as a function of the squared distance.
    #[inline]
    pub fn eval_sq_dist(&self, sq: f64) -> f64 {
        let z = sq / (self.lengthscale * self.lengthscale);
        match self.family {
            KernelFamily::Rbf => self.variance * (-0.5 * z).exp(),
            KernelFamily::Imq => self.variance / (1.0 + z).sqrt(),
        }
    }

    /// `dk/ds` where `s` is the squared distance.
    #[inline]
    fn d_sq_dist(&self, sq: f64) -> f64 {
        let l2 = self.lengthscale * self.lengthscale;
        let z = sq / l2;
        match self.family {
            KernelFamily::Rbf => -0.5 / l2 * self.variance * (-0.5 * z).exp(),
            KernelFamily::Imq => -0.5 / l2 * self.variance * (1.0 + z).powf(-1.5),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(x, y)?;
        Ok(self.eval_sq_dist(sq_dist(x, y)))
    }

    /// Gradient of `k(x, x')` with respect to `x`.
    pub fn grad_x(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_dims(x, y)?;
        let mut out = vec![0.0; x.len()];
        self.grad_x_into(x, y, &mut out);
        Ok(out)
    }

    #[inline]
    pub(crate) fn grad_x_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let coef = 2.0 * self.d_sq_dist(sq_dist(x, y));
        for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
            *o = coef * (a - b);
        }
    }
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(invalid(format!(
            "dimension mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(invalid("points must have dimension >= 1"));
    }
    Ok(())
}

/// Curl-free matrix-valued kernel `-∇²k(x - x')` built on an RBF base kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurlFreeKernel {
    pub base: IsotropicKernel,
    pub dim: usize,
}

/// `ρ(s)` and its first three derivatives for the RBF base.
struct RhoDerivs {
    d1: f64,
    d2: f64,
    d3: f64,
}

impl CurlFreeKernel {
    pub fn new(base: IsotropicKernel, dim: usize) -> Result<Self> {
        base.validate()?;
        if base.family != KernelFamily::Rbf {
            return Err(invalid(
                "curl-free kernels require a thrice-differentiable RBF base kernel",
            ));
        }
        if dim == 0 {
            return Err(invalid("curl-free kernel dimension must be >= 1"));
        }
        Ok(Self { base, dim })
    }

    #[inline]
    fn rho(&self, s: f64) -> RhoDerivs {
        let c = 0.5 / (self.base.lengthscale * self.base.lengthscale);
        let rho = self.base.variance * (-c * s).exp();
        RhoDerivs {
            d1: -c * rho,
            d2: c * c * rho,
            d3: -c * c * c * rho,
        }
    }

    fn check(&self, x: &[f64], y: &[f64]) -> Result<()> {
        check_dims(x, y)?;
        if x.len() != self.dim {
            return Err(invalid(format!(
                "curl-free kernel has dimension {}, got points of dimension {}",
                self.dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// The `d×d` matrix `K_cf(x, x')`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        self.check(x, y)?;
        let mut out = DMatrix::zeros(self.dim, self.dim);
        self.block_into(x, y, |i, j, v| out[(i, j)] = v);
        Ok(out)
    }

    #[inline]
    pub(crate) fn block_into(&self, x: &[f64], y: &[f64], mut set: impl FnMut(usize, usize, f64)) {
        let d = self.dim;
        let s = sq_dist(x, y);
        let rho = self.rho(s);
        for i in 0..d {
            let ri = x[i] - y[i];
            for j in 0..d {
                let rj = x[j] - y[j];
                let mut v = -4.0 * rho.d2 * ri * rj;
                if i == j {
                    v -= 2.0 * rho.d1;
                }
                set(i, j, v);
            }
        }
    }

    /// Divergence of `x ↦ K_cf(x, x')` (row-wise; the kernel is symmetric).
    pub fn divergence(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check(x, y)?;
        let mut out = vec![0.0; self.dim];
        self.divergence_into(x, y, &mut out);
        Ok(out)
    }

    #[inline]
    pub(crate) fn divergence_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let s = sq_dist(x, y);
        let rho = self.rho(s);
        let coef = -4.0 * ((self.dim as f64 + 2.0) * rho.d2 + 2.0 * s * rho.d3);
        for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
            *o = coef * (a - b);
        }
    }

    /// Same kernel through the general isotropic form in `φ(r)`, `r = ‖x - x'‖`:
    /// `(φ'/r³ - φ''/r²) r rᵀ - (φ'/r) I`. Used as an independent cross-check.
    pub fn eval_radial_form(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        self.check(x, y)?;
        let d = self.dim;
        let r = sq_dist(x, y).sqrt();
        let (v, l) = (self.base.variance, self.base.lengthscale);
        let l2 = l * l;
        if r < 1e-12 {
            return Ok(DMatrix::identity(d, d) * (v / l2));
        }
        let phi = v * (-0.5 * r * r / l2).exp();
        let phi1 = -r / l2 * phi;
        let phi2 = (r * r / (l2 * l2) - 1.0 / l2) * phi;
        let a = phi1 / r.powi(3) - phi2 / (r * r);
        Ok(DMatrix::from_fn(d, d, |i, j| {
            let mut out = a * (x[i] - y[i]) * (x[j] - y[j]);
            if i == j {
                out -= phi1 / r;
            }
            out
        }))
    }

    /// Divergence through the general isotropic form
    /// `-(r/‖r‖)[φ''' + (d-1)/‖r‖ (φ'' - φ'/‖r‖)]`.
    pub fn divergence_radial_form(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check(x, y)?;
        let d = self.dim as f64;
        let r = sq_dist(x, y).sqrt();
        if r < 1e-12 {
            return Ok(vec![0.0; self.dim]);
        }
        let (v, l) = (self.base.variance, self.base.lengthscale);
        let l2 = l * l;
        let phi = v * (-0.5 * r * r / l2).exp();
        let phi1 = -r / l2 * phi;
        let phi2 = (r * r / (l2 * l2) - 1.0 / l2) * phi;
        let phi3 = (3.0 * r / (l2 * l2) - r.powi(3) / (l2 * l2 * l2)) * phi;
        let coef = -(phi3 + (d - 1.0) / r * (phi2 - phi1 / r)) / r;
        Ok(x.iter().zip(y).map(|(a, b)| coef * (a - b)).collect())
    }
}

/// A Gram matrix together with the block size of each kernel entry
/// (1 for scalar kernels, `d` for curl-free kernels).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub entries: DMatrix<f64>,
    pub block: usize,
}

impl KernelMatrix {
    pub fn is_symmetric(&self, tol: f64) -> bool {
        let m = &self.entries;
        m.nrows() == m.ncols() && (m - m.transpose()).amax() <= tol
    }
}

/// Kernels that can produce Gram matrices between two point sets (rows).
pub trait GramKernel {
    fn gram(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<KernelMatrix>;
}

fn check_point_sets(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(invalid("kernel matrix requires non-empty point sets"));
    }
    if x.ncols() != y.ncols() {
        return Err(invalid(format!(
            "dimension mismatch: {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    Ok(())
}

impl GramKernel for IsotropicKernel {
    fn gram(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<KernelMatrix> {
        check_point_sets(x, y)?;
        let xr = rows(x);
        let yr = rows(y);
        let entries = DMatrix::from_fn(xr.len(), yr.len(), |i, j| {
            self.eval_sq_dist(sq_dist(&xr[i], &yr[j]))
        });
        Ok(KernelMatrix { entries, block: 1 })
    }
}

impl GramKernel for CurlFreeKernel {
    /// Row-block order: block `(a, b)` occupies rows `a·d..(a+1)·d` and
    /// columns `b·d..(b+1)·d`.
    fn gram(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<KernelMatrix> {
        check_point_sets(x, y)?;
        if x.ncols() != self.dim {
            return Err(invalid(format!(
                "curl-free kernel has dimension {}, got points of dimension {}",
                self.dim,
                x.ncols()
            )));
        }
        let d = self.dim;
        let xr = rows(x);
        let yr = rows(y);
        let mut entries = DMatrix::zeros(xr.len() * d, yr.len() * d);
        for (a, xa) in xr.iter().enumerate() {
            for (b, yb) in yr.iter().enumerate() {
                self.block_into(xa, yb, |i, j, v| entries[(a * d + i, b * d + j)] = v);
            }
        }
        Ok(KernelMatrix { entries, block: d })
    }
}

pub fn kernel_matrix<K: GramKernel>(
    kernel: &K,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<KernelMatrix> {
    kernel.gram(x, y)
}

/// Median of the pairwise Euclidean distances between rows of `x`, ignoring
/// zero distances. Falls back to 1.0 (with a warning) when all points coincide.
pub fn median_heuristic(x: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() < 2 {
        return Err(invalid("median heuristic needs at least 2 points"));
    }
    let pts = rows(x);
    let mut dists = Vec::with_capacity(pts.len() * (pts.len() - 1) / 2);
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let d = sq_dist(&pts[i], &pts[j]).sqrt();
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        warn!("median heuristic: all points identical, falling back to lengthscale 1.0");
        return Ok(1.0);
    }
    Ok(crate::linalg::median(&mut dists))
}
