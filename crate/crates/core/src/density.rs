//! Analytic toy densities, unit-variance noise laws, noise-smoothed
//! densities, and quadrature values of the information functionals built on
//! them.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::num::{log_normal_pdf, log_sum_exp, normal_cdf, open_unit, sigmoid, LN_2PI};
use crate::quadrature::{gauss_legendre, integrate_panels, QuadratureGrid, Rule, DEFAULT_NODES};

/// Laplace scale `b` with `2 b^2 = 1`.
pub const LAPLACE_SCALE: f64 = FRAC_1_SQRT_2;
/// Logistic scale `s` with `s^2 pi^2 / 3 = 1`.
pub const LOGISTIC_SCALE: f64 = 0.551_328_895_421_792_1;
/// Uniform half-width `h` with `h^2 / 3 = 1`.
pub const UNIFORM_HALF_WIDTH: f64 = 1.732_050_807_568_877_2;

/// Standard deviations on each side of the default quadrature box.
pub const GRID_HALF_WIDTH_SD: f64 = 12.0;

const SIMPLEX_TOL: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-6;

/// Seeded random source with a cached second Box–Muller variate.
#[derive(Debug, Clone)]
pub struct Sampler {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Sampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent stream `stream` under the same seed.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    /// Uniform on `(0, 1)`, never exactly 0 or 1.
    pub fn uniform(&mut self) -> f64 {
        open_unit(self.rng.next_u64())
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let r = (-2.0 * self.uniform().ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * self.uniform()).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn noise(&mut self, family: NoiseFamily) -> f64 {
        match family {
            NoiseFamily::Gaussian => self.normal(),
            f => f.quantile(self.uniform()),
        }
    }

    pub fn normal_vec(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.normal()).collect()
    }

    /// Index drawn from nonnegative `weights` summing to one.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}

/// Isotropic perturbation law with zero mean and unit variance per
/// coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Gaussian,
    Laplace,
    Logistic,
    Uniform,
}

impl NoiseFamily {
    pub const ALL: [NoiseFamily; 4] = [
        NoiseFamily::Gaussian,
        NoiseFamily::Laplace,
        NoiseFamily::Logistic,
        NoiseFamily::Uniform,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Laplace => "laplace",
            Self::Logistic => "logistic",
            Self::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown noise family {s:?}")))
    }

    pub fn log_pdf(&self, z: f64) -> f64 {
        match self {
            Self::Gaussian => -0.5 * (LN_2PI + z * z),
            Self::Laplace => -0.5 * LN_2 - z.abs() / LAPLACE_SCALE,
            Self::Logistic => {
                let t = z.abs() / LOGISTIC_SCALE;
                -t - LOGISTIC_SCALE.ln() - 2.0 * (-t).exp().ln_1p()
            }
            Self::Uniform => {
                if z.abs() <= UNIFORM_HALF_WIDTH {
                    -(2.0 * UNIFORM_HALF_WIDTH).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn pdf(&self, z: f64) -> f64 {
        self.log_pdf(z).exp()
    }

    /// Derivative of `log_pdf`; zero at kinks and outside the support.
    pub fn dlog_pdf(&self, z: f64) -> f64 {
        match self {
            Self::Gaussian => -z,
            Self::Laplace => -z.signum() / LAPLACE_SCALE * f64::from(z != 0.0),
            Self::Logistic => -(z / (2.0 * LOGISTIC_SCALE)).tanh() / LOGISTIC_SCALE,
            Self::Uniform => 0.0,
        }
    }

    pub fn cdf(&self, z: f64) -> f64 {
        match self {
            Self::Gaussian => normal_cdf(z),
            Self::Laplace => {
                if z < 0.0 {
                    0.5 * (z / LAPLACE_SCALE).exp()
                } else {
                    1.0 - 0.5 * (-z / LAPLACE_SCALE).exp()
                }
            }
            Self::Logistic => sigmoid(z / LOGISTIC_SCALE),
            Self::Uniform => ((z + UNIFORM_HALF_WIDTH) / (2.0 * UNIFORM_HALF_WIDTH)).clamp(0.0, 1.0),
        }
    }

    /// Inverse CDF for the non-Gaussian laws; `u` in `(0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            Self::Gaussian => {
                // Bisection on the CDF. Sampling uses Box–Muller instead.
                let (mut lo, mut hi) = (-40.0, 40.0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if normal_cdf(mid) < u {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
            Self::Laplace => {
                if u < 0.5 {
                    LAPLACE_SCALE * (2.0 * u).ln()
                } else {
                    -LAPLACE_SCALE * (2.0 * (1.0 - u)).ln()
                }
            }
            Self::Logistic => LOGISTIC_SCALE * (u / (1.0 - u)).ln(),
            Self::Uniform => UNIFORM_HALF_WIDTH * (2.0 * u - 1.0),
        }
    }

    pub fn support(&self) -> (f64, f64) {
        match self {
            Self::Uniform => (-UNIFORM_HALF_WIDTH, UNIFORM_HALF_WIDTH),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Points where the density is not smooth.
    pub fn breakpoints(&self) -> &'static [f64] {
        match self {
            Self::Laplace => &[0.0],
            Self::Uniform => &[-UNIFORM_HALF_WIDTH, UNIFORM_HALF_WIDTH],
            _ => &[],
        }
    }

    /// Supremum of `|dlog_pdf|`; infinite for the Gaussian.
    fn max_log_slope(&self) -> f64 {
        match self {
            Self::Gaussian => f64::INFINITY,
            Self::Laplace => 1.0 / LAPLACE_SCALE,
            Self::Logistic => 1.0 / LOGISTIC_SCALE,
            Self::Uniform => 0.0,
        }
    }
}

/// Isotropic Gaussian mixture `sum_k w_k N(m_k, v_k I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureRecord")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

#[derive(Deserialize)]
struct MixtureRecord {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl TryFrom<MixtureRecord> for GaussianMixture {
    type Error = Error;

    fn try_from(r: MixtureRecord) -> Result<Self> {
        GaussianMixture::new(r.weights, r.means, r.variances)
    }
}

fn check_simplex(w: &[f64], what: &str) -> Result<()> {
    if w.is_empty() || w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} must be finite and nonnegative")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidArgument(format!("{what} sum to {s}, not 1")));
    }
    Ok(())
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        check_simplex(&weights, "mixture weights")?;
        let k = weights.len();
        if means.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: means.len(),
            });
        }
        if variances.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: variances.len(),
            });
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidArgument("mixture dimension must be positive".into()));
        }
        if let Some(m) = means.iter().find(|m| m.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: m.len(),
            });
        }
        if means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("mixture means must be finite".into()));
        }
        if variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("component variances must be positive".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    /// Single Gaussian `N(mean, var I)`.
    pub fn gaussian(mean: Vec<f64>, var: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![var])
    }

    pub fn standard(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], 1.0).expect("valid standard normal")
    }

    /// Equal-weight 1D mixture `N(-m, v)`, `N(m, v)`.
    pub fn symmetric_pair(m: f64, v: f64) -> Result<Self> {
        Self::new(vec![0.5, 0.5], vec![vec![-m], vec![m]], vec![v, v])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Per-coordinate mean and variance of the mixture.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for i in 0..d {
                mean[i] += w * m[i];
            }
        }
        let mut var = vec![0.0; d];
        for ((w, m), v) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            for i in 0..d {
                var[i] += w * (v + (m[i] - mean[i]).powi(2));
            }
        }
        (mean, var)
    }

    /// Law of `alpha X + sigma N` for Gaussian `N`.
    pub fn smoothed(&self, alpha: f64, sigma: f64) -> Self {
        Self {
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|m| m.iter().map(|x| alpha * x).collect())
                .collect(),
            variances: self
                .variances
                .iter()
                .map(|v| alpha * alpha * v + sigma * sigma)
                .collect(),
        }
    }

    fn component_log_densities(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, m), &v)| {
                w.ln() + x.iter().zip(m).map(|(xi, mi)| log_normal_pdf(*xi, *mi, v)).sum::<f64>()
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_densities(x))
    }

    /// Log density and score from component responsibilities.
    pub fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let logs = self.component_log_densities(x);
        let total = log_sum_exp(&logs);
        let mut score = vec![0.0; x.len()];
        for ((l, m), v) in logs.iter().zip(&self.means).zip(&self.variances) {
            let r = (l - total).exp();
            if r == 0.0 {
                continue;
            }
            for i in 0..x.len() {
                score[i] += r * (m[i] - x[i]) / v;
            }
        }
        (total, score)
    }

    /// Posterior mean `E[X | alpha X + sigma N = y]` for Gaussian `N`.
    pub fn posterior_mean(&self, y: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
        let smoothed = self.smoothed(alpha, sigma);
        let logs = smoothed.component_log_densities(y);
        let total = log_sum_exp(&logs);
        let s2 = sigma * sigma;
        let mut out = vec![0.0; y.len()];
        for k in 0..self.n_components() {
            let r = (logs[k] - total).exp();
            if r == 0.0 {
                continue;
            }
            let v = self.variances[k];
            let denom = alpha * alpha * v + s2;
            for i in 0..y.len() {
                let m = self.means[k][i];
                out[i] += r * (m + alpha * v * (y[i] - alpha * m) / denom);
            }
        }
        out
    }

    /// Quadrature box covering every component by the default margin.
    pub fn default_bounds(&self) -> Vec<(f64, f64)> {
        let sd = self.variances.iter().fold(0.0f64, |a, &v| a.max(v)).sqrt();
        (0..self.dim())
            .map(|i| {
                let lo = self.means.iter().map(|m| m[i]).fold(f64::INFINITY, f64::min);
                let hi = self.means.iter().map(|m| m[i]).fold(f64::NEG_INFINITY, f64::max);
                (lo - GRID_HALF_WIDTH_SD * sd, hi + GRID_HALF_WIDTH_SD * sd)
            })
            .collect()
    }

    pub fn sample(&self, count: usize, sampler: &mut Sampler) -> Matrix {
        let d = self.dim();
        let mut data = Vec::with_capacity(count * d);
        for _ in 0..count {
            let k = sampler.categorical(&self.weights);
            let sd = self.variances[k].sqrt();
            for i in 0..d {
                data.push(self.means[k][i] + sd * sampler.normal());
            }
        }
        Matrix::from_vec(count, d, data).expect("sized by construction")
    }
}

/// Discrete law on `levels` equally spaced points spanning `support`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRecord")]
pub struct QuantizedGrid {
    levels: usize,
    support: (f64, f64),
    masses: Vec<f64>,
}

#[derive(Deserialize)]
struct GridRecord {
    levels: usize,
    support: (f64, f64),
    masses: Vec<f64>,
}

impl TryFrom<GridRecord> for QuantizedGrid {
    type Error = Error;

    fn try_from(r: GridRecord) -> Result<Self> {
        QuantizedGrid::new(r.levels, r.support, r.masses)
    }
}

impl QuantizedGrid {
    pub fn new(levels: usize, support: (f64, f64), masses: Vec<f64>) -> Result<Self> {
        if levels < 2 {
            return Err(Error::InvalidArgument("a grid needs at least two levels".into()));
        }
        if !(support.0 < support.1) || !support.0.is_finite() || !support.1.is_finite() {
            return Err(Error::InvalidArgument(format!("bad grid support {support:?}")));
        }
        if masses.len() != levels {
            return Err(Error::DimensionMismatch {
                expected: levels,
                got: masses.len(),
            });
        }
        check_simplex(&masses, "grid masses")?;
        Ok(Self {
            levels,
            support,
            masses,
        })
    }

    pub fn uniform(levels: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(levels, (lo, hi), vec![1.0 / levels as f64; levels])
    }

    /// The 8-bit pixel grid on `[-1, 1]`.
    pub fn eight_bit() -> Self {
        Self::uniform(256, -1.0, 1.0).expect("valid grid")
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn spacing(&self) -> f64 {
        (self.support.1 - self.support.0) / (self.levels - 1) as f64
    }

    pub fn point(&self, j: usize) -> f64 {
        self.support.0 + self.spacing() * j as f64
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.levels).map(|j| self.point(j)).collect()
    }

    /// Level index of `x`, if it is a grid point.
    pub fn index_of(&self, x: f64) -> Option<usize> {
        let t = (x - self.support.0) / self.spacing();
        let j = t.round();
        ((t - j).abs() < 1e-9 && j >= 0.0 && j < self.levels as f64).then_some(j as usize)
    }

    pub fn log_mass(&self, x: f64) -> Result<f64> {
        self.index_of(x)
            .map(|j| self.masses[j].ln())
            .ok_or_else(|| Error::InvalidArgument(format!("{x} is not a grid point")))
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .masses
            .iter()
            .filter(|&&m| m > 0.0)
            .map(|m| m * m.ln())
            .sum::<f64>()
    }

    pub fn sample(&self, count: usize, sampler: &mut Sampler) -> Matrix {
        let data = (0..count)
            .map(|_| self.point(sampler.categorical(&self.masses)))
            .collect();
        Matrix::from_vec(count, 1, data).expect("sized by construction")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ToyDensity {
    GaussianMixture(GaussianMixture),
    QuantizedGrid(QuantizedGrid),
}

impl ToyDensity {
    pub fn dim(&self) -> usize {
        match self {
            Self::GaussianMixture(g) => g.dim(),
            Self::QuantizedGrid(_) => 1,
        }
    }

    /// Log density and score. Defined for mixtures only.
    pub fn density_eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(self.dim(), x)?;
        match self {
            Self::GaussianMixture(g) => Ok(g.eval(x)),
            Self::QuantizedGrid(_) => Err(Error::Unsupported(
                "a quantized grid has no score; only log-masses at grid points".into(),
            )),
        }
    }

    /// Log density for mixtures, log mass at grid points for grids.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x)?;
        match self {
            Self::GaussianMixture(g) => Ok(g.log_density(x)),
            Self::QuantizedGrid(q) => q.log_mass(x[0]),
        }
    }

    pub fn as_mixture(&self) -> Option<&GaussianMixture> {
        match self {
            Self::GaussianMixture(g) => Some(g),
            Self::QuantizedGrid(_) => None,
        }
    }

    pub fn sample(&self, count: usize, sampler: &mut Sampler) -> Matrix {
        match self {
            Self::GaussianMixture(g) => g.sample(count, sampler),
            Self::QuantizedGrid(q) => q.sample(count, sampler),
        }
    }
}

impl From<GaussianMixture> for ToyDensity {
    fn from(g: GaussianMixture) -> Self {
        Self::GaussianMixture(g)
    }
}

impl From<QuantizedGrid> for ToyDensity {
    fn from(q: QuantizedGrid) -> Self {
        Self::QuantizedGrid(q)
    }
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: x.len(),
        });
    }
    Ok(())
}

/// Anything with a pointwise log density and score on `R^D`.
pub trait Density: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> Result<f64>;
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// Tensor grid covering the bulk of the mass.
    fn default_grid(&self) -> Result<QuadratureGrid>;
}

impl Density for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(GaussianMixture::dim(self), x)?;
        Ok(GaussianMixture::log_density(self, x))
    }

    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(GaussianMixture::dim(self), x)?;
        Ok(GaussianMixture::eval(self, x))
    }

    fn default_grid(&self) -> Result<QuadratureGrid> {
        default_grid_for(self.default_bounds())
    }
}

impl Density for ToyDensity {
    fn dim(&self) -> usize {
        ToyDensity::dim(self)
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        ToyDensity::log_density(self, x)
    }

    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.density_eval(x)
    }

    fn default_grid(&self) -> Result<QuadratureGrid> {
        match self {
            Self::GaussianMixture(g) => g.default_grid(),
            Self::QuantizedGrid(_) => Err(Error::Unsupported(
                "a quantized grid has no Lebesgue density to integrate".into(),
            )),
        }
    }
}

fn default_grid_for(bounds: Vec<(f64, f64)>) -> Result<QuadratureGrid> {
    let n = bounds.len();
    QuadratureGrid::new(bounds, vec![DEFAULT_NODES; n], Rule::GaussLegendre)
}

#[derive(Debug, Clone, PartialEq)]
enum Smoothing {
    /// Closed-form Gaussian mixture.
    Mixture(GaussianMixture),
    /// Component-by-component convolution with a non-Gaussian law.
    Convolved(GaussianMixture),
    /// Grid atoms spread by the noise kernel.
    Kernels(QuantizedGrid),
}

/// Density of `alpha X + sigma Psi` for `X` from a toy density.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedDensity {
    noise: NoiseFamily,
    alpha: f64,
    sigma: f64,
    inner: Smoothing,
}

/// Build the density of `alpha X + sigma Psi`.
///
/// Gaussian noise on a mixture stays a mixture. Other noise laws are
/// convolved numerically one coordinate at a time, which is exact up to
/// quadrature because both the components and the noise factorize.
pub fn smoothed_density(
    d: &ToyDensity,
    noise: NoiseFamily,
    alpha: f64,
    sigma: f64,
) -> Result<SmoothedDensity> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be nonnegative, got {sigma}")));
    }
    let inner = match d {
        ToyDensity::GaussianMixture(g) => {
            if noise == NoiseFamily::Gaussian || sigma == 0.0 {
                Smoothing::Mixture(g.smoothed(alpha, sigma))
            } else {
                let base = g.smoothed(alpha, 0.0);
                check_convolution(&base, noise, sigma)?;
                Smoothing::Convolved(base)
            }
        }
        ToyDensity::QuantizedGrid(q) => {
            if sigma == 0.0 {
                return Err(Error::InvalidArgument(
                    "an unsmoothed grid has no Lebesgue density".into(),
                ));
            }
            if noise == NoiseFamily::Gaussian {
                let means = q.points().into_iter().map(|x| vec![alpha * x]).collect();
                let vars = vec![sigma * sigma; q.levels()];
                Smoothing::Mixture(GaussianMixture::new(q.masses().to_vec(), means, vars)?)
            } else {
                Smoothing::Kernels(q.clone())
            }
        }
    };
    Ok(SmoothedDensity {
        noise,
        alpha,
        sigma,
        inner,
    })
}

fn check_convolution(base: &GaussianMixture, noise: NoiseFamily, sigma: f64) -> Result<()> {
    let mut seen: Vec<f64> = Vec::new();
    for &v in base.variances() {
        if seen.contains(&v) {
            continue;
        }
        seen.push(v);
        let s = v.sqrt();
        let sd = (v + sigma * sigma).sqrt();
        let half = GRID_HALF_WIDTH_SD * sd;
        let mut breaks = vec![-half, half];
        for &b in noise.breakpoints() {
            for k in [-8.0, -2.0, 0.0, 2.0, 8.0] {
                breaks.push(sigma * b + k * s);
            }
        }
        breaks.retain(|b| b.abs() <= half);
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        let total = integrate_panels(&breaks, 128, |y| convolve_1d(noise, 0.0, s, sigma, y).0.exp());
        let error = (total - 1.0).abs();
        if !(error <= NORMALIZATION_TOL) {
            return Err(Error::Resolution { error });
        }
    }
    Ok(())
}

/// Log density and its derivative at `y` for `N(a, s^2) * sigma Psi`.
fn convolve_1d(noise: NoiseFamily, a: f64, s: f64, sigma: f64, y: f64) -> (f64, f64) {
    let c = (y - a) / sigma;
    if s == 0.0 {
        return (noise.log_pdf(c) - sigma.ln(), noise.dlog_pdf(c) / sigma);
    }
    let r = s / sigma;
    let r2 = r * r;
    // Unnormalized log posterior of the noise coordinate z; log-concave for
    // all supported laws, so the mass sits in one bracketed bump.
    let f = |z: f64| -0.5 * (z - c) * (z - c) / r2 + noise.log_pdf(z);
    let df = |z: f64| (c - z) / r2 + noise.dlog_pdf(z);
    let (sup_lo, sup_hi) = noise.support();
    let reach = if noise == NoiseFamily::Gaussian {
        c.abs() + 1.0
    } else {
        noise.max_log_slope() * r2 + 1.0
    };
    let (mut a_lo, mut a_hi) = (
        (c - reach).clamp(sup_lo, sup_hi),
        (c + reach).clamp(sup_lo, sup_hi),
    );
    for _ in 0..200 {
        if a_hi - a_lo <= 1e-13 * (1.0 + a_lo.abs()) {
            break;
        }
        let mid = 0.5 * (a_lo + a_hi);
        if df(mid) > 0.0 {
            a_lo = mid;
        } else {
            a_hi = mid;
        }
    }
    let mode = 0.5 * (a_lo + a_hi);
    let f_max = f(mode);
    let drop = 60.0;
    let step0 = r.min(1.0);
    let edge = |dir: f64, limit: f64| -> f64 {
        let mut d = step0;
        loop {
            let z = mode + dir * d;
            if (dir < 0.0 && z <= limit) || (dir > 0.0 && z >= limit) {
                return limit;
            }
            if f(z) < f_max - drop {
                let (mut near, mut far) = (mode, z);
                for _ in 0..60 {
                    let mid = 0.5 * (near + far);
                    if f(mid) < f_max - drop {
                        far = mid;
                    } else {
                        near = mid;
                    }
                }
                return far;
            }
            d *= 2.0;
        }
    };
    let lo = edge(-1.0, sup_lo);
    let hi = edge(1.0, sup_hi);
    let mut breaks = vec![lo, mode, hi];
    breaks.extend(noise.breakpoints().iter().filter(|&&b| b > lo && b < hi));
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let rule = gauss_legendre(64);
    let (mut mass, mut first, mut slope) = (0.0, 0.0, 0.0);
    for w in breaks.windows(2) {
        let (p, q) = (w[0], w[1]);
        if q <= p {
            continue;
        }
        let half = 0.5 * (q - p);
        let mid = 0.5 * (p + q);
        for (t, wt) in rule.nodes.iter().zip(&rule.weights) {
            let z = mid + half * t;
            let e = half * wt * (f(z) - f_max).exp();
            mass += e;
            first += e * z;
            slope += e * noise.dlog_pdf(z);
        }
    }
    let log_g = mass.ln() + f_max - 0.5 * (LN_2PI + r2.ln()) - sigma.ln();
    let dlog = if noise == NoiseFamily::Uniform {
        -(c - first / mass) / (sigma * r2)
    } else {
        slope / mass / sigma
    };
    (log_g, dlog)
}

impl SmoothedDensity {
    pub fn noise(&self) -> NoiseFamily {
        self.noise
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// The closed-form mixture, when the smoothing has one.
    pub fn as_mixture(&self) -> Option<&GaussianMixture> {
        match &self.inner {
            Smoothing::Mixture(g) => Some(g),
            _ => None,
        }
    }

    fn grid_eval(&self, q: &QuantizedGrid, y: f64) -> (f64, f64) {
        let logs: Vec<f64> = q
            .points()
            .iter()
            .zip(q.masses())
            .map(|(x, m)| m.ln() + self.noise.log_pdf((y - self.alpha * x) / self.sigma))
            .collect();
        let total = log_sum_exp(&logs) - self.sigma.ln();
        if !total.is_finite() {
            return (total, 0.0);
        }
        let score = q
            .points()
            .iter()
            .zip(&logs)
            .map(|(x, l)| {
                let r = (l - self.sigma.ln() - total).exp();
                r * self.noise.dlog_pdf((y - self.alpha * x) / self.sigma) / self.sigma
            })
            .sum();
        (total, score)
    }

    fn convolved_eval(&self, g: &GaussianMixture, y: &[f64]) -> (f64, Vec<f64>) {
        let d = y.len();
        let mut logs = Vec::with_capacity(g.n_components());
        let mut grads = Vec::with_capacity(g.n_components());
        for k in 0..g.n_components() {
            let s = g.variances()[k].sqrt();
            let mut l = g.weights()[k].ln();
            let mut grad = vec![0.0; d];
            for i in 0..d {
                let (lg, dl) = convolve_1d(self.noise, g.means()[k][i], s, self.sigma, y[i]);
                l += lg;
                grad[i] = dl;
            }
            logs.push(l);
            grads.push(grad);
        }
        let total = log_sum_exp(&logs);
        let mut score = vec![0.0; d];
        if total.is_finite() {
            for (l, grad) in logs.iter().zip(&grads) {
                let r = (l - total).exp();
                for i in 0..d {
                    score[i] += r * grad[i];
                }
            }
        }
        (total, score)
    }
}

impl Density for SmoothedDensity {
    fn dim(&self) -> usize {
        match &self.inner {
            Smoothing::Mixture(g) | Smoothing::Convolved(g) => g.dim(),
            Smoothing::Kernels(_) => 1,
        }
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.eval(x)?.0)
    }

    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(Density::dim(self), x)?;
        Ok(match &self.inner {
            Smoothing::Mixture(g) => g.eval(x),
            Smoothing::Convolved(g) => self.convolved_eval(g, x),
            Smoothing::Kernels(q) => {
                let (l, s) = self.grid_eval(q, x[0]);
                (l, vec![s])
            }
        })
    }

    fn default_grid(&self) -> Result<QuadratureGrid> {
        match &self.inner {
            Smoothing::Mixture(g) => g.default_grid(),
            Smoothing::Convolved(g) => {
                let widened = g.smoothed(1.0, self.sigma);
                default_grid_for(widened.default_bounds())
            }
            Smoothing::Kernels(q) => {
                let half = self.sigma * GRID_HALF_WIDTH_SD;
                QuadratureGrid::new(
                    vec![(self.alpha * q.support().0 - half, self.alpha * q.support().1 + half)],
                    vec![DEFAULT_NODES * 8],
                    Rule::GaussLegendre,
                )
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfoFunctional {
    Entropy,
    Kl,
    CrossEntropy,
    FisherDivergence,
    FisherInformation,
}

impl InfoFunctional {
    fn needs_q(&self) -> bool {
        matches!(self, Self::Kl | Self::CrossEntropy | Self::FisherDivergence)
    }
}

/// Quadrature value of an information functional of `p` (and `q`).
pub fn info_functional(
    functional: InfoFunctional,
    p: &dyn Density,
    q: Option<&dyn Density>,
    grid: &QuadratureGrid,
) -> Result<f64> {
    if functional.needs_q() && q.is_none() {
        return Err(Error::InvalidArgument(format!("{functional:?} requires a second density")));
    }
    if grid.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: grid.dim(),
        });
    }
    if let Some(q) = q {
        if q.dim() != p.dim() {
            return Err(Error::DimensionMismatch {
                expected: p.dim(),
                got: q.dim(),
            });
        }
    }
    let points = grid.points();
    let terms: Vec<f64> = points
        .par_iter()
        .map(|(x, w)| -> Result<f64> {
            let needs_score = matches!(
                functional,
                InfoFunctional::FisherDivergence | InfoFunctional::FisherInformation
            );
            let (lp, sp) = if needs_score {
                p.eval(x)?
            } else {
                (p.log_density(x)?, Vec::new())
            };
            let pv = lp.exp();
            if pv == 0.0 {
                return Ok(0.0);
            }
            let value = match functional {
                InfoFunctional::Entropy => -lp,
                InfoFunctional::FisherInformation => sp.iter().map(|s| s * s).sum(),
                InfoFunctional::Kl | InfoFunctional::CrossEntropy => {
                    let lq = q.expect("checked").log_density(x)?;
                    if lq == f64::NEG_INFINITY {
                        return Err(Error::SupportViolation { x: x[0], p: pv });
                    }
                    if functional == InfoFunctional::Kl {
                        lp - lq
                    } else {
                        -lq
                    }
                }
                InfoFunctional::FisherDivergence => {
                    let (_, sq) = q.expect("checked").eval(x)?;
                    sp.iter().zip(&sq).map(|(a, b)| (a - b).powi(2)).sum()
                }
            };
            Ok(w * pv * value)
        })
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum())
}

/// `∫ p` over the grid.
pub fn normalization(p: &dyn Density, grid: &QuadratureGrid) -> Result<f64> {
    let points = grid.points();
    let terms: Vec<f64> = points
        .par_iter()
        .map(|(x, w)| p.log_density(x).map(|l| w * l.exp()))
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum())
}

/// Source for [`draw_samples`].
#[derive(Debug, Clone, Copy)]
pub enum SampleSource<'a> {
    Density(&'a ToyDensity),
    Noise { family: NoiseFamily, dim: usize },
}

/// `count` i.i.d. rows, deterministic in `seed`.
pub fn draw_samples(source: SampleSource<'_>, count: usize, seed: u64) -> Result<Matrix> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let mut sampler = Sampler::new(seed);
    Ok(match source {
        SampleSource::Density(d) => d.sample(count, &mut sampler),
        SampleSource::Noise { family, dim } => {
            let data = (0..count * dim).map(|_| sampler.noise(family)).collect();
            Matrix::from_vec(count, dim, data)?
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate_panels;

    fn n01() -> ToyDensity {
        GaussianMixture::standard(1).into()
    }

    #[test]
    fn density_eval_examples() {
        let (l, s) = n01().density_eval(&[0.0]).unwrap();
        assert!((l + 0.5 * LN_2PI).abs() < 1e-15 && s[0] == 0.0);
        let pair: ToyDensity = GaussianMixture::symmetric_pair(1.0, 1.0).unwrap().into();
        assert_eq!(pair.density_eval(&[0.0]).unwrap().1[0], 0.0);
        let n04: ToyDensity = GaussianMixture::gaussian(vec![0.0], 4.0).unwrap().into();
        let (l, s) = n04.density_eval(&[2.0]).unwrap();
        let expect = -0.5 * (8.0 * std::f64::consts::PI).ln() - 0.5;
        assert!((l - expect).abs() < 1e-14 && (s[0] + 0.5).abs() < 1e-15);
        let grid: ToyDensity = QuantizedGrid::eight_bit().into();
        assert!(matches!(grid.density_eval(&[1.0]), Err(Error::Unsupported(_))));
        assert!((grid.log_density(&[1.0]).unwrap() + 256f64.ln()).abs() < 1e-14);
        assert!(grid.log_density(&[0.0]).is_err());
    }

    #[test]
    fn noise_densities_normalize_with_unit_variance() {
        for f in NoiseFamily::ALL {
            let mut breaks = vec![-60.0, 60.0];
            breaks.extend_from_slice(f.breakpoints());
            breaks.sort_by(f64::total_cmp);
            let mass = integrate_panels(&breaks, 512, |z| f.pdf(z));
            let var = integrate_panels(&breaks, 512, |z| z * z * f.pdf(z));
            assert!((mass - 1.0).abs() < 1e-8, "{f:?} {mass}");
            assert!((var - 1.0).abs() < 1e-8, "{f:?} {var}");
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for f in NoiseFamily::ALL {
            for u in [0.01, 0.1, 0.3, 0.5, 0.77, 0.99] {
                assert!((f.cdf(f.quantile(u)) - u).abs() < 1e-12, "{f:?} {u}");
            }
        }
    }

    #[test]
    fn dlog_pdf_matches_finite_differences() {
        for f in [NoiseFamily::Gaussian, NoiseFamily::Laplace, NoiseFamily::Logistic] {
            for z in [-2.3, -0.4, 0.7, 1.9] {
                let h = 1e-6;
                let fd = (f.log_pdf(z + h) - f.log_pdf(z - h)) / (2.0 * h);
                assert!((fd - f.dlog_pdf(z)).abs() < 1e-7, "{f:?} {z}");
            }
        }
    }

    #[test]
    fn zero_count_is_rejected() {
        let d = n01();
        assert!(draw_samples(SampleSource::Density(&d), 0, 1).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let d: ToyDensity = GaussianMixture::symmetric_pair(2.0, 0.3).unwrap().into();
        let a = draw_samples(SampleSource::Density(&d), 100, 42).unwrap();
        let b = draw_samples(SampleSource::Density(&d), 100, 42).unwrap();
        let c = draw_samples(SampleSource::Density(&d), 100, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn smoothing_examples() {
        let s = smoothed_density(&n01(), NoiseFamily::Gaussian, 1.0, 1.0).unwrap();
        let g = s.as_mixture().unwrap();
        assert_eq!(g.variances(), &[2.0]);
        let zero = smoothed_density(&n01(), NoiseFamily::Laplace, 2.0, 0.0).unwrap();
        let (l, _) = zero.eval(&[1.0]).unwrap();
        assert!((l - log_normal_pdf(1.0, 0.0, 4.0)).abs() < 1e-14);

        let u = smoothed_density(&n01(), NoiseFamily::Uniform, 1.0, 0.5).unwrap();
        let grid = u.default_grid().unwrap();
        let mass = normalization(&u, &grid).unwrap();
        assert!((mass - 1.0).abs() < 1e-8, "{mass}");
        let pts = grid.points();
        let var: f64 = pts.iter().map(|(x, w)| w * x[0] * x[0] * u.log_density(x).unwrap().exp()).sum();
        assert!((var - 1.25).abs() < 1e-8, "{var}");
    }

    #[test]
    fn convolution_agrees_with_closed_form_for_gaussian_noise() {
        // The numerical path run on the Gaussian law must reproduce the mixture.
        let g = GaussianMixture::new(vec![0.3, 0.7], vec![vec![-1.0], vec![1.5]], vec![0.4, 0.9]).unwrap();
        let closed = g.smoothed(0.8, 0.6);
        let base = g.smoothed(0.8, 0.0);
        for y in [-4.0, -1.0, 0.0, 0.3, 2.2, 6.0] {
            let mut logs = vec![];
            let mut grads = vec![];
            for k in 0..2 {
                let s = base.variances()[k].sqrt();
                let (l, d) = convolve_1d(NoiseFamily::Gaussian, base.means()[k][0], s, 0.6, y);
                logs.push(base.weights()[k].ln() + l);
                grads.push(d);
            }
            let total = log_sum_exp(&logs);
            let (lc, sc) = closed.eval(&[y]);
            assert!((total - lc).abs() < 1e-9, "{y}");
            let score: f64 = logs.iter().zip(&grads).map(|(l, d)| (l - total).exp() * d).sum();
            assert!((score - sc[0]).abs() < 1e-9, "{y}");
        }
    }

    // Plain wide-window Gauss–Legendre convolution used as a reference.
    fn convolve_1d_with(
        log_psi: impl Fn(f64) -> f64,
        dlog_psi: impl Fn(f64) -> f64,
        a: f64,
        s: f64,
        sigma: f64,
        y: f64,
    ) -> (f64, f64) {
        let c = (y - a) / sigma;
        let r = s / sigma;
        let breaks: Vec<f64> = (-40..=40).map(|i| i as f64).collect();
        let dens = |z: f64| (log_normal_pdf(z, c, r * r) + log_psi(z)).exp();
        let mass = integrate_panels(&breaks, 64, dens);
        let slope = integrate_panels(&breaks, 64, |z| dens(z) * dlog_psi(z));
        (mass.ln() - sigma.ln(), slope / mass / sigma)
    }

    #[test]
    fn convolution_matches_wide_reference() {
        for f in [NoiseFamily::Laplace, NoiseFamily::Logistic] {
            for (s, sigma) in [(1.0, 0.5), (0.7, 0.01), (1.0, 2.0)] {
                for y in [-3.0, -0.2, 0.0, 1.1, 4.0] {
                    let (l, d) = convolve_1d(f, 0.3, s, sigma, y);
                    let (lr, dr) = convolve_1d_with(|z| f.log_pdf(z), |z| f.dlog_pdf(z), 0.3, s, sigma, y);
                    assert!((l - lr).abs() < 1e-9, "{f:?} {s} {sigma} {y}: {l} {lr}");
                    assert!((d - dr).abs() < 1e-7 * (1.0 + dr.abs()), "{f:?} {s} {sigma} {y}: {d} {dr}");
                }
            }
        }
    }

    #[test]
    fn uniform_convolution_score_matches_finite_difference() {
        let d: ToyDensity = GaussianMixture::symmetric_pair(1.0, 0.5).unwrap().into();
        let u = smoothed_density(&d, NoiseFamily::Uniform, 1.0, 0.3).unwrap();
        for y in [-2.0, -0.5, 0.1, 1.7] {
            let h = 1e-5;
            let fd = (u.log_density(&[y + h]).unwrap() - u.log_density(&[y - h]).unwrap()) / (2.0 * h);
            let (_, s) = u.eval(&[y]).unwrap();
            assert!((fd - s[0]).abs() < 1e-6, "{y}: {fd} {}", s[0]);
        }
    }

    #[test]
    fn smoothed_grid_kernels_normalize() {
        let q: ToyDensity = QuantizedGrid::uniform(5, -1.0, 1.0).unwrap().into();
        for f in NoiseFamily::ALL {
            let s = smoothed_density(&q, f, 1.0, 0.2).unwrap();
            let (lo, hi) = s.default_grid().unwrap().bounds()[0];
            let mut breaks = vec![lo, hi];
            for x in [-1.0, -0.5, 0.0, 0.5, 1.0] {
                for &b in f.breakpoints() {
                    breaks.push(x + 0.2 * b);
                }
            }
            breaks.sort_by(f64::total_cmp);
            let mass = integrate_panels(&breaks, 256, |y| s.log_density(&[y]).unwrap().exp());
            assert!((mass - 1.0).abs() < 1e-8, "{f:?} {mass}");
        }
    }

    #[test]
    fn functionals_on_gaussians() {
        let p: ToyDensity = GaussianMixture::standard(1).into();
        let q: ToyDensity = GaussianMixture::gaussian(vec![1.0], 1.0).unwrap().into();
        let grid = QuadratureGrid::line(-14.0, 14.0).unwrap();
        let h = info_functional(InfoFunctional::Entropy, &p, None, &grid).unwrap();
        assert!((h - 0.5 * (LN_2PI + 1.0)).abs() < 1e-10);
        let fd = info_functional(InfoFunctional::FisherDivergence, &p, Some(&q), &grid).unwrap();
        assert!((fd - 1.0).abs() < 1e-10);
        let kl = info_functional(InfoFunctional::Kl, &p, Some(&p), &grid).unwrap();
        assert!(kl.abs() < 1e-14);
        let ce = info_functional(InfoFunctional::CrossEntropy, &p, Some(&q), &grid).unwrap();
        let kl = info_functional(InfoFunctional::Kl, &p, Some(&q), &grid).unwrap();
        assert!((ce - kl - h).abs() < 1e-8);
        assert!(info_functional(InfoFunctional::Kl, &p, None, &grid).is_err());
    }

    #[test]
    fn gaussian_kl_matches_closed_form() {
        let p: ToyDensity = GaussianMixture::standard(1).into();
        for (m, v) in [(0.5, 0.5), (-1.0, 2.0), (2.0, 1.3)] {
            let q: ToyDensity = GaussianMixture::gaussian(vec![m], v).unwrap().into();
            let grid = QuadratureGrid::line(-14.0, 14.0).unwrap();
            let kl = info_functional(InfoFunctional::Kl, &q, Some(&p), &grid).unwrap();
            let exact = 0.5 * (v + m * m - 1.0 - v.ln());
            assert!((kl - exact).abs() < 1e-7, "{m} {v}");
        }
    }

    #[test]
    fn support_violation_detected() {
        let p: ToyDensity = GaussianMixture::standard(1).into();
        let q: ToyDensity = QuantizedGrid::uniform(3, -1.0, 1.0).unwrap().into();
        let q = smoothed_density(&q, NoiseFamily::Uniform, 1.0, 0.1).unwrap();
        let grid = QuadratureGrid::line(-6.0, 6.0).unwrap();
        assert!(matches!(
            info_functional(InfoFunctional::Kl, &p, Some(&q), &grid),
            Err(Error::SupportViolation { .. })
        ));
    }
}
