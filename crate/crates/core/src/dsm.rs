//! Denoising score matching in noise-prediction form and its importance
//! weighted Monte Carlo estimator over `eta`.
//!
//! The population loss is
//!
//! ```text
//! L = 1/2 ∫ w(eta) E_{x,n} |n - n_hat(alpha x + sigma n, eta)|^2 d eta
//! ```
//!
//! and a proposal density `rho` over `[eta0, eta1]` turns it into the
//! expectation of `w(eta) / rho(eta) * |n - n_hat|^2 / 2` with `eta ~ rho`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{Sampler, ToyDensity};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::num::log_sum_exp;
use crate::proposal::EtaProposal;
use crate::quadrature::{gauss_legendre, mapped_rule, Rule};
use crate::schedule::ChannelSchedule;
use crate::stats::RunningMoments;

/// Samples per independently seeded Monte Carlo chunk.
pub const MC_CHUNK: usize = 4096;

/// Per-`eta` weight on the squared noise error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `sigma^-2 d sigma^2 / d eta`, the likelihood weight.
    #[default]
    Likelihood,
    /// `alpha^2(eta)`.
    AlphaSquared,
    /// Constant one.
    Unit,
}

impl Weighting {
    pub fn weight(&self, schedule: &ChannelSchedule, eta: f64) -> f64 {
        match self {
            Self::Likelihood => schedule.likelihood_weight(eta),
            Self::AlphaSquared => schedule.alpha2(eta),
            Self::Unit => 1.0,
        }
    }
}

/// A noise-prediction model `n_hat(y, eta)`.
pub trait NoisePredictor: Sync {
    fn dim(&self) -> usize;
    fn predict(&self, y: &[f64], eta: f64) -> Result<Vec<f64>>;
}

/// Exact noise prediction for data drawn from `model`: `-sigma` times the
/// score of `model` pushed through the channel.
///
/// Grid atoms are treated as zero-variance components, so the prediction is
/// defined whenever `sigma > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticPredictor {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
    schedule: ChannelSchedule,
}

impl AnalyticPredictor {
    pub fn new(model: impl Into<ToyDensity>, schedule: ChannelSchedule) -> Self {
        let (weights, means, variances) = match model.into() {
            ToyDensity::GaussianMixture(g) => (g.weights().to_vec(), g.means().to_vec(), g.variances().to_vec()),
            ToyDensity::QuantizedGrid(q) => (
                q.masses().to_vec(),
                q.points().into_iter().map(|x| vec![x]).collect(),
                vec![0.0; q.levels()],
            ),
        };
        Self {
            weights,
            means,
            variances,
            schedule,
        }
    }

    pub fn schedule(&self) -> &ChannelSchedule {
        &self.schedule
    }

    /// Score of the smoothed model at `y`.
    pub fn score(&self, y: &[f64], eta: f64) -> Result<Vec<f64>> {
        let c = self.schedule.coefficients_at(eta)?;
        let sigma = c.sigma;
        let n_hat = self.noise_given(y, c.alpha, sigma);
        Ok(n_hat.into_iter().map(|v| -v / sigma).collect())
    }

    fn noise_given(&self, y: &[f64], alpha: f64, sigma: f64) -> Vec<f64> {
        let s2 = sigma * sigma;
        let k = self.weights.len();
        let mut logs = Vec::with_capacity(k);
        for j in 0..k {
            let var = alpha * alpha * self.variances[j] + s2;
            let mut l = self.weights[j].ln();
            for (yi, mi) in y.iter().zip(&self.means[j]) {
                let d = yi - alpha * mi;
                l -= 0.5 * (crate::num::LN_2PI + var.ln() + d * d / var);
            }
            logs.push(l);
        }
        let total = log_sum_exp(&logs);
        let mut out = vec![0.0; y.len()];
        for j in 0..k {
            let r = (logs[j] - total).exp();
            if r == 0.0 {
                continue;
            }
            let var = alpha * alpha * self.variances[j] + s2;
            for i in 0..y.len() {
                out[i] += r * sigma * (y[i] - alpha * self.means[j][i]) / var;
            }
        }
        out
    }
}

impl NoisePredictor for AnalyticPredictor {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn predict(&self, y: &[f64], eta: f64) -> Result<Vec<f64>> {
        check_len(self.dim(), y)?;
        let c = self.schedule.coefficients_at(eta)?;
        Ok(self.noise_given(y, c.alpha, c.sigma))
    }
}

/// `base(y, eta) + lambda * (b + c * tanh(y))`, coordinatewise.
#[derive(Debug, Clone)]
pub struct PerturbedPredictor<P> {
    pub base: P,
    pub lambda: f64,
    pub b: f64,
    pub c: f64,
}

impl<P: NoisePredictor> NoisePredictor for PerturbedPredictor<P> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn predict(&self, y: &[f64], eta: f64) -> Result<Vec<f64>> {
        let mut n = self.base.predict(y, eta)?;
        for (v, yi) in n.iter_mut().zip(y) {
            *v += self.lambda * (self.b + self.c * yi.tanh());
        }
        Ok(n)
    }
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPredictor {
    pub dim: usize,
}

impl NoisePredictor for ZeroPredictor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, y: &[f64], _eta: f64) -> Result<Vec<f64>> {
        check_len(self.dim, y)?;
        Ok(vec![0.0; y.len()])
    }
}

impl<T: NoisePredictor + ?Sized> NoisePredictor for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict(&self, y: &[f64], eta: f64) -> Result<Vec<f64>> {
        (**self).predict(y, eta)
    }
}

fn check_len(expected: usize, y: &[f64]) -> Result<()> {
    if y.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: y.len(),
        });
    }
    Ok(())
}

/// `|n - n_hat(y, eta)|^2 / 2` with `y = alpha x + sigma n`.
pub fn dsm_integrand(
    schedule: &ChannelSchedule,
    eta: f64,
    x: &[f64],
    n: &[f64],
    predictor: &dyn NoisePredictor,
) -> Result<f64> {
    let y = schedule.forward_perturb(eta, x, n)?;
    let n_hat = predictor.predict(&y, eta)?;
    Ok(0.5 * n.iter().zip(&n_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub mean: f64,
    /// Variance of one importance-weighted sample.
    pub variance: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub proposal_id: String,
}

impl LossEstimate {
    pub fn from_moments(m: &RunningMoments, proposal_id: impl Into<String>) -> Self {
        Self {
            mean: m.mean(),
            variance: m.variance(),
            std_error: m.std_error(),
            n_samples: m.count() as usize,
            proposal_id: proposal_id.into(),
        }
    }
}

/// Importance-weighted Monte Carlo estimate of the DSM loss.
///
/// Samples are split into chunks of [`MC_CHUNK`]; chunk `k` draws from
/// stream `k` of `seed`, so the result does not depend on thread count.
pub fn loss_mc(
    schedule: &ChannelSchedule,
    data: &Matrix,
    predictor: &dyn NoisePredictor,
    proposal: &dyn EtaProposal,
    weighting: Weighting,
    n_samples: usize,
    seed: u64,
) -> Result<LossEstimate> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument("loss_mc needs at least two samples".into()));
    }
    if data.rows() == 0 {
        return Err(Error::InvalidArgument("empty data matrix".into()));
    }
    if data.cols() != predictor.dim() {
        return Err(Error::DimensionMismatch {
            expected: predictor.dim(),
            got: data.cols(),
        });
    }
    if schedule.endpoints().is_degenerate() {
        let zeros: RunningMoments = std::iter::repeat_n(0.0, n_samples).collect();
        return Ok(LossEstimate::from_moments(&zeros, proposal.id()));
    }
    let n_chunks = n_samples.div_ceil(MC_CHUNK);
    let chunks: Vec<RunningMoments> = (0..n_chunks)
        .into_par_iter()
        .map(|k| -> Result<RunningMoments> {
            let len = MC_CHUNK.min(n_samples - k * MC_CHUNK);
            let mut rng = Sampler::stream(seed, k as u64);
            let mut acc = RunningMoments::default();
            for _ in 0..len {
                acc.push(weighted_sample(schedule, data, predictor, proposal, weighting, &mut rng)?);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = RunningMoments::default();
    for c in &chunks {
        total.merge(c);
    }
    Ok(LossEstimate::from_moments(&total, proposal.id()))
}

/// One draw of `w(eta) / rho(eta) * |n - n_hat|^2 / 2`.
pub fn weighted_sample(
    schedule: &ChannelSchedule,
    data: &Matrix,
    predictor: &dyn NoisePredictor,
    proposal: &dyn EtaProposal,
    weighting: Weighting,
    rng: &mut Sampler,
) -> Result<f64> {
    let (eta, rho) = proposal.sample_with_density(rng.uniform())?;
    if !(rho > 0.0) {
        return Err(Error::ProposalSupport { eta });
    }
    let row = if data.rows() == 1 {
        0
    } else {
        ((rng.uniform() * data.rows() as f64) as usize).min(data.rows() - 1)
    };
    let x = data.row(row);
    let n = rng.normal_vec(x.len());
    let l = dsm_integrand(schedule, eta, x, &n, predictor)?;
    Ok(weighting.weight(schedule, eta) / rho * l)
}

/// Node counts for nested quadrature of the DSM loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossQuadrature {
    pub eta_nodes: usize,
    /// Nodes per standard-normal coordinate (data and noise).
    pub gauss_nodes: usize,
    pub eta_rule: Rule,
}

impl Default for LossQuadrature {
    fn default() -> Self {
        Self {
            eta_nodes: 256,
            gauss_nodes: 96,
            eta_rule: Rule::GaussLegendre,
        }
    }
}

/// Nodes and weights integrating against the standard normal.
pub fn normal_rule(n: usize) -> Vec<(f64, f64)> {
    let r = gauss_legendre(n);
    let half = 10.0;
    r.nodes
        .iter()
        .zip(&r.weights)
        .map(|(t, w)| {
            let z = half * t;
            (z, half * w * (-0.5 * (z * z + crate::num::LN_2PI)).exp())
        })
        .collect()
}

/// Tensor product of [`normal_rule`] over `dim` coordinates.
pub fn normal_tensor(dim: usize, n: usize) -> Vec<(Vec<f64>, f64)> {
    let base = normal_rule(n);
    let mut out = vec![(Vec::new(), 1.0)];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|(p, w)| {
                base.iter().map(move |&(z, wz)| {
                    let mut q = p.clone();
                    q.push(z);
                    (q, w * wz)
                })
            })
            .collect();
    }
    out
}

/// Nested quadrature of the population loss for mixture data.
pub fn loss_quadrature(
    schedule: &ChannelSchedule,
    density: &ToyDensity,
    predictor: &dyn NoisePredictor,
    weighting: Weighting,
    settings: LossQuadrature,
) -> Result<f64> {
    let g = density.as_mixture().ok_or_else(|| {
        Error::Unsupported("loss quadrature needs a Gaussian mixture".into())
    })?;
    let d = g.dim();
    if d > 2 {
        return Err(Error::Unsupported("loss quadrature supports D <= 2".into()));
    }
    if schedule.endpoints().is_degenerate() {
        return Ok(0.0);
    }
    let (etas, eta_w) = mapped_rule(settings.eta_rule, settings.eta_nodes, schedule.eta0(), schedule.eta1());
    let zs = normal_tensor(d, settings.gauss_nodes);
    let terms: Vec<f64> = etas
        .par_iter()
        .zip(&eta_w)
        .map(|(&eta, &we)| -> Result<f64> {
            let mut inner = 0.0;
            for k in 0..g.n_components() {
                let sd = g.variances()[k].sqrt();
                let mut comp = 0.0;
                for (z, wz) in &zs {
                    let x: Vec<f64> = g.means()[k].iter().zip(z).map(|(m, z)| m + sd * z).collect();
                    for (n, wn) in &zs {
                        comp += wz * wn * dsm_integrand(schedule, eta, &x, n, predictor)?;
                    }
                }
                inner += g.weights()[k] * comp;
            }
            Ok(we * weighting.weight(schedule, eta) * inner)
        })
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum())
}

/// What a network output represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    Score,
    Noise,
    Data,
    /// `(alpha'/alpha) y + (sigma' - alpha' sigma / alpha) n_hat`.
    Velocity,
    /// `alpha n_hat - sigma x_hat`.
    StaticVelocity,
}

/// Convert a prediction between parameterizations at fixed `(alpha, sigma, y)`.
///
/// `rates` holds `(d alpha, d sigma)` with respect to the flow variable and
/// is read only for [`PredictorKind::Velocity`].
pub fn convert_predictor(
    from: PredictorKind,
    to: PredictorKind,
    value: &[f64],
    y: &[f64],
    alpha: f64,
    sigma: f64,
    rates: Option<(f64, f64)>,
) -> Result<Vec<f64>> {
    check_len(value.len(), y)?;
    if from == to {
        return Ok(value.to_vec());
    }
    let need = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(Error::Singularity(what.to_string()))
        }
    };
    let velocity_coeffs = || -> Result<(f64, f64)> {
        let (da, ds) = rates.ok_or_else(|| {
            Error::InvalidArgument("velocity conversion needs (d alpha, d sigma)".into())
        })?;
        need(alpha != 0.0, "alpha = 0 in velocity")?;
        let a = da / alpha;
        let b = ds - da * sigma / alpha;
        Ok((a, b))
    };
    let noise: Vec<f64> = match from {
        PredictorKind::Noise => value.to_vec(),
        PredictorKind::Score => value.iter().map(|s| -sigma * s).collect(),
        PredictorKind::Data => {
            need(sigma != 0.0, "sigma = 0 when recovering noise from data")?;
            value.iter().zip(y).map(|(x, y)| (y - alpha * x) / sigma).collect()
        }
        PredictorKind::Velocity => {
            let (a, b) = velocity_coeffs()?;
            need(b != 0.0, "velocity carries no noise component")?;
            value.iter().zip(y).map(|(v, y)| (v - a * y) / b).collect()
        }
        PredictorKind::StaticVelocity => {
            need(alpha != 0.0, "alpha = 0 in static velocity")?;
            let s = alpha * alpha + sigma * sigma;
            value.iter().zip(y).map(|(v, y)| (alpha * v + sigma * y) / s).collect()
        }
    };
    Ok(match to {
        PredictorKind::Noise => noise,
        PredictorKind::Score => {
            need(sigma != 0.0, "sigma = 0 for score")?;
            noise.iter().map(|n| -n / sigma).collect()
        }
        PredictorKind::Data => {
            need(alpha != 0.0, "alpha = 0 for data prediction")?;
            noise.iter().zip(y).map(|(n, y)| (y - sigma * n) / alpha).collect()
        }
        PredictorKind::Velocity => {
            let (a, b) = velocity_coeffs()?;
            noise.iter().zip(y).map(|(n, y)| a * y + b * n).collect()
        }
        PredictorKind::StaticVelocity => {
            need(alpha != 0.0, "alpha = 0 in static velocity")?;
            let s = alpha * alpha + sigma * sigma;
            noise.iter().zip(y).map(|(n, y)| (s * n - sigma * y) / alpha).collect()
        }
    })
}
