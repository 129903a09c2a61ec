//! Per-datapoint likelihood bounds, bits/dim with dequantization offsets,
//! and an ancestral sampler for toy-scale sanity checks.
//!
//! # Sign of the dequantization offset
//!
//! A discrete point `x` owns the cell of continuous values that the
//! dequantizer can map it to. For a dequantizer with density `r(v|x)`,
//! Jensen gives `log P(x) >= E_r[log q(v)] - E_r[log r(v|x)]`, so the
//! discrete codelength is at most `E_r[-log q(v)] - H(r)`. The offset
//! returned here is `H(r)` per dimension and is *subtracted* from the
//! continuous NLL:
//!
//! * uniform noise on cells of width `2 / L` after scaling to `[-1, 1]`:
//!   `H(r) = ln(2 / L)`, a negative number, so the discrete NLL exceeds the
//!   continuous one by `ln(L / 2)`;
//! * `alpha_eps x + sigma_eps eps` with `eps` truncated standard normal on
//!   `[-3, 3]`: `H(r) = ln sigma_eps + H(TN) = 1/2 ln(2 pi e sigma_eps^2) - c`
//!   with `c = 1/2 ln(2 pi e) - H(TN)`.
//!
//! Both offsets are valid only when the cells of distinct levels do not
//! overlap, which for the truncated normal is the condition
//! `alpha_eps / (256 sigma_eps) >= 3`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{smoothed_density, Density, NoiseFamily, QuantizedGrid, Sampler};
use crate::dsm::{convert_predictor, loss_mc, LossEstimate, NoisePredictor, PredictorKind, Weighting};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::num::{normal_cdf, LN_2PI};
use crate::proposal::EtaProposal;
use crate::quadrature::integrate;
use crate::schedule::{ChannelSchedule, Regime};
use crate::stats::RunningMoments;

/// Truncation half-width of the dequantization noise.
pub const TN_HALF_WIDTH: f64 = 3.0;

/// Levels of 8-bit data.
pub const TN_LEVELS: usize = 256;

/// Constant `1/2 ln(2 pi e) - H(TN(0, 1, -3, 3))` as printed alongside the
/// truncated-normal bound.
pub const TN_CONSTANT_PUBLISHED: f64 = 0.01522;

/// Tolerance on `tau = alpha_eps / (256 sigma_eps)`.
pub const TAU_TOLERANCE: f64 = 1e-6;

/// Cross-entropy of `N(alpha_1 x, sigma_1^2 I)` against `N(0, I)`.
pub fn prior_cross_entropy(x: &[f64], schedule: &ChannelSchedule) -> Result<f64> {
    if schedule.regime() == Regime::Ve {
        return Err(Error::Unsupported(
            "the prior of a variance-exploding schedule is not standard normal".into(),
        ));
    }
    let c = schedule.coefficients_at(schedule.eta1())?;
    let a2 = c.alpha * c.alpha;
    let s2 = c.sigma * c.sigma;
    Ok(x.iter().map(|xi| 0.5 * (LN_2PI + s2 + a2 * xi * xi)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum DequantMode {
    /// Continuous data; no offset.
    None,
    /// `x + u` on `levels` integer levels, scaled to `[-1, 1]`.
    Uniform { levels: usize },
    /// `alpha_eps x + sigma_eps eps`, `eps ~ TN(0, 1, -3, 3)`.
    TruncatedNormal { eta_eps: f64 },
}

impl DequantMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Uniform { .. } => "uniform",
            Self::TruncatedNormal { .. } => "tn",
        }
    }

    /// Entropy of the dequantizer per dimension, in nats.
    pub fn offset_per_dim(&self, schedule: &ChannelSchedule) -> Result<f64> {
        match *self {
            Self::None => Ok(0.0),
            Self::Uniform { levels } => {
                if levels < 2 {
                    return Err(Error::InvalidArgument("need at least two levels".into()));
                }
                Ok((2.0 / levels as f64).ln())
            }
            Self::TruncatedNormal { eta_eps } => {
                Ok(truncated_normal_dequant_offset(schedule, eta_eps, 1)?.offset_nats)
            }
        }
    }
}

/// `mean_nats / D` less the dequantizer entropy, in bits.
pub fn bits_per_dim(mean_nats: f64, dim: usize, offset_per_dim: f64) -> f64 {
    (mean_nats / dim as f64 - offset_per_dim) / std::f64::consts::LN_2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub per_point_nats: Vec<f64>,
    pub per_point_std_error: Vec<f64>,
    /// Mean over points of the prior cross-entropy.
    pub prior_term_nats: f64,
    /// Pooled DSM estimate over all points.
    pub dsm_term: LossEstimate,
    pub mean_nats: f64,
    pub std_error_nats: f64,
    pub bits_per_dim: f64,
    pub dequant_mode: DequantMode,
    pub dataset_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllConfig {
    /// DSM samples per datapoint.
    pub n_samples: usize,
    pub seed: u64,
    pub dequant: DequantMode,
    pub dataset_id: String,
}

/// Seed of datapoint `i` under a master seed.
pub fn point_seed(seed: u64, i: u64) -> u64 {
    let mut z = seed ^ i.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-datapoint upper bound on `-log q(x)`: prior cross-entropy plus a
/// Monte Carlo estimate of the DSM integral over `p(y_t | x)` alone.
///
/// Each importance-weighted sample carries `w(eta) / rho(eta)`, which is
/// the normalizing factor of the proposal.
pub fn nll_bound(
    data: &Matrix,
    schedule: &ChannelSchedule,
    predictor: &dyn NoisePredictor,
    proposal: &dyn EtaProposal,
    config: &NllConfig,
) -> Result<NllReport> {
    if data.rows() == 0 {
        return Err(Error::InvalidArgument("no datapoints".into()));
    }
    if data.cols() != predictor.dim() {
        return Err(Error::DimensionMismatch {
            expected: predictor.dim(),
            got: data.cols(),
        });
    }
    let offset = config.dequant.offset_per_dim(schedule)?;
    let rows: Vec<(f64, LossEstimate)> = (0..data.rows())
        .into_par_iter()
        .map(|i| -> Result<(f64, LossEstimate)> {
            let x = data.row(i);
            let prior = prior_cross_entropy(x, schedule)?;
            let point = Matrix::from_vec(1, x.len(), x.to_vec())?;
            let est = loss_mc(
                schedule,
                &point,
                predictor,
                proposal,
                Weighting::Likelihood,
                config.n_samples,
                point_seed(config.seed, i as u64),
            )?;
            Ok((prior, est))
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let per_point_nats: Vec<f64> = rows.iter().map(|(p, e)| p + e.mean).collect();
    let per_point_std_error: Vec<f64> = rows.iter().map(|(_, e)| e.std_error).collect();
    let prior_term_nats = rows.iter().map(|(p, _)| p).sum::<f64>() / n;
    let dsm_mean = rows.iter().map(|(_, e)| e.mean).sum::<f64>() / n;
    let dsm_var = rows.iter().map(|(_, e)| e.variance).sum::<f64>() / n;
    let pooled_se = rows.iter().map(|(_, e)| e.std_error.powi(2)).sum::<f64>().sqrt() / n;
    let mean_nats = per_point_nats.iter().sum::<f64>() / n;
    let spread: RunningMoments = per_point_nats.iter().copied().collect();
    // Spread across points plus the within-point Monte Carlo error.
    let std_error_nats = if rows.len() > 1 {
        (spread.std_error().powi(2) + pooled_se.powi(2)).sqrt()
    } else {
        pooled_se
    };
    Ok(NllReport {
        bits_per_dim: bits_per_dim(mean_nats, data.cols(), offset),
        per_point_nats,
        per_point_std_error,
        prior_term_nats,
        dsm_term: LossEstimate {
            mean: dsm_mean,
            variance: dsm_var,
            std_error: pooled_se,
            n_samples: config.n_samples * rows.len(),
            proposal_id: proposal.id().to_string(),
        },
        mean_nats,
        std_error_nats,
        dequant_mode: config.dequant,
        dataset_id: config.dataset_id.clone(),
        seed: config.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TnOffset {
    /// `D/2 ln(2 pi e sigma_eps^2) - c D`.
    pub offset_nats: f64,
    pub alpha_eps: f64,
    pub sigma_eps: f64,
    pub tau: f64,
    pub constant: f64,
    /// Draw `eps` from a standard normal truncated to `[-half_width, half_width]`.
    pub half_width: f64,
}

/// Offset of the truncated-normal dequantization bound at `eta_eps`.
///
/// `eta_eps` may lie below `eta0`: the dequantization channel only needs
/// the schedule's coefficients there, not its integration range.
pub fn truncated_normal_dequant_offset(schedule: &ChannelSchedule, eta_eps: f64, dim: usize) -> Result<TnOffset> {
    if !eta_eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eta_eps = {eta_eps}")));
    }
    let c = crate::schedule::Coefficients {
        alpha: schedule.alpha(eta_eps),
        sigma: schedule.sigma(eta_eps),
    };
    let tau = c.alpha / (TN_LEVELS as f64 * c.sigma);
    if !((tau - TN_HALF_WIDTH).abs() <= TAU_TOLERANCE) {
        return Err(Error::Configuration(format!(
            "tau = alpha/(256 sigma) = {tau} at eta_eps = {eta_eps}; the truncated-normal bound needs tau = 3"
        )));
    }
    let d = dim as f64;
    let constant = TN_CONSTANT_PUBLISHED;
    Ok(TnOffset {
        offset_nats: 0.5 * d * (LN_2PI + 1.0 + 2.0 * c.sigma.ln()) - constant * d,
        alpha_eps: c.alpha,
        sigma_eps: c.sigma,
        tau,
        constant,
        half_width: TN_HALF_WIDTH,
    })
}

/// `eta` at which `alpha / (256 sigma) = tau`.
pub fn eta_for_tau(schedule: &ChannelSchedule, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument("tau must be positive".into()));
    }
    let target = -2.0 * (TN_LEVELS as f64 * tau).ln();
    if schedule.regime() == Regime::Vp || schedule.regime() == Regime::Ve {
        if let crate::schedule::VarianceFamily::Sigmoid | crate::schedule::VarianceFamily::VeExponential =
            schedule.family()
        {
            return Ok(target);
        }
    }
    // log_snr is strictly decreasing in eta; bisect -log_snr = target.
    let (mut lo, mut hi) = (target - 60.0, target + 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if -schedule.log_snr(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Closed form of `1/2 ln(2 pi e) - H(TN(0, 1, -a, a))`.
///
/// With `Z = P(|N| <= a)`, the entropy is `1/2 ln(2 pi) + ln Z + E[eps^2]/2`
/// and `E[eps^2] = 1 - 2 a phi(a) / Z`.
pub fn tn_constant_exact(half_width: f64) -> f64 {
    let a = half_width;
    let z = 1.0 - 2.0 * normal_cdf(-a);
    let phi = (-0.5 * (a * a + LN_2PI)).exp();
    -z.ln() + a * phi / z
}

/// The same constant by Gauss-Legendre quadrature of `-f ln f`.
pub fn tn_constant_quadrature(half_width: f64) -> f64 {
    let a = half_width;
    let phi = |e: f64| (-0.5 * (e * e + LN_2PI)).exp();
    let z = integrate(-a, a, 256, phi);
    let h = integrate(-a, a, 256, |e| {
        let f = phi(e) / z;
        -f * f.ln()
    });
    0.5 * (LN_2PI + 1.0) - h
}

/// Monte Carlo estimate of the constant and its standard error.
pub fn tn_constant_mc(half_width: f64, n: usize, seed: u64) -> (f64, f64) {
    let a = half_width;
    let ln_z = (1.0 - 2.0 * normal_cdf(-a)).ln();
    let chunks = n.div_ceil(crate::dsm::MC_CHUNK);
    let moments = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut s = Sampler::stream(seed, k as u64);
            let m = crate::dsm::MC_CHUNK.min(n - k * crate::dsm::MC_CHUNK);
            let mut acc = RunningMoments::default();
            for _ in 0..m {
                let e = truncated_normal(&mut s, a);
                acc.push(0.5 * (LN_2PI + e * e) + ln_z);
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(RunningMoments::default(), |mut a, b| {
            a.merge(&b);
            a
        });
    (0.5 * (LN_2PI + 1.0) - moments.mean(), moments.std_error())
}

/// Independent replicates of [`tn_constant_stratified`].
pub const STRATIFIED_REPLICATES: usize = 16;

/// Stratified Monte Carlo estimate of the constant and its standard error.
///
/// Each of [`STRATIFIED_REPLICATES`] replicates places one inverse-CDF draw
/// uniformly inside every one of `n / replicates` equal-probability strata;
/// the error is taken from the spread of the replicate means.
pub fn tn_constant_stratified(half_width: f64, n: usize, seed: u64) -> (f64, f64) {
    let a = half_width;
    let lo = normal_cdf(-a);
    let z = 1.0 - 2.0 * lo;
    let strata = (n / STRATIFIED_REPLICATES).max(1);
    let means: RunningMoments = (0..STRATIFIED_REPLICATES)
        .into_par_iter()
        .map(|r| {
            let mut s = Sampler::stream(seed, r as u64);
            let sum: f64 = (0..strata)
                .map(|k| {
                    let u = (k as f64 + s.uniform()) / strata as f64;
                    let e = NoiseFamily::Gaussian.quantile(lo + z * u);
                    e * e
                })
                .sum();
            sum / strata as f64
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .collect();
    // c = 1/2 ln(2 pi e) - (1/2 ln(2 pi) + ln Z + E[eps^2] / 2)
    (0.5 - z.ln() - 0.5 * means.mean(), 0.5 * means.std_error())
}

/// Standard normal conditioned on `|eps| <= half_width`, by rejection.
pub fn truncated_normal(sampler: &mut Sampler, half_width: f64) -> f64 {
    loop {
        let e = sampler.normal();
        if e.abs() <= half_width {
            return e;
        }
    }
}

/// Map integer levels with offsets `u` in `[0, 1)` to `2 (x + u) / L - 1`.
pub fn dequantize_with(x: &[i64], levels: usize, u: &[f64]) -> Result<Vec<f64>> {
    if x.len() != u.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: u.len(),
        });
    }
    let l = levels as f64;
    x.iter()
        .zip(u)
        .map(|(&xi, &ui)| {
            if xi < 0 || xi as usize >= levels {
                return Err(Error::InvalidArgument(format!("level {xi} outside [0, {levels})")));
            }
            if !(0.0..1.0).contains(&ui) {
                return Err(Error::InvalidArgument(format!("offset {ui} outside [0, 1)")));
            }
            Ok(2.0 * (xi as f64 + ui) / l - 1.0)
        })
        .collect()
}

/// Uniform dequantization, deterministic in `seed`.
pub fn uniform_dequant(x: &[i64], levels: usize, seed: u64) -> Result<Vec<f64>> {
    let mut s = Sampler::new(seed);
    let u: Vec<f64> = x.iter().map(|_| s.uniform()).collect();
    dequantize_with(x, levels, &u)
}

/// `alpha_eps x + sigma_eps eps` for each row of scaled levels.
pub fn tn_dequant(data: &Matrix, offset: &TnOffset, seed: u64) -> Result<Matrix> {
    let mut s = Sampler::new(seed);
    let values = data
        .as_slice()
        .iter()
        .map(|x| offset.alpha_eps * x + offset.sigma_eps * truncated_normal(&mut s, offset.half_width))
        .collect();
    Matrix::from_vec(data.rows(), data.cols(), values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedBits {
    pub bits_per_dim: f64,
    pub std_error_bits: f64,
    pub mean_nats: f64,
    pub offset_nats: f64,
    pub n_samples: usize,
}

/// Bits/dim of a one-dimensional grid source under its own exact smoothed
/// density at `eta_eps`, with truncated-normal dequantization.
pub fn quantized_bits_exact(
    grid: &QuantizedGrid,
    schedule: &ChannelSchedule,
    eta_eps: f64,
    n_samples: usize,
    seed: u64,
) -> Result<QuantizedBits> {
    let offset = truncated_normal_dequant_offset(schedule, eta_eps, 1)?;
    let q = smoothed_density(&grid.clone().into(), NoiseFamily::Gaussian, offset.alpha_eps, offset.sigma_eps)?;
    let mut s = Sampler::new(seed);
    let x = grid.sample(n_samples, &mut s);
    let y = tn_dequant(&x, &offset, seed.wrapping_add(1))?;
    let nll = y
        .as_slice()
        .par_iter()
        .map(|&v| q.log_density(&[v]).map(|l| -l))
        .collect::<Result<Vec<f64>>>()?;
    let m: RunningMoments = nll.into_iter().collect();
    Ok(QuantizedBits {
        bits_per_dim: bits_per_dim(m.mean(), 1, offset.offset_nats),
        std_error_bits: m.std_error() / std::f64::consts::LN_2,
        mean_nats: m.mean(),
        offset_nats: offset.offset_nats,
        n_samples,
    })
}

/// Reverse Gaussian kernels from `y_1 ~ N(0, I)` down to `eta0` over `steps`
/// equal steps in `eta`.
pub fn ancestral_sample(
    schedule: &ChannelSchedule,
    predictor: &dyn NoisePredictor,
    steps: usize,
    n: usize,
    seed: u64,
) -> Result<Matrix> {
    if steps < 2 {
        return Err(Error::InvalidArgument("need at least two steps".into()));
    }
    if schedule.regime() == Regime::Ve {
        return Err(Error::Unsupported("ancestral sampling needs a standard normal prior".into()));
    }
    let dim = predictor.dim();
    let (e0, e1) = (schedule.eta0(), schedule.eta1());
    let grid: Vec<f64> = (0..=steps)
        .map(|k| if k == steps { e1 } else { e0 + (e1 - e0) * k as f64 / steps as f64 })
        .collect();
    let rows = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut s = Sampler::stream(seed, i as u64);
            let mut y = s.normal_vec(dim);
            for k in (1..=steps).rev() {
                let (es, et) = (grid[k - 1], grid[k]);
                let ct = schedule.coefficients_at(et)?;
                let cs = schedule.coefficients_at(es)?;
                let n_hat = predictor.predict(&y, et)?;
                let x_hat =
                    convert_predictor(PredictorKind::Noise, PredictorKind::Data, &n_hat, &y, ct.alpha, ct.sigma, None)?;
                let s2t = ct.sigma * ct.sigma;
                let s2s = cs.sigma * cs.sigma;
                let cond = schedule.conditional_variance(es, et)?;
                let a_ts = schedule.conditional_alpha(es, et);
                let var = cond * s2s / s2t;
                if !(0.0..1.0).contains(&var) {
                    return Err(Error::NumericalInconsistency(format!(
                        "reverse kernel variance {var} outside [0, 1) at eta = {et}"
                    )));
                }
                let cy = a_ts * s2s / s2t;
                let cx = cs.alpha * cond / s2t;
                let sd = var.sqrt();
                for j in 0..dim {
                    y[j] = cy * y[j] + cx * x_hat[j] + sd * s.normal();
                }
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NumericalInconsistency(format!("non-finite sample at eta = {es}")));
                }
            }
            Ok(y)
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}
