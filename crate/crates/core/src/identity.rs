//! Numerical checks of the small-noise and thermodynamic identities on toy
//! densities where every term has a quadrature value.
//!
//! Derivatives at `sigma^2 = 0+` are taken by polynomial extrapolation of the
//! difference quotients `(F(h) - F(0)) / h` over a probe ladder, which removes
//! the `O(h)` and `O(h^2)` bias of a one-sided difference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{
    info_functional, smoothed_density, Density, GaussianMixture, InfoFunctional, NoiseFamily, SmoothedDensity,
    ToyDensity,
};
use crate::dsm::{normal_tensor, NoisePredictor};
use crate::error::{Error, Result};
use crate::evaluation::prior_cross_entropy;
use crate::quadrature::{mapped_rule, QuadratureGrid, Rule};
use crate::schedule::ChannelSchedule;

/// Geometric probe ladder `{eps, 2 eps, 4 eps}` with `eps = 1e-4`.
pub const DEFAULT_PROBES: [f64; 3] = [1e-4, 2e-4, 4e-4];

/// Absolute slack allowed when checking that a quadrature sequence is monotone.
pub const MONOTONE_TOLERANCE: f64 = 1e-10;

/// Endpoint mismatch above which the decomposition report carries a warning.
pub const ENDPOINT_KL_WARNING: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentitySettings {
    /// Gauss-Legendre nodes on `[eta0, eta1]`.
    pub eta_nodes: usize,
    /// Nodes per coordinate for expectations over `y`.
    pub y_nodes: usize,
    /// Nodes per standard-normal coordinate for expectations over `n`.
    pub n_nodes: usize,
}

impl Default for IdentitySettings {
    fn default() -> Self {
        Self {
            eta_nodes: 256,
            y_nodes: 512,
            n_nodes: 96,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeReport {
    pub fd_slope: f64,
    pub fisher_half: f64,
    pub abs_gap: f64,
    /// Functional values at `0` followed by each probe.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub sigma2: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermoReport {
    pub lhs: f64,
    pub prior_ce: f64,
    pub dsm_term: f64,
    pub channel_fisher_term: f64,
    pub rhs: f64,
    pub gap: f64,
    /// `KL(p(y_1) || pi)`.
    pub endpoint_kl: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseReport {
    pub neg_log_q: f64,
    pub prior_ce: f64,
    pub dsm_term: f64,
    pub bound: f64,
    pub slack: f64,
}

fn check_probes(probes: &[f64]) -> Result<()> {
    if probes.len() < 2 {
        return Err(Error::InvalidArgument("need at least two probes".into()));
    }
    if probes.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(Error::InvalidArgument("probes must be positive".into()));
    }
    if probes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("probes must be strictly ascending".into()));
    }
    if probes[0] > 1e-3 {
        return Err(Error::InvalidArgument(format!(
            "smallest probe {} exceeds 1e-3",
            probes[0]
        )));
    }
    Ok(())
}

/// Value at `h = 0` of the interpolating polynomial through `(hs, ds)`.
pub fn extrapolate_to_zero(hs: &[f64], ds: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..hs.len() {
        let mut l = 1.0;
        for j in 0..hs.len() {
            if i != j {
                l *= hs[j] / (hs[j] - hs[i]);
            }
        }
        total += l * ds[i];
    }
    total
}

/// Derivative at `0+` of `F` given `F(0)` and `F` at each probe.
fn slope_at_zero(f0: f64, probes: &[f64], values: &[f64]) -> f64 {
    let ds: Vec<f64> = probes.iter().zip(values).map(|(h, v)| (v - f0) / h).collect();
    extrapolate_to_zero(probes, &ds)
}

/// `sequence` must be non-increasing (`sign = -1`) or non-decreasing (`+1`).
fn check_monotone(sequence: &[f64], sign: f64, what: &str) -> Result<()> {
    for w in sequence.windows(2) {
        if sign * (w[1] - w[0]) < -MONOTONE_TOLERANCE {
            return Err(Error::NumericalInconsistency(format!(
                "{what} is not monotone along the probe ladder: {sequence:?}"
            )));
        }
    }
    Ok(())
}

/// Unit-scale smoothing with `alpha = 1`.
fn smooth(d: &ToyDensity, noise: NoiseFamily, sigma2: f64) -> Result<SmoothedDensity> {
    smoothed_density(d, noise, 1.0, sigma2.sqrt())
}

/// Small-noise slope of `KL(p_h || q_h)` against `-I(p || q) / 2`.
pub fn theorem1_check(
    p: &ToyDensity,
    q: &ToyDensity,
    noise: NoiseFamily,
    sigma2_probes: &[f64],
    grid: &QuadratureGrid,
) -> Result<SlopeReport> {
    check_probes(sigma2_probes)?;
    let k0 = info_functional(InfoFunctional::Kl, p, Some(q), grid)?;
    let ks = sigma2_probes
        .par_iter()
        .map(|&h| {
            let ps = smooth(p, noise, h)?;
            let qs = smooth(q, noise, h)?;
            info_functional(InfoFunctional::Kl, &ps, Some(&qs), grid)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut values = vec![k0];
    values.extend(&ks);
    check_monotone(&values, -1.0, "KL")?;
    let fd_slope = slope_at_zero(k0, sigma2_probes, &ks);
    let fisher_half = -0.5 * info_functional(InfoFunctional::FisherDivergence, p, Some(q), grid)?;
    Ok(SlopeReport {
        fd_slope,
        fisher_half,
        abs_gap: (fd_slope - fisher_half).abs(),
        values,
    })
}

/// `KL(p || q)` against `KL(p_h || q_h) + h I(p || q) / 2`.
pub fn second_order_expansion_check(
    p: &ToyDensity,
    q: &ToyDensity,
    noise: NoiseFamily,
    sigma2: f64,
    grid: &QuadratureGrid,
) -> Result<ExpansionReport> {
    if !(0.0..=0.05).contains(&sigma2) {
        return Err(Error::InvalidArgument(format!("sigma2 = {sigma2} outside [0, 0.05]")));
    }
    let lhs = info_functional(InfoFunctional::Kl, p, Some(q), grid)?;
    if sigma2 == 0.0 {
        return Ok(ExpansionReport {
            sigma2,
            lhs,
            rhs: lhs,
            residual: 0.0,
        });
    }
    let ps = smooth(p, noise, sigma2)?;
    let qs = smooth(q, noise, sigma2)?;
    let smoothed = info_functional(InfoFunctional::Kl, &ps, Some(&qs), grid)?;
    if smoothed > lhs + MONOTONE_TOLERANCE {
        return Err(Error::NumericalInconsistency(format!(
            "smoothing increased KL from {lhs} to {smoothed}"
        )));
    }
    let fisher = info_functional(InfoFunctional::FisherDivergence, p, Some(q), grid)?;
    let rhs = smoothed + 0.5 * sigma2 * fisher;
    Ok(ExpansionReport {
        sigma2,
        lhs,
        rhs,
        residual: lhs - rhs,
    })
}

/// Small-noise slope of `H(p_h)` against `J(p) / 2`.
pub fn debruijn_check(p: &ToyDensity, noise: NoiseFamily, grid: &QuadratureGrid) -> Result<SlopeReport> {
    debruijn_check_with(p, noise, &DEFAULT_PROBES, grid)
}

pub fn debruijn_check_with(
    p: &ToyDensity,
    noise: NoiseFamily,
    sigma2_probes: &[f64],
    grid: &QuadratureGrid,
) -> Result<SlopeReport> {
    if p.as_mixture().is_none() {
        return Err(Error::Unsupported(
            "a quantized grid has infinite Fisher information".into(),
        ));
    }
    check_probes(sigma2_probes)?;
    let h0 = info_functional(InfoFunctional::Entropy, p, None, grid)?;
    let hs = sigma2_probes
        .par_iter()
        .map(|&h| info_functional(InfoFunctional::Entropy, &smooth(p, noise, h)?, None, grid))
        .collect::<Result<Vec<f64>>>()?;
    let mut values = vec![h0];
    values.extend(&hs);
    check_monotone(&values, 1.0, "entropy")?;
    let fd_slope = slope_at_zero(h0, sigma2_probes, &hs);
    let fisher_half = 0.5 * info_functional(InfoFunctional::FisherInformation, p, None, grid)?;
    Ok(SlopeReport {
        fd_slope,
        fisher_half,
        abs_gap: (fd_slope - fisher_half).abs(),
        values,
    })
}

fn standard_normal(dim: usize) -> GaussianMixture {
    GaussianMixture::standard(dim)
}

fn y_grid(d: &GaussianMixture, nodes: usize) -> Result<QuadratureGrid> {
    let bounds = d.default_bounds();
    let n = bounds.len();
    if n > 2 {
        return Err(Error::Unsupported("y quadrature supports D <= 2".into()));
    }
    QuadratureGrid::new(bounds, vec![nodes; n], Rule::GaussLegendre)
}

/// Cross-entropy of data `p` under model `q`, rebuilt from the prior term,
/// the DSM functional of the model score, and the channel Fisher term.
///
/// The model score at each `eta` is the exact score of `q` pushed through
/// the channel; the DSM term is expanded so that only the posterior mean
/// of `p` enters:
///
/// ```text
/// J = 1/2 ∫ dσ²/dη [ E|s_q|² + (2/σ²) E s_q·(y - α E[x|y]) + D/σ² ] dη
/// ```
pub fn thermo_decomposition_check(
    p: &GaussianMixture,
    q: &GaussianMixture,
    schedule: &ChannelSchedule,
    settings: IdentitySettings,
) -> Result<ThermoReport> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    let d = p.dim() as f64;
    let grid0 = y_grid(p, settings.y_nodes)?;
    let lhs = info_functional(InfoFunctional::CrossEntropy, p, Some(q), &grid0)?;

    let c1 = schedule.coefficients_at(schedule.eta1())?;
    let p1 = p.smoothed(c1.alpha, c1.sigma);
    let grid1 = y_grid(&p1, settings.y_nodes)?;
    let pi = standard_normal(p.dim());
    let prior_ce = info_functional(InfoFunctional::CrossEntropy, &p1, Some(&pi), &grid1)?;
    let endpoint_kl = info_functional(InfoFunctional::Kl, &p1, Some(&pi), &grid1)?;

    let (etas, weights) = mapped_rule(Rule::GaussLegendre, settings.eta_nodes, schedule.eta0(), schedule.eta1());
    let terms = etas
        .par_iter()
        .zip(&weights)
        .map(|(&eta, &w)| -> Result<(f64, f64)> {
            let c = schedule.coefficients_at(eta)?;
            let s2 = c.sigma * c.sigma;
            let ds2 = schedule.dsigma2_deta(eta)?;
            let pt = p.smoothed(c.alpha, c.sigma);
            let qt = q.smoothed(c.alpha, c.sigma);
            let grid = y_grid(&pt, settings.y_nodes)?;
            let mut score_sq = 0.0;
            let mut cross = 0.0;
            for (y, wy) in grid.points() {
                let mass = wy * pt.log_density(&y).exp();
                if mass == 0.0 {
                    continue;
                }
                let (_, sq) = qt.eval(&y);
                let x_hat = p.posterior_mean(&y, c.alpha, c.sigma);
                score_sq += mass * sq.iter().map(|s| s * s).sum::<f64>();
                cross += mass
                    * sq.iter()
                        .zip(&y)
                        .zip(&x_hat)
                        .map(|((s, yi), xi)| s * (yi - c.alpha * xi))
                        .sum::<f64>();
            }
            let dsm = 0.5 * ds2 * (score_sq + 2.0 * cross / s2 + d / s2);
            let channel = 0.5 * ds2 * d / s2;
            Ok((w * dsm, w * channel))
        })
        .collect::<Result<Vec<_>>>()?;
    let dsm_term: f64 = terms.iter().map(|t| t.0).sum();
    let channel_fisher_term: f64 = terms.iter().map(|t| t.1).sum();
    let rhs = prior_ce + dsm_term - channel_fisher_term;
    let warning = (endpoint_kl > ENDPOINT_KL_WARNING).then(|| {
        format!("KL(p(y_1) || pi) = {endpoint_kl:.4} nats; sigma_1 too small for y_1 to match the prior")
    });
    Ok(ThermoReport {
        lhs,
        prior_ce,
        dsm_term,
        channel_fisher_term,
        rhs,
        gap: lhs - rhs,
        endpoint_kl,
        warning,
    })
}

/// Per-point DSM integral `1/2 ∫ w E_n |n - n_hat|^2 d eta` by tensor
/// quadrature over `eta` and `n`.
pub fn pointwise_dsm_quadrature(
    x: &[f64],
    schedule: &ChannelSchedule,
    predictor: &dyn NoisePredictor,
    settings: IdentitySettings,
) -> Result<f64> {
    let dim = x.len();
    if predictor.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: predictor.dim(),
            got: dim,
        });
    }
    if schedule.endpoints().is_degenerate() {
        return Ok(0.0);
    }
    let tensor = normal_tensor(dim, settings.n_nodes);
    let (etas, weights) = mapped_rule(Rule::GaussLegendre, settings.eta_nodes, schedule.eta0(), schedule.eta1());
    let terms = etas
        .par_iter()
        .zip(&weights)
        .map(|(&eta, &w)| -> Result<f64> {
            let lw = schedule.likelihood_weight(eta);
            let mut inner = 0.0;
            for (n, wn) in &tensor {
                let y = schedule.forward_perturb(eta, x, n)?;
                let n_hat = predictor.predict(&y, eta)?;
                inner += wn * 0.5 * n.iter().zip(&n_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            Ok(w * lw * inner)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(terms.iter().sum())
}

/// Pointwise bound `-log q(x) <= H(p(y_1|x), pi) + L_DSM(x)`.
///
/// Returns [`Error::BoundViolation`] when the slack falls below `-tolerance`.
pub fn pointwise_bound_check(
    x: &[f64],
    schedule: &ChannelSchedule,
    predictor: &dyn NoisePredictor,
    q: &dyn Density,
    settings: IdentitySettings,
    tolerance: f64,
) -> Result<PointwiseReport> {
    let neg_log_q = -q.log_density(x)?;
    let prior_ce = prior_cross_entropy(x, schedule)?;
    let dsm_term = pointwise_dsm_quadrature(x, schedule, predictor, settings)?;
    let bound = prior_ce + dsm_term;
    let slack = bound - neg_log_q;
    if slack < -tolerance {
        return Err(Error::BoundViolation { slack, tolerance });
    }
    Ok(PointwiseReport {
        neg_log_q,
        prior_ce,
        dsm_term,
        bound,
        slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsm::{AnalyticPredictor, PerturbedPredictor};
    use crate::num::LN_2PI;

    fn gauss(m: f64, v: f64) -> ToyDensity {
        GaussianMixture::gaussian(vec![m], v).unwrap().into()
    }

    fn line() -> QuadratureGrid {
        QuadratureGrid::new(vec![(-14.0, 15.0)], vec![512], Rule::GaussLegendre).unwrap()
    }

    #[test]
    fn extrapolation_weights_on_doubling_ladder() {
        // (8 D(e) - 6 D(2e) + D(4e)) / 3
        let hs = [1.0, 2.0, 4.0];
        let w: Vec<f64> = (0..3)
            .map(|i| {
                let mut ds = [0.0; 3];
                ds[i] = 1.0;
                extrapolate_to_zero(&hs, &ds)
            })
            .collect();
        assert!((w[0] - 8.0 / 3.0).abs() < 1e-14);
        assert!((w[1] + 2.0).abs() < 1e-14);
        assert!((w[2] - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn gaussian_shift_slope_is_minus_half() {
        let r = theorem1_check(&gauss(0.0, 1.0), &gauss(1.0, 1.0), NoiseFamily::Gaussian, &DEFAULT_PROBES, &line())
            .unwrap();
        assert!((r.fd_slope + 0.5).abs() < 1e-4, "{r:?}");
        assert!((r.fisher_half + 0.5).abs() < 1e-10);
    }

    #[test]
    fn matched_densities_have_zero_slope() {
        let p = gauss(0.3, 2.0);
        let r = theorem1_check(&p, &p, NoiseFamily::Laplace, &DEFAULT_PROBES, &line()).unwrap();
        assert!(r.fd_slope.abs() < 1e-10 && r.fisher_half.abs() < 1e-12);
    }

    #[test]
    fn probes_are_validated() {
        let p = gauss(0.0, 1.0);
        assert!(theorem1_check(&p, &p, NoiseFamily::Gaussian, &[2e-3, 4e-3], &line()).is_err());
        assert!(theorem1_check(&p, &p, NoiseFamily::Gaussian, &[2e-4, 1e-4], &line()).is_err());
    }

    #[test]
    fn expansion_residual_matches_gaussian_closed_form() {
        let s = 0.01;
        let r =
            second_order_expansion_check(&gauss(0.0, 1.0), &gauss(1.0, 1.0), NoiseFamily::Gaussian, s, &line())
                .unwrap();
        let expect = -s * s / (2.0 * (1.0 + s));
        assert!((r.residual - expect).abs() < 1e-11, "{} vs {}", r.residual, expect);
        let zero =
            second_order_expansion_check(&gauss(0.0, 1.0), &gauss(1.0, 1.0), NoiseFamily::Gaussian, 0.0, &line())
                .unwrap();
        assert_eq!(zero.residual, 0.0);
    }

    #[test]
    fn debruijn_on_wide_gaussian() {
        let r = debruijn_check(&gauss(0.0, 4.0), NoiseFamily::Uniform, &line()).unwrap();
        assert!((r.fd_slope - 0.125).abs() < 1e-6, "{r:?}");
        assert!((r.fisher_half - 0.125).abs() < 1e-10);
    }

    #[test]
    fn debruijn_rejects_grids() {
        let g: ToyDensity = crate::density::QuantizedGrid::eight_bit().into();
        assert!(matches!(
            debruijn_check(&g, NoiseFamily::Gaussian, &line()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn ve_self_model_gap_is_entropy_loss() {
        let v = 0.5;
        let p = GaussianMixture::gaussian(vec![0.0], v).unwrap();
        let s0 = 1e-2_f64;
        let sched = ChannelSchedule::ve(s0.ln(), 0.5f64.ln()).unwrap();
        let r = thermo_decomposition_check(&p, &p, &sched, IdentitySettings::default()).unwrap();
        let expect = -0.5 * (1.0 + s0 / v).ln();
        assert!((r.gap - expect).abs() < 1e-8, "{r:?}");
        assert!((r.channel_fisher_term - 0.5 * (0.5 / s0).ln()).abs() < 1e-10);
        assert!(r.warning.is_none());
    }

    #[test]
    fn vp_self_model_gap_stays_finite() {
        // Under VP the channel also shrinks the data, and for N(0, 1) the
        // residual tends to alpha_0^2 / 2 rather than to zero.
        let p = GaussianMixture::standard(1);
        let sched = ChannelSchedule::vp_sigmoid(-6.0, 8.0).unwrap();
        let r = thermo_decomposition_check(&p, &p, &sched, IdentitySettings::default()).unwrap();
        let u0 = sched.sigma2(-6.0);
        assert!((r.gap - 0.5 * (1.0 - u0)).abs() < 1e-3, "{r:?} vs {}", 0.5 * (1.0 - u0));
    }

    #[test]
    fn pointwise_slack_for_standard_normal() {
        let sched = ChannelSchedule::vp_sigmoid(-8.7, 12.0).unwrap();
        let p = GaussianMixture::standard(1);
        let pred = AnalyticPredictor::new(p.clone(), sched);
        for &x in &[0.0, 1.3, -2.2] {
            let r = pointwise_bound_check(&[x], &sched, &pred, &p, IdentitySettings::default(), 1e-6).unwrap();
            let u0 = sched.sigma2(-8.7);
            let u1 = sched.sigma2(12.0);
            // Closed form of the per-point integral for n_hat = sigma y.
            let integral = 0.5
                * (-(u0 / u1).ln() - 2.0 * (u1 - u0) + 0.5 * (u1 * u1 - u0 * u0))
                + 0.25 * x * x * ((1.0 - u0).powi(2) - (1.0 - u1).powi(2));
            assert!((r.dsm_term - integral).abs() < 1e-8, "{} vs {}", r.dsm_term, integral);
            let prior = 0.5 * (LN_2PI + u1 + (1.0 - u1) * x * x);
            assert!((r.prior_ce - prior).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_score_beats_corrupted_score() {
        let sched = ChannelSchedule::vp_sigmoid(-8.7, 5.0).unwrap();
        let p = GaussianMixture::symmetric_pair(1.0, 0.25).unwrap();
        let exact = AnalyticPredictor::new(p.clone(), sched);
        let slack = |lambda: f64| {
            let pred = PerturbedPredictor {
                base: &exact,
                lambda,
                b: 0.3,
                c: 0.5,
            };
            pointwise_bound_check(&[1.0], &sched, &pred, &p, IdentitySettings::default(), 1e-6)
                .unwrap()
                .slack
        };
        let ladder = [slack(1.0), slack(0.5), slack(0.0)];
        assert!(ladder[0] >= ladder[1] && ladder[1] >= ladder[2] && ladder[2] >= 0.0, "{ladder:?}");
    }
}
