//! Proposal densities over `eta` for the importance-weighted DSM estimator.
//!
//! * [`UniformT`]: `t ~ U(0, 1)` pushed through the linear map `eta(t)`.
//! * [`DesignedEta`]: `rho(eta)` proportional to the likelihood weight
//!   `sigma^-2 d sigma^2 / d eta`, sampled by a closed-form inverse CDF.
//! * [`LearnedProposal`]: `t ~ U(0, 1)` pushed through a monotone network.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::Sampler;
use crate::dsm::{loss_mc, NoisePredictor, Weighting};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::num::{sigmoid, softplus};
use crate::optim::{AdamConfig, AdamState};
use crate::quadrature::integrate;
use crate::schedule::{ChannelSchedule, LogSnrEndpoints, VarianceFamily};
use crate::stats::RunningMoments;

/// Bisection stops once the bracket is this narrow.
pub const BISECTION_WIDTH: f64 = 1e-10;
/// Iteration budget shared by bisection and the Newton polish.
pub const ROOT_MAX_ITERATIONS: usize = 200;

pub trait EtaProposal: Sync {
    fn id(&self) -> String;
    fn endpoints(&self) -> LogSnrEndpoints;
    /// Normalized density; zero outside the endpoints.
    fn density(&self, eta: f64) -> f64;
    fn cdf(&self, eta: f64) -> f64;
    /// Inverse CDF at `u` in `[0, 1]`.
    fn sample(&self, u: f64) -> Result<f64>;

    fn sample_with_density(&self, u: f64) -> Result<(f64, f64)> {
        let eta = self.sample(u)?;
        Ok((eta, self.density(eta)))
    }
}

fn check_u(u: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::InvalidArgument(format!("u = {u} is outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformT {
    endpoints: LogSnrEndpoints,
}

impl UniformT {
    pub fn new(schedule: &ChannelSchedule) -> Self {
        Self {
            endpoints: schedule.endpoints(),
        }
    }
}

impl EtaProposal for UniformT {
    fn id(&self) -> String {
        "uniform-t".into()
    }

    fn endpoints(&self) -> LogSnrEndpoints {
        self.endpoints
    }

    fn density(&self, eta: f64) -> f64 {
        if eta < self.endpoints.eta0() || eta > self.endpoints.eta1() {
            0.0
        } else {
            1.0 / self.endpoints.width()
        }
    }

    fn cdf(&self, eta: f64) -> f64 {
        ((eta - self.endpoints.eta0()) / self.endpoints.width()).clamp(0.0, 1.0)
    }

    fn sample(&self, u: f64) -> Result<f64> {
        check_u(u)?;
        if u == 1.0 {
            return Ok(self.endpoints.eta1());
        }
        Ok(self.endpoints.eta0() + self.endpoints.width() * u)
    }
}

/// Shape of the designed density, up to normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DesignedShape {
    /// `sigmoid(-eta)`
    Logistic,
    /// `sigmoid(-2 eta)`
    Logistic2,
    /// constant
    Flat,
}

impl DesignedShape {
    fn of(family: VarianceFamily) -> Self {
        match family {
            VarianceFamily::Sigmoid | VarianceFamily::GeneralizedSigmoid { .. } => Self::Logistic,
            VarianceFamily::TanhSquash => Self::Logistic2,
            VarianceFamily::VeExponential => Self::Flat,
        }
    }

    fn value(&self, eta: f64) -> f64 {
        match self {
            Self::Logistic => sigmoid(-eta),
            Self::Logistic2 => sigmoid(-2.0 * eta),
            Self::Flat => 1.0,
        }
    }

    /// Antiderivative up to sign: `value = -d g / d eta`.
    fn g(&self, eta: f64) -> f64 {
        match self {
            Self::Logistic => softplus(-eta),
            Self::Logistic2 => 0.5 * softplus(-2.0 * eta),
            Self::Flat => -eta,
        }
    }

    fn g_inverse(&self, v: f64) -> f64 {
        match self {
            Self::Logistic => -v.exp_m1().ln(),
            Self::Logistic2 => -0.5 * (2.0 * v).exp_m1().ln(),
            Self::Flat => -v,
        }
    }
}

/// Normalizer of the designed density over the schedule's endpoints:
/// `∫ sigmoid(-eta)` for the sigmoid families, `∫ sigmoid(-2 eta)` for the
/// tanh family, the width for the exponential family.
pub fn designed_normalizer(schedule: &ChannelSchedule) -> f64 {
    let shape = DesignedShape::of(schedule.family());
    shape.g(schedule.eta0()) - shape.g(schedule.eta1())
}

/// Quadrature value of the same integral, for cross-checks.
pub fn designed_normalizer_quadrature(schedule: &ChannelSchedule) -> f64 {
    let shape = DesignedShape::of(schedule.family());
    integrate(schedule.eta0(), schedule.eta1(), 512, |e| shape.value(e))
}

/// `rho(eta)` proportional to the likelihood weight of the schedule.
///
/// For VP sigmoid and tanh schedules this is also proportional to
/// `alpha^2(eta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignedEta {
    endpoints: LogSnrEndpoints,
    shape: DesignedShape,
    z: f64,
    g0: f64,
}

impl DesignedEta {
    pub fn new(schedule: &ChannelSchedule) -> Result<Self> {
        let shape = DesignedShape::of(schedule.family());
        let z = designed_normalizer(schedule);
        if !(z > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "designed proposal needs a positive normalizer, got {z}"
            )));
        }
        Ok(Self {
            endpoints: schedule.endpoints(),
            shape,
            z,
            g0: shape.g(schedule.eta0()),
        })
    }

    pub fn normalizer(&self) -> f64 {
        self.z
    }
}

impl EtaProposal for DesignedEta {
    fn id(&self) -> String {
        "designed".into()
    }

    fn endpoints(&self) -> LogSnrEndpoints {
        self.endpoints
    }

    fn density(&self, eta: f64) -> f64 {
        if eta < self.endpoints.eta0() || eta > self.endpoints.eta1() {
            0.0
        } else {
            self.shape.value(eta) / self.z
        }
    }

    fn cdf(&self, eta: f64) -> f64 {
        let e = eta.clamp(self.endpoints.eta0(), self.endpoints.eta1());
        ((self.g0 - self.shape.g(e)) / self.z).clamp(0.0, 1.0)
    }

    fn sample(&self, u: f64) -> Result<f64> {
        check_u(u)?;
        if u == 0.0 {
            return Ok(self.endpoints.eta0());
        }
        if u == 1.0 {
            return Ok(self.endpoints.eta1());
        }
        let eta = self.shape.g_inverse(self.g0 - u * self.z);
        Ok(eta.clamp(self.endpoints.eta0(), self.endpoints.eta1()))
    }
}

/// `eta~(t) = l1(t) + l3(sigmoid(l2(l1(t))))` with squared weights, so
/// `eta~` is nondecreasing in `t`.
///
/// Parameter layout: `[a1, b1, a2 (H), b2 (H), a3 (H), b3]`, where the
/// effective weights are `a1^2`, `a2^2`, `a3^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneNet {
    hidden: usize,
    params: Vec<f64>,
}

/// Value and `t`-derivative of the raw network at one `t`, plus their
/// parameter gradients when requested.
struct NetEval {
    value: f64,
    slope: f64,
    d_value: Vec<f64>,
    d_slope: Vec<f64>,
}

impl MonotoneNet {
    pub const DEFAULT_HIDDEN: usize = 256;

    pub fn new(hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidArgument("hidden width must be at least 1".into()));
        }
        let mut rng = Sampler::new(seed);
        let mut params = vec![0.0; 3 * hidden + 3];
        params[0] = 1.0;
        params[1] = 0.0;
        for h in 0..hidden {
            params[2 + h] = rng.normal() * 0.5;
            params[2 + hidden + h] = rng.normal();
            params[2 + 2 * hidden + h] = rng.normal() * 0.1;
        }
        Ok(Self { hidden, params })
    }

    pub fn from_params(hidden: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != 3 * hidden + 3 {
            return Err(Error::DimensionMismatch {
                expected: 3 * hidden + 3,
                got: params.len(),
            });
        }
        Ok(Self { hidden, params })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn eval(&self, t: f64, grads: bool) -> NetEval {
        let h = self.hidden;
        let p = &self.params;
        let (a1, b1) = (p[0], p[1]);
        let w1 = a1 * a1;
        let u = w1 * t + b1;
        let mut value = u + p[2 + 3 * h];
        let mut inner = 1.0;
        let n = p.len();
        let (mut d_value, mut d_slope) = if grads {
            (vec![0.0; n], vec![0.0; n])
        } else {
            (Vec::new(), Vec::new())
        };
        let mut sum_w3w2s1 = 0.0;
        let mut sum_w3w2w2s2 = 0.0;
        for j in 0..h {
            let a2 = p[2 + j];
            let b2 = p[2 + h + j];
            let a3 = p[2 + 2 * h + j];
            let (w2, w3) = (a2 * a2, a3 * a3);
            let s = sigmoid(w2 * u + b2);
            let s1 = s * (1.0 - s);
            let s2 = s1 * (1.0 - 2.0 * s);
            value += w3 * s;
            inner += w3 * w2 * s1;
            if grads {
                sum_w3w2s1 += w3 * w2 * s1;
                sum_w3w2w2s2 += w3 * w2 * w2 * s2;
                d_value[2 + j] = w3 * s1 * u * 2.0 * a2;
                d_value[2 + h + j] = w3 * s1;
                d_value[2 + 2 * h + j] = s * 2.0 * a3;
                d_slope[2 + j] = w1 * w3 * (s1 + w2 * s2 * u) * 2.0 * a2;
                d_slope[2 + h + j] = w1 * w3 * w2 * s2;
                d_slope[2 + 2 * h + j] = w1 * w2 * s1 * 2.0 * a3;
            }
        }
        if grads {
            let du = 1.0 + sum_w3w2s1;
            d_value[0] = du * t * 2.0 * a1;
            d_value[1] = du;
            d_value[2 + 3 * h] = 1.0;
            d_slope[0] = 2.0 * a1 * (1.0 + sum_w3w2s1) + w1 * sum_w3w2w2s2 * t * 2.0 * a1;
            d_slope[1] = w1 * sum_w3w2w2s2;
        }
        NetEval {
            value,
            slope: w1 * inner,
            d_value,
            d_slope,
        }
    }

    /// Raw output `eta~(t)` before endpoint pinning.
    pub fn raw(&self, t: f64) -> f64 {
        self.eval(t, false).value
    }

    pub fn raw_slope(&self, t: f64) -> f64 {
        self.eval(t, false).slope
    }
}

/// Monotone network pinned to the schedule endpoints:
/// `eta(t) = eta0 + (eta1 - eta0) (eta~(t) - eta~(0)) / (eta~(1) - eta~(0))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedProposal {
    net: MonotoneNet,
    eta0: f64,
    eta1: f64,
}

impl LearnedProposal {
    pub fn new(net: MonotoneNet, schedule: &ChannelSchedule) -> Result<Self> {
        let p = Self {
            net,
            eta0: schedule.eta0(),
            eta1: schedule.eta1(),
        };
        p.check()?;
        Ok(p)
    }

    pub fn net(&self) -> &MonotoneNet {
        &self.net
    }

    fn span(&self) -> (f64, f64) {
        let r0 = self.net.raw(0.0);
        (r0, self.net.raw(1.0) - r0)
    }

    fn check(&self) -> Result<()> {
        let (_, delta) = self.span();
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::NumericalInconsistency(format!(
                "monotone network has non-increasing span {delta}"
            )));
        }
        Ok(())
    }

    /// `eta(t)` and `d eta / d t`.
    pub fn eta_and_slope(&self, t: f64) -> (f64, f64) {
        let (r0, delta) = self.span();
        let e = self.net.eval(t, false);
        let w = self.eta1 - self.eta0;
        if t <= 0.0 {
            return (self.eta0, w * e.slope / delta);
        }
        if t >= 1.0 {
            return (self.eta1, w * e.slope / delta);
        }
        let eta = self.eta0 + w * (e.value - r0) / delta;
        (eta.clamp(self.eta0, self.eta1), w * e.slope / delta)
    }

    pub fn eta_at(&self, t: f64) -> f64 {
        self.eta_and_slope(t).0
    }

    /// `t` with `eta(t) = eta`, by bisection then Newton.
    pub fn invert(&self, eta: f64) -> Result<f64> {
        if eta <= self.eta0 {
            return Ok(0.0);
        }
        if eta >= self.eta1 {
            return Ok(1.0);
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut iterations = 0;
        while hi - lo > BISECTION_WIDTH {
            iterations += 1;
            if iterations > ROOT_MAX_ITERATIONS {
                return Err(Error::RootFinding {
                    iterations,
                    target: eta,
                });
            }
            let mid = 0.5 * (lo + hi);
            if self.eta_at(mid) < eta {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut t = 0.5 * (lo + hi);
        for _ in 0..3 {
            let (e, d) = self.eta_and_slope(t);
            if d > 0.0 {
                let next = t - (e - eta) / d;
                if next > lo - BISECTION_WIDTH && next < hi + BISECTION_WIDTH {
                    t = next.clamp(0.0, 1.0);
                }
            }
        }
        Ok(t)
    }

    /// Objective value and gradient of `mean (eta'(t_i) L_i)^2` with the
    /// `L_i` held fixed.
    pub fn detached_objective_gradient(&self, ts: &[f64], ls: &[f64]) -> (f64, Vec<f64>) {
        self.objective_gradient(ts, ls, None)
    }

    /// Objective value and gradient of `mean (eta'(t_i) L_i(eta(t_i)))^2`.
    ///
    /// `dls[i]` is `dL_i / d eta` at `eta(t_i)`; with `None` the loss is
    /// treated as a constant and only the slope is differentiated.
    pub fn objective_gradient(&self, ts: &[f64], ls: &[f64], dls: Option<&[f64]>) -> (f64, Vec<f64>) {
        let n = self.net.params.len();
        let w = self.eta1 - self.eta0;
        let e0 = self.net.eval(0.0, true);
        let e1 = self.net.eval(1.0, true);
        let delta = e1.value - e0.value;
        let d_delta: Vec<f64> = e1.d_value.iter().zip(&e0.d_value).map(|(a, b)| a - b).collect();
        let mut grad = vec![0.0; n];
        let mut obj = 0.0;
        let m = ts.len() as f64;
        for (i, (&t, &l)) in ts.iter().zip(ls).enumerate() {
            let e = self.net.eval(t, true);
            let slope = w * e.slope / delta;
            obj += (slope * l).powi(2) / m;
            let c_slope = 2.0 * slope * l * l / m;
            let c_eta = dls.map_or(0.0, |d| 2.0 * slope * slope * l * d[i] / m);
            let rel = e.value - e0.value;
            for k in 0..n {
                let ds = w * (e.d_slope[k] * delta - e.slope * d_delta[k]) / (delta * delta);
                grad[k] += c_slope * ds;
                if c_eta != 0.0 {
                    let d_rel = e.d_value[k] - e0.d_value[k];
                    let de = w * (d_rel * delta - rel * d_delta[k]) / (delta * delta);
                    grad[k] += c_eta * de;
                }
            }
        }
        (obj, grad)
    }
}

impl EtaProposal for LearnedProposal {
    fn id(&self) -> String {
        "learned".into()
    }

    fn endpoints(&self) -> LogSnrEndpoints {
        LogSnrEndpoints::new(self.eta0, self.eta1).expect("validated schedule endpoints")
    }

    fn density(&self, eta: f64) -> f64 {
        if eta < self.eta0 || eta > self.eta1 {
            return 0.0;
        }
        match self.invert(eta) {
            Ok(t) => 1.0 / self.eta_and_slope(t).1,
            Err(_) => 0.0,
        }
    }

    fn cdf(&self, eta: f64) -> f64 {
        self.invert(eta).unwrap_or(f64::NAN)
    }

    fn sample(&self, u: f64) -> Result<f64> {
        check_u(u)?;
        Ok(self.eta_at(u))
    }

    fn sample_with_density(&self, u: f64) -> Result<(f64, f64)> {
        check_u(u)?;
        let (eta, slope) = self.eta_and_slope(u);
        Ok((eta, 1.0 / slope))
    }
}

/// `E_t[(eta'(t) L(eta(t)))^2]` with `t ~ U(0, 1)`, by Monte Carlo.
///
/// `loss` draws one value of `L` at a given `eta`.
pub fn learned_variance_objective_with(
    proposal: &LearnedProposal,
    n_samples: usize,
    seed: u64,
    mut loss: impl FnMut(f64, &mut Sampler) -> Result<f64>,
) -> Result<f64> {
    if proposal.eta0 == proposal.eta1 {
        return Ok(0.0);
    }
    let mut rng = Sampler::new(seed);
    let mut acc = RunningMoments::default();
    for _ in 0..n_samples {
        let t = rng.uniform();
        let (eta, slope) = proposal.eta_and_slope(t);
        let l = loss(eta, &mut rng)?;
        acc.push((slope * l).powi(2));
    }
    Ok(acc.mean())
}

/// Per-sample DSM value `w(eta) |n - n_hat|^2 / 2` at a random data row.
pub fn dsm_sample_at(
    schedule: &ChannelSchedule,
    data: &Matrix,
    predictor: &dyn NoisePredictor,
    weighting: Weighting,
    eta: f64,
    rng: &mut Sampler,
) -> Result<f64> {
    let row = ((rng.uniform() * data.rows() as f64) as usize).min(data.rows() - 1);
    let x = data.row(row);
    let n = rng.normal_vec(x.len());
    let l = crate::dsm::dsm_integrand(schedule, eta, x, &n, predictor)?;
    Ok(weighting.weight(schedule, eta) * l)
}

/// The learned-proposal objective on the DSM loss of `predictor`.
pub fn learned_variance_objective(
    proposal: &LearnedProposal,
    schedule: &ChannelSchedule,
    data: &Matrix,
    predictor: &dyn NoisePredictor,
    weighting: Weighting,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    learned_variance_objective_with(proposal, n_samples, seed, |eta, rng| {
        dsm_sample_at(schedule, data, predictor, weighting, eta, rng)
    })
}

/// How the learned-proposal objective is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Through both `eta'(t)` and `L(eta(t))`, the latter by a central
    /// difference in `eta` at fixed data and noise. The stationary point is
    /// `rho ∝ sqrt(E[L^2 | eta])`, the variance-optimal proposal.
    #[default]
    Total,
    /// Through `eta'(t)` only. The stationary point is `rho ∝ E[L^2 | eta]`.
    Detached,
}

/// Relative step of the central difference in `eta`.
pub const ETA_FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnedFitConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub gradient: GradientMode,
}

impl Default for LearnedFitConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 256,
            adam: AdamConfig {
                lr: 1e-2,
                weight_decay: 0.0,
                ema_rate: 0.0,
                ..AdamConfig::default()
            },
            gradient: GradientMode::Total,
        }
    }
}

/// Fit the monotone network by Adam on `mean (eta'(t) L)^2`. Returns the
/// objective trace, one value per step.
pub fn fit_learned(
    proposal: &mut LearnedProposal,
    schedule: &ChannelSchedule,
    data: &Matrix,
    predictor: &dyn NoisePredictor,
    weighting: Weighting,
    cfg: &LearnedFitConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.rows() == 0 {
        return Err(Error::InvalidArgument("no data rows".into()));
    }
    let mut state = AdamState::new(proposal.net.params());
    let mut trace = Vec::with_capacity(cfg.steps);
    let (e0, e1) = (proposal.eta0, proposal.eta1);
    let value = |eta: f64, x: &[f64], n: &[f64]| -> Result<f64> {
        Ok(weighting.weight(schedule, eta) * crate::dsm::dsm_integrand(schedule, eta, x, n, predictor)?)
    };
    for step in 0..cfg.steps {
        let mut rng = Sampler::stream(seed, step as u64);
        let mut ts = Vec::with_capacity(cfg.batch);
        let mut ls = Vec::with_capacity(cfg.batch);
        let mut dls = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let t = rng.uniform();
            let eta = proposal.eta_at(t);
            let row = ((rng.uniform() * data.rows() as f64) as usize).min(data.rows() - 1);
            let x = data.row(row);
            let n = rng.normal_vec(x.len());
            ls.push(value(eta, x, &n)?);
            if cfg.gradient == GradientMode::Total {
                let h = ETA_FD_STEP * eta.abs().max(1.0);
                let (lo, hi) = ((eta - h).max(e0), (eta + h).min(e1));
                dls.push((value(hi, x, &n)? - value(lo, x, &n)?) / (hi - lo));
            }
            ts.push(t);
        }
        let d = (cfg.gradient == GradientMode::Total).then_some(dls.as_slice());
        let (obj, grad) = proposal.objective_gradient(&ts, &ls, d);
        trace.push(obj);
        let mut params = proposal.net.params.clone();
        state.update(&cfg.adam, &mut params, &grad);
        proposal.net.params = params;
        proposal.check()?;
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub proposal: String,
    /// Mean of the per-repeat loss means.
    pub mean: f64,
    /// Standard error of `mean` across repeats.
    pub mean_std_error: f64,
    /// Mean per-sample estimator variance across repeats.
    pub variance: f64,
    pub ratio_vs_uniform_t: f64,
    /// One-sided 95% upper bound on the variance ratio from paired log ratios.
    pub ratio_upper_95: f64,
    pub n_samples: usize,
    pub n_repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub rows: Vec<VarianceRow>,
    /// Largest pairwise `|mean_i - mean_j| / sqrt(se_i^2 + se_j^2)`.
    pub max_mean_z: f64,
}

/// One-sided 95% Student-t quantile.
pub fn t_quantile_95(df: usize) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    StudentsT::new(0.0, 1.0, df as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.95)
}

/// Paired-seed comparison of proposals. Repeat `r` uses seed
/// `seed + r` for every proposal.
#[allow(clippy::too_many_arguments)]
pub fn estimator_variance_report(
    proposals: &[&dyn EtaProposal],
    schedule: &ChannelSchedule,
    data: &Matrix,
    predictor: &dyn NoisePredictor,
    weighting: Weighting,
    n_samples: usize,
    n_repeats: usize,
    seed: u64,
) -> Result<VarianceReport> {
    if n_repeats < 10 {
        return Err(Error::InvalidArgument("variance report needs at least 10 repeats".into()));
    }
    if proposals.is_empty() {
        return Err(Error::InvalidArgument("no proposals given".into()));
    }
    let runs: Vec<Vec<(f64, f64)>> = proposals
        .par_iter()
        .map(|p| {
            (0..n_repeats)
                .map(|r| {
                    let est = loss_mc(
                        schedule,
                        data,
                        predictor,
                        *p,
                        weighting,
                        n_samples,
                        seed.wrapping_add(r as u64),
                    )?;
                    Ok((est.mean, est.variance))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let base = proposals.iter().position(|p| p.id() == "uniform-t").unwrap_or(0);
    let tq = t_quantile_95(n_repeats - 1);
    let rows: Vec<VarianceRow> = proposals
        .iter()
        .zip(&runs)
        .map(|(p, run)| {
            let means: RunningMoments = run.iter().map(|r| r.0).collect();
            let vars: RunningMoments = run.iter().map(|r| r.1).collect();
            let logs: RunningMoments = run
                .iter()
                .zip(&runs[base])
                .map(|(a, b)| (a.1 / b.1).ln())
                .collect();
            VarianceRow {
                proposal: p.id(),
                mean: means.mean(),
                mean_std_error: means.std_error(),
                variance: vars.mean(),
                ratio_vs_uniform_t: vars.mean() / runs[base].iter().map(|r| r.1).sum::<f64>()
                    * n_repeats as f64,
                ratio_upper_95: (logs.mean() + tq * logs.std_error()).exp(),
                n_samples,
                n_repeats,
            }
        })
        .collect();
    let mut max_mean_z: f64 = 0.0;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let se = (rows[i].mean_std_error.powi(2) + rows[j].mean_std_error.powi(2)).sqrt();
            max_mean_z = max_mean_z.max((rows[i].mean - rows[j].mean).abs() / se);
        }
    }
    Ok(VarianceReport { rows, max_mean_z })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vp() -> ChannelSchedule {
        ChannelSchedule::vp_sigmoid(-8.7, 5.0).unwrap()
    }

    #[test]
    fn designed_normalizer_values() {
        let z = designed_normalizer(&vp());
        assert!((z - designed_normalizer_quadrature(&vp())).abs() < 1e-9);
        assert!((z - 8.69345).abs() < 1e-5, "{z}");
        let tanh = ChannelSchedule::new(
            crate::schedule::Regime::Vp,
            VarianceFamily::TanhSquash,
            LogSnrEndpoints::new(-4.33, 2.5).unwrap(),
        )
        .unwrap();
        let zt = designed_normalizer(&tanh);
        let closed = 0.5 * ((1.0 + (8.66f64).exp()) / (1.0 + (-5f64).exp())).ln();
        assert!((zt - closed).abs() < 1e-12);
        assert!((zt - designed_normalizer_quadrature(&tanh)).abs() < 1e-9);
        let flat = ChannelSchedule::vp_sigmoid(1.0, 1.0).unwrap();
        assert_eq!(designed_normalizer(&flat), 0.0);
        assert!(DesignedEta::new(&flat).is_err());
    }

    #[test]
    fn inverse_cdf_round_trips() {
        let schedules = [
            vp(),
            ChannelSchedule::new(
                crate::schedule::Regime::Sp,
                VarianceFamily::TanhSquash,
                LogSnrEndpoints::new(-13.3, 5.0).unwrap(),
            )
            .unwrap(),
            ChannelSchedule::ve(-9.2, 7.8).unwrap(),
        ];
        for s in &schedules {
            let p = DesignedEta::new(s).unwrap();
            assert_eq!(p.sample(0.0).unwrap(), s.eta0());
            assert_eq!(p.sample(1.0).unwrap(), s.eta1());
            for i in 1..10 {
                let u = i as f64 / 10.0;
                assert!((p.cdf(p.sample(u).unwrap()) - u).abs() < 1e-8);
            }
            let mass = integrate(s.eta0(), s.eta1(), 512, |e| p.density(e));
            assert!((mass - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn monotone_net_gradients_match_finite_differences() {
        let s = vp();
        let net = MonotoneNet::new(7, 3).unwrap();
        let p = LearnedProposal::new(net, &s).unwrap();
        let ts = [0.1, 0.45, 0.8, 0.97];
        let ls = [1.3, -0.2, 0.7, 2.0];
        let (_, g) = p.detached_objective_gradient(&ts, &ls);
        for k in 0..p.net.params.len() {
            let h = 1e-6;
            let mut a = p.clone();
            a.net.params[k] += h;
            let mut b = p.clone();
            b.net.params[k] -= h;
            let fd = (a.detached_objective_gradient(&ts, &ls).0 - b.detached_objective_gradient(&ts, &ls).0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-4 * (1.0 + fd.abs()), "{k}: {fd} {}", g[k]);
        }
    }

    #[test]
    fn learned_is_monotone_and_pinned() {
        let s = vp();
        let p = LearnedProposal::new(MonotoneNet::new(16, 5).unwrap(), &s).unwrap();
        assert_eq!(p.eta_at(0.0), s.eta0());
        assert_eq!(p.eta_at(1.0), s.eta1());
        let etas: Vec<f64> = (0..=10_000).map(|i| p.eta_at(i as f64 / 10_000.0)).collect();
        assert!(etas.windows(2).all(|w| w[1] >= w[0]));
        for u in [0.1, 0.5, 0.9] {
            let e = p.sample(u).unwrap();
            assert!((p.cdf(e) - u).abs() < 1e-8);
        }
        let mass = integrate(s.eta0(), s.eta1(), 512, |e| p.density(e));
        assert!((mass - 1.0).abs() < 1e-8, "{mass}");
    }

    #[test]
    fn constant_loss_prefers_linear_map() {
        let s = vp();
        let linear = LearnedProposal::new(MonotoneNet::from_params(1, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), &s)
            .unwrap();
        let curved = LearnedProposal::new(MonotoneNet::new(8, 1).unwrap(), &s).unwrap();
        let c = 0.7;
        let lin = learned_variance_objective_with(&linear, 20_000, 1, |_, _| Ok(c)).unwrap();
        let cur = learned_variance_objective_with(&curved, 20_000, 1, |_, _| Ok(c)).unwrap();
        let w = s.eta1() - s.eta0();
        assert!((lin - c * c * w * w).abs() < 1e-9);
        assert!(cur > lin);
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let s = vp();
        let p = LearnedProposal::new(MonotoneNet::new(7, 4).unwrap(), &s).unwrap();
        let ts = [0.05, 0.3, 0.62, 0.91];
        let ell = |eta: f64| 1.0 + (0.4 * eta).sin().powi(2);
        let d_ell = |eta: f64| 0.8 * (0.4 * eta).sin() * (0.4 * eta).cos();
        let eval = |q: &LearnedProposal| {
            let etas: Vec<f64> = ts.iter().map(|&t| q.eta_at(t)).collect();
            let ls: Vec<f64> = etas.iter().map(|&e| ell(e)).collect();
            let dls: Vec<f64> = etas.iter().map(|&e| d_ell(e)).collect();
            q.objective_gradient(&ts, &ls, Some(&dls))
        };
        let (_, g) = eval(&p);
        for k in 0..p.net.params.len() {
            let h = 1e-6;
            let mut a = p.clone();
            a.net.params[k] += h;
            let mut b = p.clone();
            b.net.params[k] -= h;
            let fd = (eval(&a).0 - eval(&b).0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-4 * (1.0 + fd.abs()), "{k}: {fd} {}", g[k]);
        }
    }
}
