//! The forward Gaussian channel `y = alpha(eta) * x + sigma(eta) * n` in
//! negative log-SNR coordinates.
//!
//! `eta` is the canonical coordinate everywhere in this crate. A time
//! variable only appears inside proposal distributions, where the linear map
//! `eta(t) = eta0 + (eta1 - eta0) * t` defines the uniform-in-time baseline.
//!
//! Three regimes tie `alpha` to `sigma`:
//!
//! | regime | constraint            |
//! |--------|-----------------------|
//! | VP     | `alpha^2 + sigma^2 = 1` |
//! | SP     | `alpha + sigma = 1`     |
//! | VE     | `alpha = 1`             |
//!
//! and the variance family fixes `sigma^2(eta)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{log_sigmoid, sigmoid, softplus};

/// Largest exponent accepted for the generalized sigmoid family.
pub const MAX_SIGMOID_EXPONENT: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSnrEndpoints {
    eta0: f64,
    eta1: f64,
}

impl LogSnrEndpoints {
    /// Endpoints with `eta0 <= eta1`. Equal endpoints describe an empty
    /// integration range; several estimators accept it and return zero.
    pub fn new(eta0: f64, eta1: f64) -> Result<Self> {
        if !eta0.is_finite() || !eta1.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "endpoints must be finite, got ({eta0}, {eta1})"
            )));
        }
        if eta0 > eta1 {
            return Err(Error::InvalidArgument(format!(
                "eta0 = {eta0} must not exceed eta1 = {eta1}"
            )));
        }
        Ok(Self { eta0, eta1 })
    }

    pub fn eta0(&self) -> f64 {
        self.eta0
    }

    pub fn eta1(&self) -> f64 {
        self.eta1
    }

    pub fn width(&self) -> f64 {
        self.eta1 - self.eta0
    }

    pub fn is_degenerate(&self) -> bool {
        self.eta0 == self.eta1
    }

    pub fn check(&self, eta: f64) -> Result<()> {
        if eta.is_nan() || eta < self.eta0 {
            return Err(Error::Domain {
                eta,
                bound: "lower",
                limit: self.eta0,
            });
        }
        if eta > self.eta1 {
            return Err(Error::Domain {
                eta,
                bound: "upper",
                limit: self.eta1,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VarianceFamily {
    /// `sigma^2 = sigmoid(eta)`
    Sigmoid,
    /// `sigma^2 = sigmoid(eta)^a`
    GeneralizedSigmoid { a: f64 },
    /// `sigma^2 = (tanh(eta) + 1) / 2 = sigmoid(2 eta)`
    TanhSquash,
    /// `sigma^2 = exp(eta)`, only meaningful with [`Regime::Ve`]
    VeExponential,
}

impl VarianceFamily {
    pub fn generalized_sigmoid(a: f64) -> Result<Self> {
        if !(a > 0.0 && a <= MAX_SIGMOID_EXPONENT) {
            return Err(Error::InvalidArgument(format!(
                "generalized sigmoid exponent must lie in (0, {MAX_SIGMOID_EXPONENT}], got {a}"
            )));
        }
        Ok(Self::GeneralizedSigmoid { a })
    }

    pub fn sigma2(&self, eta: f64) -> f64 {
        match *self {
            Self::Sigmoid => sigmoid(eta),
            Self::GeneralizedSigmoid { a } => (a * log_sigmoid(eta)).exp(),
            Self::TanhSquash => sigmoid(2.0 * eta),
            Self::VeExponential => eta.exp(),
        }
    }

    /// `1 - sigma^2`, evaluated without cancellation.
    pub fn one_minus_sigma2(&self, eta: f64) -> f64 {
        match *self {
            Self::Sigmoid => sigmoid(-eta),
            Self::GeneralizedSigmoid { a } => -(a * log_sigmoid(eta)).exp_m1(),
            Self::TanhSquash => sigmoid(-2.0 * eta),
            Self::VeExponential => -eta.exp_m1(),
        }
    }

    pub fn dsigma2_deta(&self, eta: f64) -> f64 {
        match *self {
            Self::Sigmoid => self.sigma2(eta) * sigmoid(-eta),
            Self::GeneralizedSigmoid { a } => a * sigmoid(-eta) * self.sigma2(eta),
            Self::TanhSquash => 2.0 * self.sigma2(eta) * sigmoid(-2.0 * eta),
            Self::VeExponential => eta.exp(),
        }
    }

    /// `sigma^-2 * d sigma^2 / d eta`, the likelihood weight in eta-space.
    pub fn likelihood_weight(&self, eta: f64) -> f64 {
        match *self {
            Self::Sigmoid => sigmoid(-eta),
            Self::GeneralizedSigmoid { a } => a * sigmoid(-eta),
            Self::TanhSquash => 2.0 * sigmoid(-2.0 * eta),
            Self::VeExponential => 1.0,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Sigmoid => "sigmoid".into(),
            Self::GeneralizedSigmoid { a } => format!("gensig{a}"),
            Self::TanhSquash => "tanh".into(),
            Self::VeExponential => "ve-exp".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Vp,
    Sp,
    Ve,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Vp => "vp",
            Regime::Sp => "sp",
            Regime::Ve => "ve",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub alpha: f64,
    pub sigma: f64,
}

/// Flat record used for configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub regime: Regime,
    pub family: VarianceFamily,
    pub eta0: f64,
    pub eta1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleConfig", into = "ScheduleConfig")]
pub struct ChannelSchedule {
    family: VarianceFamily,
    regime: Regime,
    endpoints: LogSnrEndpoints,
}

impl TryFrom<ScheduleConfig> for ChannelSchedule {
    type Error = Error;

    fn try_from(c: ScheduleConfig) -> Result<Self> {
        ChannelSchedule::new(c.regime, c.family, LogSnrEndpoints::new(c.eta0, c.eta1)?)
    }
}

impl From<ChannelSchedule> for ScheduleConfig {
    fn from(s: ChannelSchedule) -> Self {
        ScheduleConfig {
            regime: s.regime,
            family: s.family,
            eta0: s.endpoints.eta0,
            eta1: s.endpoints.eta1,
        }
    }
}

impl ChannelSchedule {
    pub fn new(regime: Regime, family: VarianceFamily, endpoints: LogSnrEndpoints) -> Result<Self> {
        if let VarianceFamily::GeneralizedSigmoid { a } = family {
            VarianceFamily::generalized_sigmoid(a)?;
        }
        let ve_family = matches!(family, VarianceFamily::VeExponential);
        if ve_family != (regime == Regime::Ve) {
            return Err(Error::InvalidArgument(format!(
                "family {} is incompatible with regime {}",
                family.name(),
                regime.name()
            )));
        }
        Ok(Self {
            family,
            regime,
            endpoints,
        })
    }

    /// VP schedule with the logistic sigmoid family.
    pub fn vp_sigmoid(eta0: f64, eta1: f64) -> Result<Self> {
        Self::new(Regime::Vp, VarianceFamily::Sigmoid, LogSnrEndpoints::new(eta0, eta1)?)
    }

    pub fn ve(eta0: f64, eta1: f64) -> Result<Self> {
        Self::new(Regime::Ve, VarianceFamily::VeExponential, LogSnrEndpoints::new(eta0, eta1)?)
    }

    /// Same family and regime over a different range.
    pub fn with_endpoints(&self, eta0: f64, eta1: f64) -> Result<Self> {
        Self::new(self.regime, self.family, LogSnrEndpoints::new(eta0, eta1)?)
    }

    pub fn family(&self) -> VarianceFamily {
        self.family
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn endpoints(&self) -> LogSnrEndpoints {
        self.endpoints
    }

    pub fn eta0(&self) -> f64 {
        self.endpoints.eta0
    }

    pub fn eta1(&self) -> f64 {
        self.endpoints.eta1
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.regime.name(), self.family.name())
    }

    // Unchecked accessors. Callers that take `eta` from users go through the
    // checked operations below.

    pub fn sigma2(&self, eta: f64) -> f64 {
        self.family.sigma2(eta)
    }

    pub fn sigma(&self, eta: f64) -> f64 {
        self.sigma2(eta).sqrt()
    }

    pub fn alpha(&self, eta: f64) -> f64 {
        match self.regime {
            Regime::Vp => self.family.one_minus_sigma2(eta).sqrt(),
            Regime::Sp => 1.0 - self.sigma(eta),
            Regime::Ve => 1.0,
        }
    }

    pub fn alpha2(&self, eta: f64) -> f64 {
        match self.regime {
            Regime::Vp => self.family.one_minus_sigma2(eta),
            _ => self.alpha(eta).powi(2),
        }
    }

    /// `log alpha^2`, accurate when `alpha` is close to one.
    pub fn ln_alpha2(&self, eta: f64) -> f64 {
        match (self.regime, self.family) {
            (Regime::Vp, VarianceFamily::Sigmoid) => -softplus(eta),
            (Regime::Vp, VarianceFamily::TanhSquash) => -softplus(2.0 * eta),
            (Regime::Vp, f) => f.one_minus_sigma2(eta).ln(),
            (Regime::Sp, _) => 2.0 * (-self.sigma(eta)).ln_1p(),
            (Regime::Ve, _) => 0.0,
        }
    }

    /// `log(alpha^2 / sigma^2)`.
    pub fn log_snr(&self, eta: f64) -> f64 {
        self.ln_alpha2(eta) - self.sigma2(eta).ln()
    }

    pub fn dsigma2_deta_unchecked(&self, eta: f64) -> f64 {
        self.family.dsigma2_deta(eta)
    }

    pub fn dsigma_deta(&self, eta: f64) -> f64 {
        self.family.dsigma2_deta(eta) / (2.0 * self.sigma(eta))
    }

    pub fn dalpha_deta(&self, eta: f64) -> f64 {
        match self.regime {
            Regime::Vp => -self.family.dsigma2_deta(eta) / (2.0 * self.alpha(eta)),
            Regime::Sp => -self.dsigma_deta(eta),
            Regime::Ve => 0.0,
        }
    }

    /// `sigma^-2 d sigma^2 / d eta`.
    pub fn likelihood_weight(&self, eta: f64) -> f64 {
        self.family.likelihood_weight(eta)
    }

    /// `eta(t)` of the uniform-in-time baseline.
    pub fn eta_at_time(&self, t: f64) -> f64 {
        self.endpoints.eta0 + self.endpoints.width() * t
    }

    pub fn coefficients_at(&self, eta: f64) -> Result<Coefficients> {
        self.endpoints.check(eta)?;
        Ok(Coefficients {
            alpha: self.alpha(eta),
            sigma: self.sigma(eta),
        })
    }

    pub fn dsigma2_deta(&self, eta: f64) -> Result<f64> {
        self.endpoints.check(eta)?;
        Ok(self.family.dsigma2_deta(eta))
    }

    /// Variance of `y_t | y_s` for `eta_s <= eta_t`.
    ///
    /// For the VP logistic case this is
    /// `-expm1(softplus(eta_s) - softplus(eta_t))`, with the softplus
    /// difference itself taken as `log1p(sigmoid(eta_t) * expm1(eta_s - eta_t))`
    /// so that nearly equal arguments keep full relative precision.
    pub fn conditional_variance(&self, eta_s: f64, eta_t: f64) -> Result<f64> {
        self.endpoints.check(eta_s)?;
        self.endpoints.check(eta_t)?;
        if eta_s > eta_t {
            return Err(Error::Ordering { eta_s, eta_t });
        }
        Ok(self.conditional_variance_unchecked(eta_s, eta_t))
    }

    pub(crate) fn conditional_variance_unchecked(&self, eta_s: f64, eta_t: f64) -> f64 {
        let stable_logistic = |scale: f64| {
            let d = scale * (eta_s - eta_t);
            -(sigmoid(scale * eta_t) * d.exp_m1()).ln_1p().exp_m1()
        };
        match (self.regime, self.family) {
            (Regime::Vp, VarianceFamily::Sigmoid) => stable_logistic(1.0),
            (Regime::Vp, VarianceFamily::TanhSquash) => stable_logistic(2.0),
            (Regime::Vp, _) => -(self.ln_alpha2(eta_t) - self.ln_alpha2(eta_s)).exp_m1(),
            (Regime::Sp, _) => {
                let ratio = self.alpha(eta_t) / self.alpha(eta_s);
                self.sigma2(eta_t) - ratio * ratio * self.sigma2(eta_s)
            }
            (Regime::Ve, _) => eta_t.exp() * -(eta_s - eta_t).exp_m1(),
        }
    }

    /// `alpha_t / alpha_s`.
    pub fn conditional_alpha(&self, eta_s: f64, eta_t: f64) -> f64 {
        (0.5 * (self.ln_alpha2(eta_t) - self.ln_alpha2(eta_s))).exp()
    }

    /// Reference form `sigma_t^2 - (alpha_t / alpha_s)^2 sigma_s^2` with
    /// `alpha^2 = 1 - sigma^2`, evaluated literally. Kept for comparisons
    /// against [`ChannelSchedule::conditional_variance`].
    pub fn naive_conditional_variance(&self, eta_s: f64, eta_t: f64) -> f64 {
        let s2_s = self.sigma2(eta_s);
        let s2_t = self.sigma2(eta_t);
        let (a2_s, a2_t) = match self.regime {
            Regime::Vp => (1.0 - s2_s, 1.0 - s2_t),
            _ => (self.alpha(eta_s).powi(2), self.alpha(eta_t).powi(2)),
        };
        s2_t - (a2_t / a2_s) * s2_s
    }

    pub fn forward_perturb(&self, eta: f64, x: &[f64], n: &[f64]) -> Result<Vec<f64>> {
        if x.len() != n.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: n.len(),
            });
        }
        let c = self.coefficients_at(eta)?;
        Ok(x.iter().zip(n).map(|(xi, ni)| c.alpha * xi + c.sigma * ni).collect())
    }
}
