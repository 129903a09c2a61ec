//! Resolved run configuration: defaults, then the `--config` JSON file, then
//! command-line flags.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use varbound::density::{GaussianMixture, NoiseFamily, QuantizedGrid, ToyDensity};
use varbound::schedule::{ChannelSchedule, LogSnrEndpoints, Regime, ScheduleConfig, VarianceFamily};

/// Every knob a subcommand reads. Unknown fields in a config file are
/// rejected so that typos cannot silently fall back to defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Preset: `vp-sigmoid`, `vp-tanh`, `vp-gensig`, `sp-sigmoid`, `ve`.
    pub schedule: String,
    /// Overrides the preset family: `sigmoid`, `tanh`, `gensig`, `ve-exp`.
    pub family: Option<String>,
    /// Exponent of the generalized sigmoid.
    pub a: f64,
    pub eta0: f64,
    pub eta1: f64,
    /// `gaussian`, `gmm2`, or `grid8`.
    pub density: String,
    /// A noise family or `all`.
    pub noise: String,
    pub proposals: Vec<String>,
    pub steps: usize,
    pub batch: usize,
    pub samples: usize,
    pub repeats: usize,
    /// Datapoints for `eval-nll`, draws for `sample`.
    pub n: usize,
    /// `none`, `uniform`, or `tn`.
    pub dequant: String,
    /// `theorem1`, `expansion`, `debruijn`, `thermo`, `pointwise`, or `all`.
    pub check: String,
    pub ckpt: Option<String>,
    pub learned_steps: usize,
    pub tolerance: f64,
    pub sample_steps: usize,
    /// Warm-up noise law applied once to training data.
    pub warmup_noise: String,
    /// Warm-up scale; `None` means `sigma(eta0)`.
    pub warmup_sigma0: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: "vp-sigmoid".into(),
            family: None,
            a: 2.0,
            eta0: -8.7,
            eta1: 5.0,
            density: "gmm2".into(),
            noise: "all".into(),
            proposals: vec!["uniform-t".into(), "designed".into(), "learned".into()],
            steps: 5000,
            batch: 256,
            samples: 4096,
            repeats: 20,
            n: 100,
            dequant: "tn".into(),
            check: "all".into(),
            ckpt: None,
            learned_steps: 500,
            tolerance: 1e-3,
            sample_steps: 1000,
            warmup_noise: "gaussian".into(),
            warmup_sigma0: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("parsing --config")
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn schedule(&self) -> Result<ChannelSchedule> {
        schedule_from(&self.schedule, self.family.as_deref(), self.a, self.eta0, self.eta1)
    }

    pub fn noise_families(&self) -> Result<Vec<NoiseFamily>> {
        if self.noise == "all" {
            return Ok(NoiseFamily::ALL.to_vec());
        }
        self.noise
            .split(',')
            .map(|s| NoiseFamily::parse(s.trim()).map_err(Into::into))
            .collect()
    }

    pub fn densities(&self) -> Result<Vec<String>> {
        let all = ["gaussian", "gmm2"];
        if self.density == "all" {
            return Ok(all.iter().map(|s| s.to_string()).collect());
        }
        let list: Vec<String> = self.density.split(',').map(|s| s.trim().to_string()).collect();
        for d in &list {
            density(d)?;
        }
        Ok(list)
    }
}

pub fn schedule_from(preset: &str, family: Option<&str>, a: f64, eta0: f64, eta1: f64) -> Result<ChannelSchedule> {
    let (regime, default_family) = match preset {
        "vp-sigmoid" => (Regime::Vp, VarianceFamily::Sigmoid),
        "vp-tanh" => (Regime::Vp, VarianceFamily::TanhSquash),
        "vp-gensig" => (Regime::Vp, VarianceFamily::generalized_sigmoid(a)?),
        "sp-sigmoid" => (Regime::Sp, VarianceFamily::Sigmoid),
        "ve" => (Regime::Ve, VarianceFamily::VeExponential),
        other => bail!("unknown schedule preset '{other}'"),
    };
    let family = match family {
        None => default_family,
        Some("sigmoid") => VarianceFamily::Sigmoid,
        Some("tanh") => VarianceFamily::TanhSquash,
        Some("gensig") => VarianceFamily::generalized_sigmoid(a)?,
        Some("ve-exp") => VarianceFamily::VeExponential,
        Some(other) => bail!("unknown variance family '{other}'"),
    };
    Ok(ChannelSchedule::new(regime, family, LogSnrEndpoints::new(eta0, eta1)?)?)
}

/// Named toy densities.
pub fn density(name: &str) -> Result<ToyDensity> {
    Ok(match name {
        "gaussian" => GaussianMixture::standard(1).into(),
        "gmm2" => GaussianMixture::symmetric_pair(1.0, 0.25)?.into(),
        "grid8" => QuantizedGrid::eight_bit().into(),
        other => bail!("unknown density '{other}'"),
    })
}

/// `(p, q)` pairs for divergence checks.
pub fn density_pair(name: &str) -> Result<(ToyDensity, ToyDensity)> {
    Ok(match name {
        "gaussian" => (
            GaussianMixture::gaussian(vec![0.0], 1.0)?.into(),
            GaussianMixture::gaussian(vec![1.0], 1.0)?.into(),
        ),
        "gmm2" => (
            GaussianMixture::symmetric_pair(1.0, 0.25)?.into(),
            GaussianMixture::new(vec![0.3, 0.7], vec![vec![-0.8], vec![1.2]], vec![0.6, 0.4])?.into(),
        ),
        other => bail!("no divergence pair named '{other}'"),
    })
}

/// Serializable echo of the resolved schedule, for artifacts.
pub fn schedule_record(s: &ChannelSchedule) -> ScheduleConfig {
    (*s).into()
}
