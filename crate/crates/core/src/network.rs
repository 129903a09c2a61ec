//! A small noise-prediction MLP with hand-written reverse mode, the training
//! loop over warm-started data, and a bit-exact JSON checkpoint.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{NoiseFamily, Sampler};
use crate::dsm::NoisePredictor;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::num::sigmoid;
use crate::optim::{AdamConfig, AdamState};
use crate::proposal::{DesignedEta, EtaProposal, UniformT};
use crate::schedule::{ChannelSchedule, ScheduleConfig};

/// Checkpoint format tag.
pub const CHECKPOINT_FORMAT: &str = "varbound-checkpoint-v1";

/// Samples per gradient chunk; chunks are summed in a fixed order.
const GRAD_CHUNK: usize = 32;

/// Consecutive blown-up steps that abort training.
pub const DIVERGENCE_PATIENCE: usize = 100;

/// Loss multiple of the first step that counts as blown up.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

/// Proposal whose CDF drives [`EtaEmbedding::ReverseCdf`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CdfProposal {
    UniformT,
    Designed,
}

/// How `eta` enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EtaEmbedding {
    /// `eta` itself.
    RawEta,
    /// `u = (eta - eta0) / (eta1 - eta0)` and `sin, cos(pi 2^k u)`.
    FourierFeatures { n_freqs: usize },
    /// Fourier features of `u = F(eta)` under a proposal CDF `F`.
    ReverseCdf { n_freqs: usize, proposal: CdfProposal },
}

impl EtaEmbedding {
    pub fn width(&self) -> usize {
        match self {
            Self::RawEta => 1,
            Self::FourierFeatures { n_freqs } | Self::ReverseCdf { n_freqs, .. } => 1 + 2 * n_freqs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding: EtaEmbedding,
    /// Schedule whose endpoints normalize the embedding.
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

impl NetworkConfig {
    /// `[D + embed -> 128 -> 128 -> D]` with eight Fourier frequencies.
    pub fn standard(input_dim: usize, schedule: &ChannelSchedule, seed: u64) -> Self {
        Self {
            input_dim,
            hidden: vec![128, 128],
            embedding: EtaEmbedding::FourierFeatures { n_freqs: 8 },
            schedule: (*schedule).into(),
            seed,
        }
    }

    fn validate(&self) -> Result<ChannelSchedule> {
        if self.input_dim == 0 {
            return Err(Error::Configuration("input_dim must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Configuration("hidden widths must be at least 1".into()));
        }
        if let EtaEmbedding::FourierFeatures { n_freqs } | EtaEmbedding::ReverseCdf { n_freqs, .. } = self.embedding {
            if n_freqs == 0 {
                return Err(Error::Configuration("n_freqs must be at least 1".into()));
            }
        }
        ChannelSchedule::try_from(self.schedule)
    }

    /// Layer sizes from input to output.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim + self.embedding.width()];
        s.extend(&self.hidden);
        s.push(self.input_dim);
        s
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes().windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

enum Embedder {
    Raw,
    Linear { eta0: f64, width: f64, n_freqs: usize },
    Cdf { proposal: Box<dyn EtaProposal + Send>, n_freqs: usize },
}

impl Embedder {
    fn new(config: &NetworkConfig, schedule: &ChannelSchedule) -> Result<Self> {
        Ok(match config.embedding {
            EtaEmbedding::RawEta => Self::Raw,
            EtaEmbedding::FourierFeatures { n_freqs } => Self::Linear {
                eta0: schedule.eta0(),
                width: schedule.endpoints().width().max(f64::MIN_POSITIVE),
                n_freqs,
            },
            EtaEmbedding::ReverseCdf { n_freqs, proposal } => Self::Cdf {
                proposal: match proposal {
                    CdfProposal::UniformT => Box::new(UniformT::new(schedule)),
                    CdfProposal::Designed => Box::new(DesignedEta::new(schedule)?),
                },
                n_freqs,
            },
        })
    }

    /// The scalar coordinate fed to the Fourier features.
    fn coordinate(&self, eta: f64) -> f64 {
        match self {
            Self::Raw => eta,
            Self::Linear { eta0, width, .. } => (eta - eta0) / width,
            Self::Cdf { proposal, .. } => proposal.cdf(eta),
        }
    }

    fn features(&self, eta: f64, out: &mut Vec<f64>) {
        let u = self.coordinate(eta);
        out.push(u);
        let n = match self {
            Self::Raw => 0,
            Self::Linear { n_freqs, .. } | Self::Cdf { n_freqs, .. } => *n_freqs,
        };
        let mut f = std::f64::consts::PI;
        for _ in 0..n {
            let (s, c) = (f * u).sin_cos();
            out.push(s);
            out.push(c);
            f *= 2.0;
        }
    }
}

/// The noise-prediction network `n_hat(y, eta; theta)`.
pub struct ScoreNetwork {
    config: NetworkConfig,
    schedule: ChannelSchedule,
    params: Vec<f64>,
    sizes: Vec<usize>,
    embedder: Embedder,
}

impl std::fmt::Debug for ScoreNetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScoreNetwork")
            .field("config", &self.config)
            .field("n_params", &self.params.len())
            .finish()
    }
}

impl Clone for ScoreNetwork {
    fn clone(&self) -> Self {
        Self::from_params(self.config.clone(), self.params.clone()).expect("validated")
    }
}

struct Cache {
    /// Layer inputs, starting with the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ScoreNetwork {
    /// Hidden weights `N(0, 1 / fan_in)`, zero biases, zero output layer.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let sizes = config.layer_sizes();
        let mut s = Sampler::new(config.seed);
        let mut params = Vec::with_capacity(config.n_params());
        let last = sizes.len() - 2;
        for (l, w) in sizes.windows(2).enumerate() {
            let scale = (1.0 / w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] {
                params.push(if l == last { 0.0 } else { scale * s.normal() });
            }
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: NetworkConfig, params: Vec<f64>) -> Result<Self> {
        let schedule = config.validate()?;
        if params.len() != config.n_params() {
            return Err(Error::DimensionMismatch {
                expected: config.n_params(),
                got: params.len(),
            });
        }
        Ok(Self {
            embedder: Embedder::new(&config, &schedule)?,
            sizes: config.layer_sizes(),
            config,
            schedule,
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Embedded scalar coordinate of `eta`.
    pub fn embed_coordinate(&self, eta: f64) -> f64 {
        self.embedder.coordinate(eta)
    }

    fn input(&self, y: &[f64], eta: f64) -> Result<Vec<f64>> {
        if y.len() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                got: y.len(),
            });
        }
        let mut v = y.to_vec();
        self.embedder.features(eta, &mut v);
        Ok(v)
    }

    fn forward_cached(&self, params: &[f64], y: &[f64], eta: f64) -> Result<Cache> {
        let mut a = self.input(y, eta)?;
        let mut inputs = Vec::with_capacity(self.sizes.len() - 1);
        let mut pre = Vec::with_capacity(self.sizes.len() - 2);
        let mut off = 0;
        let n_layers = self.sizes.len() - 1;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &params[off..off + fan_in * fan_out];
            let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_out * (fan_in + 1);
            let z: Vec<f64> = (0..fan_out)
                .map(|o| b[o] + w[o * fan_in..(o + 1) * fan_in].iter().zip(&a).map(|(wi, ai)| wi * ai).sum::<f64>())
                .collect();
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
            inputs.push(std::mem::take(&mut a));
            if l + 1 == n_layers {
                a = z;
            } else {
                a = z.iter().map(|&v| silu(v)).collect();
                pre.push(z);
            }
        }
        Ok(Cache {
            inputs,
            pre,
            output: a,
        })
    }

    /// Adds `d loss / d theta` to `grad` given `d loss / d output`.
    fn backward(&self, params: &[f64], cache: &Cache, d_out: &[f64], grad: &mut [f64]) {
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.sizes[l + 1] * (self.sizes[l] + 1);
        }
        let mut delta = d_out.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let o = offsets[l];
            let a = &cache.inputs[l];
            for j in 0..fan_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[o + j * fan_in..o + (j + 1) * fan_in];
                for (g, ai) in row.iter_mut().zip(a) {
                    *g += d * ai;
                }
                grad[o + fan_in * fan_out + j] += d;
            }
            if l == 0 {
                break;
            }
            let w = &params[o..o + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for j in 0..fan_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                    *p += d * wi;
                }
            }
            for (p, z) in prev.iter_mut().zip(&cache.pre[l - 1]) {
                *p *= silu_prime(*z);
            }
            delta = prev;
        }
    }

    pub fn forward(&self, y: &[f64], eta: f64) -> Result<Vec<f64>> {
        Ok(self.forward_cached(&self.params, y, eta)?.output)
    }

    /// `1/2 |n - n_hat|^2` and its gradient in the parameters.
    pub fn loss_and_grad(&self, y: &[f64], eta: f64, n: &[f64]) -> Result<(f64, Vec<f64>)> {
        let cache = self.forward_cached(&self.params, y, eta)?;
        let d: Vec<f64> = cache.output.iter().zip(n).map(|(a, b)| a - b).collect();
        let loss = 0.5 * d.iter().map(|v| v * v).sum::<f64>();
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&self.params, &cache, &d, &mut grad);
        Ok((loss, grad))
    }

    /// Loss at explicit parameters, for finite-difference checks.
    pub fn loss_at(&self, params: &[f64], y: &[f64], eta: f64, n: &[f64]) -> Result<f64> {
        let out = self.forward_cached(params, y, eta)?.output;
        Ok(0.5 * out.iter().zip(n).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
    }

    pub fn schedule(&self) -> &ChannelSchedule {
        &self.schedule
    }
}

impl NoisePredictor for ScoreNetwork {
    fn dim(&self) -> usize {
        self.config.input_dim
    }

    fn predict(&self, y: &[f64], eta: f64) -> Result<Vec<f64>> {
        self.forward(y, eta)
    }
}

/// How a warm-started dataset was produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmStartRecord {
    pub noise: NoiseFamily,
    pub alpha0: f64,
    pub sigma0: f64,
    pub seed: u64,
}

impl WarmStartRecord {
    /// Evaluation must perturb with the same law and scale as training.
    pub fn check_compatible(&self, eval: &WarmStartRecord) -> Result<()> {
        if self.noise != eval.noise || self.alpha0 != eval.alpha0 || self.sigma0 != eval.sigma0 {
            return Err(Error::Configuration(format!(
                "evaluation warm start {eval:?} does not match training {self:?}"
            )));
        }
        Ok(())
    }
}

/// Data perturbed once by `x~ = alpha0 x + sigma0 u`, `u ~ Psi`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStartDataset {
    pub original: Matrix,
    pub warm: Matrix,
    pub record: WarmStartRecord,
}

pub fn warm_start(data: &Matrix, psi: NoiseFamily, alpha0: f64, sigma0: f64, seed: u64) -> Result<WarmStartDataset> {
    if !(sigma0 >= 0.0 && sigma0.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma0 = {sigma0} must be nonnegative")));
    }
    let mut s = Sampler::new(seed);
    let values = data.as_slice().iter().map(|x| alpha0 * x + sigma0 * s.noise(psi)).collect();
    Ok(WarmStartDataset {
        original: data.clone(),
        warm: Matrix::from_vec(data.rows(), data.cols(), values)?,
        record: WarmStartRecord {
            noise: psi,
            alpha0,
            sigma0,
            seed,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub adam_config: AdamConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 256,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub network: ScoreNetwork,
    pub state: TrainState,
    /// Importance-weighted batch loss at every step.
    pub trace: Vec<f64>,
}

struct Draw {
    y: Vec<f64>,
    n: Vec<f64>,
    eta: f64,
    weight: f64,
}

/// Minimize `E[w(eta) / rho(eta) |n - n_hat|^2 / 2]` over warm-started
/// data with AdamW.
///
/// Draws come from one seeded stream in a fixed order; per-sample gradients
/// are summed in fixed chunks, so the result is independent of thread count.
pub fn train(
    config: NetworkConfig,
    schedule: &ChannelSchedule,
    dataset: &WarmStartDataset,
    proposal: &dyn EtaProposal,
    settings: TrainSettings,
    seed: u64,
) -> Result<TrainOutput> {
    if settings.batch == 0 {
        return Err(Error::InvalidArgument("batch must be at least 1".into()));
    }
    if dataset.warm.rows() == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if dataset.warm.cols() != config.input_dim {
        return Err(Error::DimensionMismatch {
            expected: config.input_dim,
            got: dataset.warm.cols(),
        });
    }
    let mut net = ScoreNetwork::new(config)?;
    let mut params = net.params.clone();
    let mut adam = AdamState::new(&params);
    let mut sampler = Sampler::new(seed);
    let mut trace = Vec::with_capacity(settings.steps);
    let mut blown = 0;
    let rows = dataset.warm.rows();
    for step in 0..settings.steps {
        let draws = (0..settings.batch)
            .map(|_| -> Result<Draw> {
                let i = ((sampler.uniform() * rows as f64) as usize).min(rows - 1);
                let (eta, rho) = proposal.sample_with_density(sampler.uniform())?;
                if !(rho > 0.0) {
                    return Err(Error::ProposalSupport { eta });
                }
                let n = sampler.normal_vec(dataset.warm.cols());
                let y = schedule.forward_perturb(eta, dataset.warm.row(i), &n)?;
                Ok(Draw {
                    y,
                    n,
                    eta,
                    weight: schedule.likelihood_weight(eta) / rho,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        net.params.copy_from_slice(&params);
        let parts = draws
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| -> Result<(f64, Vec<f64>)> {
                let mut g = vec![0.0; params.len()];
                let mut loss = 0.0;
                for d in chunk {
                    let cache = net.forward_cached(&params, &d.y, d.eta)?;
                    let diff: Vec<f64> = cache.output.iter().zip(&d.n).map(|(a, b)| d.weight * (a - b)).collect();
                    loss += 0.5
                        * d.weight
                        * cache.output.iter().zip(&d.n).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    net.backward(&params, &cache, &diff, &mut g);
                }
                Ok((loss, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / settings.batch as f64;
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        loss *= scale;
        grad.iter_mut().for_each(|g| *g *= scale);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                loss,
                initial: trace.first().copied().unwrap_or(f64::NAN),
            });
        }
        trace.push(loss);
        let initial = trace[0];
        if loss > DIVERGENCE_FACTOR * initial {
            blown += 1;
            if blown >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence { step, loss, initial });
            }
        } else {
            blown = 0;
        }
        adam.update(&settings.adam, &mut params, &grad);
    }
    net.params.copy_from_slice(&params);
    Ok(TrainOutput {
        network: net,
        state: TrainState {
            params,
            adam,
            adam_config: settings.adam,
        },
        trace,
    })
}

fn encode(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode(s: &str) -> Result<Vec<f64>> {
    let bytes = B64.decode(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("payload length is not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    format: String,
    config: NetworkConfig,
    adam_config: AdamConfig,
    step: u64,
    params: String,
    adam_m: String,
    adam_v: String,
    ema: String,
    warm_start: Option<WarmStartRecord>,
}

/// Self-describing training checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub state: TrainState,
    pub warm_start: Option<WarmStartRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let rec = CheckpointRecord {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            adam_config: self.state.adam_config,
            step: self.state.adam.step,
            params: encode(&self.state.params),
            adam_m: encode(&self.state.adam.m),
            adam_v: encode(&self.state.adam.v),
            ema: encode(&self.state.adam.ema),
            warm_start: self.warm_start,
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: CheckpointRecord = serde_json::from_str(s)?;
        if rec.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {}", rec.format)));
        }
        let params = decode(&rec.params)?;
        let n = rec.config.n_params();
        let m = decode(&rec.adam_m)?;
        let v = decode(&rec.adam_v)?;
        let ema = decode(&rec.ema)?;
        if [params.len(), m.len(), v.len(), ema.len()].iter().any(|&l| l != n) {
            return Err(Error::Checkpoint(format!("expected {n} parameters per vector")));
        }
        Ok(Self {
            config: rec.config,
            state: TrainState {
                params,
                adam: AdamState {
                    m,
                    v,
                    ema,
                    step: rec.step,
                },
                adam_config: rec.adam_config,
            },
            warm_start: rec.warm_start,
        })
    }

    /// Network with the raw or the EMA parameters.
    pub fn network(&self, use_ema: bool) -> Result<ScoreNetwork> {
        let p = if use_ema { &self.state.adam.ema } else { &self.state.params };
        ScoreNetwork::from_params(self.config.clone(), p.clone())
    }
}
