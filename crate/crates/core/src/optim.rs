//! AdamW with decoupled weight decay and an exponential moving average of
//! the parameters.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Shadow update `ema = rate * ema + (1 - rate) * params`.
    pub ema_rate: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            ema_rate: 0.9999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub ema: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[f64]) -> Self {
        Self {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            ema: params.to_vec(),
            step: 0,
        }
    }

    /// One update of `params` in place, then of the EMA shadow.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - cfg.beta1.powf(t);
        let c2 = 1.0 - cfg.beta2.powf(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= cfg.lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
        }
        for (e, p) in self.ema.iter_mut().zip(params.iter()) {
            *e = cfg.ema_rate * *e + (1.0 - cfg.ema_rate) * p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_with_zero_rate_tracks_params() {
        let cfg = AdamConfig {
            ema_rate: 0.0,
            ..Default::default()
        };
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(&p);
        s.update(&cfg, &mut p, &[0.3, -0.1]);
        assert_eq!(s.ema, p);
    }

    #[test]
    fn ema_gap_decays_geometrically() {
        let cfg = AdamConfig {
            lr: 0.0,
            weight_decay: 0.0,
            ema_rate: 0.9,
            ..Default::default()
        };
        let mut p = vec![1.0];
        let mut s = AdamState::new(&[0.0]);
        for _ in 0..50 {
            s.update(&cfg, &mut p, &[0.0]);
        }
        assert!(((1.0 - s.ema[0]) - 0.9f64.powi(50)).abs() < 1e-14);
        assert_eq!(s.step, 50);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![3.0, -4.0];
        let mut s = AdamState::new(&p);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * (x - 1.0)).collect();
            s.update(&cfg, &mut p, &g);
        }
        assert!(p.iter().all(|x| (x - 1.0).abs() < 1e-3));
    }
}
