//! Tensor-product quadrature on boxes of dimension one or two.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default node count per dimension.
pub const DEFAULT_NODES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Trapezoid,
    GaussLegendre,
}

/// Nodes and weights of a rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct ReferenceRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn compute_gauss_legendre(n: usize) -> ReferenceRule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    ReferenceRule { nodes, weights }
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Cached Gauss–Legendre rule with `n` nodes on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Arc<ReferenceRule> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<ReferenceRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| Arc::new(compute_gauss_legendre(n)))
        .clone()
}

fn trapezoid(n: usize) -> ReferenceRule {
    let h = 2.0 / (n - 1) as f64;
    let nodes = (0..n).map(|i| -1.0 + h * i as f64).collect();
    let weights = (0..n)
        .map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
        .collect();
    ReferenceRule { nodes, weights }
}

/// Nodes and weights mapped to `[a, b]`.
pub fn mapped_rule(rule: Rule, n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let r = match rule {
        Rule::GaussLegendre => gauss_legendre(n),
        Rule::Trapezoid => Arc::new(trapezoid(n)),
    };
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let nodes = r.nodes.iter().map(|t| mid + half * t).collect();
    let weights = r.weights.iter().map(|w| half * w).collect();
    (nodes, weights)
}

/// `∫_a^b f` with an `n`-node Gauss–Legendre rule.
pub fn integrate(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let r = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    half * r
        .nodes
        .iter()
        .zip(&r.weights)
        .map(|(t, w)| w * f(mid + half * t))
        .sum::<f64>()
}

/// Gauss–Legendre on each panel between consecutive sorted `breaks`.
pub fn integrate_panels(breaks: &[f64], n: usize, f: impl Fn(f64) -> f64) -> f64 {
    breaks.windows(2).map(|w| integrate(w[0], w[1], n, &f)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    bounds: Vec<(f64, f64)>,
    nodes: Vec<usize>,
    rule: Rule,
}

impl QuadratureGrid {
    pub fn new(bounds: Vec<(f64, f64)>, nodes: Vec<usize>, rule: Rule) -> Result<Self> {
        if bounds.is_empty() || bounds.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "quadrature supports dimension 1 or 2, got {}",
                bounds.len()
            )));
        }
        if bounds.len() != nodes.len() {
            return Err(Error::DimensionMismatch {
                expected: bounds.len(),
                got: nodes.len(),
            });
        }
        for &(a, b) in &bounds {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::InvalidArgument(format!("bad bounds ({a}, {b})")));
            }
        }
        if nodes.iter().any(|&n| n < 2) {
            return Err(Error::InvalidArgument("at least two nodes per dimension".into()));
        }
        Ok(Self {
            bounds,
            nodes,
            rule,
        })
    }

    /// 1D Gauss–Legendre grid over `[a, b]` with the default node count.
    pub fn line(a: f64, b: f64) -> Result<Self> {
        Self::new(vec![(a, b)], vec![DEFAULT_NODES], Rule::GaussLegendre)
    }

    /// Gauss–Legendre box `[a, b]^dim` with `n` nodes per axis.
    pub fn cube(dim: usize, a: f64, b: f64, n: usize) -> Result<Self> {
        Self::new(vec![(a, b); dim], vec![n; dim], Rule::GaussLegendre)
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn rule(&self) -> Rule {
        self.rule
    }

    /// All tensor-product points with their weights.
    pub fn points(&self) -> Vec<(Vec<f64>, f64)> {
        let axes: Vec<(Vec<f64>, Vec<f64>)> = self
            .bounds
            .iter()
            .zip(&self.nodes)
            .map(|(&(a, b), &n)| mapped_rule(self.rule, n, a, b))
            .collect();
        match axes.as_slice() {
            [(x, w)] => x.iter().zip(w).map(|(&x, &w)| (vec![x], w)).collect(),
            [(x0, w0), (x1, w1)] => {
                let mut out = Vec::with_capacity(x0.len() * x1.len());
                for (&a, &wa) in x0.iter().zip(w0) {
                    for (&b, &wb) in x1.iter().zip(w1) {
                        out.push((vec![a, b], wa * wb));
                    }
                }
                out
            }
            _ => unreachable!("dimension checked at construction"),
        }
    }

    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.points().iter().map(|(x, w)| w * f(x)).sum()
    }
}
