//! Logistic initiation classifiers over world-state features.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::demos::WorldState;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    /// L2 penalty on the weights (bias unpenalized).
    pub lambda: f64,
    /// Stop once the largest gradient component falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            lambda: 1e-2,
            tol: 1e-6,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitiationClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    /// Trained without negatives: always activated.
    pub degenerate: bool,
    pub config: LogisticConfig,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dedup_into(store: &mut Vec<Vec<f64>>, seen: &mut HashSet<Vec<u64>>, samples: impl IntoIterator<Item = Vec<f64>>) {
    for s in samples {
        let key: Vec<u64> = s.iter().map(|x| x.to_bits()).collect();
        if seen.insert(key) {
            store.push(s);
        }
    }
}

fn dedup(samples: impl IntoIterator<Item = Vec<f64>>) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    dedup_into(&mut out, &mut HashSet::new(), samples);
    out
}

impl InitiationClassifier {
    /// A classifier that fires everywhere, used for the virtual start node.
    pub fn always(dim: usize) -> Self {
        InitiationClassifier {
            weights: vec![0.0; dim],
            bias: 0.0,
            positives: Vec::new(),
            negatives: Vec::new(),
            degenerate: true,
            config: LogisticConfig::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn predict_features(&self, s: &[f64]) -> Result<f64> {
        if s.len() != self.weights.len() {
            return Err(Error::invalid(format!(
                "state dimension {} does not match classifier dimension {}",
                s.len(),
                self.weights.len()
            )));
        }
        if self.degenerate {
            return Ok(1.0);
        }
        Ok(sigmoid(self.margin(s)))
    }

    pub fn predict_proba(&self, s: &WorldState) -> Result<f64> {
        self.predict_features(&s.features)
    }

    pub fn is_activated(&self, s: &WorldState, threshold: f64) -> bool {
        self.predict_proba(s).map(|p| p >= threshold).unwrap_or(false)
    }

    fn margin(&self, s: &[f64]) -> f64 {
        self.weights.iter().zip(s).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    /// Adds samples (exact duplicates dropped) and refits on the union.
    pub fn update(&self, new_pos: &[Vec<f64>], new_neg: &[Vec<f64>]) -> Result<Self> {
        let mut positives = self.positives.clone();
        let mut seen: HashSet<Vec<u64>> = positives
            .iter()
            .map(|s| s.iter().map(|x| x.to_bits()).collect())
            .collect();
        dedup_into(&mut positives, &mut seen, new_pos.iter().cloned());
        let mut negatives = self.negatives.clone();
        let mut seen: HashSet<Vec<u64>> = negatives
            .iter()
            .map(|s| s.iter().map(|x| x.to_bits()).collect())
            .collect();
        dedup_into(&mut negatives, &mut seen, new_neg.iter().cloned());
        fit_classifier(&positives, &negatives, &self.config)
    }
}

/// Full-batch gradient ascent on the averaged, L2-regularized log-likelihood.
pub fn fit_classifier(
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    config: &LogisticConfig,
) -> Result<InitiationClassifier> {
    let positives = dedup(positives.iter().cloned());
    let negatives = dedup(negatives.iter().cloned());
    let dim = positives
        .first()
        .ok_or_else(|| Error::invalid("classifier needs at least one positive sample"))?
        .len();
    if positives.iter().chain(&negatives).any(|s| s.len() != dim) {
        return Err(Error::invalid("classifier samples disagree on dimension"));
    }
    if negatives.is_empty() {
        return Ok(InitiationClassifier {
            weights: vec![0.0; dim],
            bias: 0.0,
            positives,
            negatives,
            degenerate: true,
            config: *config,
        });
    }

    let samples: Vec<(&[f64], f64)> = positives
        .iter()
        .map(|s| (s.as_slice(), 1.0))
        .chain(negatives.iter().map(|s| (s.as_slice(), 0.0)))
        .collect();
    let n = samples.len() as f64;
    // params = [weights..., bias]
    let objective = |p: &[f64]| -> f64 {
        let mut ll = 0.0;
        for (x, y) in &samples {
            let z = p[..dim].iter().zip(*x).map(|(w, v)| w * v).sum::<f64>() + p[dim];
            // y z - log(1 + e^z)
            ll += y * z - softplus(z);
        }
        let reg: f64 = p[..dim].iter().map(|w| w * w).sum();
        ll / n - 0.5 * config.lambda * reg
    };
    let gradient = |p: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; dim + 1];
        for (x, y) in &samples {
            let z = p[..dim].iter().zip(*x).map(|(w, v)| w * v).sum::<f64>() + p[dim];
            let r = y - sigmoid(z);
            for d in 0..dim {
                g[d] += r * x[d];
            }
            g[dim] += r;
        }
        for d in 0..=dim {
            g[d] /= n;
        }
        for d in 0..dim {
            g[d] -= config.lambda * p[d];
        }
        g
    };

    let mut params = vec![0.0; dim + 1];
    let mut value = objective(&params);
    let mut step = 1.0;
    for _ in 0..config.max_iter {
        let g = gradient(&params);
        let gmax = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if gmax < config.tol {
            break;
        }
        let gnorm2: f64 = g.iter().map(|x| x * x).sum();
        // Armijo backtracking
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = params.iter().zip(&g).map(|(p, d)| p + step * d).collect();
            let v = objective(&trial);
            if v >= value + 1e-4 * step * gnorm2 {
                params = trial;
                value = v;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        step = (step * 2.0).min(1e3);
    }

    Ok(InitiationClassifier {
        weights: params[..dim].to_vec(),
        bias: params[dim],
        positives,
        negatives,
        degenerate: false,
        config: *config,
    })
}
