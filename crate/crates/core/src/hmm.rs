//! Left-to-right hidden Markov model with diagonal Gaussian emissions.
//!
//! Each hidden state stands for one underlying keyframe. Transitions only move
//! forward: a state may repeat, advance by one, or skip exactly one state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COV_FLOOR: f64 = 1e-4;
/// Largest forward jump allowed by the transition structure.
pub const MAX_JUMP: usize = 2;
pub const MIN_STATES: usize = 2;
pub const MAX_STATES: usize = 10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub cov_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 100,
            tol: 1e-4,
            cov_floor: COV_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianHmm {
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    /// Diagonal covariance per state.
    pub variances: Vec<Vec<f64>>,
}

/// Per-iteration trace of an EM run.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Total log-likelihood of the training data before each M-step and after the last one.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub states: usize,
}

/// Number of hidden states for a policy trained on segments with these keyframe counts.
pub fn state_count_for(keyframe_counts: &[usize]) -> usize {
    if keyframe_counts.is_empty() {
        return MIN_STATES;
    }
    let mut counts = keyframe_counts.to_vec();
    counts.sort_unstable();
    let n = counts.len();
    let median = if n % 2 == 1 {
        counts[n / 2]
    } else {
        // lower median keeps the count integral and deterministic
        counts[n / 2 - 1]
    };
    median.clamp(MIN_STATES, MAX_STATES)
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn safe_ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

impl GaussianHmm {
    pub fn states(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Checks normalization, the left-to-right zero pattern, and the covariance floor.
    pub fn validate(&self) -> Result<()> {
        let k = self.states();
        if k == 0 || self.initial.len() != k || self.transitions.len() != k || self.variances.len() != k {
            return Err(Error::Consistency("HMM shape mismatch".into()));
        }
        let close = |s: f64| (s - 1.0).abs() <= 1e-9;
        if !close(self.initial.iter().sum()) {
            return Err(Error::Consistency("initial distribution not normalized".into()));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.len() != k || !close(row.iter().sum()) {
                return Err(Error::Consistency(format!("transition row {i} not normalized")));
            }
            for (j, &p) in row.iter().enumerate() {
                if p < 0.0 || ((j < i || j > i + MAX_JUMP) && p != 0.0) {
                    return Err(Error::Consistency(format!(
                        "transition ({i},{j}) breaks left-to-right structure"
                    )));
                }
            }
        }
        for v in self.variances.iter().flatten() {
            if *v < COV_FLOOR {
                return Err(Error::Consistency("variance below floor".into()));
            }
        }
        Ok(())
    }

    fn log_emission(&self, state: usize, x: &[f64]) -> f64 {
        let mean = &self.means[state];
        let var = &self.variances[state];
        let mut acc = 0.0;
        for d in 0..mean.len() {
            let diff = x[d] - mean[d];
            acc += LN_2PI + var[d].ln() + diff * diff / var[d];
        }
        -0.5 * acc
    }

    fn check_points<P: AsRef<[f64]>>(&self, seq: &[P]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::invalid("empty observation sequence"));
        }
        let dim = self.dim();
        if let Some(p) = seq.iter().find(|p| p.as_ref().len() != dim) {
            return Err(Error::invalid(format!(
                "observation dimension {} does not match model dimension {dim}",
                p.as_ref().len()
            )));
        }
        Ok(())
    }

    /// Log-space forward pass; returns `log alpha[t][k]`.
    fn forward<P: AsRef<[f64]>>(&self, seq: &[P]) -> Vec<Vec<f64>> {
        let k = self.states();
        let log_trans: Vec<Vec<f64>> = self
            .transitions
            .iter()
            .map(|row| row.iter().map(|&p| safe_ln(p)).collect())
            .collect();
        let mut alpha = Vec::with_capacity(seq.len());
        let first: Vec<f64> = (0..k)
            .map(|s| safe_ln(self.initial[s]) + self.log_emission(s, seq[0].as_ref()))
            .collect();
        alpha.push(first);
        for x in &seq[1..] {
            let prev = alpha.last().unwrap();
            let next: Vec<f64> = (0..k)
                .map(|j| {
                    let lo = j.saturating_sub(MAX_JUMP);
                    log_sum_exp((lo..=j).map(|i| prev[i] + log_trans[i][j]))
                        + self.log_emission(j, x.as_ref())
                })
                .collect();
            alpha.push(next);
        }
        alpha
    }

    fn backward<P: AsRef<[f64]>>(&self, seq: &[P]) -> Vec<Vec<f64>> {
        let k = self.states();
        let log_trans: Vec<Vec<f64>> = self
            .transitions
            .iter()
            .map(|row| row.iter().map(|&p| safe_ln(p)).collect())
            .collect();
        let n = seq.len();
        let mut beta = vec![vec![0.0; k]; n];
        for t in (0..n - 1).rev() {
            let x = seq[t + 1].as_ref();
            let emit: Vec<f64> = (0..k).map(|j| self.log_emission(j, x)).collect();
            for i in 0..k {
                let hi = (i + MAX_JUMP).min(k - 1);
                beta[t][i] = log_sum_exp((i..=hi).map(|j| log_trans[i][j] + emit[j] + beta[t + 1][j]));
            }
        }
        beta
    }

    /// `log p(seq | model)` by the forward recursion.
    pub fn log_likelihood<P: AsRef<[f64]>>(&self, seq: &[P]) -> Result<f64> {
        self.check_points(seq)?;
        let alpha = self.forward(seq);
        Ok(log_sum_exp(alpha.last().unwrap().iter().copied()))
    }

    /// Samples one keyframe per hidden state entered, walking forward until the last state.
    pub fn sample_keyframes(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.states();
        let mut state = draw(&mut rng, &self.initial);
        let mut out = Vec::new();
        loop {
            let point = self.means[state]
                .iter()
                .zip(&self.variances[state])
                .map(|(m, v)| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + v.sqrt() * z
                })
                .collect();
            out.push(point);
            if state + 1 >= k {
                break;
            }
            let forward: Vec<f64> = (0..k)
                .map(|j| if j > state { self.transitions[state][j] } else { 0.0 })
                .collect();
            if forward.iter().sum::<f64>() <= 0.0 {
                break;
            }
            state = draw(&mut rng, &forward);
        }
        out
    }

    /// Most likely emission for each state, in state order.
    pub fn mean_keyframes(&self) -> Vec<Vec<f64>> {
        self.means.clone()
    }
}

fn draw(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        if u < w {
            return i;
        }
        u -= w;
    }
    last
}

/// Trains a left-to-right HMM by expectation-maximization.
///
/// `states` defaults to the clamped median sequence length. The count is
/// reduced when the data cannot populate that many states.
pub fn fit_policy<P: AsRef<[f64]>>(
    trajectories: &[Vec<P>],
    states: Option<usize>,
    config: &EmConfig,
) -> Result<(GaussianHmm, FitReport)> {
    if trajectories.is_empty() || trajectories.iter().any(|t| t.is_empty()) {
        return Err(Error::invalid("policy fitting needs non-empty trajectories"));
    }
    let dim = trajectories[0][0].as_ref().len();
    if trajectories.iter().flatten().any(|p| p.as_ref().len() != dim) {
        return Err(Error::invalid("trajectory points disagree on dimension"));
    }
    let lengths: Vec<usize> = trajectories.iter().map(Vec::len).collect();
    let requested = states.unwrap_or_else(|| state_count_for(&lengths));
    let longest = *lengths.iter().max().unwrap();
    let k = requested.max(1).min(longest);

    let mut hmm = initialize(trajectories, k, dim, config.cov_floor);
    let mut lls = Vec::new();
    let mut iterations = 0;
    let mut prev = f64::NEG_INFINITY;
    loop {
        let (ll, stats) = expectation(&hmm, trajectories);
        lls.push(ll);
        if ll - prev < config.tol || iterations >= config.max_iter {
            break;
        }
        prev = ll;
        maximize(&mut hmm, &stats, config.cov_floor);
        iterations += 1;
    }
    Ok((
        hmm,
        FitReport {
            log_likelihoods: lls,
            iterations,
            states: k,
        },
    ))
}

fn initialize<P: AsRef<[f64]>>(trajectories: &[Vec<P>], k: usize, dim: usize, floor: f64) -> GaussianHmm {
    let mut count = vec![0.0; k];
    let mut sum = vec![vec![0.0; dim]; k];
    let mut sq = vec![vec![0.0; dim]; k];
    let mut trans = vec![vec![0.0; k]; k];
    let mut initial = vec![0.0; k];
    for traj in trajectories {
        let n = traj.len();
        let assign: Vec<usize> = (0..n).map(|t| t * k / n).collect();
        initial[assign[0]] += 1.0;
        for (t, p) in traj.iter().enumerate() {
            let s = assign[t];
            count[s] += 1.0;
            for d in 0..dim {
                let x = p.as_ref()[d];
                sum[s][d] += x;
                sq[s][d] += x * x;
            }
            if t + 1 < n {
                let next = assign[t + 1].min(s + MAX_JUMP);
                trans[s][next] += 1.0;
            }
        }
    }
    let mut means = vec![vec![0.0; dim]; k];
    let mut variances = vec![vec![floor; dim]; k];
    for s in 0..k {
        if count[s] > 0.0 {
            for d in 0..dim {
                let m = sum[s][d] / count[s];
                means[s][d] = m;
                variances[s][d] = (sq[s][d] / count[s] - m * m).max(floor);
            }
        } else if s > 0 {
            means[s] = means[s - 1].clone();
        }
    }
    // Forward moves get a small pseudo-count so EM can still discover skips.
    for s in 0..k {
        let hi = (s + MAX_JUMP).min(k - 1);
        if s + 1 == k {
            trans[s] = vec![0.0; k];
            trans[s][s] = 1.0;
            continue;
        }
        for j in s..=hi {
            trans[s][j] += if j == s { 0.5 } else { 0.1 };
        }
        let total: f64 = trans[s].iter().sum();
        for p in trans[s].iter_mut() {
            *p /= total;
        }
    }
    let total: f64 = initial.iter().sum();
    for p in initial.iter_mut() {
        *p /= total;
    }
    GaussianHmm {
        initial,
        transitions: trans,
        means,
        variances,
    }
}

struct Stats {
    initial: Vec<f64>,
    trans: Vec<Vec<f64>>,
    occupancy: Vec<f64>,
    sum: Vec<Vec<f64>>,
    sq: Vec<Vec<f64>>,
}

fn expectation<P: AsRef<[f64]>>(hmm: &GaussianHmm, trajectories: &[Vec<P>]) -> (f64, Stats) {
    let k = hmm.states();
    let dim = hmm.dim();
    let mut stats = Stats {
        initial: vec![0.0; k],
        trans: vec![vec![0.0; k]; k],
        occupancy: vec![0.0; k],
        sum: vec![vec![0.0; dim]; k],
        sq: vec![vec![0.0; dim]; k],
    };
    let log_trans: Vec<Vec<f64>> = hmm
        .transitions
        .iter()
        .map(|row| row.iter().map(|&p| safe_ln(p)).collect())
        .collect();
    let mut total = 0.0;
    for traj in trajectories {
        let alpha = hmm.forward(traj);
        let beta = hmm.backward(traj);
        let ll = log_sum_exp(alpha.last().unwrap().iter().copied());
        total += ll;
        for t in 0..traj.len() {
            let x = traj[t].as_ref();
            for s in 0..k {
                let g = (alpha[t][s] + beta[t][s] - ll).exp();
                if g == 0.0 {
                    continue;
                }
                if t == 0 {
                    stats.initial[s] += g;
                }
                stats.occupancy[s] += g;
                for d in 0..dim {
                    stats.sum[s][d] += g * x[d];
                    stats.sq[s][d] += g * x[d] * x[d];
                }
            }
            if t + 1 < traj.len() {
                let next = traj[t + 1].as_ref();
                for i in 0..k {
                    let hi = (i + MAX_JUMP).min(k - 1);
                    for j in i..=hi {
                        let xi = alpha[t][i] + log_trans[i][j] + hmm.log_emission(j, next) + beta[t + 1][j] - ll;
                        stats.trans[i][j] += xi.exp();
                    }
                }
            }
        }
    }
    (total, stats)
}

fn maximize(hmm: &mut GaussianHmm, stats: &Stats, floor: f64) {
    let k = hmm.states();
    let total: f64 = stats.initial.iter().sum();
    if total > 0.0 {
        hmm.initial = stats.initial.iter().map(|g| g / total).collect();
    }
    for i in 0..k {
        let row_total: f64 = stats.trans[i].iter().sum();
        if row_total > 0.0 && i + 1 < k {
            hmm.transitions[i] = stats.trans[i].iter().map(|x| x / row_total).collect();
        }
        let occ = stats.occupancy[i];
        if occ > 0.0 {
            for d in 0..hmm.dim() {
                let m = stats.sum[i][d] / occ;
                hmm.means[i][d] = m;
                hmm.variances[i][d] = (stats.sq[i][d] / occ - m * m).max(floor);
            }
        }
    }
}

/// Sample counts and seed for the Monte-Carlo distance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceConfig {
    pub num_sequences: usize,
    pub seed: u64,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        DistanceConfig {
            num_sequences: 32,
            seed: 0x5175,
        }
    }
}

pub fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean per-observation log-likelihood ratio of sequences sampled from `a`.
pub fn kl_rate(a: &GaussianHmm, b: &GaussianHmm, num_sequences: usize, seed: u64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid("HMM emission dimensions differ"));
    }
    let n = num_sequences.max(1);
    let mut acc = 0.0;
    for i in 0..n {
        let seq = a.sample_keyframes(mix_seed(seed, i as u64));
        let la = a.log_likelihood(&seq)?;
        let lb = b.log_likelihood(&seq)?;
        acc += (la - lb) / seq.len() as f64;
    }
    Ok(acc / n as f64)
}

/// Symmetrized Monte-Carlo KL-rate between two policies, sampling `a` with
/// `seed_a` and `b` with `seed_b`.
pub fn hmm_distance_seeded(
    a: &GaussianHmm,
    b: &GaussianHmm,
    num_sequences: usize,
    seed_a: u64,
    seed_b: u64,
) -> Result<f64> {
    let ab = kl_rate(a, b, num_sequences, seed_a)?;
    let ba = kl_rate(b, a, num_sequences, seed_b)?;
    let d = (ab + ba) / 2.0;
    Ok(if d.is_nan() { f64::INFINITY } else { d.max(0.0) })
}

pub fn hmm_distance(a: &GaussianHmm, b: &GaussianHmm, config: &DistanceConfig) -> Result<f64> {
    hmm_distance_seeded(
        a,
        b,
        config.num_sequences,
        mix_seed(config.seed, 1),
        mix_seed(config.seed, 2),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(mean: Vec<f64>, var: f64) -> GaussianHmm {
        let d = mean.len();
        GaussianHmm {
            initial: vec![1.0],
            transitions: vec![vec![1.0]],
            means: vec![mean],
            variances: vec![vec![var; d]],
        }
    }

    fn chain(k: usize) -> GaussianHmm {
        let mut transitions = vec![vec![0.0; k]; k];
        for i in 0..k {
            transitions[i][(i + 1).min(k - 1)] = 1.0;
        }
        GaussianHmm {
            initial: {
                let mut v = vec![0.0; k];
                v[0] = 1.0;
                v
            },
            transitions,
            means: (0..k).map(|i| vec![i as f64 * 10.0]).collect(),
            variances: vec![vec![0.01]; k],
        }
    }

    #[test]
    fn degenerate_fit_single_point() {
        let (hmm, _) = fit_policy(&[vec![vec![0.3, -0.2, 0.1, 1.0]]], Some(1), &EmConfig::default()).unwrap();
        assert_eq!(hmm.states(), 1);
        assert_eq!(hmm.means[0], vec![0.3, -0.2, 0.1, 1.0]);
        assert!(hmm.variances[0].iter().all(|&v| v == COV_FLOOR));
        hmm.validate().unwrap();
    }

    #[test]
    fn state_count_reduced_to_data() {
        let (hmm, report) = fit_policy(&[vec![vec![0.0], vec![1.0]]], Some(5), &EmConfig::default()).unwrap();
        assert_eq!(hmm.states(), 2);
        assert_eq!(report.states, 2);
    }

    #[test]
    fn empty_input_rejected() {
        let none: Vec<Vec<Vec<f64>>> = vec![];
        assert!(fit_policy(&none, None, &EmConfig::default()).is_err());
    }

    #[test]
    fn single_state_closed_form() {
        let hmm = single(vec![1.0, -2.0], 0.25);
        let x = [1.5, -1.0];
        let expected: f64 = (0..2)
            .map(|d| {
                let diff = x[d] - hmm.means[0][d];
                -0.5 * ((2.0 * std::f64::consts::PI * 0.25).ln() + diff * diff / 0.25)
            })
            .sum();
        let ll = hmm.log_likelihood(&[x]).unwrap();
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_invalid_input() {
        let hmm = single(vec![0.0, 0.0], 1.0);
        assert!(matches!(hmm.log_likelihood(&[[0.0]]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn appending_point_bounded_by_best_single_step() {
        let hmm = chain(3);
        let one = hmm.log_likelihood(&[[0.1]]).unwrap();
        let two = hmm.log_likelihood(&[[0.1], [10.2]]).unwrap();
        let best_step = (0..3)
            .map(|s| hmm.log_emission(s, &[10.2]))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(two <= one + best_step + 1e-12);
    }

    #[test]
    fn forced_chain_samples_every_state_in_order() {
        let hmm = chain(4);
        let seq = hmm.sample_keyframes(7);
        assert_eq!(seq.len(), 4);
        for (i, p) in seq.iter().enumerate() {
            assert!((p[0] - 10.0 * i as f64).abs() < 1.0);
        }
        assert_eq!(single(vec![0.0], 1.0).sample_keyframes(3).len(), 1);
    }

    #[test]
    fn sampling_is_deterministic() {
        let hmm = chain(4);
        assert_eq!(hmm.sample_keyframes(11), hmm.sample_keyframes(11));
        assert_ne!(hmm.sample_keyframes(11), hmm.sample_keyframes(12));
    }

    #[test]
    fn skip_fraction_matches_transition_matrix() {
        let mut hmm = chain(3);
        hmm.transitions[0] = vec![0.0, 0.5, 0.5];
        let n = 10_000;
        let short = (0..n).filter(|&s| hmm.sample_keyframes(s).len() == 2).count();
        let frac = short as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn self_distance_is_zero() {
        let hmm = chain(3);
        assert_eq!(hmm_distance(&hmm, &hmm, &DistanceConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn distance_matches_gaussian_kl() {
        let sigma2: f64 = 0.04;
        let delta: f64 = 0.5;
        let a = single(vec![0.0, 0.0, 0.0, 0.0], sigma2);
        let b = single(vec![delta, 0.0, 0.0, 0.0], sigma2);
        let analytic = delta * delta / (2.0 * sigma2);
        let est = hmm_distance(&a, &b, &DistanceConfig { num_sequences: 32, seed: 9 }).unwrap();
        assert!((est - analytic).abs() / analytic < 0.15, "{est} vs {analytic}");
    }

    #[test]
    fn distance_symmetric_under_seed_exchange() {
        let a = chain(3);
        let mut b = chain(3);
        b.means[1][0] += 0.3;
        let ab = hmm_distance_seeded(&a, &b, 16, 1, 2).unwrap();
        let ba = hmm_distance_seeded(&b, &a, 16, 2, 1).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn median_state_count() {
        assert_eq!(state_count_for(&[1]), 2);
        assert_eq!(state_count_for(&[3, 4, 20]), 4);
        assert_eq!(state_count_for(&[30]), 10);
    }
}
