//! Finite-state hidden Markov models: synthetic data generation and the
//! exact predictor/filter recursion that serves as ground truth for the
//! Monte Carlo experiments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, SplitMix64};

#[derive(Debug, Error)]
pub enum HmmError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("observation {0} incompatible with the emission model")]
    BadObservation(String),
    #[error("filter normalizer vanished at step {0}")]
    ZeroNormalizer(usize),
}

/// Observation value: a symbol for finite alphabets, a real for Gaussian
/// emissions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Obs {
    Discrete(usize),
    Continuous(f64),
}

/// Per-state emission model; densities must be strictly positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Emission {
    /// `table[s][y]` is the probability of symbol `y` in state `s`.
    Finite { table: Vec<Vec<f64>> },
    /// State-dependent normal densities.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct FiniteHmm {
    pi0: Vec<f64>,
    trans: Vec<Vec<f64>>,
    emission: Emission,
}

const STOCHASTIC_TOL: f64 = 1e-12;

fn check_prob_vector(v: &[f64], what: &str) -> Result<(), HmmError> {
    if v.is_empty() {
        return Err(HmmError::InvalidModel(format!("{what} is empty")));
    }
    if v.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(HmmError::InvalidModel(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(HmmError::InvalidModel(format!("{what} sums to {sum}, expected 1")));
    }
    Ok(())
}

impl FiniteHmm {
    pub fn new(pi0: Vec<f64>, trans: Vec<Vec<f64>>, emission: Emission) -> Result<Self, HmmError> {
        let s = pi0.len();
        check_prob_vector(&pi0, "pi0")?;
        if trans.len() != s {
            return Err(HmmError::InvalidModel(format!(
                "transition matrix has {} rows for {s} states",
                trans.len()
            )));
        }
        for (i, row) in trans.iter().enumerate() {
            if row.len() != s {
                return Err(HmmError::InvalidModel(format!("transition row {i} has wrong length")));
            }
            check_prob_vector(row, &format!("transition row {i}"))?;
        }
        match &emission {
            Emission::Finite { table } => {
                if table.len() != s {
                    return Err(HmmError::InvalidModel("emission table has wrong row count".into()));
                }
                let width = table[0].len();
                for (i, row) in table.iter().enumerate() {
                    if row.len() != width || width == 0 {
                        return Err(HmmError::InvalidModel(format!("emission row {i} malformed")));
                    }
                    // Strict positivity keeps every filter weight positive.
                    if row.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
                        return Err(HmmError::InvalidModel(format!(
                            "emission row {i} must be strictly positive"
                        )));
                    }
                    check_prob_vector(row, &format!("emission row {i}"))?;
                }
            }
            Emission::Gaussian { mean, std } => {
                if mean.len() != s || std.len() != s {
                    return Err(HmmError::InvalidModel("gaussian parameter length mismatch".into()));
                }
                if std.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                    return Err(HmmError::InvalidModel("gaussian std must be positive".into()));
                }
            }
        }
        Ok(Self { pi0, trans, emission })
    }

    pub fn n_states(&self) -> usize {
        self.pi0.len()
    }

    pub fn pi0(&self) -> &[f64] {
        &self.pi0
    }

    pub fn trans(&self) -> &[Vec<f64>] {
        &self.trans
    }

    pub fn emission(&self) -> &Emission {
        &self.emission
    }

    /// Emission density `g(s, y)`, strictly positive by construction.
    pub fn emit_density(&self, state: usize, y: &Obs) -> Result<f64, HmmError> {
        match (&self.emission, y) {
            (Emission::Finite { table }, Obs::Discrete(sym)) => table[state]
                .get(*sym)
                .copied()
                .ok_or_else(|| HmmError::BadObservation(format!("symbol {sym}"))),
            (Emission::Gaussian { mean, std }, Obs::Continuous(x)) => {
                let z = (x - mean[state]) / std[state];
                Ok((-0.5 * z * z).exp() / (std[state] * (std::f64::consts::TAU).sqrt()))
            }
            _ => Err(HmmError::BadObservation("kind mismatch".into())),
        }
    }

    /// The weight vector `g_n` over states for observation `y`.
    pub fn weight_vector(&self, y: &Obs) -> Result<Vec<f64>, HmmError> {
        (0..self.n_states()).map(|s| self.emit_density(s, y)).collect()
    }

    /// Simulate a state path and observations for steps `0..=t_max`.
    /// Deterministic in the seed.
    pub fn simulate(&self, t_max: usize, seed: u64) -> (Vec<usize>, Vec<Obs>) {
        let mut states = Vec::with_capacity(t_max + 1);
        let mut obs = Vec::with_capacity(t_max + 1);
        for n in 0..=t_max {
            let state = if n == 0 {
                sample_categorical(&self.pi0, rng::unit_f64(seed, &[rng::TAG_SIM_STATE, 0]))
            } else {
                let prev = states[n - 1];
                sample_categorical(
                    &self.trans[prev],
                    rng::unit_f64(seed, &[rng::TAG_SIM_STATE, n as u64]),
                )
            };
            states.push(state);
            let y = match &self.emission {
                Emission::Finite { table } => Obs::Discrete(sample_categorical(
                    &table[state],
                    rng::unit_f64(seed, &[rng::TAG_SIM_EMIT, n as u64, 0]),
                )),
                Emission::Gaussian { mean, std } => {
                    let u1 = rng::unit_f64(seed, &[rng::TAG_SIM_EMIT, n as u64, 0]);
                    let u2 = rng::unit_f64(seed, &[rng::TAG_SIM_EMIT, n as u64, 1]);
                    Obs::Continuous(mean[state] + std[state] * rng::standard_normal(u1, u2))
                }
            };
            obs.push(y);
        }
        (states, obs)
    }

    /// Two-state chain with flip probability `p` and a binary emission
    /// channel with confusion probability `q`.
    pub fn binary_symmetric(p: f64, q: f64) -> Result<Self, HmmError> {
        Self::new(
            vec![0.5, 0.5],
            vec![vec![1.0 - p, p], vec![p, 1.0 - p]],
            Emission::Finite { table: vec![vec![1.0 - q, q], vec![q, 1.0 - q]] },
        )
    }

    /// Seeded random 3-state model with strictly positive entries.
    pub fn random_three_state(seed: u64) -> Self {
        let mut mix = SplitMix64::new(seed);
        let mut draw_row = |len: usize| -> Vec<f64> {
            let raw: Vec<f64> = (0..len).map(|_| mix.next_range(0.2, 1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / sum).collect()
        };
        let pi0 = draw_row(3);
        let trans = (0..3).map(|_| draw_row(3)).collect();
        let table = (0..3).map(|_| draw_row(4)).collect();
        Self::new(pi0, trans, Emission::Finite { table }).expect("positive rows by construction")
    }
}

/// Inverse-CDF draw over a probability vector; ties toward the lowest index.
pub(crate) fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (idx, &p) in probs.iter().enumerate() {
        acc += p;
        if target <= acc {
            return idx;
        }
    }
    probs.len() - 1
}

/// Exact predictor/filter sequences for a fixed observation record.
#[derive(Debug, Clone)]
pub struct ExactFilter {
    predictors: Vec<Vec<f64>>,
    filters: Vec<Vec<f64>>,
    normalizers: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

impl ExactFilter {
    /// Predictor `pi_n`, the law of `X_n` given `y_{0..n-1}`.
    pub fn predictor(&self, n: usize) -> &[f64] {
        &self.predictors[n]
    }

    /// Filter `pihat_n`, proportional to `g_n . pi_n`.
    pub fn filter(&self, n: usize) -> &[f64] {
        &self.filters[n]
    }

    /// `pi_n(g_n)`.
    pub fn normalizer(&self, n: usize) -> f64 {
        self.normalizers[n]
    }

    /// The weight vector `g_n` used at step `n`.
    pub fn weight_vector(&self, n: usize) -> &[f64] {
        &self.weights[n]
    }

    pub fn horizon(&self) -> usize {
        self.predictors.len() - 1
    }

    pub fn pred_functional(&self, n: usize, phi: &[f64]) -> f64 {
        dot(&self.predictors[n], phi)
    }

    pub fn filt_functional(&self, n: usize, phi: &[f64]) -> f64 {
        dot(&self.filters[n], phi)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Run the exact recursion over a fixed observation sequence:
/// `pihat_n proportional to g_n . pi_n`, `pi_{n+1} = pihat_n . trans`.
pub fn exact_filter(hmm: &FiniteHmm, observations: &[Obs]) -> Result<ExactFilter, HmmError> {
    let s = hmm.n_states();
    let mut predictors = Vec::with_capacity(observations.len());
    let mut filters = Vec::with_capacity(observations.len());
    let mut normalizers = Vec::with_capacity(observations.len());
    let mut weights = Vec::with_capacity(observations.len());
    let mut pred = hmm.pi0.clone();
    for (n, y) in observations.iter().enumerate() {
        let g = hmm.weight_vector(y)?;
        let norm = dot(&pred, &g);
        if !(norm > 0.0) {
            return Err(HmmError::ZeroNormalizer(n));
        }
        let filt: Vec<f64> = (0..s).map(|x| pred[x] * g[x] / norm).collect();
        let next: Vec<f64> =
            (0..s).map(|x2| (0..s).map(|x| filt[x] * hmm.trans[x][x2]).sum()).collect();
        predictors.push(pred.clone());
        filters.push(filt.clone());
        normalizers.push(norm);
        weights.push(g);
        pred = next;
    }
    Ok(ExactFilter { predictors, filters, normalizers, weights })
}

/// Brute-force filter by summing over all state trajectories; exponential
/// in the horizon, used only to validate [`exact_filter`].
pub fn exact_filter_brute(hmm: &FiniteHmm, observations: &[Obs]) -> Result<ExactFilter, HmmError> {
    let s = hmm.n_states();
    let mut predictors = Vec::new();
    let mut filters = Vec::new();
    let mut normalizers = Vec::new();
    let mut weights = Vec::new();
    for (n, y) in observations.iter().enumerate() {
        let g_n = hmm.weight_vector(y)?;
        // Weight of trajectories x_0..x_n: pi0 prod f, times the first n
        // observation weights (predictor) and optionally g_n (filter).
        let mut pred_mass = vec![0.0; s];
        let mut filt_mass = vec![0.0; s];
        let mut paths: Vec<(Vec<usize>, f64)> =
            (0..s).map(|x| (vec![x], hmm.pi0[x])).collect();
        for step in 1..=n {
            let mut next = Vec::with_capacity(paths.len() * s);
            for (p, wgt) in &paths {
                let last = *p.last().expect("nonempty");
                let g_prev = hmm.emit_density(last, &observations[step - 1])?;
                for x in 0..s {
                    let mut ext = p.clone();
                    ext.push(x);
                    next.push((ext, wgt * g_prev * hmm.trans[last][x]));
                }
            }
            paths = next;
        }
        for (p, wgt) in &paths {
            let last = *p.last().expect("nonempty");
            pred_mass[last] += wgt;
            filt_mass[last] += wgt * g_n[last];
        }
        let pred_total: f64 = pred_mass.iter().sum();
        let filt_total: f64 = filt_mass.iter().sum();
        if !(filt_total > 0.0) {
            return Err(HmmError::ZeroNormalizer(n));
        }
        let pred: Vec<f64> = pred_mass.iter().map(|x| x / pred_total).collect();
        normalizers.push(dot(&pred, &g_n));
        predictors.push(pred);
        filters.push(filt_mass.iter().map(|x| x / filt_total).collect());
        weights.push(g_n);
    }
    Ok(ExactFilter { predictors, filters, normalizers, weights })
}

/// Serializable model description (TOML or JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub pi0: Vec<f64>,
    pub trans: Vec<Vec<f64>>,
    pub emission: Emission,
}

impl ModelConfig {
    pub fn build(&self) -> Result<FiniteHmm, HmmError> {
        FiniteHmm::new(self.pi0.clone(), self.trans.clone(), self.emission.clone())
    }

    pub fn from_hmm(hmm: &FiniteHmm) -> Self {
        ModelConfig {
            pi0: hmm.pi0.clone(),
            trans: hmm.trans.clone(),
            emission: hmm.emission.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(FiniteHmm::new(
            vec![0.6, 0.5],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            Emission::Finite { table: vec![vec![0.5, 0.5], vec![0.5, 0.5]] },
        )
        .is_err());
        // Zero emission entries violate strict positivity.
        assert!(FiniteHmm::new(
            vec![0.5, 0.5],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            Emission::Finite { table: vec![vec![1.0, 0.0], vec![0.5, 0.5]] },
        )
        .is_err());
    }

    #[test]
    fn degenerate_chain_stays_put() {
        let hmm = FiniteHmm::new(
            vec![1.0, 0.0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            Emission::Finite { table: vec![vec![0.5, 0.5], vec![0.5, 0.5]] },
        )
        .unwrap();
        let (states, _) = hmm.simulate(20, 99);
        assert!(states.iter().all(|&x| x == 0));
    }

    #[test]
    fn simulate_is_reproducible() {
        let hmm = FiniteHmm::binary_symmetric(0.3, 0.2).unwrap();
        let a = hmm.simulate(50, 1234);
        let b = hmm.simulate(50, 1234);
        assert_eq!(a, b);
        let c = hmm.simulate(50, 1235);
        assert_ne!(a, c);
    }

    #[test]
    fn symmetric_chain_keeps_uniform_marginal() {
        let hmm = FiniteHmm::binary_symmetric(0.5, 0.3).unwrap();
        let mut ones = 0usize;
        let reps = 20_000;
        for seed in 0..reps {
            let (states, _) = hmm.simulate(3, seed as u64);
            ones += states[3];
        }
        let frac = ones as f64 / reps as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn bayes_update_example() {
        // pi0 = (1/2, 1/2), g_0 = (1, 3) -> filter (1/4, 3/4).
        let hmm = FiniteHmm::new(
            vec![0.5, 0.5],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            Emission::Finite { table: vec![vec![0.25, 0.75], vec![0.75, 0.25]] },
        )
        .unwrap();
        // Observing symbol 0 gives weights (0.25, 0.75), proportional to (1, 3).
        let ef = exact_filter(&hmm, &[Obs::Discrete(0)]).unwrap();
        assert!((ef.filter(0)[0] - 0.25).abs() < 1e-15);
        assert!((ef.filter(0)[1] - 0.75).abs() < 1e-15);
        assert!((ef.normalizer(0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uniform_transition_resets_predictor() {
        let hmm = FiniteHmm::new(
            vec![0.9, 0.1],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            Emission::Finite { table: vec![vec![0.8, 0.2], vec![0.3, 0.7]] },
        )
        .unwrap();
        let obs = vec![Obs::Discrete(0), Obs::Discrete(1), Obs::Discrete(0)];
        let ef = exact_filter(&hmm, &obs).unwrap();
        for n in 1..=2 {
            assert!((ef.predictor(n)[0] - 0.5).abs() < 1e-15);
            assert!((ef.predictor(n)[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn recursion_matches_trajectory_enumeration() {
        for seed in 0..8u64 {
            let hmm = FiniteHmm::random_three_state(seed);
            let (_, obs) = hmm.simulate(3, seed ^ 0xdead);
            let fast = exact_filter(&hmm, &obs).unwrap();
            let brute = exact_filter_brute(&hmm, &obs).unwrap();
            for n in 0..obs.len() {
                for x in 0..3 {
                    assert!(
                        (fast.predictor(n)[x] - brute.predictor(n)[x]).abs() < 1e-12,
                        "seed {seed} predictor n={n}"
                    );
                    assert!(
                        (fast.filter(n)[x] - brute.filter(n)[x]).abs() < 1e-12,
                        "seed {seed} filter n={n}"
                    );
                }
                assert!((fast.normalizer(n) - brute.normalizer(n)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn filter_vectors_stay_positive_and_normalized() {
        let hmm = FiniteHmm::random_three_state(5);
        let (_, obs) = hmm.simulate(10, 77);
        let ef = exact_filter(&hmm, &obs).unwrap();
        for n in 0..=10 {
            assert!((ef.predictor(n).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((ef.filter(n).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(ef.predictor(n).iter().all(|&p| p > 0.0));
            assert!(ef.filter(n).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn gaussian_emission_filtering_runs() {
        let hmm = FiniteHmm::new(
            vec![0.5, 0.5],
            vec![vec![0.7, 0.3], vec![0.3, 0.7]],
            Emission::Gaussian { mean: vec![-1.0, 1.0], std: vec![0.8, 0.8] },
        )
        .unwrap();
        let (_, obs) = hmm.simulate(5, 3);
        let ef = exact_filter(&hmm, &obs).unwrap();
        assert_eq!(ef.horizon(), 5);
    }

    #[test]
    fn model_config_round_trip() {
        let hmm = FiniteHmm::binary_symmetric(0.3, 0.2).unwrap();
        let cfg = ModelConfig::from_hmm(&hmm);
        let toml_str = toml::to_string(&cfg).unwrap();
        let back: ModelConfig = toml::from_str(&toml_str).unwrap();
        let rebuilt = back.build().unwrap();
        assert_eq!(rebuilt.pi0(), hmm.pi0());
        let json = serde_json::to_string(&cfg).unwrap();
        let back2: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back2.pi0, cfg.pi0);
    }
}
