//! Exact asymptotic-variance recursions for the three resampling families,
//! evaluated against the exact filter.
//!
//! Each recursion is a functional: evaluating the filtered variance at a
//! test function requires the predictor variance at the composite argument
//! `g_n (phi - pihat_n(phi))`, which in turn unwinds one step further. On
//! a finite state space functions are length-S vectors, so every step is a
//! small exact linear-algebra evaluation.

use thiserror::Error;

use crate::hmm::{dot, ExactFilter, FiniteHmm};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VarianceError {
    #[error("radix parameter must satisfy r >= 2, got {0}")]
    BadRadix(usize),
    #[error("horizon {t} exceeds the exact filter horizon {have}")]
    HorizonTooLong { t: usize, have: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    Bpf,
    Radix(usize),
    Mixed(usize),
}

impl Flavor {
    pub fn name(&self) -> &'static str {
        match self {
            Flavor::Bpf => "bpf",
            Flavor::Radix(_) => "radix",
            Flavor::Mixed(_) => "mixed",
        }
    }
}

/// Asymptotic variances `sigma_pred[n]` (predictor) and `sigma_filt[n]`
/// (filter) for `n = 0..=t`.
#[derive(Debug, Clone)]
pub struct VarianceSeries {
    pub flavor: Flavor,
    pub sigma_pred: Vec<f64>,
    pub sigma_filt: Vec<f64>,
}

struct Ctx<'a> {
    ef: &'a ExactFilter,
    trans: &'a [Vec<f64>],
}

impl<'a> Ctx<'a> {
    /// `(f psi)(x) = sum_y trans[x][y] psi(y)`.
    fn f_apply(&self, psi: &[f64]) -> Vec<f64> {
        self.trans.iter().map(|row| dot(row, psi)).collect()
    }

    /// `pihat_{n}( f((psi - f psi)^2) )`: the mutation variance term.
    fn mutation_term(&self, n: usize, psi: &[f64]) -> f64 {
        let fpsi = self.f_apply(psi);
        let dev2: Vec<f64> = self
            .trans
            .iter()
            .enumerate()
            .map(|(x, row)| {
                row.iter()
                    .zip(psi)
                    .map(|(&p, &v)| p * (v - fpsi[x]) * (v - fpsi[x]))
                    .sum()
            })
            .collect();
        dot(self.ef.filter(n), &dev2)
    }

    /// Variance of `psi` under a probability vector.
    fn var_under(&self, law: &[f64], psi: &[f64]) -> f64 {
        let mean = dot(law, psi);
        law.iter().zip(psi).map(|(&p, &v)| p * (v - mean) * (v - mean)).sum()
    }

    /// Center at the filter mean and multiply by `g_n`.
    fn weighted_centered(&self, n: usize, psi: &[f64]) -> Vec<f64> {
        let mean = dot(self.ef.filter(n), psi);
        self.ef
            .weight_vector(n)
            .iter()
            .zip(psi)
            .map(|(&g, &v)| g * (v - mean))
            .collect()
    }

    fn bpf_pred(&self, n: usize, psi: &[f64]) -> f64 {
        if n == 0 {
            self.var_under(self.ef.predictor(0), psi)
        } else {
            self.bpf_filt(n - 1, &self.f_apply(psi)) + self.mutation_term(n - 1, psi)
        }
    }

    fn bpf_filt(&self, n: usize, psi: &[f64]) -> f64 {
        let inv_norm2 = self.ef.normalizer(n).powi(-2);
        self.var_under(self.ef.filter(n), psi)
            + inv_norm2 * self.bpf_pred(n, &self.weighted_centered(n, psi))
    }

    fn radix_pred(&self, n: usize, psi: &[f64], r: usize) -> f64 {
        if n == 0 {
            self.var_under(self.ef.predictor(0), psi)
        } else {
            // No mutation term: resampling error dominates at the log rate.
            self.radix_filt(n - 1, &self.f_apply(psi), r)
        }
    }

    fn radix_filt(&self, n: usize, psi: &[f64], r: usize) -> f64 {
        let factor = 1.0 - 1.0 / r as f64;
        let local = factor * self.var_under(self.ef.filter(n), psi);
        if n == 0 {
            // The initialization error enters at the faster sqrt(N) rate and
            // drops out of the n = 0 filter limit.
            local
        } else {
            let inv_norm2 = self.ef.normalizer(n).powi(-2);
            local + inv_norm2 * self.radix_pred(n, &self.weighted_centered(n, psi), r)
        }
    }

    fn mixed_pred(&self, n: usize, psi: &[f64], r: usize) -> f64 {
        if n == 0 {
            self.var_under(self.ef.predictor(0), psi)
        } else {
            self.mixed_filt(n - 1, &self.f_apply(psi), r) + self.mutation_term(n - 1, psi)
        }
    }

    fn mixed_filt(&self, n: usize, psi: &[f64], r: usize) -> f64 {
        let factor = 2.0 - 1.0 / r as f64;
        let inv_norm2 = self.ef.normalizer(n).powi(-2);
        factor * self.var_under(self.ef.filter(n), psi)
            + inv_norm2 * self.mixed_pred(n, &self.weighted_centered(n, psi), r)
    }
}

fn check(ef: &ExactFilter, t: usize) -> Result<(), VarianceError> {
    if t > ef.horizon() {
        return Err(VarianceError::HorizonTooLong { t, have: ef.horizon() });
    }
    Ok(())
}

/// Bootstrap variance recursion.
pub fn bpf_variance(
    ef: &ExactFilter,
    hmm: &FiniteHmm,
    phi: &[f64],
    t: usize,
) -> Result<VarianceSeries, VarianceError> {
    check(ef, t)?;
    let ctx = Ctx { ef, trans: hmm.trans() };
    Ok(VarianceSeries {
        flavor: Flavor::Bpf,
        sigma_pred: (0..=t).map(|n| ctx.bpf_pred(n, phi)).collect(),
        sigma_filt: (0..=t).map(|n| ctx.bpf_filt(n, phi)).collect(),
    })
}

/// Radix-r variance recursion; note the absent mutation term and the
/// `1 - 1/r` local factor.
pub fn radix_variance(
    ef: &ExactFilter,
    hmm: &FiniteHmm,
    phi: &[f64],
    t: usize,
    r: usize,
) -> Result<VarianceSeries, VarianceError> {
    if r < 2 {
        return Err(VarianceError::BadRadix(r));
    }
    check(ef, t)?;
    let ctx = Ctx { ef, trans: hmm.trans() };
    Ok(VarianceSeries {
        flavor: Flavor::Radix(r),
        sigma_pred: (0..=t).map(|n| ctx.radix_pred(n, phi, r)).collect(),
        sigma_filt: (0..=t).map(|n| ctx.radix_filt(n, phi, r)).collect(),
    })
}

/// Mixed radix-r variance recursion with the `2 - 1/r` local factor.
pub fn mixed_variance(
    ef: &ExactFilter,
    hmm: &FiniteHmm,
    phi: &[f64],
    t: usize,
    r: usize,
) -> Result<VarianceSeries, VarianceError> {
    if r < 2 {
        return Err(VarianceError::BadRadix(r));
    }
    check(ef, t)?;
    let ctx = Ctx { ef, trans: hmm.trans() };
    Ok(VarianceSeries {
        flavor: Flavor::Mixed(r),
        sigma_pred: (0..=t).map(|n| ctx.mixed_pred(n, phi, r)).collect(),
        sigma_filt: (0..=t).map(|n| ctx.mixed_filt(n, phi, r)).collect(),
    })
}

/// A variance value this close to zero marks the functional as degenerate
/// for CLT comparison purposes.
pub const DEGENERATE_TOL: f64 = 1e-14;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::{exact_filter, Emission, Obs};

    /// Model whose first observation yields weights proportional to (1, 3).
    fn spot_model() -> (FiniteHmm, Vec<Obs>) {
        let hmm = FiniteHmm::new(
            vec![0.5, 0.5],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            Emission::Finite { table: vec![vec![0.25, 0.75], vec![0.75, 0.25]] },
        )
        .unwrap();
        (hmm, vec![Obs::Discrete(0)])
    }

    #[test]
    fn spot_values_at_time_zero() {
        let (hmm, obs) = spot_model();
        let ef = exact_filter(&hmm, &obs).unwrap();
        let phi = [0.0, 1.0];

        let bpf = bpf_variance(&ef, &hmm, &phi, 0).unwrap();
        assert!((bpf.sigma_pred[0] - 0.25).abs() < 1e-15, "Bernoulli variance at pi0");
        assert!((bpf.sigma_filt[0] - 0.328125).abs() < 1e-15, "{}", bpf.sigma_filt[0]);

        let radix = radix_variance(&ef, &hmm, &phi, 0, 2).unwrap();
        assert!((radix.sigma_filt[0] - 0.09375).abs() < 1e-15, "{}", radix.sigma_filt[0]);

        let mixed = mixed_variance(&ef, &hmm, &phi, 0, 2).unwrap();
        assert!((mixed.sigma_filt[0] - 0.421875).abs() < 1e-15, "{}", mixed.sigma_filt[0]);
    }

    #[test]
    fn constant_phi_vanishes() {
        let hmm = FiniteHmm::binary_symmetric(0.3, 0.2).unwrap();
        let (_, obs) = hmm.simulate(6, 4);
        let ef = exact_filter(&hmm, &obs).unwrap();
        let phi = [2.0, 2.0];
        for series in [
            bpf_variance(&ef, &hmm, &phi, 6).unwrap(),
            radix_variance(&ef, &hmm, &phi, 6, 2).unwrap(),
            mixed_variance(&ef, &hmm, &phi, 6, 3).unwrap(),
        ] {
            assert!(series.sigma_pred.iter().all(|v| v.abs() < 1e-12));
            assert!(series.sigma_filt.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn huge_radix_approaches_plain_variance_term() {
        let (hmm, obs) = spot_model();
        let ef = exact_filter(&hmm, &obs).unwrap();
        let phi = [0.0, 1.0];
        let series = radix_variance(&ef, &hmm, &phi, 0, 1_000_000).unwrap();
        assert!((series.sigma_filt[0] - 0.1875).abs() < 1e-5);
    }

    #[test]
    fn bad_radix_rejected() {
        let (hmm, obs) = spot_model();
        let ef = exact_filter(&hmm, &obs).unwrap();
        assert_eq!(radix_variance(&ef, &hmm, &[0.0, 1.0], 0, 1).unwrap_err(), VarianceError::BadRadix(1));
        assert_eq!(mixed_variance(&ef, &hmm, &[0.0, 1.0], 0, 0).unwrap_err(), VarianceError::BadRadix(0));
    }

    #[test]
    fn ordering_invariants_on_random_models() {
        for seed in 0..40u64 {
            let p = 0.1 + 0.8 * ((seed % 7) as f64) / 7.0;
            let q = 0.1 + 0.7 * ((seed % 5) as f64) / 5.0;
            let hmm = FiniteHmm::binary_symmetric(p, q).unwrap();
            let (_, obs) = hmm.simulate(10, seed);
            let ef = exact_filter(&hmm, &obs).unwrap();
            let phi = [0.0, 1.0];
            let r = 2 + (seed % 3) as usize;
            let bpf = bpf_variance(&ef, &hmm, &phi, 10).unwrap();
            let radix = radix_variance(&ef, &hmm, &phi, 10, r).unwrap();
            let mixed = mixed_variance(&ef, &hmm, &phi, 10, r).unwrap();
            let cap = 2.0 - 1.0 / r as f64;
            for n in 0..=10usize {
                let tol = 1e-12;
                assert!(radix.sigma_pred[n] <= bpf.sigma_pred[n] + tol, "seed {seed} n {n}");
                assert!(radix.sigma_filt[n] <= bpf.sigma_filt[n] + tol, "seed {seed} n {n}");
                assert!(bpf.sigma_pred[n] <= mixed.sigma_pred[n] + tol, "seed {seed} n {n}");
                assert!(mixed.sigma_pred[n] <= cap * bpf.sigma_pred[n] + tol, "seed {seed} n {n}");
                assert!(bpf.sigma_filt[n] <= mixed.sigma_filt[n] + tol, "seed {seed} n {n}");
                assert!(mixed.sigma_filt[n] <= cap * bpf.sigma_filt[n] + tol, "seed {seed} n {n}");
            }
            // Ratio of filtered variances stays inside [1, 2 - 1/r].
            for n in 0..=10usize {
                if bpf.sigma_filt[n] > 1e-12 {
                    let ratio = mixed.sigma_filt[n] / bpf.sigma_filt[n];
                    assert!((1.0 - 1e-9..=cap + 1e-9).contains(&ratio), "ratio {ratio}");
                }
            }
        }
    }
}
