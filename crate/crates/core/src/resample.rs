//! The augmented resampling engine: stage-wise locally aggregated weights
//! and the staged mixture sampler, plus exact-enumeration oracles and
//! martingale diagnostics in the submodules.
//!
//! Stage `k` first aggregates `V_k^i = sum_j A_k^{ij} V_{k-1}^j`, then draws
//! each `xi_k^i` from its row's mixture `A_k^{ij} V_{k-1}^j / V_k^i`,
//! conditionally independently across `i` given stage `k-1`. Because every
//! row of a stage is uniform on its equivalence class, the mixture reduces
//! to the `V_{k-1}`-weighted law on the class; the engine builds one prefix
//! sum per class and each index does a binary search on it. Draws are keyed
//! by `(seed, replicate, step, stage, index)`, so within-stage parallel
//! sampling is bit-identical to the sequential order.

pub mod exact;
pub mod martingale;

use thiserror::Error;

use crate::parallel::{self, Parallelism};
use crate::rng::{self, StreamCtx};
use crate::schedule::{Schedule, ScheduleError};

/// Smallest admissible total weight before we refuse to normalize.
pub const MIN_TOTAL_WEIGHT: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum ResampleError {
    #[error("particle {index} has non-positive or non-finite weight {weight}")]
    InvalidWeight { index: usize, weight: f64 },
    #[error("total weight {0} underflows")]
    WeightUnderflow(f64),
    #[error("particle count {got} does not match schedule population {want}")]
    SizeMismatch { got: usize, want: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("partition is not admissible at depth {d}: {reason}")]
    BadPartition { d: usize, reason: String },
}

/// A population of `N` particles together with their strictly positive
/// weights `g(value)`.
#[derive(Debug, Clone)]
pub struct ParticleSystem<P> {
    values: Vec<P>,
    weights: Vec<f64>,
}

impl<P> ParticleSystem<P> {
    /// Evaluate `g` on every value and validate strict positivity.
    pub fn new(values: Vec<P>, g: impl Fn(&P) -> f64) -> Result<Self, ResampleError> {
        let weights: Vec<f64> = values.iter().map(&g).collect();
        Self::from_weights(values, weights)
    }

    /// Pair values with already-evaluated weights.
    pub fn from_weights(values: Vec<P>, weights: Vec<f64>) -> Result<Self, ResampleError> {
        assert_eq!(values.len(), weights.len());
        let mut total = 0.0;
        for (index, &weight) in weights.iter().enumerate() {
            if !(weight > 0.0) || !weight.is_finite() {
                return Err(ResampleError::InvalidWeight { index, weight });
            }
            total += weight;
        }
        if total < MIN_TOTAL_WEIGHT {
            return Err(ResampleError::WeightUnderflow(total));
        }
        Ok(Self { values, weights })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[P] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Full record of one augmented resampling pass.
#[derive(Debug, Clone)]
pub struct ResampleTrace {
    /// `v[k][i] = V_k^i` for `k = 0..=m`.
    pub v: Vec<Vec<f64>>,
    /// `parents[k-1][i] = I_k^i`: the stage-(k-1) index each `xi_k^i`
    /// descends from, for `k = 1..=m`.
    pub parents: Vec<Vec<usize>>,
    /// `ancestors[k][i]`: input index that `xi_k^i` carries.
    pub ancestors: Vec<Vec<usize>>,
}

impl ResampleTrace {
    pub fn n_stages(&self) -> usize {
        self.parents.len()
    }

    pub fn n_particles(&self) -> usize {
        self.v[0].len()
    }

    /// Output assignment: level-0 ancestor of each output slot.
    pub fn output_ancestors(&self) -> &[usize] {
        self.ancestors.last().expect("at least the input stage")
    }
}

fn check_weights(weights: &[f64], s: &Schedule) -> Result<(), ResampleError> {
    if weights.len() != s.n_particles() {
        return Err(ResampleError::SizeMismatch { got: weights.len(), want: s.n_particles() });
    }
    let mut total = 0.0;
    for (index, &weight) in weights.iter().enumerate() {
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(ResampleError::InvalidWeight { index, weight });
        }
        total += weight;
    }
    if total < MIN_TOTAL_WEIGHT {
        return Err(ResampleError::WeightUnderflow(total));
    }
    Ok(())
}

/// The stage-wise weight table `V_k^i`, `k = 0..=m`.
///
/// Under the factorization assumption the last row is constant and equals
/// the input-weight mean.
pub fn v_table(weights: &[f64], s: &Schedule) -> Result<Vec<Vec<f64>>, ResampleError> {
    check_weights(weights, s)?;
    let n = s.n_particles();
    let mut v = Vec::with_capacity(s.n_stages() + 1);
    v.push(weights.to_vec());
    for k in 1..=s.n_stages() {
        let prev = v.last().expect("nonempty");
        let mut cur = vec![0.0; n];
        for cidx in 0..s.class_count(k) {
            let class = s.class(k, cidx);
            let sum: f64 = class.iter().map(|j| prev[j]).sum();
            let mean = sum / class.len as f64;
            for j in class.iter() {
                cur[j] = mean;
            }
        }
        v.push(cur);
    }
    Ok(v)
}

/// Reusable buffers for repeated resampling passes of one population size.
#[derive(Debug, Default)]
pub struct Workspace {
    v_prev: Vec<f64>,
    v_cur: Vec<f64>,
    anc_prev: Vec<usize>,
    anc_cur: Vec<usize>,
    /// Per-class prefix sums, classes laid out contiguously.
    cum: Vec<f64>,
    class_total: Vec<f64>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    fn reset(&mut self, n: usize) {
        self.v_prev.clear();
        self.v_cur.resize(n, 0.0);
        self.anc_prev.clear();
        self.anc_prev.extend(0..n);
        self.anc_cur.resize(n, 0);
        self.cum.resize(n, 0.0);
    }

    /// One full pass; returns the output assignment (level-0 ancestor per
    /// output slot). `ctx.step` identifies the filter step; draws use the
    /// resampling phase tag.
    pub fn run(
        &mut self,
        weights: &[f64],
        s: &Schedule,
        ctx: &StreamCtx,
        mode: Parallelism,
    ) -> Result<&[usize], ResampleError> {
        check_weights(weights, s)?;
        let n = s.n_particles();
        self.reset(n);
        self.v_prev.extend_from_slice(weights);
        for k in 1..=s.n_stages() {
            self.stage(s, k, ctx, mode, None);
            std::mem::swap(&mut self.v_prev, &mut self.v_cur);
            std::mem::swap(&mut self.anc_prev, &mut self.anc_cur);
        }
        Ok(&self.anc_prev)
    }

    /// Advance one stage: build class prefix sums of `v_prev`, then draw
    /// every index's parent and propagate ancestors.
    fn stage(
        &mut self,
        s: &Schedule,
        k: usize,
        ctx: &StreamCtx,
        mode: Parallelism,
        mut parents_out: Option<&mut Vec<usize>>,
    ) {
        let n_classes = s.class_count(k);
        let class_len = s.row_nnz(k);
        self.class_total.resize(n_classes, 0.0);
        for cidx in 0..n_classes {
            let class = s.class(k, cidx);
            let base = cidx * class_len;
            let mut acc = 0.0;
            for (t, j) in class.iter().enumerate() {
                acc += self.v_prev[j];
                self.cum[base + t] = acc;
            }
            self.class_total[cidx] = acc;
            let mean = acc / class_len as f64;
            for j in class.iter() {
                self.v_cur[j] = mean;
            }
        }

        let anc_prev = &self.anc_prev;
        let cum = &self.cum;
        let class_total = &self.class_total;
        let draw = |i: usize| -> (usize, usize) {
            let cidx = s.class_of(k, i);
            let base = cidx * class_len;
            let u = ctx.unit(rng::TAG_RESAMPLE, k as u64, i as u64) * class_total[cidx];
            // First cumulative bucket with u <= cum: ties resolve to the
            // lowest index. The class progression is increasing.
            let slice = &cum[base..base + class_len];
            let mut lo = 0usize;
            let mut hi = class_len - 1;
            while lo < hi {
                let mid = (lo + hi) / 2;
                if u <= slice[mid] {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            let parent = s.class(k, cidx).member(lo);
            (parent, anc_prev[parent])
        };

        match parents_out.as_deref_mut() {
            None => {
                let anc_cur = &mut self.anc_cur;
                parallel::fill_indexed(mode, anc_cur, |i| draw(i).1);
            }
            Some(parents) => {
                parents.resize(s.n_particles(), 0);
                // Trace mode: record both the parent index and the ancestor.
                let pairs = parallel::map_indexed(mode, s.n_particles(), draw);
                for (i, (p, a)) in pairs.into_iter().enumerate() {
                    parents[i] = p;
                    self.anc_cur[i] = a;
                }
            }
        }
    }
}

/// Run augmented resampling and return the output population together with
/// the full trace (V table and ancestral indices).
pub fn augmented_resample<P: Clone>(
    ps: &ParticleSystem<P>,
    s: &Schedule,
    ctx: &StreamCtx,
    mode: Parallelism,
) -> Result<(ParticleSystem<P>, ResampleTrace), ResampleError> {
    let trace = resample_trace(ps.weights(), s, ctx, mode)?;
    let out = trace.output_ancestors();
    let values: Vec<P> = out.iter().map(|&a| ps.values[a].clone()).collect();
    let weights: Vec<f64> = out.iter().map(|&a| ps.weights[a]).collect();
    let out_ps = ParticleSystem { values, weights };
    Ok((out_ps, trace))
}

/// Trace-producing pass over raw weights.
pub fn resample_trace(
    weights: &[f64],
    s: &Schedule,
    ctx: &StreamCtx,
    mode: Parallelism,
) -> Result<ResampleTrace, ResampleError> {
    check_weights(weights, s)?;
    let n = s.n_particles();
    let mut ws = Workspace::new();
    ws.reset(n);
    ws.v_prev.extend_from_slice(weights);

    let mut v = vec![weights.to_vec()];
    let mut parents = Vec::with_capacity(s.n_stages());
    let mut ancestors = vec![(0..n).collect::<Vec<usize>>()];
    for k in 1..=s.n_stages() {
        let mut stage_parents = Vec::new();
        ws.stage(s, k, ctx, mode, Some(&mut stage_parents));
        v.push(ws.v_cur.clone());
        ancestors.push(ws.anc_cur.clone());
        parents.push(stage_parents);
        std::mem::swap(&mut ws.v_prev, &mut ws.v_cur);
        std::mem::swap(&mut ws.anc_prev, &mut ws.anc_cur);
    }
    Ok(ResampleTrace { v, parents, ancestors })
}

/// Exact lack-of-bias comparison by Monte Carlo: replicate mean of
/// `N^{-1} sum_i phi(xi_out^i)` against `sum g phi / sum g`.
///
/// Returns `(lhs_mean, rhs, standard_error)`.
pub fn lack_of_bias_mc(
    weights: &[f64],
    phi: &[f64],
    s: &Schedule,
    seed: u64,
    replicates: usize,
    mode: Parallelism,
) -> Result<(f64, f64, f64), ResampleError> {
    check_weights(weights, s)?;
    let n = s.n_particles();
    assert_eq!(phi.len(), n);
    let means = parallel::map_indexed(mode, replicates, |rep| {
        let mut ws = Workspace::new();
        let ctx = StreamCtx::new(seed, rep as u64, 0);
        let out = ws.run(weights, s, &ctx, Parallelism::Sequential).expect("validated");
        out.iter().map(|&a| phi[a]).sum::<f64>() / n as f64
    });
    let mean = crate::harness::stats::pairwise_sum(&means) / replicates as f64;
    let var = means.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / replicates as f64;
    let se = (var / replicates as f64).sqrt();
    let rhs = weights.iter().zip(phi).map(|(g, p)| g * p).sum::<f64>() / weights.iter().sum::<f64>();
    Ok((mean, rhs, se))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(seed: u64) -> StreamCtx {
        StreamCtx::new(seed, 0, 0)
    }

    #[test]
    fn v_table_examples() {
        // Row average for a single uniform stage.
        let s = Schedule::multinomial(2).unwrap();
        let v = v_table(&[1.0, 3.0], &s).unwrap();
        assert_eq!(v[1], vec![2.0, 2.0]);

        // Hand-evaluated recursion on the r=2, m=2 stages.
        let s = Schedule::radix(2, 2).unwrap();
        let v = v_table(&[1.0, 2.0, 3.0, 4.0], &s).unwrap();
        assert_eq!(v[1], vec![1.5, 1.5, 3.5, 3.5]);
        assert_eq!(v[2], vec![2.5, 2.5, 2.5, 2.5]);
    }

    #[test]
    fn v_table_constant_weights_stay_constant() {
        for s in [
            Schedule::radix(2, 3).unwrap(),
            Schedule::mixed_radix(3, 4).unwrap(),
            Schedule::multinomial(7).unwrap(),
        ] {
            let v = v_table(&vec![2.5; s.n_particles()], &s).unwrap();
            for row in &v {
                assert!(row.iter().all(|&x| (x - 2.5).abs() < 1e-15));
            }
        }
    }

    #[test]
    fn v_final_row_is_input_mean() {
        let s = Schedule::mixed_radix(2, 4).unwrap();
        let w: Vec<f64> = (1..=8).map(|x| x as f64).collect();
        let v = v_table(&w, &s).unwrap();
        let mean = w.iter().sum::<f64>() / 8.0;
        for &x in &v[2] {
            assert!((x - mean).abs() < 1e-12);
        }
        // V_k <= sup g along the way.
        let sup = 8.0;
        for row in &v {
            assert!(row.iter().all(|&x| x <= sup + 1e-12));
        }
    }

    #[test]
    fn weight_validation() {
        let s = Schedule::multinomial(2).unwrap();
        assert!(matches!(
            v_table(&[1.0, 0.0], &s),
            Err(ResampleError::InvalidWeight { index: 1, .. })
        ));
        assert!(matches!(
            v_table(&[1.0, -2.0], &s),
            Err(ResampleError::InvalidWeight { .. })
        ));
        assert!(matches!(
            v_table(&[1e-308, 1e-310], &s),
            Err(ResampleError::WeightUnderflow(_))
        ));
        assert!(matches!(v_table(&[1.0; 3], &s), Err(ResampleError::SizeMismatch { .. })));
        assert!(ParticleSystem::new(vec![1.0f64, -1.0], |x| x.abs()).is_ok());
        assert!(ParticleSystem::new(vec![1.0f64, 0.0], |x| *x).is_err());
    }

    #[test]
    fn single_particle_multinomial_is_identity() {
        let s = Schedule::multinomial(1).unwrap();
        let ps = ParticleSystem::new(vec![42usize], |_| 1.0).unwrap();
        let (out, trace) = augmented_resample(&ps, &s, &ctx(9), Parallelism::Sequential).unwrap();
        assert_eq!(out.values(), &[42]);
        assert_eq!(trace.output_ancestors(), &[0]);
    }

    #[test]
    fn trace_is_consistent() {
        let s = Schedule::radix(2, 3).unwrap();
        let w: Vec<f64> = (1..=8).map(|x| x as f64).collect();
        let trace = resample_trace(&w, &s, &ctx(11), Parallelism::Sequential).unwrap();
        assert_eq!(trace.n_stages(), 3);
        for k in 1..=3 {
            for i in 0..8 {
                let p = trace.parents[k - 1][i];
                // Parent must lie in the stage row support.
                assert!(s.row_support(k, i).contains(p));
                assert_eq!(trace.ancestors[k][i], trace.ancestors[k - 1][p]);
            }
        }
        assert_eq!(trace.v, v_table(&w, &s).unwrap());
    }

    #[test]
    fn sequential_and_parallel_draws_agree() {
        let s = Schedule::radix(2, 4).unwrap();
        let w: Vec<f64> = (0..16).map(|x| 1.0 + (x as f64) * 0.37).collect();
        let t_seq = resample_trace(&w, &s, &ctx(5), Parallelism::Sequential).unwrap();
        let t_par = resample_trace(&w, &s, &ctx(5), Parallelism::default()).unwrap();
        assert_eq!(t_seq.parents, t_par.parents);
        assert_eq!(t_seq.ancestors, t_par.ancestors);

        let mut ws = Workspace::new();
        let lean = ws.run(&w, &s, &ctx(5), Parallelism::default()).unwrap();
        assert_eq!(lean, t_seq.output_ancestors());
    }

    #[test]
    fn multinomial_marginals_follow_weighted_law() {
        // Chi-squared-ish sanity at loose tolerance.
        let s = Schedule::multinomial(4).unwrap();
        let w = [1.0, 2.0, 3.0, 4.0];
        let reps = 40_000usize;
        let mut counts = [0usize; 4];
        let mut ws = Workspace::new();
        for rep in 0..reps {
            let out = ws.run(&w, &s, &StreamCtx::new(3, rep as u64, 0), Parallelism::Sequential).unwrap();
            counts[out[0]] += 1;
        }
        for j in 0..4 {
            let p = w[j] / 10.0;
            let got = counts[j] as f64 / reps as f64;
            assert!((got - p).abs() < 4.0 * (p * (1.0 - p) / reps as f64).sqrt() + 1e-3);
        }
    }

    #[test]
    fn lack_of_bias_mc_runs() {
        let s = Schedule::radix(2, 3).unwrap();
        let w: Vec<f64> = (1..=8).map(|x| x as f64).collect();
        let phi: Vec<f64> = (0..8).map(|x| x as f64).collect();
        let (lhs, rhs, se) = lack_of_bias_mc(&w, &phi, &s, 17, 4000, Parallelism::default()).unwrap();
        assert!((lhs - rhs).abs() <= 4.0 * se, "lhs={lhs} rhs={rhs} se={se}");
    }
}
