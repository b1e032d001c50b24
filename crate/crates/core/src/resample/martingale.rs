//! Block-wise martingale decomposition diagnostics.
//!
//! For a resampling trace, a depth `d`, an equal-size partition of `[N]`
//! and a choice of one representative per block, the scaled increments
//! `X_rho` telescope exactly, per realization, to
//!
//! `(N^{-1} sum g)(|I|^{-1} sum_u phi(xi_out^{J(u)})) - N^{-1} sum g phi`.
//!
//! This module evaluates the increments, the identity's two sides, and the
//! per-increment bounds, in doubles.

use std::collections::BTreeMap;

use crate::graph::Partition;
use crate::resample::{ResampleError, ResampleTrace};
use crate::schedule::{rat_f64, Schedule};

/// Increments and derived quantities of one realization.
#[derive(Debug, Clone)]
pub struct MartingaleTrace {
    pub d: usize,
    /// `S_{N,m,d} = ((m-d)/N + 1/|I|)^{-1/2}`.
    pub scale: f64,
    /// `X_rho` for `rho = 1..=(m-d)N + |I|`.
    pub increments: Vec<f64>,
    /// `S^{-1} sum_rho X_rho`.
    pub telescoped: f64,
    /// Right side of the identity, computed directly from the realization.
    pub direct: f64,
    /// Number of stage increments `(m-d) N`; the rest are block increments.
    pub n_stage_increments: usize,
    pub stage_len: usize,
    pub block_count: usize,
}

impl MartingaleTrace {
    /// Largest violation of the per-increment bound, as a multiple of the
    /// bound itself (<= 1 + eps when the bound holds).
    pub fn bound_ratio(&self, g_sup: f64, phi_osc: f64) -> f64 {
        let n = self.n_stage_increments;
        let mut worst: f64 = 0.0;
        for (idx, x) in self.increments.iter().enumerate() {
            let denom = if idx < n {
                self.scale * g_sup * phi_osc / self.stage_len as f64
            } else {
                self.scale * g_sup * phi_osc / self.block_count as f64
            };
            if denom > 0.0 {
                worst = worst.max(x.abs() / denom);
            }
        }
        worst
    }
}

/// Structural admissibility of `(schedule, partition, d)`: equal block
/// sizes `N/|I| >= d` tiling `[N]`, and identical tail-product rows within
/// every block. The conditional-independence part is a theorem for the
/// built-in families and is exercised by the exact-enumeration tests.
pub fn validate_partition(
    s: &Schedule,
    part: &Partition,
    j_choice: &[usize],
) -> Result<(), ResampleError> {
    let n = s.n_particles();
    let m = s.n_stages();
    let d = part.d;
    let bad = |reason: String| ResampleError::BadPartition { d, reason };
    if d < 1 || d > m {
        return Err(bad(format!("depth must lie in 1..={m}")));
    }
    let blocks = part.block_count();
    if blocks == 0 || n % blocks != 0 {
        return Err(bad(format!("{blocks} blocks cannot tile {n} indices")));
    }
    let size = n / blocks;
    if size < d {
        return Err(bad(format!("block size {size} is below depth {d}")));
    }
    let mut seen = vec![false; n];
    for b in &part.blocks {
        if b.len() != size {
            return Err(bad("unequal block sizes".into()));
        }
        for &i in b.iter() {
            if i >= n || seen[i] {
                return Err(bad(format!("index {i} repeated or out of range")));
            }
            seen[i] = true;
        }
    }
    if j_choice.len() != blocks {
        return Err(bad("choice function must pick one index per block".into()));
    }
    for (u, b) in part.blocks.iter().enumerate() {
        if !b.contains(j_choice[u]) {
            return Err(bad(format!("representative {} not in block {u}", j_choice[u])));
        }
    }
    // Tail-product rows must agree within each block.
    for b in &part.blocks {
        let first = b.as_slice()[0];
        let row0 = s.tail_product_row_rational(m - d + 1, m, first);
        for &i in b.iter().skip(1) {
            if s.tail_product_row_rational(m - d + 1, m, i) != row0 {
                return Err(bad(format!("tail rows differ inside block containing {i}")));
            }
        }
    }
    Ok(())
}

/// Evaluate the martingale increments of a realization.
///
/// `g_in` and `phi_in` are the weight and test function evaluated on the
/// input particles; intermediate values are looked up through the trace's
/// ancestor table.
pub fn martingale_increments(
    trace: &ResampleTrace,
    s: &Schedule,
    part: &Partition,
    j_choice: &[usize],
    g_in: &[f64],
    phi_in: &[f64],
) -> Result<MartingaleTrace, ResampleError> {
    validate_partition(s, part, j_choice)?;
    let n = s.n_particles();
    let m = s.n_stages();
    let d = part.d;
    assert_eq!(g_in.len(), n);
    assert_eq!(phi_in.len(), n);

    let g_sum: f64 = g_in.iter().sum();
    let gphi_sum: f64 = g_in.iter().zip(phi_in).map(|(g, p)| g * p).sum();
    let phi_hat = gphi_sum / g_sum;
    let phi_bar: Vec<f64> = phi_in.iter().map(|p| p - phi_hat).collect();

    let blocks = part.block_count();
    let scale = ((m - d) as f64 / n as f64 + 1.0 / blocks as f64).powf(-0.5);

    let mut increments = Vec::with_capacity((m - d) * n + blocks);
    // Stage increments: one-step centered terms for stages 1..=m-d.
    for q in 1..=(m - d) {
        let w = rat_f64(&s.row_weight(q));
        for i in 0..n {
            let own = trace.v[q][i] * phi_bar[trace.ancestors[q][i]];
            let pred: f64 = s
                .row_support(q, i)
                .iter()
                .map(|j| w * trace.v[q - 1][j] * phi_bar[trace.ancestors[q - 1][j]])
                .sum();
            increments.push(scale / n as f64 * (own - pred));
        }
    }
    // Block increments: centered against the d-stage tail-product predictor.
    for &i in j_choice {
        let tail: BTreeMap<usize, f64> = s
            .tail_product_row_rational(m - d + 1, m, i)
            .into_iter()
            .map(|(j, wj)| (j, rat_f64(&wj)))
            .collect();
        let own = trace.v[m][i] * phi_bar[trace.ancestors[m][i]];
        let pred: f64 = tail
            .iter()
            .map(|(&j, &wj)| wj * trace.v[m - d][j] * phi_bar[trace.ancestors[m - d][j]])
            .sum();
        increments.push(scale / blocks as f64 * (own - pred));
    }

    let telescoped = increments.iter().sum::<f64>() / scale;
    let block_mean = j_choice
        .iter()
        .map(|&i| phi_in[trace.ancestors[m][i]])
        .sum::<f64>()
        / blocks as f64;
    let direct = (g_sum / n as f64) * block_mean - gphi_sum / n as f64;

    Ok(MartingaleTrace {
        d,
        scale,
        increments,
        telescoped,
        direct,
        n_stage_increments: (m - d) * n,
        stage_len: n,
        block_count: blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_partition;
    use crate::parallel::Parallelism;
    use crate::resample::resample_trace;
    use crate::rng::{SplitMix64, StreamCtx};
    use crate::schedule::Schedule;

    fn random_weights(n: usize, rng: &mut SplitMix64) -> Vec<f64> {
        (0..n).map(|_| rng.next_range(0.2, 3.0)).collect()
    }

    #[test]
    fn constant_phi_gives_zero_increments() {
        let s = Schedule::radix(2, 2).unwrap();
        let g = [1.0, 2.0, 3.0, 4.0];
        let trace = resample_trace(&g, &s, &StreamCtx::new(1, 0, 0), Parallelism::Sequential).unwrap();
        let part = build_partition(&s, 2).unwrap();
        let j = part.representatives();
        let mt = martingale_increments(&trace, &s, &part, &j, &g, &[7.0; 4]).unwrap();
        assert!(mt.increments.iter().all(|x| x.abs() < 1e-14));
        assert!(mt.telescoped.abs() < 1e-14 && mt.direct.abs() < 1e-14);
    }

    #[test]
    fn singleton_partition_reduces_to_population_error() {
        // d=1 with singleton blocks: the identity's right side is the
        // one-step lack-of-bias quantity over the full population.
        let s = Schedule::mixed_radix(2, 4).unwrap();
        let mut rng = SplitMix64::new(88);
        let g = random_weights(8, &mut rng);
        let phi: Vec<f64> = (0..8).map(|x| x as f64).collect();
        let trace = resample_trace(&g, &s, &StreamCtx::new(4, 1, 0), Parallelism::Sequential).unwrap();
        let part = Partition::singletons(8);
        let j = part.representatives();
        let mt = martingale_increments(&trace, &s, &part, &j, &g, &phi).unwrap();
        let g_mean = g.iter().sum::<f64>() / 8.0;
        let out_mean =
            trace.output_ancestors().iter().map(|&a| phi[a]).sum::<f64>() / 8.0;
        let gphi_mean = g.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>() / 8.0;
        assert!((mt.direct - (g_mean * out_mean - gphi_mean)).abs() < 1e-14);
        assert!((mt.telescoped - mt.direct).abs() < 1e-12);
    }

    #[test]
    fn telescoping_identity_holds_across_depths() {
        let mut rng = SplitMix64::new(1234);
        for (s, depths) in [
            (Schedule::radix(2, 3).unwrap(), vec![1, 2, 3]),
            (Schedule::mixed_radix(2, 4).unwrap(), vec![1, 2]),
        ] {
            let n = s.n_particles();
            for rep in 0..50u64 {
                let g = random_weights(n, &mut rng);
                let phi: Vec<f64> = (0..n).map(|_| rng.next_range(-1.0, 2.0)).collect();
                let trace =
                    resample_trace(&g, &s, &StreamCtx::new(9, rep, 0), Parallelism::Sequential)
                        .unwrap();
                for &d in &depths {
                    let part = build_partition(&s, d).unwrap();
                    let j = part.representatives();
                    let mt = martingale_increments(&trace, &s, &part, &j, &g, &phi).unwrap();
                    assert!(
                        (mt.telescoped - mt.direct).abs() < 1e-10,
                        "{:?} d={d}: {} vs {}",
                        s.family(),
                        mt.telescoped,
                        mt.direct
                    );
                    let g_sup = g.iter().cloned().fold(0.0, f64::max);
                    let osc = phi.iter().cloned().fold(f64::MIN, f64::max)
                        - phi.iter().cloned().fold(f64::MAX, f64::min);
                    assert!(mt.bound_ratio(g_sup, osc) <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn partition_validation_errors() {
        let s = Schedule::radix(2, 2).unwrap();
        let g = [1.0, 1.0, 1.0, 1.0];
        let trace = resample_trace(&g, &s, &StreamCtx::new(0, 0, 0), Parallelism::Sequential).unwrap();
        // Wrong block count for the choice function.
        let part = build_partition(&s, 2).unwrap();
        let err = martingale_increments(&trace, &s, &part, &[0], &g, &g);
        assert!(matches!(err, Err(ResampleError::BadPartition { .. })));
        // Representative outside its block.
        let j = vec![1, 0];
        let err = martingale_increments(&trace, &s, &part, &j, &g, &g);
        assert!(matches!(err, Err(ResampleError::BadPartition { .. })));
        // At d=1 the tail product is A_2, whose rows differ across classes,
        // so contiguous pairs are not admissible blocks.
        let bad = Partition {
            d: 1,
            blocks: vec![
                crate::graph::IndexSet::from_sorted(vec![0, 1]),
                crate::graph::IndexSet::from_sorted(vec![2, 3]),
            ],
        };
        let err = martingale_increments(&trace, &s, &bad, &[0, 2], &g, &g);
        assert!(matches!(err, Err(ResampleError::BadPartition { .. })));
    }
}
