//! The particle filter: mutation through the transition kernel wired to
//! augmented resampling, with online functional evaluation.
//!
//! A run is a pure function of `(model, observations, schedule, seed,
//! replicate)`. Initialization, mutation and every resampling stage draw
//! through per-index substreams, so index-parallel execution reproduces the
//! sequential stream exactly.

use thiserror::Error;

use crate::graph::Partition;
use crate::hmm::{sample_categorical, FiniteHmm, HmmError, Obs};
use crate::parallel::{self, Parallelism};
use crate::resample::{ResampleError, Workspace};
use crate::rng::{self, StreamCtx};
use crate::schedule::Schedule;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error(transparent)]
    Hmm(#[from] HmmError),
    #[error(transparent)]
    Resample(#[from] ResampleError),
    #[error("horizon {t} needs {want} observations, got {got}")]
    NotEnoughObservations { t: usize, want: usize, got: usize },
}

/// Block-average recording: depth `d` with the lowest-index representative
/// of each partition block.
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub partition: Partition,
}

/// Run options; functionals are state vectors registered up front and
/// evaluated online.
#[derive(Debug, Clone)]
pub struct FilterOptions {
    pub functionals: Vec<Vec<f64>>,
    pub block: Option<BlockSpec>,
    pub keep_particles: bool,
    pub mode: Parallelism,
}

impl FilterOptions {
    pub fn new(functionals: Vec<Vec<f64>>) -> Self {
        FilterOptions { functionals, block: None, keep_particles: false, mode: Parallelism::default() }
    }
}

/// Everything recorded from one filter run.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub seed: u64,
    pub replicate: u64,
    /// `pred[n][f]`: empirical predictor functional before resampling.
    pub pred: Vec<Vec<f64>>,
    /// `filt[n][f]`: empirical filter functional after resampling.
    pub filt: Vec<Vec<f64>>,
    /// Post-resampling block averages per functional, when requested.
    pub block_filt: Option<Vec<Vec<f64>>>,
    /// Final-step post-resampling particles, when requested.
    pub final_particles: Option<Vec<usize>>,
}

fn functional_mean(particles: &[usize], phi: &[f64]) -> f64 {
    particles.iter().map(|&x| phi[x]).sum::<f64>() / particles.len() as f64
}

/// Mean of `phi` over one designated representative per partition block.
pub fn block_functional(particles: &[usize], part: &Partition, j_choice: &[usize], phi: &[f64]) -> f64 {
    debug_assert_eq!(j_choice.len(), part.block_count());
    debug_assert!(j_choice.iter().enumerate().all(|(u, &i)| part.blocks[u].contains(i)));
    let sum: f64 = j_choice.iter().map(|&i| phi[particles[i]]).sum();
    sum / j_choice.len() as f64
}

/// Run the particle filter for steps `0..=t_max`.
pub fn run_filter(
    hmm: &FiniteHmm,
    observations: &[Obs],
    s: &Schedule,
    t_max: usize,
    opts: &FilterOptions,
    seed: u64,
    replicate: u64,
) -> Result<FilterRun, FilterError> {
    if observations.len() < t_max + 1 {
        return Err(FilterError::NotEnoughObservations {
            t: t_max,
            want: t_max + 1,
            got: observations.len(),
        });
    }
    let n = s.n_particles();
    let pi0 = hmm.pi0();
    let trans = hmm.trans();

    // Initialization: iid draws from pi0.
    let ctx0 = StreamCtx::new(seed, replicate, 0);
    let mut particles: Vec<usize> = vec![0; n];
    parallel::fill_indexed(opts.mode, &mut particles, |i| {
        sample_categorical(pi0, ctx0.unit(rng::TAG_INIT, 0, i as u64))
    });

    let mut ws = Workspace::new();
    let mut weights = vec![0.0f64; n];
    let mut pred = Vec::with_capacity(t_max + 1);
    let mut filt = Vec::with_capacity(t_max + 1);
    let mut block_filt = opts.block.as_ref().map(|_| Vec::with_capacity(t_max + 1));
    let block_reps: Option<Vec<usize>> =
        opts.block.as_ref().map(|b| b.partition.representatives());

    for step in 0..=t_max {
        let ctx = StreamCtx::new(seed, replicate, step as u64);
        if step > 0 {
            // Mutation: one categorical draw per index from its transition row.
            let prev = std::mem::take(&mut particles);
            particles = parallel::map_indexed(opts.mode, n, |i| {
                sample_categorical(&trans[prev[i]], ctx.unit(rng::TAG_MUTATE, 0, i as u64))
            });
        }
        pred.push(opts.functionals.iter().map(|phi| functional_mean(&particles, phi)).collect());

        let g = hmm.weight_vector(&observations[step])?;
        for (w, &x) in weights.iter_mut().zip(&particles) {
            *w = g[x];
        }
        let out = ws.run(&weights, s, &ctx, opts.mode)?;
        let prev = particles;
        particles = out.iter().map(|&a| prev[a]).collect();

        filt.push(opts.functionals.iter().map(|phi| functional_mean(&particles, phi)).collect());
        if let (Some(bf), Some(reps), Some(spec)) =
            (block_filt.as_mut(), block_reps.as_ref(), opts.block.as_ref())
        {
            bf.push(
                opts.functionals
                    .iter()
                    .map(|phi| block_functional(&particles, &spec.partition, reps, phi))
                    .collect(),
            );
        }
    }

    Ok(FilterRun {
        seed,
        replicate,
        pred,
        filt,
        block_filt,
        final_particles: opts.keep_particles.then_some(particles),
    })
}

/// Reference bootstrap filter: the resampling step draws each slot iid
/// from the weighted empirical law, on its own substream phase. Used to
/// check that the multinomial schedule reproduces the bootstrap filter in
/// distribution.
pub fn run_filter_direct_bpf(
    hmm: &FiniteHmm,
    observations: &[Obs],
    n: usize,
    t_max: usize,
    opts: &FilterOptions,
    seed: u64,
    replicate: u64,
) -> Result<FilterRun, FilterError> {
    if observations.len() < t_max + 1 {
        return Err(FilterError::NotEnoughObservations {
            t: t_max,
            want: t_max + 1,
            got: observations.len(),
        });
    }
    let pi0 = hmm.pi0();
    let trans = hmm.trans();
    let ctx0 = StreamCtx::new(seed, replicate, 0);
    let mut particles: Vec<usize> = vec![0; n];
    parallel::fill_indexed(opts.mode, &mut particles, |i| {
        sample_categorical(pi0, ctx0.unit(rng::TAG_INIT, 0, i as u64))
    });

    let mut pred = Vec::with_capacity(t_max + 1);
    let mut filt = Vec::with_capacity(t_max + 1);
    for step in 0..=t_max {
        let ctx = StreamCtx::new(seed, replicate, step as u64);
        if step > 0 {
            let prev = std::mem::take(&mut particles);
            particles = parallel::map_indexed(opts.mode, n, |i| {
                sample_categorical(&trans[prev[i]], ctx.unit(rng::TAG_MUTATE, 0, i as u64))
            });
        }
        pred.push(opts.functionals.iter().map(|phi| functional_mean(&particles, phi)).collect());

        let g = hmm.weight_vector(&observations[step])?;
        let cum: Vec<f64> = {
            let mut acc = 0.0;
            particles
                .iter()
                .map(|&x| {
                    acc += g[x];
                    acc
                })
                .collect()
        };
        let total = *cum.last().expect("nonempty");
        let prev = particles;
        particles = parallel::map_indexed(opts.mode, n, |i| {
            let u = ctx.unit(rng::TAG_DIRECT_MULTINOMIAL, 0, i as u64) * total;
            let pos = cum.partition_point(|&c| c < u);
            prev[pos.min(n - 1)]
        });
        filt.push(opts.functionals.iter().map(|phi| functional_mean(&particles, phi)).collect());
    }
    Ok(FilterRun { seed, replicate, pred, filt, block_filt: None, final_particles: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_partition;
    use crate::hmm::{exact_filter, Emission};

    fn indicator(s: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; s];
        v[k] = 1.0;
        v
    }

    #[test]
    fn deterministic_model_is_exact() {
        // Point-mass initial law, identity transition: every functional is
        // phi(x0) exactly at every step.
        let hmm = FiniteHmm::new(
            vec![0.0, 1.0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            Emission::Finite { table: vec![vec![0.5, 0.5], vec![0.4, 0.6]] },
        )
        .unwrap();
        let (_, obs) = hmm.simulate(4, 9);
        let s = Schedule::radix(2, 3).unwrap();
        let opts = FilterOptions::new(vec![indicator(2, 1)]);
        let run = run_filter(&hmm, &obs, &s, 4, &opts, 5, 0).unwrap();
        for n in 0..=4 {
            assert_eq!(run.pred[n][0], 1.0);
            assert_eq!(run.filt[n][0], 1.0);
        }
    }

    #[test]
    fn single_particle_multinomial_tracks_one_trajectory() {
        let hmm = FiniteHmm::binary_symmetric(0.3, 0.2).unwrap();
        let (_, obs) = hmm.simulate(5, 11);
        let s = Schedule::multinomial(1).unwrap();
        let opts = FilterOptions::new(vec![indicator(2, 0), indicator(2, 1)]);
        let run = run_filter(&hmm, &obs, &s, 5, &opts, 3, 0).unwrap();
        for n in 0..=5 {
            // With one particle the functionals are indicators of its state.
            assert_eq!(run.pred[n][0] + run.pred[n][1], 1.0);
            assert!(run.pred[n].iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn normalization_invariant() {
        let hmm = FiniteHmm::binary_symmetric(0.25, 0.15).unwrap();
        let (_, obs) = hmm.simulate(5, 21);
        let s = Schedule::mixed_radix(2, 8).unwrap();
        let opts = FilterOptions::new(vec![vec![1.0, 1.0]]);
        let run = run_filter(&hmm, &obs, &s, 5, &opts, 7, 3).unwrap();
        for n in 0..=5 {
            assert_eq!(run.pred[n][0], 1.0);
            assert_eq!(run.filt[n][0], 1.0);
        }
    }

    #[test]
    fn seeded_runs_are_identical_and_parallel_matches_serial() {
        let hmm = FiniteHmm::binary_symmetric(0.3, 0.2).unwrap();
        let (_, obs) = hmm.simulate(6, 2);
        let s = Schedule::radix(2, 5).unwrap();
        let mut opts = FilterOptions::new(vec![indicator(2, 1)]);
        opts.keep_particles = true;
        let a = run_filter(&hmm, &obs, &s, 6, &opts, 42, 7).unwrap();
        let b = run_filter(&hmm, &obs, &s, 6, &opts, 42, 7).unwrap();
        assert_eq!(a.pred, b.pred);
        assert_eq!(a.filt, b.filt);
        assert_eq!(a.final_particles, b.final_particles);

        opts.mode = Parallelism::Sequential;
        let c = run_filter(&hmm, &obs, &s, 6, &opts, 42, 7).unwrap();
        assert_eq!(a.pred, c.pred);
        assert_eq!(a.filt, c.filt);
        assert_eq!(a.final_particles, c.final_particles);
    }

    #[test]
    fn block_average_matches_recomputation() {
        let hmm = FiniteHmm::binary_symmetric(0.3, 0.2).unwrap();
        let (_, obs) = hmm.simulate(4, 31);
        let s = Schedule::radix(2, 4).unwrap();
        let part = build_partition(&s, 2).unwrap();
        let phi = indicator(2, 1);
        let mut opts = FilterOptions::new(vec![phi.clone()]);
        opts.block = Some(BlockSpec { partition: part.clone() });
        opts.keep_particles = true;
        let run = run_filter(&hmm, &obs, &s, 4, &opts, 13, 0).unwrap();
        let reps = part.representatives();
        let recomputed = block_functional(
            run.final_particles.as_ref().unwrap(),
            &part,
            &reps,
            &phi,
        );
        let recorded = run.block_filt.as_ref().unwrap()[4][0];
        assert_eq!(recorded, recomputed);
        // Full-population blocks reduce to the plain functional.
        let singles = Partition::singletons(16);
        let ids = singles.representatives();
        let full = block_functional(run.final_particles.as_ref().unwrap(), &singles, &ids, &phi);
        assert!((full - run.filt[4][0]).abs() < 1e-15);
    }

    #[test]
    fn horizon_guard() {
        let hmm = FiniteHmm::binary_symmetric(0.3, 0.2).unwrap();
        let (_, obs) = hmm.simulate(2, 1);
        let s = Schedule::multinomial(4).unwrap();
        let opts = FilterOptions::new(vec![indicator(2, 0)]);
        assert!(matches!(
            run_filter(&hmm, &obs, &s, 5, &opts, 0, 0),
            Err(FilterError::NotEnoughObservations { .. })
        ));
    }

    #[test]
    fn filter_tracks_exact_filter_roughly() {
        // Coarse LLN sanity: one large-N run lands near the exact filter.
        let hmm = FiniteHmm::binary_symmetric(0.3, 0.2).unwrap();
        let (_, obs) = hmm.simulate(5, 17);
        let ef = exact_filter(&hmm, &obs).unwrap();
        let s = Schedule::mixed_radix(2, 2048).unwrap();
        let phi = indicator(2, 1);
        let opts = FilterOptions::new(vec![phi.clone()]);
        let run = run_filter(&hmm, &obs, &s, 5, &opts, 23, 0).unwrap();
        for n in 0..=5 {
            let exact = ef.filt_functional(n, &phi);
            assert!(
                (run.filt[n][0] - exact).abs() < 0.05,
                "n={n}: {} vs {exact}",
                run.filt[n][0]
            );
        }
    }
}
