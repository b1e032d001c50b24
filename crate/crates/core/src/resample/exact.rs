//! Exact-enumeration oracles for augmented resampling.
//!
//! The staged sampler is a finite mixture at every slot `(k, i)`, and given
//! the input weights all mixture probabilities are fixed rationals. These
//! oracles enumerate every ancestral-index assignment with its exact
//! probability, which pins down the output law, the lack-of-bias identity,
//! conditional increment means and the conditional second moment without
//! any Monte Carlo error.

use std::collections::BTreeMap;

use num_traits::{One, Zero};
use thiserror::Error;

use crate::graph::Partition;
use crate::schedule::{Rat, Schedule};

/// Budget on the number of enumerated assignments.
pub const ASSIGNMENT_CAP: u64 = 1_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExactError {
    #[error("enumeration would visit {0} assignments, cap is {ASSIGNMENT_CAP}")]
    CapExceeded(u64),
    #[error("weights must be strictly positive")]
    NonPositiveWeight,
    #[error("argument length {got} does not match population {want}")]
    SizeMismatch { got: usize, want: usize },
    #[error("partition is not admissible: {0}")]
    BadPartition(String),
}

/// Exact stage-wise weight table in rationals.
pub fn v_table_rational(weights: &[Rat], s: &Schedule) -> Result<Vec<Vec<Rat>>, ExactError> {
    check(weights, s)?;
    let n = s.n_particles();
    let mut v = vec![weights.to_vec()];
    for k in 1..=s.n_stages() {
        let prev = v.last().expect("nonempty").clone();
        let mut cur = vec![Rat::zero(); n];
        for cidx in 0..s.class_count(k) {
            let class = s.class(k, cidx);
            let sum = class.iter().fold(Rat::zero(), |acc, j| acc + &prev[j]);
            let mean = sum / Rat::from_integer((class.len as i64).into());
            for j in class.iter() {
                cur[j] = mean.clone();
            }
        }
        v.push(cur);
    }
    Ok(v)
}

fn check(weights: &[Rat], s: &Schedule) -> Result<(), ExactError> {
    if weights.len() != s.n_particles() {
        return Err(ExactError::SizeMismatch { got: weights.len(), want: s.n_particles() });
    }
    if weights.iter().any(|w| *w <= Rat::zero()) {
        return Err(ExactError::NonPositiveWeight);
    }
    Ok(())
}

fn assignment_count(s: &Schedule) -> u64 {
    let mut total: u64 = 1;
    for k in 1..=s.n_stages() {
        for _ in 0..s.n_particles() {
            total = match total.checked_mul(s.row_nnz(k) as u64) {
                Some(t) if t <= ASSIGNMENT_CAP => t,
                _ => return u64::MAX,
            };
        }
    }
    total
}

/// Everything a visitor needs about one enumerated assignment.
pub struct Assignment<'a> {
    /// `ancestors[k][i]`: input index carried by `xi_k^i`.
    pub ancestors: &'a [Vec<usize>],
    /// Exact probability of this assignment.
    pub prob: &'a Rat,
}

/// Enumerate every assignment of the staged sampler, calling the visitor
/// with its ancestor table and exact probability.
pub fn enumerate_assignments(
    weights: &[Rat],
    s: &Schedule,
    mut visit: impl FnMut(Assignment<'_>),
) -> Result<(), ExactError> {
    check(weights, s)?;
    let total = assignment_count(s);
    if total > ASSIGNMENT_CAP {
        return Err(ExactError::CapExceeded(total));
    }
    let n = s.n_particles();
    let m = s.n_stages();
    let v = v_table_rational(weights, s)?;

    // Per-slot mixture over the class: P(parent = class member t) is
    // V_{k-1}[member]/sum_class V_{k-1}, independent of the row inside the
    // class.
    let mut slot_probs: Vec<Vec<Vec<Rat>>> = Vec::with_capacity(m);
    for k in 1..=m {
        let mut per_index = Vec::with_capacity(n);
        for i in 0..n {
            let class = s.row_support(k, i);
            let total: Rat = class.iter().fold(Rat::zero(), |acc, j| acc + &v[k - 1][j]);
            per_index.push(class.iter().map(|j| &v[k - 1][j] / &total).collect::<Vec<Rat>>());
        }
        slot_probs.push(per_index);
    }

    let mut ancestors: Vec<Vec<usize>> = vec![(0..n).collect()];
    ancestors.resize(m + 1, vec![0; n]);
    let mut probs: Vec<Rat> = vec![Rat::one(); n * m + 1];

    // Iterative odometer over slots in stage-major order.
    let mut choice = vec![0usize; n * m];
    let slots: Vec<(usize, usize)> =
        (1..=m).flat_map(|k| (0..n).map(move |i| (k, i))).collect();
    let mut d: usize = 0;
    loop {
        if d == slots.len() {
            visit(Assignment { ancestors: &ancestors, prob: &probs[d] });
            // Backtrack to the last slot that can still advance.
            loop {
                if d == 0 {
                    return Ok(());
                }
                d -= 1;
                let (k, i) = slots[d];
                choice[d] += 1;
                if choice[d] < s.row_nnz(k) {
                    break;
                }
                choice[d] = 0;
                let _ = i;
            }
        }
        let (k, i) = slots[d];
        let t = choice[d];
        let parent = s.row_support(k, i).member(t);
        ancestors[k][i] = ancestors[k - 1][parent];
        probs[d + 1] = &probs[d] * &slot_probs[k - 1][i][t];
        d += 1;
    }
}

/// Exact joint law of the output assignment (level-0 ancestor per output
/// slot), aggregated over sampler paths that produce the same outputs.
#[derive(Debug, Clone)]
pub struct ExactDistribution {
    n: usize,
    outcomes: Vec<(Vec<usize>, Rat)>,
}

impl ExactDistribution {
    pub fn n_particles(&self) -> usize {
        self.n
    }

    pub fn outcomes(&self) -> &[(Vec<usize>, Rat)] {
        &self.outcomes
    }

    pub fn total_probability(&self) -> Rat {
        self.outcomes.iter().fold(Rat::zero(), |acc, (_, p)| acc + p)
    }

    /// Marginal law of output slot `i` over input indices.
    pub fn marginal(&self, i: usize) -> Vec<Rat> {
        let mut out = vec![Rat::zero(); self.n];
        for (o, p) in &self.outcomes {
            out[o[i]] += p;
        }
        out
    }

    /// Joint marginal of output slots `(i, i2)`.
    pub fn pair_marginal(&self, i: usize, i2: usize) -> Vec<Vec<Rat>> {
        let mut out = vec![vec![Rat::zero(); self.n]; self.n];
        for (o, p) in &self.outcomes {
            out[o[i]][o[i2]] += p;
        }
        out
    }

    /// `E[N^{-1} sum_i phi(xi_out^i)]` for `phi` given on input slots.
    pub fn mean_output_functional(&self, phi: &[Rat]) -> Rat {
        let n_rat = Rat::from_integer((self.n as i64).into());
        let mut acc = Rat::zero();
        for (o, p) in &self.outcomes {
            let mean = o.iter().fold(Rat::zero(), |a, &j| a + &phi[j]) / &n_rat;
            acc += mean * p;
        }
        acc
    }
}

/// Enumerate the sampler and aggregate the exact output law.
pub fn exact_output_distribution(
    weights: &[Rat],
    s: &Schedule,
) -> Result<ExactDistribution, ExactError> {
    let mut map: BTreeMap<Vec<usize>, Rat> = BTreeMap::new();
    enumerate_assignments(weights, s, |a| {
        let key = a.ancestors[s.n_stages()].clone();
        *map.entry(key).or_insert_with(Rat::zero) += a.prob;
    })?;
    Ok(ExactDistribution { n: s.n_particles(), outcomes: map.into_iter().collect() })
}

/// The self-normalized weighted mean `sum g phi / sum g`.
pub fn weighted_mean(weights: &[Rat], phi: &[Rat]) -> Rat {
    let num = weights.iter().zip(phi).fold(Rat::zero(), |acc, (g, p)| acc + g * p);
    let den = weights.iter().fold(Rat::zero(), |acc, g| acc + g);
    num / den
}

/// Exact lack-of-bias comparison: `(lhs, rhs)` with
/// `lhs = E[N^{-1} sum phi(xi_out) | xi_in]` and `rhs = sum g phi / sum g`.
pub fn lack_of_bias_exact(
    weights: &[Rat],
    phi: &[Rat],
    s: &Schedule,
) -> Result<(Rat, Rat), ExactError> {
    if phi.len() != s.n_particles() {
        return Err(ExactError::SizeMismatch { got: phi.len(), want: s.n_particles() });
    }
    let dist = exact_output_distribution(weights, s)?;
    Ok((dist.mean_output_functional(phi), weighted_mean(weights, phi)))
}

/// Exact conditional second moment
/// `E[((N^{-1} sum g)(N^{-1} sum phi(xi_out)) - N^{-1} sum g phi)^2 | xi_in]`,
/// which equals `(m/N) E[(sum_rho X_rho)^2 | F_0]` for the singleton
/// partition.
pub fn conditional_second_moment_oracle(
    weights: &[Rat],
    phi: &[Rat],
    s: &Schedule,
) -> Result<Rat, ExactError> {
    if phi.len() != s.n_particles() {
        return Err(ExactError::SizeMismatch { got: phi.len(), want: s.n_particles() });
    }
    check(weights, s)?;
    let n_rat = Rat::from_integer((s.n_particles() as i64).into());
    let g_mean = weights.iter().fold(Rat::zero(), |a, g| a + g) / &n_rat;
    let gphi_mean =
        weights.iter().zip(phi).fold(Rat::zero(), |a, (g, p)| a + g * p) / &n_rat;
    let mut acc = Rat::zero();
    let m = s.n_stages();
    enumerate_assignments(weights, s, |a| {
        let out_mean =
            a.ancestors[m].iter().fold(Rat::zero(), |acc2, &j| acc2 + &phi[j]) / &n_rat;
        let err = &g_mean * out_mean - &gphi_mean;
        acc += &err * &err * a.prob;
    })?;
    Ok(acc)
}

/// Closed-form conditional second moment from the collision cardinalities:
///
/// `term1 + term2 + term3` with
/// `term1 = N^{-2} sum_i g_i^2 phibar_i^2`,
/// `term2 = N^{-4} sum_{i != j} g_i phibar_i^2 g_j m_A(i,j)`,
/// `term3 = N^{-4} sum_{i != j} g_i phibar_i g_j phibar_j m~_A(i,j)`.
///
/// Agrees exactly with [`conditional_second_moment_oracle`] whenever the
/// enumeration is feasible; unlike the oracle it costs `O(N^2 m)`.
pub fn conditional_second_moment_closed_form(
    weights: &[Rat],
    phi: &[Rat],
    s: &Schedule,
) -> Result<Rat, ExactError> {
    check(weights, s)?;
    if phi.len() != s.n_particles() {
        return Err(ExactError::SizeMismatch { got: phi.len(), want: s.n_particles() });
    }
    let n = s.n_particles();
    let mean = weighted_mean(weights, phi);
    let phi_bar: Vec<Rat> = phi.iter().map(|p| p - &mean).collect();
    let n2 = Rat::from_integer(((n * n) as i64).into());
    let n4 = &n2 * &n2;
    let mut term1 = Rat::zero();
    for i in 0..n {
        term1 += &weights[i] * &weights[i] * &phi_bar[i] * &phi_bar[i];
    }
    term1 /= &n2;
    let mut term2 = Rat::zero();
    let mut term3 = Rat::zero();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (m_a, m_tilde) = crate::graph::collision_cardinalities(s, i, j)
                .expect("indices in range and distinct");
            let gg = &weights[i] * &weights[j];
            term2 += &gg * &phi_bar[i] * &phi_bar[i] * Rat::from_integer((m_a as i64).into());
            term3 += &gg * &phi_bar[i] * &phi_bar[j] * Rat::from_integer((m_tilde as i64).into());
        }
    }
    Ok(term1 + term2 / &n4 + term3 / &n4)
}

/// Unscaled martingale increments `X_rho / S` evaluated in rationals for a
/// fully enumerated assignment, together with the filtration reveal order.
struct IncrementPlan {
    /// `(stage, index)` revealed at position rho (1-based rho = position+1).
    reveal: Vec<(usize, usize)>,
    n_star: usize,
}

fn increment_plan(s: &Schedule, part: &Partition, j_choice: &[usize]) -> IncrementPlan {
    let n = s.n_particles();
    let m = s.n_stages();
    let d = part.d;
    let mut reveal = Vec::with_capacity((m - d) * n + part.block_count());
    for q in 1..=(m - d) {
        for i in 0..n {
            reveal.push((q, i));
        }
    }
    for &j in j_choice {
        reveal.push((m, j));
    }
    IncrementPlan { reveal, n_star: (m - d) * n }
}

/// Verify `E[X_rho | F_{rho-1}] = 0` for every increment by exact
/// enumeration: group assignments by the revealed prefix and check that
/// every group's conditional mean vanishes. Returns the largest absolute
/// conditional mean over all groups and increments (exactly zero when the
/// martingale property holds).
pub fn max_conditional_increment_mean(
    weights: &[Rat],
    phi: &[Rat],
    s: &Schedule,
    part: &Partition,
    j_choice: &[usize],
) -> Result<Rat, ExactError> {
    check(weights, s)?;
    if phi.len() != s.n_particles() {
        return Err(ExactError::SizeMismatch { got: phi.len(), want: s.n_particles() });
    }
    let n = s.n_particles();
    let m = s.n_stages();
    let d = part.d;
    if d < 1 || d > m || part.block_count() * part.block_size() != n {
        return Err(ExactError::BadPartition(format!("d={d} with {} blocks", part.block_count())));
    }
    let plan = increment_plan(s, part, j_choice);
    let v = v_table_rational(weights, s)?;
    let phi_bar: Vec<Rat> = {
        let mean = weighted_mean(weights, phi);
        phi.iter().map(|p| p - &mean).collect()
    };
    let n_rat = Rat::from_integer((n as i64).into());
    let blocks_rat = Rat::from_integer((part.block_count() as i64).into());

    // Tail-product rows for the block increments.
    let tail_rows: Vec<BTreeMap<usize, Rat>> = j_choice
        .iter()
        .map(|&i| s.tail_product_row_rational(m - d + 1, m, i))
        .collect();

    // groups[rho-1]: prefix key -> running sum of P * X~_rho.
    let mut groups: Vec<BTreeMap<Vec<usize>, Rat>> = vec![BTreeMap::new(); plan.reveal.len()];

    enumerate_assignments(weights, s, |a| {
        for (pos, &(q, i)) in plan.reveal.iter().enumerate() {
            let x = if pos < plan.n_star {
                // (1/N)(V_q^i phibar_q^i - sum_j A_q^{ij} V_{q-1}^j phibar_{q-1}^j)
                let own = &v[q][i] * &phi_bar[a.ancestors[q][i]];
                let w = s.row_weight(q);
                let pred = s.row_support(q, i).iter().fold(Rat::zero(), |acc, j| {
                    acc + &w * &v[q - 1][j] * &phi_bar[a.ancestors[q - 1][j]]
                });
                (own - pred) / &n_rat
            } else {
                let u = pos - plan.n_star;
                let i_out = j_choice[u];
                let own = &v[m][i_out] * &phi_bar[a.ancestors[m][i_out]];
                let pred = tail_rows[u].iter().fold(Rat::zero(), |acc, (&j, wj)| {
                    acc + wj * &v[m - d][j] * &phi_bar[a.ancestors[m - d][j]]
                });
                (own - pred) / &blocks_rat
            };
            let key: Vec<usize> =
                plan.reveal[..pos].iter().map(|&(qq, ii)| a.ancestors[qq][ii]).collect();
            let entry = groups[pos].entry(key).or_insert_with(Rat::zero);
            *entry += x * a.prob;
        }
    })?;

    let mut max_abs = Rat::zero();
    for g in &groups {
        for val in g.values() {
            let a = if *val < Rat::zero() { -val.clone() } else { val.clone() };
            if a > max_abs {
                max_abs = a;
            }
        }
    }
    Ok(max_abs)
}
