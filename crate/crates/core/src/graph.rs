//! Combinatorics of the staged conditional-independence graph: parent and
//! ancestor sets, collision start sets, tail-product supports, path counts,
//! collision-pair cardinalities and the block partitions used by the
//! martingale decomposition.
//!
//! The graph has vertex `(k, i)` for stage `k in 0..=m` and column `i`, and
//! an edge from `(k-1, j)` to `(k, i)` whenever `A_k^{ij} != 0`. Closed
//! forms come from the congruence structure of the stage matrices; each has
//! a definition-based counterpart (suffix `_def` or `_brute`) that walks
//! the graph, so the formulas can be cross-checked exactly.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::schedule::{Family, Progression, Schedule};

/// Pairs budget for brute-force path-pair enumeration.
pub const PATH_PAIR_CAP: u64 = 10_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("stage {stage} out of range {lo}..={hi}")]
    StageOutOfRange { stage: usize, lo: usize, hi: usize },
    #[error("index {index} out of range 0..{n_particles}")]
    IndexOutOfRange { index: usize, n_particles: usize },
    #[error("collision cardinalities require i != j")]
    SameIndex,
    #[error("enumeration would visit {0} path pairs, cap is {PATH_PAIR_CAP}")]
    CapExceeded(u64),
    #[error("no nontrivial partition is defined for the multinomial family")]
    UnsupportedFamily,
    #[error("partition depth {d} out of range 1..={m}")]
    DepthOutOfRange { d: usize, m: usize },
}

/// Sorted, deduplicated set of particle indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    pub fn from_sorted(v: Vec<usize>) -> Self {
        debug_assert!(v.windows(2).all(|w| w[0] < w[1]));
        IndexSet(v)
    }

    pub fn from_unsorted(mut v: Vec<usize>) -> Self {
        v.sort_unstable();
        v.dedup();
        IndexSet(v)
    }

    pub fn from_progression(p: Progression) -> Self {
        // Progressions have positive stride, so members come out sorted.
        IndexSet(p.to_vec())
    }

    pub fn singleton(i: usize) -> Self {
        IndexSet(vec![i])
    }

    pub fn full(n: usize) -> Self {
        IndexSet((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.binary_search(&j).is_ok()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, usize> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Set difference `self \ other` of two sorted sets.
    pub fn difference(&self, other: &IndexSet) -> IndexSet {
        IndexSet(self.0.iter().copied().filter(|j| !other.contains(*j)).collect())
    }
}

/// Edge counts of the staged graph, excluding the input row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeStats {
    /// `(stage k, incoming edges per vertex on row k)`.
    pub incoming_per_vertex: Vec<(usize, usize)>,
    pub total_edges: u64,
}

fn check_index(s: &Schedule, i: usize) -> Result<(), GraphError> {
    if i >= s.n_particles() {
        return Err(GraphError::IndexOutOfRange { index: i, n_particles: s.n_particles() });
    }
    Ok(())
}

fn check_stage(s: &Schedule, k: usize, lo: usize) -> Result<(), GraphError> {
    if k < lo || k > s.n_stages() {
        return Err(GraphError::StageOutOfRange { stage: k, lo, hi: s.n_stages() });
    }
    Ok(())
}

/// Parent set `P_k(i) = { j : A_k^{ij} != 0 }`, the stage-k fan-in of `i`.
pub fn parent_set(s: &Schedule, k: usize, i: usize) -> Result<IndexSet, GraphError> {
    check_stage(s, k, 1)?;
    check_index(s, i)?;
    Ok(IndexSet::from_progression(s.row_support(k, i)))
}

/// Prime parent set `K_k(i) = { j : (A_k ... A_1)^{ij} > 0 }`, with
/// `K_0(i) = {i}`: the stage-0 columns reachable backward through `k` stages.
pub fn prime_parent_set(s: &Schedule, k: usize, i: usize) -> Result<IndexSet, GraphError> {
    if k > s.n_stages() {
        return Err(GraphError::StageOutOfRange { stage: k, lo: 0, hi: s.n_stages() });
    }
    check_index(s, i)?;
    if k == 0 {
        return Ok(IndexSet::singleton(i));
    }
    let n = s.n_particles();
    Ok(match s.family() {
        Family::Multinomial { .. } => IndexSet::full(n),
        Family::Radix { r, .. } => {
            let rk = crate::schedule::checked_pow(r, k).expect("within capacity");
            IndexSet::from_progression(Progression { start: (i / rk) * rk, stride: 1, len: rk })
        }
        Family::MixedRadix { .. } => {
            if k == 1 {
                IndexSet::from_progression(s.row_support(1, i))
            } else {
                IndexSet::full(n)
            }
        }
    })
}

/// Definition-based prime parent set: backward reachability through rows.
pub fn prime_parent_set_def(s: &Schedule, k: usize, i: usize) -> Result<IndexSet, GraphError> {
    if k > s.n_stages() {
        return Err(GraphError::StageOutOfRange { stage: k, lo: 0, hi: s.n_stages() });
    }
    check_index(s, i)?;
    let mut frontier: BTreeSet<usize> = BTreeSet::new();
    frontier.insert(i);
    for q in (1..=k).rev() {
        let mut next = BTreeSet::new();
        for &u in &frontier {
            next.extend(s.row_support(q, u).iter());
        }
        frontier = next;
    }
    Ok(IndexSet::from_sorted(frontier.into_iter().collect()))
}

/// Collision start set `C~_k(i) = K_k(i) \ K_{k-1}(i)`: ancestors first
/// reachable at depth exactly `k`. Over `k in 1..=m` these partition
/// `[N] \ {i}`.
pub fn collision_start_set(s: &Schedule, k: usize, i: usize) -> Result<IndexSet, GraphError> {
    check_stage(s, k, 1)?;
    check_index(s, i)?;
    Ok(prime_parent_set(s, k, i)?.difference(&prime_parent_set(s, k - 1, i)?))
}

/// Tail-product support `Q_{m,k}(i) = { j : (A_m ... A_{m-k+1})^{ij} != 0 }`.
/// `Q_{m,1} = P_m` and `Q_{m,m} = K_m = [N]`.
pub fn tail_product_set(s: &Schedule, k: usize, i: usize) -> Result<IndexSet, GraphError> {
    check_stage(s, k, 1)?;
    check_index(s, i)?;
    let n = s.n_particles();
    let m = s.n_stages();
    Ok(match s.family() {
        Family::Multinomial { .. } => IndexSet::full(n),
        Family::Radix { r, .. } => {
            let rmk = crate::schedule::checked_pow(r, m - k).expect("within capacity");
            let rk = n / rmk;
            IndexSet::from_progression(Progression { start: i % rmk, stride: rmk, len: rk })
        }
        Family::MixedRadix { .. } => {
            if k == 1 {
                IndexSet::from_progression(s.row_support(2, i))
            } else {
                IndexSet::full(n)
            }
        }
    })
}

/// Definition-based tail-product support via backward reachability from the
/// last `k` stages.
pub fn tail_product_set_def(s: &Schedule, k: usize, i: usize) -> Result<IndexSet, GraphError> {
    check_stage(s, k, 1)?;
    check_index(s, i)?;
    let m = s.n_stages();
    let mut frontier: BTreeSet<usize> = BTreeSet::new();
    frontier.insert(i);
    for q in ((m - k + 1)..=m).rev() {
        let mut next = BTreeSet::new();
        for &u in &frontier {
            next.extend(s.row_support(q, u).iter());
        }
        frontier = next;
    }
    Ok(IndexSet::from_sorted(frontier.into_iter().collect()))
}

/// `|L_k(u)|`: number of directed paths of the last `m - k` stages starting
/// from column `u` at level `k`. Constant in `u` because every row of every
/// stage has the same fill, so the count is the product of stage fills.
pub fn path_count_from(s: &Schedule, k: usize, u: usize) -> Result<u64, GraphError> {
    if k > s.n_stages() {
        return Err(GraphError::StageOutOfRange { stage: k, lo: 0, hi: s.n_stages() });
    }
    check_index(s, u)?;
    let mut count: u64 = 1;
    for q in (k + 1)..=s.n_stages() {
        count *= s.row_nnz(q) as u64;
    }
    Ok(count)
}

/// Enumerate the paths counted by [`path_count_from`], as index sequences
/// `(j_k, ..., j_m)` with `j_k = u`.
pub fn enumerate_paths_from(s: &Schedule, k: usize, u: usize) -> Result<Vec<Vec<usize>>, GraphError> {
    let total = path_count_from(s, k, u)?;
    if total > PATH_PAIR_CAP {
        return Err(GraphError::CapExceeded(total));
    }
    let mut paths = vec![vec![u]];
    for q in (k + 1)..=s.n_stages() {
        let mut next = Vec::with_capacity(paths.len() * s.row_nnz(q));
        for p in &paths {
            let last = *p.last().expect("nonempty");
            // Successors of column `last` at stage q are the support of row
            // `last` by symmetry.
            for j in s.row_support(q, last).iter() {
                let mut ext = p.clone();
                ext.push(j);
                next.push(ext);
            }
        }
        paths = next;
    }
    Ok(paths)
}

/// Closed-form collision cardinalities `(m_A(i,j), m~_A(i,j))`: the number
/// of full path pairs from `(i, j)` that do and do not share a vertex at
/// some stage `k >= 1`.
pub fn collision_cardinalities(s: &Schedule, i: usize, j: usize) -> Result<(u64, u64), GraphError> {
    check_index(s, i)?;
    check_index(s, j)?;
    if i == j {
        return Err(GraphError::SameIndex);
    }
    let n = s.n_particles() as u64;
    let mut colliding = 0u64;
    let mut non_colliding = 0u64;
    for k in 1..=s.n_stages() {
        if collision_start_set(s, k, i)?.contains(j) {
            let l_k = path_count_from(s, k, i)?;
            let k_card = prime_parent_set(s, k, i)?.len() as u64;
            colliding += l_k * l_k * k_card;
            non_colliding += n * n - l_k * l_k * k_card;
        }
    }
    Ok((colliding, non_colliding))
}

/// Brute-force collision counts: enumerate all path pairs from `(i, j)` and
/// classify by whether they share a vertex at stage `k >= 1`. Stage-0
/// equality is excluded by `i != j`.
pub fn collision_cardinalities_brute(
    s: &Schedule,
    i: usize,
    j: usize,
) -> Result<(u64, u64), GraphError> {
    check_index(s, i)?;
    check_index(s, j)?;
    if i == j {
        return Err(GraphError::SameIndex);
    }
    let per = path_count_from(s, 0, i)?;
    let pairs = per.checked_mul(per).ok_or(GraphError::CapExceeded(u64::MAX))?;
    if pairs > PATH_PAIR_CAP {
        return Err(GraphError::CapExceeded(pairs));
    }
    let from_i = enumerate_paths_from(s, 0, i)?;
    let from_j = enumerate_paths_from(s, 0, j)?;
    let mut colliding = 0u64;
    let mut non_colliding = 0u64;
    for a in &from_i {
        for b in &from_j {
            if a.iter().zip(b.iter()).skip(1).any(|(x, y)| x == y) {
                colliding += 1;
            } else {
                non_colliding += 1;
            }
        }
    }
    Ok((colliding, non_colliding))
}

/// Incoming-edge counts per graph row and the total edge count.
pub fn edge_stats(s: &Schedule) -> EdgeStats {
    let n = s.n_particles() as u64;
    let incoming: Vec<(usize, usize)> = (1..=s.n_stages()).map(|k| (k, s.row_nnz(k))).collect();
    let total_edges = incoming.iter().map(|(_, deg)| n * *deg as u64).sum();
    EdgeStats { incoming_per_vertex: incoming, total_edges }
}

/// Equal-size partition of `[N]` used by the block-wise martingale
/// decomposition at depth `d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub d: usize,
    pub blocks: Vec<IndexSet>,
}

impl Partition {
    /// The singleton partition, valid for any schedule at depth 1.
    pub fn singletons(n: usize) -> Self {
        Partition { d: 1, blocks: (0..n).map(IndexSet::singleton).collect() }
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_size(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.len())
    }

    /// Lowest member of each block, the canonical choice function.
    pub fn representatives(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.as_slice()[0]).collect()
    }
}

/// Build the depth-`d` partition for the radix and mixed families: block
/// `u` is `{ u + q * B : q }` where `B` is the block count.
pub fn build_partition(s: &Schedule, d: usize) -> Result<Partition, GraphError> {
    let m = s.n_stages();
    if d < 1 || d > m {
        return Err(GraphError::DepthOutOfRange { d, m });
    }
    let (n_blocks, block_size) = match s.family() {
        Family::Multinomial { .. } => return Err(GraphError::UnsupportedFamily),
        Family::Radix { r, m } => {
            let b = crate::schedule::checked_pow(r, m - d + 1).expect("within capacity");
            (b, s.n_particles() / b)
        }
        Family::MixedRadix { r, c } => {
            let b = c * if d == 1 { r } else { 1 };
            (b, s.n_particles() / b)
        }
    };
    let blocks = (0..n_blocks)
        .map(|u| {
            IndexSet::from_progression(Progression { start: u, stride: n_blocks, len: block_size })
        })
        .collect();
    Ok(Partition { d, blocks })
}
