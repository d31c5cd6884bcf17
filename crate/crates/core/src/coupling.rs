//! Minibatch optimal-transport pairing by exact linear assignment.

use thiserror::Error;

use crate::points::{sq_dist, Points};

#[derive(Debug, Error, PartialEq)]
pub enum CouplingError {
    #[error("batch sizes differ: {0} sources vs {1} targets")]
    SizeMismatch(usize, usize),
    #[error("cost matrix entry ({0}, {1}) is NaN")]
    NanEntry(usize, usize),
    #[error("brute-force assignment supports at most {max} rows, got {found}")]
    TooLarge { max: usize, found: usize },
    #[error("not a permutation of 0..{0}")]
    InvalidPermutation(usize),
}

/// Square matrix of pairing costs, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Self {
        assert_eq!(entries.len(), n * n, "cost matrix must be square");
        Self { n, entries }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for r in rows {
            assert_eq!(r.len(), n, "cost matrix must be square");
            entries.extend_from_slice(r);
        }
        Self { n, entries }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// `sum_i c(i, perm[i])`, accumulated in row order.
    pub fn cost_of(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Row `i` is matched to column `perm[i]`.
    pub perm: Vec<usize>,
    pub cost: f64,
}

/// Pairwise squared Euclidean distances `c(i, j) = |x0_i - x1_j|^2`.
pub fn cost_matrix(x0s: &Points, x1s: &Points) -> Result<CostMatrix, CouplingError> {
    if x0s.len() != x1s.len() || x0s.dim() != x1s.dim() {
        return Err(CouplingError::SizeMismatch(x0s.len(), x1s.len()));
    }
    let n = x0s.len();
    let mut entries = Vec::with_capacity(n * n);
    for a in x0s.rows() {
        for b in x1s.rows() {
            entries.push(sq_dist(a, b));
        }
    }
    Ok(CostMatrix { n, entries })
}

fn check_nan(c: &CostMatrix) -> Result<(), CouplingError> {
    match c.entries.iter().position(|v| v.is_nan()) {
        Some(k) => Err(CouplingError::NanEntry(k / c.n, k % c.n)),
        None => Ok(()),
    }
}

/// Minimum-cost perfect matching via the O(n^3) shortest augmenting path
/// Hungarian method with row/column potentials.
pub fn hungarian_assign(c: &CostMatrix) -> Result<Assignment, CouplingError> {
    check_nan(c)?;
    let n = c.n;
    if n == 0 {
        return Ok(Assignment { perm: vec![], cost: 0.0 });
    }
    // 1-based with a virtual column 0, following the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // column -> row
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched_row[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if j1 == 0 {
                // only reachable with infinite costs everywhere
                j1 = (1..=n).find(|&j| !used[j]).expect("free column");
                delta = 0.0;
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[matched_row[j] - 1] = j - 1;
    }
    let cost = c.cost_of(&perm);
    Ok(Assignment { perm, cost })
}

pub const BRUTE_FORCE_MAX: usize = 9;

/// Exhaustive search over permutations in lexicographic order; ties keep the
/// lexicographically smallest permutation.
pub fn brute_force_assign(c: &CostMatrix) -> Result<Assignment, CouplingError> {
    check_nan(c)?;
    if c.n > BRUTE_FORCE_MAX {
        return Err(CouplingError::TooLarge { max: BRUTE_FORCE_MAX, found: c.n });
    }
    let mut perm: Vec<usize> = (0..c.n).collect();
    let mut best = perm.clone();
    let mut best_cost = c.cost_of(&perm);
    while next_permutation(&mut perm) {
        let cost = c.cost_of(&perm);
        if cost < best_cost {
            best_cost = cost;
            best.copy_from_slice(&perm);
        }
    }
    Ok(Assignment { perm: best, cost: best_cost })
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// A source batch paired with reordered targets and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledBatch {
    pub x0: Points,
    pub x1: Points,
    pub labels: Option<Vec<usize>>,
}

impl CoupledBatch {
    /// Mean squared distance between paired points.
    pub fn mean_pair_cost(&self) -> f64 {
        let n = self.x0.len();
        self.x0.rows().zip(self.x1.rows()).map(|(a, b)| sq_dist(a, b)).sum::<f64>() / n as f64
    }
}

/// Reorders targets (and labels) so that source `i` is paired with target
/// `perm[i]`.
pub fn apply_coupling(
    x0s: &Points,
    x1s: &Points,
    labels: Option<&[usize]>,
    perm: &[usize],
) -> Result<CoupledBatch, CouplingError> {
    if x0s.len() != x1s.len() || labels.is_some_and(|l| l.len() != x1s.len()) {
        return Err(CouplingError::SizeMismatch(x0s.len(), x1s.len()));
    }
    if perm.len() != x1s.len() || !is_permutation(perm) {
        return Err(CouplingError::InvalidPermutation(x1s.len()));
    }
    Ok(CoupledBatch {
        x0: x0s.clone(),
        x1: x1s.select(perm),
        labels: labels.map(|l| perm.iter().map(|&j| l[j]).collect()),
    })
}

/// Cost matrix, Hungarian assignment and reordering in one call.
pub fn ot_couple(x0s: &Points, x1s: &Points, labels: Option<&[usize]>) -> Result<CoupledBatch, CouplingError> {
    let c = cost_matrix(x0s, x1s)?;
    let a = hungarian_assign(&c)?;
    apply_coupling(x0s, x1s, labels, &a.perm)
}
