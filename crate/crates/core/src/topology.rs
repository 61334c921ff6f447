//! Directed interconnection graphs with a leader/follower partition.
//!
//! Agents are indexed `0..n`; the first `m` are followers and the remaining
//! `n - m` are leaders. Entry `(i, j)` of the weight matrix is the weight of
//! the edge `j -> i`, i.e. how much agent `i` listens to agent `j`.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg;

/// Tolerance on the real part of eigenvalues in the M-matrix test.
pub const M_MATRIX_EIG_TOL: f64 = 1e-10;
/// Containment weights may dip this far below zero from rounding.
pub const WEIGHT_NONNEG_TOL: f64 = 1e-12;
/// Row sums of the containment weights must be within this of one.
pub const ROW_SUM_TOL: f64 = 1e-9;
/// Margin below one required of the closed-loop gain spectral radius.
pub const SMALL_GAIN_MARGIN: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("weight matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("follower count m={m} must satisfy 0 < m < n={n}")]
    BadFollowerCount { m: usize, n: usize },
    #[error("weight a[{i}][{j}] = {value} is negative or not finite")]
    BadWeight { i: usize, j: usize, value: f64 },
    #[error("self-loop weight a[{i}][{i}] must be zero")]
    SelfLoop { i: usize },
    #[error("leader {i} receives an edge from agent {j}")]
    LeaderReceives { i: usize, j: usize },
    #[error("follower {i} has zero in-degree")]
    ZeroInDegree { i: usize },
    #[error("L1 is singular; some follower is not reachable from a leader")]
    SingularL1,
}

/// Weighted directed graph over `n` agents with `m` followers.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedTopology {
    m: usize,
    weights: DMatrix<f64>,
}

impl DirectedTopology {
    /// Builds a topology, checking the structural invariants. Zero in-degree
    /// of a follower is allowed here and reported by [`validate_assumption1`].
    pub fn new(m: usize, weights: DMatrix<f64>) -> Result<Self, TopologyError> {
        let (rows, cols) = weights.shape();
        if rows != cols {
            return Err(TopologyError::NotSquare { rows, cols });
        }
        let n = rows;
        if m == 0 || m >= n {
            return Err(TopologyError::BadFollowerCount { m, n });
        }
        for i in 0..n {
            for j in 0..n {
                let value = weights[(i, j)];
                if !value.is_finite() || value < 0.0 {
                    return Err(TopologyError::BadWeight { i, j, value });
                }
                if i == j && value != 0.0 {
                    return Err(TopologyError::SelfLoop { i });
                }
                if i >= m && value != 0.0 {
                    return Err(TopologyError::LeaderReceives { i, j });
                }
            }
        }
        Ok(Self { m, weights })
    }

    pub fn from_rows(m: usize, rows: &[Vec<f64>]) -> Result<Self, TopologyError> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(TopologyError::NotSquare { rows: n, cols: bad.len() });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(m, DMatrix::from_row_slice(n, n, &flat))
    }

    /// Reassembles a topology from the Laplacian blocks `L1` and `L2`.
    pub fn from_laplacian_blocks(l1: &DMatrix<f64>, l2: &DMatrix<f64>) -> Result<Self, TopologyError> {
        let m = l1.nrows();
        let n = m + l2.ncols();
        let mut w = DMatrix::zeros(n, n);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    w[(i, j)] = -l1[(i, j)];
                }
            }
            for k in 0..l2.ncols() {
                w[(i, m + k)] = -l2[(i, k)];
            }
        }
        Self::new(m, w)
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn leader_count(&self) -> usize {
        self.n() - self.m
    }

    pub fn is_leader(&self, agent: usize) -> bool {
        agent >= self.m
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    /// In-degree κ_i = Σ_j a_ij.
    pub fn in_degree(&self, i: usize) -> f64 {
        self.weights.row(i).sum()
    }

    /// All edges `(from, to, weight)` with positive weight, ordered by
    /// receiving agent then sender.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..self.m {
            for j in 0..n {
                let w = self.weights[(i, j)];
                if w > 0.0 {
                    out.push((j, i, w));
                }
            }
        }
        out
    }

    /// Full `n x n` Laplacian `D - A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut l = -self.weights.clone();
        for i in 0..n {
            l[(i, i)] = self.in_degree(i);
        }
        l
    }
}

/// Outcome of the leader-reachability check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReachabilityReport {
    pub satisfied: bool,
    /// Followers with no directed path from any leader.
    pub unreachable: Vec<usize>,
}

/// Every follower must be reachable along edge direction from some leader.
pub fn validate_assumption1(topo: &DirectedTopology) -> ReachabilityReport {
    let n = topo.n();
    let mut seen = vec![false; n];
    let mut queue: VecDeque<usize> = (topo.m()..n).collect();
    for &l in &queue {
        seen[l] = true;
    }
    while let Some(j) = queue.pop_front() {
        // edge j -> i exists when a_ij > 0
        for i in 0..topo.m() {
            if !seen[i] && topo.weight(i, j) > 0.0 {
                seen[i] = true;
                queue.push_back(i);
            }
        }
    }
    let unreachable: Vec<usize> = (0..topo.m()).filter(|&i| !seen[i]).collect();
    ReachabilityReport {
        satisfied: unreachable.is_empty(),
        unreachable,
    }
}

/// Blocks of the Laplacian restricted to follower rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianPartition {
    pub l1: DMatrix<f64>,
    pub l2: DMatrix<f64>,
    pub d1: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
}

pub fn partition(topo: &DirectedTopology) -> Result<LaplacianPartition, TopologyError> {
    let m = topo.m();
    let n = topo.n();
    let ml = n - m;
    for i in 0..m {
        if topo.in_degree(i) <= 0.0 {
            return Err(TopologyError::ZeroInDegree { i });
        }
    }
    let a1 = topo.weights().view((0, 0), (m, m)).into_owned();
    let a2 = topo.weights().view((0, m), (m, ml)).into_owned();
    let d1 = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(m, |i, _| topo.in_degree(i)));
    let l1 = &d1 - &a1;
    let l2 = -&a2;
    Ok(LaplacianPartition { l1, l2, d1, a1, a2 })
}

/// The matrix `W = -L1^{-1} L2` mapping leader quantities to each follower's
/// convex-combination target.
#[derive(Debug, Clone, PartialEq)]
pub struct ContainmentWeights {
    w: DMatrix<f64>,
}

impl ContainmentWeights {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn followers(&self) -> usize {
        self.w.nrows()
    }

    pub fn leaders(&self) -> usize {
        self.w.ncols()
    }

    pub fn min_entry(&self) -> f64 {
        self.w.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_row_sum_deviation(&self) -> f64 {
        self.w.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn is_valid(&self) -> bool {
        self.min_entry() >= -WEIGHT_NONNEG_TOL && self.max_row_sum_deviation() <= ROW_SUM_TOL
    }

    /// Target `(W ⊗ I_dim) x_L` for stacked leader vectors.
    pub fn apply(&self, leaders: &[f64], dim: usize) -> Vec<f64> {
        let (m, ml) = self.w.shape();
        assert_eq!(leaders.len(), ml * dim);
        let mut out = vec![0.0; m * dim];
        for i in 0..m {
            for k in 0..ml {
                let w = self.w[(i, k)];
                for d in 0..dim {
                    out[i * dim + d] += w * leaders[k * dim + d];
                }
            }
        }
        out
    }
}

/// Solves `L1 W = -L2` by LU; no explicit inverse is formed.
pub fn containment_weights(part: &LaplacianPartition) -> Result<ContainmentWeights, TopologyError> {
    let lu = part.l1.clone().lu();
    if !lu.is_invertible() {
        return Err(TopologyError::SingularL1);
    }
    let w = lu.solve(&(-&part.l2)).ok_or(TopologyError::SingularL1)?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(TopologyError::SingularL1);
    }
    Ok(ContainmentWeights { w })
}

/// Z-matrix whose eigenvalues all have real part above [`M_MATRIX_EIG_TOL`].
pub fn is_nonsingular_m_matrix(a: &DMatrix<f64>) -> bool {
    if !a.is_square() {
        return false;
    }
    let n = a.nrows();
    for i in 0..n {
        for j in 0..n {
            if i != j && a[(i, j)] > 0.0 {
                return false;
            }
        }
    }
    match linalg::eigenvalues(a) {
        Some(ev) => ev.iter().all(|z| z.re > M_MATRIX_EIG_TOL),
        None => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmallGainCertificate {
    /// Closed-loop gain matrix `D1^{-1} A1`, row-major.
    pub gain_matrix: Vec<Vec<f64>>,
    pub spectral_radius: f64,
    pub pass: bool,
}

/// Closed-loop gain matrix of the interconnected filter subsystems and the
/// small-gain verdict `ρ(D1^{-1} A1) < 1`.
pub fn small_gain_certificate(part: &LaplacianPartition) -> SmallGainCertificate {
    let g = gain_matrix(part);
    let rho = linalg::spectral_radius(&g).unwrap_or(f64::INFINITY);
    SmallGainCertificate {
        gain_matrix: g.row_iter().map(|r| r.iter().copied().collect()).collect(),
        spectral_radius: rho,
        pass: rho < 1.0 - SMALL_GAIN_MARGIN,
    }
}

pub fn gain_matrix(part: &LaplacianPartition) -> DMatrix<f64> {
    let m = part.a1.nrows();
    DMatrix::from_fn(m, m, |i, j| part.a1[(i, j)] / part.d1[(i, i)])
}

/// Ten-agent graph with six followers and four leaders used by the bundled
/// scenarios.
pub fn reference_topology() -> DirectedTopology {
    #[rustfmt::skip]
    let l1 = DMatrix::from_row_slice(6, 6, &[
         2.0,  0.0, -1.0,  0.0,  0.0,  0.0,
         0.0,  2.0, -1.0,  0.0,  0.0,  0.0,
        -1.0,  0.0,  4.0, -1.0,  0.0,  0.0,
         0.0,  0.0, -1.0,  3.0, -1.0, -1.0,
         0.0,  0.0,  0.0,  0.0,  3.0, -1.0,
         0.0,  0.0,  0.0,  0.0, -1.0,  2.0,
    ]);
    #[rustfmt::skip]
    let l2 = DMatrix::from_row_slice(6, 4, &[
        -1.0,  0.0,  0.0,  0.0,
         0.0, -1.0,  0.0,  0.0,
         0.0, -1.0, -1.0,  0.0,
         0.0,  0.0,  0.0,  0.0,
         0.0, -1.0, -1.0,  0.0,
         0.0,  0.0,  0.0, -1.0,
    ]);
    DirectedTopology::from_laplacian_blocks(&l1, &l2).expect("reference topology is well formed")
}

/// Random topology satisfying leader reachability: each follower gets an edge
/// from a random earlier-visited agent (a leader or an already-wired
/// follower), plus extra random edges, so the result is connected from the
/// leader set by construction.
pub fn random_topology<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize, extra_edge_prob: f64) -> DirectedTopology {
    assert!(m >= 1 && m < n);
    let mut w = DMatrix::zeros(n, n);
    let mut order: Vec<usize> = (0..m).collect();
    // Fisher-Yates so the spanning structure is not tied to index order
    for k in (1..m).rev() {
        let r = rng.random_range(0..=k);
        order.swap(k, r);
    }
    let mut wired: Vec<usize> = (m..n).collect();
    for &i in &order {
        let src = wired[rng.random_range(0..wired.len())];
        w[(i, src)] = rng.random_range(0.1..3.0);
        wired.push(i);
    }
    for i in 0..m {
        for j in 0..n {
            if i != j && w[(i, j)] == 0.0 && rng.random_bool(extra_edge_prob) {
                w[(i, j)] = rng.random_range(0.1..3.0);
            }
        }
    }
    DirectedTopology::new(m, w).expect("random topology is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_agent() -> DirectedTopology {
        DirectedTopology::from_rows(1, &[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap()
    }

    #[test]
    fn single_edge_is_reachable_and_partitions() {
        let t = two_agent();
        assert!(validate_assumption1(&t).satisfied);
        let p = partition(&t).unwrap();
        assert_eq!(p.l1, DMatrix::from_element(1, 1, 1.0));
        assert_eq!(p.l2, DMatrix::from_element(1, 1, -1.0));
        assert_eq!(p.d1, DMatrix::from_element(1, 1, 1.0));
        let w = containment_weights(&p).unwrap();
        assert_eq!(w.matrix(), &DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn isolated_follower_is_unreachable() {
        // m=2, n=3: follower 0 listens to leader 2, follower 1 listens to nobody
        let t = DirectedTopology::from_rows(2, &[vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 0.0], vec![0.0; 3]]).unwrap();
        let r = validate_assumption1(&t);
        assert!(!r.satisfied);
        assert_eq!(r.unreachable, vec![1]);
        assert_eq!(partition(&t), Err(TopologyError::ZeroInDegree { i: 1 }));
    }

    #[test]
    fn follower_cycle_without_leader_edge_fails_certificate() {
        let t = DirectedTopology::from_rows(2, &[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap();
        assert!(!validate_assumption1(&t).satisfied);
        let p = partition(&t).unwrap();
        let cert = small_gain_certificate(&p);
        assert!((cert.spectral_radius - 1.0).abs() < 1e-12);
        assert!(!cert.pass);
        assert_eq!(containment_weights(&p), Err(TopologyError::SingularL1));
    }

    #[test]
    fn leader_only_neighbors_give_zero_gain() {
        let cert = small_gain_certificate(&partition(&two_agent()).unwrap());
        assert_eq!(cert.gain_matrix, vec![vec![0.0]]);
        assert_eq!(cert.spectral_radius, 0.0);
        assert!(cert.pass);
    }

    #[test]
    fn hand_solved_two_by_two_weights() {
        let l1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, -1.0, 2.0]);
        let l2 = DMatrix::from_row_slice(2, 2, &[-2.0, 0.0, 0.0, -1.0]);
        let t = DirectedTopology::from_laplacian_blocks(&l1, &l2).unwrap();
        let w = containment_weights(&partition(&t).unwrap()).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.5]);
        assert!((w.matrix() - expected).abs().max() < 1e-15);
    }

    #[test]
    fn reference_topology_blocks_match_printed_matrices() {
        let t = reference_topology();
        assert_eq!((t.n(), t.m()), (10, 6));
        assert!(validate_assumption1(&t).satisfied);
        let p = partition(&t).unwrap();
        assert_eq!(p.l1[(2, 2)], 4.0);
        assert_eq!(p.l1[(3, 5)], -1.0);
        assert_eq!(p.l2[(2, 1)], -1.0);
        assert_eq!(p.l2[(5, 3)], -1.0);
        // row sums of [L1 L2] vanish
        for i in 0..6 {
            let s = p.l1.row(i).sum() + p.l2.row(i).sum();
            assert_eq!(s, 0.0);
        }
        assert!(is_nonsingular_m_matrix(&p.l1));
        let w = containment_weights(&p).unwrap();
        assert!(w.is_valid());
        assert!(small_gain_certificate(&p).pass);
    }

    #[test]
    fn m_matrix_edge_cases() {
        assert!(is_nonsingular_m_matrix(&DMatrix::from_element(1, 1, 1.0)));
        assert!(!is_nonsingular_m_matrix(&DMatrix::zeros(2, 2)));
        // positive off-diagonal is not a Z-matrix
        assert!(!is_nonsingular_m_matrix(&DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.0, 2.0])));
    }

    #[test]
    fn structural_invariants_are_enforced() {
        assert!(matches!(
            DirectedTopology::from_rows(1, &[vec![1.0, 1.0], vec![0.0, 0.0]]),
            Err(TopologyError::SelfLoop { i: 0 })
        ));
        assert!(matches!(
            DirectedTopology::from_rows(1, &[vec![0.0, 1.0], vec![1.0, 0.0]]),
            Err(TopologyError::LeaderReceives { i: 1, j: 0 })
        ));
        assert!(matches!(
            DirectedTopology::from_rows(2, &[vec![0.0, 1.0], vec![1.0, 0.0]]),
            Err(TopologyError::BadFollowerCount { m: 2, n: 2 })
        ));
        assert!(matches!(
            DirectedTopology::from_rows(1, &[vec![0.0, -1.0], vec![0.0, 0.0]]),
            Err(TopologyError::BadWeight { .. })
        ));
    }

    #[test]
    fn partition_reassembles_full_laplacian() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(3..=9);
            let m = rng.random_range(1..n);
            let t = random_topology(&mut rng, n, m, 0.3);
            let p = partition(&t).unwrap();
            let mut full = DMatrix::zeros(n, n);
            full.view_mut((0, 0), (m, m)).copy_from(&p.l1);
            full.view_mut((0, m), (m, n - m)).copy_from(&p.l2);
            assert_eq!(full, t.laplacian());
            assert_eq!(p.l1, &p.d1 - &p.a1);
            assert_eq!(p.l2, -&p.a2);
        }
    }

    #[test]
    fn weights_agree_with_explicit_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let m = rng.random_range(1..=6);
            let n = m + rng.random_range(1..=4);
            let t = random_topology(&mut rng, n, m, 0.4);
            let p = partition(&t).unwrap();
            let w = containment_weights(&p).unwrap();
            let explicit = -p.l1.clone().try_inverse().unwrap() * &p.l2;
            assert!((w.matrix() - explicit).abs().max() < 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn random_topologies_are_certified(seed in any::<u64>(), n in 2usize..=12, frac in 0.0f64..1.0, p in 0.0f64..0.8) {
                let m = 1 + ((n - 1) as f64 * frac) as usize % (n - 1);
                let topo = random_topology(&mut ChaCha8Rng::seed_from_u64(seed), n, m, p);
                prop_assert!(validate_assumption1(&topo).satisfied);
                let part = partition(&topo).unwrap();
                let w = containment_weights(&part).unwrap();
                prop_assert!(w.min_entry() >= -WEIGHT_NONNEG_TOL);
                prop_assert!(w.max_row_sum_deviation() <= ROW_SUM_TOL);
                prop_assert!(is_nonsingular_m_matrix(&part.l1));
                prop_assert!(small_gain_certificate(&part).spectral_radius < 1.0);
            }

            #[test]
            fn leaders_at_one_point_pull_followers_there(seed in any::<u64>(), x in -10.0f64..10.0, y in -10.0f64..10.0) {
                let topo = random_topology(&mut ChaCha8Rng::seed_from_u64(seed), 8, 5, 0.3);
                let w = containment_weights(&partition(&topo).unwrap()).unwrap();
                let leaders: Vec<f64> = (0..3).flat_map(|_| [x, y]).collect();
                for (k, v) in w.apply(&leaders, 2).iter().enumerate() {
                    let target = if k % 2 == 0 { x } else { y };
                    prop_assert!((v - target).abs() < 1e-9 * (1.0 + target.abs()));
                }
            }
        }
    }
}
