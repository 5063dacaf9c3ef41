//! Mixing matrices for the communication graph.
//!
//! A [`MixingMatrix`] is a symmetric doubly-stochastic weight matrix `W`
//! together with its spectral gap `delta = 1 - |lambda_2(W)|` (eigenvalues
//! ordered by absolute value) and `lambda_dev = max_i (1 - lambda_i(W))`.
//! For symmetric `W` with spectrum in `[-1, 1]` the latter also equals
//! `||W - I||_2`, which is why only symmetric matrices are accepted.

use std::collections::VecDeque;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on row and column sums for user-supplied matrices.
pub const STOCHASTIC_TOL: f64 = 1e-10;

/// Description of a graph as it appears in a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologySpec {
    Ring { n: usize, self_weight: f64 },
    Complete { n: usize },
    /// Off-diagonal weights as `(i, j, w)`; self weights fill each row to 1
    /// unless given explicitly.
    Custom {
        n: usize,
        edges: Vec<(usize, usize, f64)>,
        self_weights: Option<Vec<f64>>,
    },
}

impl TopologySpec {
    pub fn n(&self) -> usize {
        match self {
            TopologySpec::Ring { n, .. }
            | TopologySpec::Complete { n }
            | TopologySpec::Custom { n, .. } => *n,
        }
    }

    pub fn build(&self) -> Result<MixingMatrix> {
        match self {
            TopologySpec::Ring { n, self_weight } => MixingMatrix::ring(*n, *self_weight),
            TopologySpec::Complete { n } => MixingMatrix::complete(*n),
            TopologySpec::Custom {
                n,
                edges,
                self_weights,
            } => MixingMatrix::custom(*n, edges, self_weights.as_deref()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MixingMatrix {
    w: DMatrix<f64>,
    neighbors: Vec<Vec<usize>>,
    delta: f64,
    lambda_dev: f64,
}

impl MixingMatrix {
    /// Ring where each node keeps `self_weight` and splits the rest evenly
    /// between its two neighbours.
    pub fn ring(n: usize, self_weight: f64) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidTopology(format!(
                "ring needs at least 3 nodes, got {n}"
            )));
        }
        if !(self_weight > 0.0 && self_weight < 1.0) {
            return Err(Error::InvalidTopology(format!(
                "ring self weight must lie in (0, 1), got {self_weight}"
            )));
        }
        let side = (1.0 - self_weight) / 2.0;
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            w[(i, i)] = self_weight;
            w[(i, (i + 1) % n)] = side;
            w[(i, (i + n - 1) % n)] = side;
        }
        Self::from_dense(w, 1e-12)
    }

    /// Complete graph with uniform weights `1/n` (the averaging matrix J).
    pub fn complete(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidTopology(format!(
                "complete graph needs at least 2 nodes, got {n}"
            )));
        }
        Self::from_dense(DMatrix::from_element(n, n, 1.0 / n as f64), 1e-12)
    }

    /// Graph from an explicit weighted edge list.
    ///
    /// Each `(i, j, w)` sets both `W[i][j]` and `W[j][i]` unless the mirror
    /// entry was already given with a different value, which is reported as
    /// a symmetry error.
    pub fn custom(
        n: usize,
        edges: &[(usize, usize, f64)],
        self_weights: Option<&[f64]>,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidTopology(format!(
                "custom graph needs at least 2 nodes, got {n}"
            )));
        }
        let mut w = DMatrix::zeros(n, n);
        let mut set = DMatrix::from_element(n, n, false);
        for &(i, j, weight) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidTopology(format!(
                    "edge ({i}, {j}) out of range for {n} nodes"
                )));
            }
            if i == j {
                return Err(Error::InvalidTopology(format!(
                    "self loop ({i}, {i}) in edge list; use self weights"
                )));
            }
            if !weight.is_finite() || weight < 0.0 {
                return Err(Error::NotStochastic(format!(
                    "edge ({i}, {j}) has weight {weight}"
                )));
            }
            if set[(i, j)] && w[(i, j)] != weight {
                return Err(Error::NotSymmetric { i, j });
            }
            w[(i, j)] = weight;
            set[(i, j)] = true;
            if !set[(j, i)] {
                w[(j, i)] = weight;
            }
        }
        for i in 0..n {
            w[(i, i)] = match self_weights {
                Some(sw) => *sw.get(i).ok_or_else(|| {
                    Error::InvalidTopology(format!("missing self weight for node {i}"))
                })?,
                None => 1.0 - (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum::<f64>(),
            };
        }
        Self::from_dense(w, STOCHASTIC_TOL)
    }

    /// Validates a dense matrix and computes its spectral quantities.
    pub fn from_dense(w: DMatrix<f64>, tol: f64) -> Result<Self> {
        let n = w.nrows();
        if n == 0 || w.ncols() != n {
            return Err(Error::InvalidTopology(format!(
                "mixing matrix must be square and non-empty, got {}x{}",
                w.nrows(),
                w.ncols()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let v = w[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::NotStochastic(format!("entry ({i}, {j}) = {v}")));
                }
                if v != w[(j, i)] {
                    return Err(Error::NotSymmetric { i, j });
                }
            }
        }
        for i in 0..n {
            let row: f64 = w.row(i).iter().sum();
            let col: f64 = w.column(i).iter().sum();
            if (row - 1.0).abs() > tol {
                return Err(Error::NotStochastic(format!("row {i} sums to {row}")));
            }
            if (col - 1.0).abs() > tol {
                return Err(Error::NotStochastic(format!("column {i} sums to {col}")));
            }
        }
        let neighbors: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && w[(i, j)] > 0.0).collect())
            .collect();
        if !is_connected(&neighbors) {
            return Err(Error::Disconnected);
        }
        let (delta, lambda_dev) = spectral_quantities(&w)?;
        if delta <= 0.0 {
            return Err(Error::InvalidTopology(
                "spectral gap is zero (periodic or disconnected chain)".into(),
            ));
        }
        Ok(Self {
            w,
            neighbors,
            delta,
            lambda_dev,
        })
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[(i, j)]
    }

    /// Row `i` of W as a plain vector.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.w.row(i).iter().copied().collect()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Neighbours of `i`, excluding `i`, in ascending order.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn lambda_dev(&self) -> f64 {
        self.lambda_dev
    }

    /// Edge list of the upper triangle plus the diagonal, suitable for
    /// feeding back into [`MixingMatrix::custom`].
    pub fn edges(&self) -> (Vec<(usize, usize, f64)>, Vec<f64>) {
        let n = self.n();
        let mut edges = Vec::new();
        for i in 0..n {
            for &j in &self.neighbors[i] {
                if j > i {
                    edges.push((i, j, self.w[(i, j)]));
                }
            }
        }
        let diag = (0..n).map(|i| self.w[(i, i)]).collect();
        (edges, diag)
    }

    /// `||W^k - 11^T/n||_2`.
    pub fn power_deviation(&self, k: u32) -> Result<f64> {
        power_deviation(&self.w, k)
    }
}

fn is_connected(neighbors: &[Vec<usize>]) -> bool {
    let n = neighbors.len();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for &j in &neighbors[i] {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    SymmetricEigen::try_new(m.clone(), 1e-15, 10_000)
        .map(|e| e.eigenvalues.iter().copied().collect())
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))
}

/// Returns `(delta, lambda_dev)` for a symmetric matrix.
///
/// `delta = 1 - |lambda_2|` with eigenvalues sorted by absolute value,
/// `lambda_dev = max_i (1 - lambda_i)` over the signed spectrum.
pub fn spectral_quantities(w: &DMatrix<f64>) -> Result<(f64, f64)> {
    let mut eig = symmetric_eigenvalues(w)?;
    if eig.len() < 2 {
        return Err(Error::InvalidTopology("need at least 2 nodes".into()));
    }
    let lambda_dev = eig.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(1.0 - l));
    eig.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    let delta = 1.0 - eig[1].abs();
    Ok((delta, lambda_dev))
}

/// Spectral norm of `W^k - 11^T/n`, computed from the explicit matrix power.
pub fn power_deviation(w: &DMatrix<f64>, k: u32) -> Result<f64> {
    let n = w.nrows();
    let mut p = DMatrix::<f64>::identity(n, n);
    for _ in 0..k {
        p = &p * w;
    }
    let dev = p - DMatrix::from_element(n, n, 1.0 / n as f64);
    // Symmetrize away rounding so the symmetric solver applies.
    let dev = (&dev + dev.transpose()) * 0.5;
    Ok(symmetric_eigenvalues(&dev)?
        .into_iter()
        .fold(0.0_f64, |m, l| m.max(l.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Closed-form ring spectrum: 1/3 + (2/3)cos(2 pi k / n) for self weight 1/3.
    fn ring_eigs(n: usize, s: f64) -> Vec<f64> {
        (0..n)
            .map(|k| s + (1.0 - s) * (2.0 * PI * k as f64 / n as f64).cos())
            .collect()
    }

    #[test]
    fn ring_eight_third() {
        let m = MixingMatrix::ring(8, 1.0 / 3.0).unwrap();
        let eig = ring_eigs(8, 1.0 / 3.0);
        let mut abs: Vec<f64> = eig.iter().map(|l| l.abs()).collect();
        abs.sort_by(|a, b| b.total_cmp(a));
        assert!((m.delta() - (1.0 - abs[1])).abs() < 1e-12);
        assert!((m.delta() - 0.19526).abs() < 1e-5);
        assert!((m.lambda_dev() - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.neighbors(0), &[1, 7]);
    }

    #[test]
    fn ring_three_is_complete() {
        let m = MixingMatrix::ring(3, 1.0 / 3.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((m.weight(i, j) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        assert!((m.delta() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ring_eight_half() {
        let m = MixingMatrix::ring(8, 0.5).unwrap();
        let expected = 1.0 - (0.5 + 0.25 * 2.0 * (PI / 4.0).cos());
        assert!((m.delta() - expected).abs() < 1e-12);
        assert!((m.delta() - 0.14645).abs() < 1e-5);
    }

    #[test]
    fn ring_rejects_bad_input() {
        assert!(matches!(
            MixingMatrix::ring(2, 0.5),
            Err(Error::InvalidTopology(_))
        ));
        assert!(MixingMatrix::ring(5, 0.0).is_err());
        assert!(MixingMatrix::ring(5, 1.0).is_err());
    }

    #[test]
    fn complete_graphs() {
        let m2 = MixingMatrix::complete(2).unwrap();
        assert_eq!(m2.row(0), vec![0.5, 0.5]);
        assert!((m2.delta() - 1.0).abs() < 1e-12);
        let m4 = MixingMatrix::complete(4).unwrap();
        assert!(m4.matrix().iter().all(|&v| v == 0.25));
        let m8 = MixingMatrix::complete(8).unwrap();
        assert!((m8.lambda_dev() - 1.0).abs() < 1e-12);
        assert!((m8.delta() - 1.0).abs() < 1e-12);
        assert!(matches!(
            MixingMatrix::complete(1),
            Err(Error::InvalidTopology(_))
        ));
    }

    #[test]
    fn custom_graphs() {
        let pair = MixingMatrix::custom(2, &[(0, 1, 0.5)], None).unwrap();
        assert_eq!(pair.matrix(), MixingMatrix::complete(2).unwrap().matrix());

        let ring4 = MixingMatrix::custom(
            4,
            &[(0, 1, 0.25), (1, 2, 0.25), (2, 3, 0.25), (3, 0, 0.25)],
            None,
        )
        .unwrap();
        assert!((ring4.delta() - 0.5).abs() < 1e-12);

        // Star with mismatched mirror weights.
        let star = MixingMatrix::custom(4, &[(0, 1, 0.2), (1, 0, 0.3), (0, 2, 0.2)], None);
        assert!(matches!(star, Err(Error::NotSymmetric { .. })));

        let split = MixingMatrix::custom(4, &[(0, 1, 0.5), (2, 3, 0.5)], None);
        assert!(matches!(split, Err(Error::Disconnected)));

        let heavy = MixingMatrix::custom(3, &[(0, 1, 0.5), (1, 2, 0.5)], Some(&[0.5, 0.2, 0.5]));
        assert!(matches!(heavy, Err(Error::NotStochastic(_))));
    }

    #[test]
    fn identity_has_no_gap() {
        let (delta, _) = spectral_quantities(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(delta, 0.0);
        assert!(MixingMatrix::from_dense(DMatrix::identity(4, 4), 1e-12).is_err());
    }

    #[test]
    fn power_deviation_examples() {
        let ring = MixingMatrix::ring(8, 1.0 / 3.0).unwrap();
        assert!((ring.power_deviation(0).unwrap() - 1.0).abs() < 1e-12);
        let lam2 = 1.0 / 3.0 + 2.0 / 3.0 * (PI / 4.0).cos();
        assert!((ring.power_deviation(3).unwrap() - lam2.powi(3)).abs() < 1e-12);
        assert!((ring.power_deviation(3).unwrap() - 0.52116).abs() < 1e-5);
        let j = MixingMatrix::complete(5).unwrap();
        assert!(j.power_deviation(1).unwrap() < 1e-14);
    }

    #[test]
    fn power_deviation_matches_gap_powers() {
        for n in [3, 4, 5, 8, 16] {
            for s in [0.2, 1.0 / 3.0, 0.5, 0.9] {
                let m = MixingMatrix::ring(n, s).unwrap();
                for k in 0..=10 {
                    let lhs = m.power_deviation(k).unwrap();
                    let rhs = (1.0 - m.delta()).powi(k as i32);
                    assert!((lhs - rhs).abs() < 1e-8, "n={n} s={s} k={k}");
                }
            }
        }
    }

    #[test]
    fn ring_round_trips_through_custom() {
        for n in [3, 6, 11] {
            let ring = MixingMatrix::ring(n, 0.4).unwrap();
            let (edges, diag) = ring.edges();
            let rebuilt = MixingMatrix::custom(n, &edges, Some(&diag)).unwrap();
            assert_eq!(ring.matrix(), rebuilt.matrix());
        }
    }

    #[test]
    fn invariants_hold_for_rings() {
        for n in 3..20 {
            let m = MixingMatrix::ring(n, 1.0 / 3.0).unwrap();
            let w = m.matrix();
            for i in 0..n {
                assert!((w.row(i).sum() - 1.0).abs() < 1e-12);
                assert!((w.column(i).sum() - 1.0).abs() < 1e-12);
                for j in 0..n {
                    assert_eq!(w[(i, j)], w[(j, i)]);
                }
            }
            assert!(m.delta() > 0.0 && m.delta() <= 1.0);
            assert!(m.lambda_dev() > 0.0 && m.lambda_dev() <= 2.0);
        }
    }
}
