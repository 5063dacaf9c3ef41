//! Per-node objectives `f_i`, their stochastic gradient oracles and the
//! global objective `f = (1/n) sum_i f_i`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Quadratic,
    LeastSquares,
    LogisticL2,
    LeastSquaresNonconvex,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Quadratic => "quadratic",
            ObjectiveKind::LeastSquares => "least_squares",
            ObjectiveKind::LogisticL2 => "logistic_l2",
            ObjectiveKind::LeastSquaresNonconvex => "least_squares_nonconvex",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "quadratic" => ObjectiveKind::Quadratic,
            "least_squares" => ObjectiveKind::LeastSquares,
            "logistic_l2" => ObjectiveKind::LogisticL2,
            "least_squares_nonconvex" => ObjectiveKind::LeastSquaresNonconvex,
            other => return Err(format!("unknown objective kind `{other}`")),
        })
    }
}

/// `f_i(x) = 1/2 x^T A x - b^T x + c`.
#[derive(Clone, Debug)]
struct QuadraticTerm {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
}

/// Labelled samples, one per row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(first) = features.first() {
            let d = first.len();
            if let Some((i, _)) = features.iter().enumerate().find(|(_, r)| r.len() != d) {
                return Err(Error::Data(format!("row {i} has a different width")));
            }
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Parses one sample per line: comma-separated features, label last.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
            if fields.len() < 2 {
                return Err(Error::Data(format!(
                    "line {}: need at least one feature and a label",
                    lineno + 1
                )));
            }
            let (label, feats) = fields.split_last().expect("non-empty");
            labels.push(*label);
            features.push(feats.to_vec());
        }
        Self::new(features, labels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Linear-regression samples `y = a^T w + noise` with standard-normal `a`.
pub fn synthetic_regression(m: usize, d: usize, noise: f64, rng: &mut impl Rng) -> Dataset {
    let w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut features = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        let a: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let e: f64 = rng.sample(StandardNormal);
        labels.push(a.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() + noise * e);
        features.push(a);
    }
    Dataset { features, labels }
}

/// Binary labels in {0, 1} from a random linear separator with 10% flips.
pub fn synthetic_classification(m: usize, d: usize, rng: &mut impl Rng) -> Dataset {
    let w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut features = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        let a: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let score: f64 = a.iter().zip(&w).map(|(x, y)| x * y).sum();
        let flip = rng.random::<f64>() < 0.1;
        labels.push(if (score > 0.0) != flip { 1.0 } else { 0.0 });
        features.push(a);
    }
    Dataset { features, labels }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    #[default]
    Iid,
    SortedByLabel,
}

impl FromStr for PartitionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "iid" => Ok(PartitionMode::Iid),
            "sorted_by_label" => Ok(PartitionMode::SortedByLabel),
            other => Err(format!("unknown partition mode `{other}`")),
        }
    }
}

/// Splits `dataset` into `n` disjoint shards covering it.
///
/// `Iid` deals a random permutation round-robin. `SortedByLabel` gives each
/// node a contiguous block of the label-sorted data. Shard sizes differ by at
/// most one in both modes.
pub fn partition_heterogeneous(
    dataset: &Dataset,
    n: usize,
    mode: PartitionMode,
    rng: &mut impl Rng,
) -> Result<Vec<Dataset>> {
    let m = dataset.len();
    if m == 0 {
        return Err(Error::Partition("dataset is empty".into()));
    }
    if n == 0 || n > m {
        return Err(Error::Partition(format!(
            "cannot split {m} samples over {n} nodes"
        )));
    }
    let shards: Vec<Vec<usize>> = match mode {
        PartitionMode::Iid => {
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(rng);
            (0..n)
                .map(|i| perm.iter().skip(i).step_by(n).copied().collect())
                .collect()
        }
        PartitionMode::SortedByLabel => {
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| dataset.labels[a].total_cmp(&dataset.labels[b]));
            let (base, extra) = (m / n, m % n);
            let mut start = 0;
            (0..n)
                .map(|i| {
                    let len = base + usize::from(i < extra);
                    let block = order[start..start + len].to_vec();
                    start += len;
                    block
                })
                .collect()
        }
    };
    Ok(shards.iter().map(|idx| dataset.subset(idx)).collect())
}

#[derive(Clone, Debug)]
struct Shard {
    /// One sample per row.
    features: DMatrix<f64>,
    targets: Vec<f64>,
}

#[derive(Clone, Debug)]
enum NodeData {
    Quadratic(Vec<QuadraticTerm>),
    Samples(Vec<Shard>),
}

/// Parameters of the synthetic strongly-convex quadratic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticParams {
    pub n: usize,
    pub d: usize,
    /// Smallest eigenvalue of the averaged Hessian.
    pub mu: f64,
    /// Largest eigenvalue of the averaged Hessian.
    pub l: f64,
    pub noise_sigma: f64,
    /// Scale of the per-node offsets in the linear terms.
    pub heterogeneity: f64,
    /// Relative per-node perturbation of the Hessian eigenvalues, in [0, 0.45].
    pub curvature_spread: f64,
}

#[derive(Clone, Debug)]
pub struct ObjectiveSet {
    kind: ObjectiveKind,
    n: usize,
    d: usize,
    data: NodeData,
    l: f64,
    mu: f64,
    noise_sigma: f64,
    /// l2 weight for logistic_l2, alpha for least_squares_nonconvex.
    reg: f64,
    batch_size: usize,
    clip: Option<f64>,
}

fn eig_range(m: &DMatrix<f64>) -> Result<(f64, f64)> {
    let e = SymmetricEigen::try_new(m.clone(), 1e-15, 10_000)
        .ok_or_else(|| Error::Numerical("eigensolver did not converge".into()))?;
    let lo = e.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = e.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ObjectiveSet {
    /// Quadratic nodes `f_i(x) = 1/2 x^T A_i x - b_i^T x + c_i` with additive
    /// Gaussian gradient noise of scale `noise_sigma`.
    pub fn quadratic(
        a: Vec<DMatrix<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<f64>,
        noise_sigma: f64,
    ) -> Result<Self> {
        let n = a.len();
        if n == 0 || b.len() != n || c.len() != n {
            return Err(Error::Data("quadratic needs matching, non-empty A, b, c".into()));
        }
        let d = a[0].nrows();
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::param(format!("noise_sigma must be >= 0, got {noise_sigma}")));
        }
        let mut terms = Vec::with_capacity(n);
        let mut l: f64 = 0.0;
        let mut mean = DMatrix::zeros(d, d);
        for ((ai, bi), ci) in a.into_iter().zip(b).zip(c) {
            if ai.nrows() != d || ai.ncols() != d || bi.len() != d {
                return Err(Error::Data("quadratic blocks have inconsistent sizes".into()));
            }
            if (&ai - ai.transpose()).amax() > 1e-12 * (1.0 + ai.amax()) {
                return Err(Error::Data("quadratic Hessian must be symmetric".into()));
            }
            l = l.max(eig_range(&ai)?.1);
            mean += &ai;
            terms.push(QuadraticTerm {
                a: ai,
                b: DVector::from_vec(bi),
                c: ci,
            });
        }
        mean /= n as f64;
        let mu = eig_range(&mean)?.0.max(0.0);
        Ok(Self {
            kind: ObjectiveKind::Quadratic,
            n,
            d,
            data: NodeData::Quadratic(terms),
            l,
            mu,
            noise_sigma,
            reg: 0.0,
            batch_size: 1,
            clip: None,
        })
    }

    /// Random quadratic whose averaged Hessian has eigenvalues evenly spaced
    /// in `[mu, l]` under a random rotation, and whose optimum `x*` is a
    /// standard-normal draw. Constants are chosen so that `f* = 0`.
    pub fn synthetic_quadratic(p: &QuadraticParams, rng: &mut impl Rng) -> Result<Self> {
        if p.n == 0 || p.d == 0 {
            return Err(Error::param("quadratic needs n >= 1 and d >= 1"));
        }
        if !(p.mu > 0.0 && p.l >= p.mu) {
            return Err(Error::param(format!(
                "quadratic needs 0 < mu <= L, got mu={} L={}",
                p.mu, p.l
            )));
        }
        if !(0.0..=0.45).contains(&p.curvature_spread) {
            return Err(Error::param("curvature_spread must lie in [0, 0.45]"));
        }
        let (n, d) = (p.n, p.d);
        let gauss = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = gauss.qr().q();
        let eig: Vec<f64> = (0..d)
            .map(|j| {
                if d == 1 {
                    p.mu
                } else {
                    p.mu + (p.l - p.mu) * j as f64 / (d - 1) as f64
                }
            })
            .collect();
        let x_star: DVector<f64> = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));

        // Zero-mean perturbations across nodes keep the average exact.
        let centered = |rng: &mut dyn FnMut() -> f64| -> Vec<Vec<f64>> {
            let mut u: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng()).collect()).collect();
            for j in 0..d {
                let m = u.iter().map(|r| r[j]).sum::<f64>() / n as f64;
                u.iter_mut().for_each(|r| r[j] -= m);
            }
            u
        };
        let spread = centered(&mut || rng.random_range(-1.0..1.0));
        let offsets = centered(&mut || rng.sample(StandardNormal));

        let a_bar = &q * DMatrix::from_diagonal(&DVector::from_vec(eig.clone())) * q.transpose();
        let a_bar = (&a_bar + a_bar.transpose()) * 0.5;
        let f_star_shift = 0.5 * x_star.dot(&(&a_bar * &x_star));
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for i in 0..n {
            let diag = DVector::from_fn(d, |j, _| eig[j] * (1.0 + p.curvature_spread * spread[i][j]));
            let ai = &q * DMatrix::from_diagonal(&diag) * q.transpose();
            let ai = (&ai + ai.transpose()) * 0.5;
            let bi = &ai * &x_star + DVector::from_vec(offsets[i].clone()) * p.heterogeneity;
            a.push(ai);
            b.push(bi.iter().copied().collect());
        }
        let mut obj = Self::quadratic(a, b, vec![f_star_shift; n], p.noise_sigma)?;
        // The constant makes f* = 0 up to rounding; recompute exactly.
        if let Some((_, f)) = obj.optimum()? {
            if let NodeData::Quadratic(terms) = &mut obj.data {
                terms.iter_mut().for_each(|t| t.c -= f);
            }
        }
        Ok(obj)
    }

    fn from_shards(
        kind: ObjectiveKind,
        shards: &[Dataset],
        reg: f64,
        batch_size: usize,
    ) -> Result<Self> {
        let n = shards.len();
        if n == 0 {
            return Err(Error::Data("no node shards".into()));
        }
        if let Some(i) = shards.iter().position(Dataset::is_empty) {
            return Err(Error::Data(format!("node {i} has an empty local dataset")));
        }
        if batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        if !(reg >= 0.0 && reg.is_finite()) {
            return Err(Error::param(format!("regularization must be >= 0, got {reg}")));
        }
        let d = shards[0].dim();
        if d == 0 || shards.iter().any(|s| s.dim() != d) {
            return Err(Error::Data("shards have inconsistent or zero feature width".into()));
        }
        let mut data = Vec::with_capacity(n);
        let mut l_data: f64 = 0.0;
        let mut mean_gram = DMatrix::zeros(d, d);
        for s in shards {
            let m = s.len();
            let features = DMatrix::from_fn(m, d, |r, c| s.features[r][c]);
            let gram = features.transpose() * &features / m as f64;
            l_data = l_data.max(eig_range(&gram)?.1);
            mean_gram += &gram;
            let targets = match kind {
                ObjectiveKind::LogisticL2 => s
                    .labels
                    .iter()
                    .map(|&y| if y > 0.0 { 1.0 } else { -1.0 })
                    .collect(),
                _ => s.labels.clone(),
            };
            data.push(Shard { features, targets });
        }
        mean_gram /= n as f64;
        let (l, mu) = match kind {
            ObjectiveKind::LeastSquares => (l_data, eig_range(&mean_gram)?.0.max(0.0)),
            ObjectiveKind::LogisticL2 => (l_data / 4.0 + reg, reg),
            // |d^2/dx^2 x^2/(1+x^2)| <= 2.
            ObjectiveKind::LeastSquaresNonconvex => (l_data + 2.0 * reg, 0.0),
            ObjectiveKind::Quadratic => unreachable!("quadratic is built from blocks"),
        };
        Ok(Self {
            kind,
            n,
            d,
            data: NodeData::Samples(data),
            l,
            mu,
            noise_sigma: 0.0,
            reg,
            batch_size,
            clip: None,
        })
    }

    /// `f_i(x) = 1/(2m) sum (a^T x - y)^2` over the node's samples.
    pub fn least_squares(shards: &[Dataset], batch_size: usize) -> Result<Self> {
        Self::from_shards(ObjectiveKind::LeastSquares, shards, 0.0, batch_size)
    }

    /// Mean logistic loss plus `reg/2 ||x||^2`. Labels `> 0` count as +1.
    pub fn logistic_l2(shards: &[Dataset], reg: f64, batch_size: usize) -> Result<Self> {
        if reg <= 0.0 {
            return Err(Error::param("logistic_l2 needs a positive l2 weight"));
        }
        Self::from_shards(ObjectiveKind::LogisticL2, shards, reg, batch_size)
    }

    /// Least squares plus `alpha * sum_j x_j^2 / (1 + x_j^2)`.
    pub fn least_squares_nonconvex(shards: &[Dataset], alpha: f64, batch_size: usize) -> Result<Self> {
        Self::from_shards(ObjectiveKind::LeastSquaresNonconvex, shards, alpha, batch_size)
    }

    /// Clips every stochastic gradient to Euclidean norm at most `g`.
    pub fn with_clip(mut self, g: f64) -> Result<Self> {
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::param(format!("clip bound must be positive, got {g}")));
        }
        self.clip = Some(g);
        Ok(self)
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.kind
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn d(&self) -> usize {
        self.d
    }
    /// Smoothness constant shared by every `f_i` (an upper bound).
    pub fn l(&self) -> f64 {
        self.l
    }
    /// Strong-convexity constant of `f` (0 when none is known).
    pub fn mu(&self) -> f64 {
        self.mu
    }
    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }
    pub fn clip(&self) -> Option<f64> {
        self.clip
    }

    fn check_node(&self, node: usize) -> Result<()> {
        if node >= self.n {
            return Err(Error::param(format!("node {node} out of range for {} nodes", self.n)));
        }
        Ok(())
    }

    fn sample_grad(&self, shard: &Shard, row: usize, x: &[f64], out: &mut [f64], weight: f64) {
        let a = shard.features.row(row);
        let z: f64 = a.iter().zip(x).map(|(p, q)| p * q).sum();
        let y = shard.targets[row];
        let coef = match self.kind {
            ObjectiveKind::LogisticL2 => -y * sigmoid(-y * z),
            _ => z - y,
        };
        for (o, v) in out.iter_mut().zip(a.iter()) {
            *o += weight * coef * v;
        }
    }

    fn add_regularizer_grad(&self, x: &[f64], out: &mut [f64]) {
        match self.kind {
            ObjectiveKind::LogisticL2 => {
                out.iter_mut().zip(x).for_each(|(o, v)| *o += self.reg * v);
            }
            ObjectiveKind::LeastSquaresNonconvex => {
                out.iter_mut().zip(x).for_each(|(o, v)| {
                    let q = 1.0 + v * v;
                    *o += self.reg * 2.0 * v / (q * q);
                });
            }
            _ => {}
        }
    }

    fn regularizer(&self, x: &[f64]) -> f64 {
        match self.kind {
            ObjectiveKind::LogisticL2 => 0.5 * self.reg * dot(x, x),
            ObjectiveKind::LeastSquaresNonconvex => {
                self.reg * x.iter().map(|v| v * v / (1.0 + v * v)).sum::<f64>()
            }
            _ => 0.0,
        }
    }

    /// Exact local loss `f_i(x)`.
    pub fn local_loss(&self, node: usize, x: &[f64]) -> Result<f64> {
        self.check_node(node)?;
        Ok(match &self.data {
            NodeData::Quadratic(terms) => {
                let t = &terms[node];
                let xv = DVector::from_column_slice(x);
                0.5 * xv.dot(&(&t.a * &xv)) - t.b.dot(&xv) + t.c
            }
            NodeData::Samples(shards) => {
                let s = &shards[node];
                let m = s.targets.len() as f64;
                let mut total = 0.0;
                for r in 0..s.targets.len() {
                    let z: f64 = s.features.row(r).iter().zip(x).map(|(p, q)| p * q).sum();
                    let y = s.targets[r];
                    total += match self.kind {
                        ObjectiveKind::LogisticL2 => softplus(-y * z),
                        _ => 0.5 * (z - y) * (z - y),
                    };
                }
                total / m + self.regularizer(x)
            }
        })
    }

    /// Exact local gradient `grad f_i(x)`.
    pub fn local_grad(&self, node: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check_node(node)?;
        let mut g = vec![0.0; self.d];
        match &self.data {
            NodeData::Quadratic(terms) => self.quadratic_grad(&terms[node], x, &mut g),
            NodeData::Samples(shards) => {
                let s = &shards[node];
                let w = 1.0 / s.targets.len() as f64;
                for r in 0..s.targets.len() {
                    self.sample_grad(s, r, x, &mut g, w);
                }
                self.add_regularizer_grad(x, &mut g);
            }
        }
        Ok(g)
    }

    fn quadratic_grad(&self, t: &QuadraticTerm, x: &[f64], out: &mut [f64]) {
        let d = self.d;
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = -t.b[r];
            for c in 0..d {
                acc += t.a[(r, c)] * x[c];
            }
            *o = acc;
        }
    }

    /// Unbiased stochastic gradient of `f_i` at `x` (before clipping).
    pub fn stochastic_grad(&self, node: usize, x: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
        self.check_node(node)?;
        let mut g = vec![0.0; self.d];
        match &self.data {
            NodeData::Quadratic(terms) => {
                self.quadratic_grad(&terms[node], x, &mut g);
                if self.noise_sigma > 0.0 {
                    for v in g.iter_mut() {
                        *v += self.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            NodeData::Samples(shards) => {
                let s = &shards[node];
                let m = s.targets.len();
                if m == 0 {
                    return Err(Error::Data(format!("node {node} has no samples")));
                }
                let w = 1.0 / self.batch_size as f64;
                for _ in 0..self.batch_size {
                    let r = rng.random_range(0..m);
                    self.sample_grad(s, r, x, &mut g, w);
                }
                self.add_regularizer_grad(x, &mut g);
            }
        }
        if let Some(bound) = self.clip {
            let norm = dot(&g, &g).sqrt();
            if norm > bound {
                let scale = bound / norm;
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
        Ok(g)
    }

    /// Global objective `f(x) = (1/n) sum_i f_i(x)`.
    pub fn loss(&self, x: &[f64]) -> f64 {
        (0..self.n)
            .map(|i| self.local_loss(i, x).expect("node in range"))
            .sum::<f64>()
            / self.n as f64
    }

    /// Exact `(1/n) sum_i grad f_i(x)`.
    pub fn full_grad_global(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.d];
        for i in 0..self.n {
            let gi = self.local_grad(i, x).expect("node in range");
            g.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
        g.iter_mut().for_each(|v| *v /= self.n as f64);
        g
    }

    /// Closed-form `(x*, f*)` for the quadratic kind, `None` otherwise.
    pub fn optimum(&self) -> Result<Option<(Vec<f64>, f64)>> {
        let NodeData::Quadratic(terms) = &self.data else {
            return Ok(None);
        };
        let n = self.n as f64;
        let a_bar = terms.iter().fold(DMatrix::zeros(self.d, self.d), |acc, t| acc + &t.a) / n;
        let b_bar = terms.iter().fold(DVector::zeros(self.d), |acc, t| acc + &t.b) / n;
        let (lo, hi) = eig_range(&a_bar)?;
        if lo <= 1e-12 * hi.max(1.0) {
            return Err(Error::NoOptimum("averaged Hessian is singular".into()));
        }
        let x = a_bar
            .cholesky()
            .ok_or_else(|| Error::NoOptimum("averaged Hessian is not positive definite".into()))?
            .solve(&b_bar);
        let x: Vec<f64> = x.iter().copied().collect();
        let f = self.loss(&x);
        Ok(Some((x, f)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        e
    }

    fn centred_quadratic(n: usize, d: usize, c: &[f64]) -> ObjectiveSet {
        ObjectiveSet::quadratic(
            vec![DMatrix::identity(d, d); n],
            vec![c.to_vec(); n],
            vec![0.5 * dot(c, c); n],
            0.0,
        )
        .unwrap()
    }

    fn sample_objectives() -> Vec<ObjectiveSet> {
        let mut rng = stream(5, 0);
        let quad = ObjectiveSet::synthetic_quadratic(
            &QuadraticParams {
                n: 4,
                d: 6,
                mu: 0.5,
                l: 3.0,
                noise_sigma: 0.0,
                heterogeneity: 1.0,
                curvature_spread: 0.3,
            },
            &mut rng,
        )
        .unwrap();
        let reg = synthetic_regression(40, 5, 0.1, &mut rng);
        let shards = partition_heterogeneous(&reg, 4, PartitionMode::Iid, &mut rng).unwrap();
        let cls = synthetic_classification(40, 5, &mut rng);
        let cshards = partition_heterogeneous(&cls, 4, PartitionMode::SortedByLabel, &mut rng).unwrap();
        vec![
            quad,
            ObjectiveSet::least_squares(&shards, 2).unwrap(),
            ObjectiveSet::logistic_l2(&cshards, 0.05, 2).unwrap(),
            ObjectiveSet::least_squares_nonconvex(&shards, 0.3, 2).unwrap(),
        ]
    }

    #[test]
    fn quadratic_gradient_examples() {
        let obj = centred_quadratic(1, 3, &[0.0; 3]);
        let x = [1.0, -2.0, 0.5];
        assert_eq!(obj.stochastic_grad(0, &x, &mut stream(0, 0)).unwrap(), x.to_vec());

        let obj = centred_quadratic(1, 3, &unit(3, 0));
        let g = obj.stochastic_grad(0, &[0.0; 3], &mut stream(0, 0)).unwrap();
        assert_eq!(g, vec![-1.0, 0.0, 0.0]);
    }

    #[test]
    fn least_squares_single_sample() {
        let ds = Dataset::new(vec![unit(3, 0)], vec![1.0]).unwrap();
        let obj = ObjectiveSet::least_squares(&[ds], 1).unwrap();
        let g = obj.stochastic_grad(0, &[0.0; 3], &mut stream(0, 0)).unwrap();
        assert_eq!(g, vec![-1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_shard_is_rejected() {
        let empty = Dataset::default();
        assert!(matches!(ObjectiveSet::least_squares(&[empty], 1), Err(Error::Data(_))));
        let obj = centred_quadratic(2, 2, &[0.0, 0.0]);
        assert!(obj.stochastic_grad(2, &[0.0, 0.0], &mut stream(0, 0)).is_err());
    }

    #[test]
    fn optimum_examples() {
        let c = [1.0, -2.0, 3.0];
        let obj = centred_quadratic(3, 3, &c);
        let (x, f) = obj.optimum().unwrap().unwrap();
        for (a, b) in x.iter().zip(&c) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(f.abs() < 1e-12);

        // f1 = (x-1)^2/2, f2 = (x+1)^2/2: f = (x^2 + 1)/2, minimized at 0 with f* = 1/2.
        let two = ObjectiveSet::quadratic(
            vec![DMatrix::identity(1, 1); 2],
            vec![vec![1.0], vec![-1.0]],
            vec![0.5, 0.5],
            0.0,
        )
        .unwrap();
        let (x, f) = two.optimum().unwrap().unwrap();
        assert!(x[0].abs() < 1e-15);
        assert!((f - 0.5).abs() < 1e-15);

        let objs = sample_objectives();
        assert!(objs[2].optimum().unwrap().is_none());

        let singular = ObjectiveSet::quadratic(
            vec![DMatrix::zeros(2, 2)],
            vec![vec![0.0, 0.0]],
            vec![0.0],
            0.0,
        )
        .unwrap();
        assert!(matches!(singular.optimum(), Err(Error::NoOptimum(_))));
    }

    #[test]
    fn synthetic_quadratic_constants() {
        let obj = &sample_objectives()[0];
        let (x, f) = obj.optimum().unwrap().unwrap();
        assert!(f.abs() < 1e-12);
        assert!(obj.full_grad_global(&x).iter().all(|g| g.abs() < 1e-12));
        assert!((obj.mu() - 0.5).abs() < 1e-10);
        assert!(obj.l() >= 3.0);
    }

    #[test]
    fn global_gradient_is_mean_of_local() {
        for obj in sample_objectives() {
            let x: Vec<f64> = (0..obj.d()).map(|i| 0.3 * i as f64 - 0.7).collect();
            let g = obj.full_grad_global(&x);
            let mut mean = vec![0.0; obj.d()];
            for i in 0..obj.n() {
                for (m, v) in mean.iter_mut().zip(obj.local_grad(i, &x).unwrap()) {
                    *m += v / obj.n() as f64;
                }
            }
            for (a, b) in g.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Central differences of `loss` with step 1e-6.
    fn fd_grad(obj: &ObjectiveSet, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|j| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[j] += h;
                m[j] -= h;
                (obj.loss(&p) - obj.loss(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream(9, 1);
        for obj in sample_objectives() {
            for _ in 0..10 {
                let x: Vec<f64> = (0..obj.d()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let g = obj.full_grad_global(&x);
                let fd = fd_grad(&obj, &x);
                let scale = 1.0 + g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                let err = g.iter().zip(&fd).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
                assert!(err / scale < 1e-4, "{}: {err}", obj.kind());
            }
        }
    }

    #[test]
    fn smoothness_probe() {
        let mut rng = stream(10, 1);
        for obj in sample_objectives() {
            for _ in 0..100 {
                let x: Vec<f64> = (0..obj.d()).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
                let y: Vec<f64> = (0..obj.d()).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
                let gx = obj.full_grad_global(&x);
                let gy = obj.full_grad_global(&y);
                let dg: f64 = gx.iter().zip(&gy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let dx: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                assert!(dg <= obj.l() * (1.0 + 1e-6) * dx, "{}", obj.kind());
            }
        }
    }

    #[test]
    fn stochastic_gradients_are_unbiased() {
        let mut objs = sample_objectives();
        objs[0] = ObjectiveSet::synthetic_quadratic(
            &QuadraticParams {
                n: 4,
                d: 6,
                mu: 0.5,
                l: 3.0,
                noise_sigma: 0.7,
                heterogeneity: 1.0,
                curvature_spread: 0.0,
            },
            &mut stream(1, 1),
        )
        .unwrap();
        let draws = 10_000;
        for obj in objs {
            let x: Vec<f64> = (0..obj.d()).map(|i| 0.1 * i as f64).collect();
            let exact = obj.local_grad(1, &x).unwrap();
            let mut rng = stream(77, 0);
            let mut sum = vec![0.0; obj.d()];
            let mut sq = vec![0.0; obj.d()];
            for _ in 0..draws {
                let g = obj.stochastic_grad(1, &x, &mut rng).unwrap();
                for j in 0..obj.d() {
                    sum[j] += g[j];
                    sq[j] += g[j] * g[j];
                }
            }
            for j in 0..obj.d() {
                let mean = sum[j] / draws as f64;
                let var = (sq[j] / draws as f64 - mean * mean).max(0.0);
                let se = (var / draws as f64).sqrt();
                assert!((mean - exact[j]).abs() <= 4.0 * se + 1e-12, "{} coord {j}", obj.kind());
            }
        }
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let sigma = 0.3;
        let obj = ObjectiveSet::quadratic(vec![DMatrix::identity(1, 1)], vec![vec![0.0]], vec![0.0], sigma)
            .unwrap();
        let mut rng = stream(21, 0);
        let draws = 100_000;
        let mut sq = 0.0;
        for _ in 0..draws {
            let g = obj.stochastic_grad(0, &[0.0], &mut rng).unwrap()[0];
            sq += g * g;
        }
        let var = sq / draws as f64;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn clipping_bounds_gradient_norm() {
        let obj = centred_quadratic(1, 4, &[10.0, -10.0, 5.0, 0.0]).with_clip(1.0).unwrap();
        let g = obj.stochastic_grad(0, &[0.0; 4], &mut stream(0, 0)).unwrap();
        assert!((dot(&g, &g).sqrt() - 1.0).abs() < 1e-12);
        assert!(centred_quadratic(1, 1, &[0.0]).with_clip(0.0).is_err());
    }

    #[test]
    fn partition_examples() {
        let mut rng = stream(3, 3);
        let ds = synthetic_regression(10, 2, 0.0, &mut rng);
        let one = partition_heterogeneous(&ds, 1, PartitionMode::Iid, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].len(), 10);

        let four = Dataset::new(vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]], vec![1.0, 0.0, 1.0, 0.0])
            .unwrap();
        let by_label = partition_heterogeneous(&four, 2, PartitionMode::SortedByLabel, &mut rng).unwrap();
        assert_eq!(by_label[0].labels, vec![0.0, 0.0]);
        assert_eq!(by_label[0].features, vec![vec![2.0], vec![4.0]]);

        let big = synthetic_regression(100, 3, 0.0, &mut rng);
        let shards = partition_heterogeneous(&big, 8, PartitionMode::Iid, &mut rng).unwrap();
        let sizes: Vec<usize> = shards.iter().map(Dataset::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 100);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<f64> = shards.iter().flat_map(|s| s.labels.clone()).collect();
        let mut orig = big.labels.clone();
        all.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(all, orig);

        assert!(matches!(
            partition_heterogeneous(&four, 5, PartitionMode::Iid, &mut rng),
            Err(Error::Partition(_))
        ));
        assert!(partition_heterogeneous(&Dataset::default(), 1, PartitionMode::Iid, &mut rng).is_err());
    }

    #[test]
    fn dataset_text_format() {
        let ds = Dataset::parse("# header\n1.0, 2.0, 0\n\n3,4,1\n").unwrap();
        assert_eq!(ds.features, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(ds.labels, vec![0.0, 1.0]);
        assert!(matches!(Dataset::parse("1,2\n3,x\n"), Err(Error::Data(_))));
        assert!(Dataset::parse("1,2,3\n4,5\n").is_err());
        assert!(Dataset::parse("7\n").is_err());
    }
}
