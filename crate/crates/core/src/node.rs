//! Per-worker state and the transitions of one round: momentum step,
//! trigger test, encoding of the copy difference, message application and
//! the gossip correction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compress::{self, CompressedMessage, CompressorSpec};
use crate::{norm_sq, Error, Result};

/// How a node stores its view of the neighbors' public copies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One copy `x_hat_j` per neighbor.
    #[default]
    FullCopy,
    /// A single accumulator `s = sum_j w_ij x_hat_j` over neighbors and self.
    MemEfficient,
}

#[derive(Clone, Debug)]
enum Store {
    /// Copies aligned with `neighbors`.
    Full(Vec<Vec<f64>>),
    Accumulated(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct NodeState {
    id: usize,
    x: Vec<f64>,
    v: Vec<f64>,
    hat_self: Vec<f64>,
    /// Sorted, excludes `id`.
    neighbors: Vec<usize>,
    store: Store,
}

impl NodeState {
    /// Fresh node with `v = 0`, `x_hat = 0` and zero neighbor copies.
    pub fn new(id: usize, x0: Vec<f64>, neighbors: &[usize], variant: Variant) -> Self {
        let d = x0.len();
        let mut nb: Vec<usize> = neighbors.iter().copied().filter(|&j| j != id).collect();
        nb.sort_unstable();
        nb.dedup();
        let store = match variant {
            Variant::FullCopy => Store::Full(vec![vec![0.0; d]; nb.len()]),
            Variant::MemEfficient => Store::Accumulated(vec![0.0; d]),
        };
        Self {
            id,
            x: x0,
            v: vec![0.0; d],
            hat_self: vec![0.0; d],
            neighbors: nb,
            store,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }
    pub fn x(&self) -> &[f64] {
        &self.x
    }
    pub fn v(&self) -> &[f64] {
        &self.v
    }
    pub fn hat_self(&self) -> &[f64] {
        &self.hat_self
    }
    pub fn neighbors(&self) -> &[usize] {
        &self.neighbors
    }
    pub fn variant(&self) -> Variant {
        match self.store {
            Store::Full(_) => Variant::FullCopy,
            Store::Accumulated(_) => Variant::MemEfficient,
        }
    }

    /// The copy this node holds of `j` (full variant only; `j == id` gives
    /// the node's own public copy).
    pub fn copy_of(&self, j: usize) -> Option<&[f64]> {
        if j == self.id {
            return Some(&self.hat_self);
        }
        match &self.store {
            Store::Full(copies) => self
                .neighbors
                .binary_search(&j)
                .ok()
                .map(|slot| copies[slot].as_slice()),
            Store::Accumulated(_) => None,
        }
    }

    /// The accumulator `s` (memory-efficient variant only).
    pub fn accumulator(&self) -> Option<&[f64]> {
        match &self.store {
            Store::Accumulated(s) => Some(s),
            Store::Full(_) => None,
        }
    }

    /// `v <- beta v + g`, then `x <- x - eta (beta v + g)` with the updated `v`.
    pub fn local_step(&mut self, g: &[f64], eta: f64, beta: f64) -> Result<()> {
        if g.len() != self.x.len() {
            return Err(Error::param(format!(
                "gradient has dimension {}, expected {}",
                g.len(),
                self.x.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("stochastic gradient"));
        }
        for ((x, v), &gi) in self.x.iter_mut().zip(self.v.iter_mut()).zip(g) {
            *v = beta * *v + gi;
            *x -= eta * (beta * *v + gi);
        }
        Ok(())
    }

    /// `||x - x_hat||^2`.
    pub fn drift_sq(&self) -> f64 {
        self.x
            .iter()
            .zip(&self.hat_self)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Strict test `||x - x_hat||^2 > c_t eta^2`; an infinite threshold never fires.
    pub fn should_trigger(&self, c_t: f64, eta: f64) -> bool {
        c_t.is_finite() && self.drift_sq() > c_t * eta * eta
    }

    /// `q = C(x - x_hat)`; the state itself is left untouched.
    pub fn encode_update(
        &self,
        spec: &CompressorSpec,
        rng: &mut impl Rng,
    ) -> Result<CompressedMessage> {
        let diff: Vec<f64> = self.x.iter().zip(&self.hat_self).map(|(a, b)| a - b).collect();
        compress::compress(spec, &diff, rng)
    }

    /// Adds a decoded message from `sender` (a neighbor or the node itself).
    /// `w_row` is this node's row of the mixing matrix.
    pub fn apply_incoming(&mut self, sender: usize, q: &[f64], w_row: &[f64]) -> Result<()> {
        if q.len() != self.x.len() {
            return Err(Error::param(format!(
                "message has dimension {}, expected {}",
                q.len(),
                self.x.len()
            )));
        }
        let w = *w_row.get(sender).ok_or_else(|| {
            Error::InvalidTopology(format!("sender {sender} outside the mixing row"))
        })?;
        let slot = if sender == self.id {
            None
        } else {
            Some(self.neighbors.binary_search(&sender).map_err(|_| {
                Error::InvalidTopology(format!("node {} has no neighbor {sender}", self.id))
            })?)
        };
        if slot.is_none() {
            add_scaled(&mut self.hat_self, 1.0, q);
        }
        match (&mut self.store, slot) {
            (Store::Full(copies), Some(s)) => add_scaled(&mut copies[s], 1.0, q),
            (Store::Full(_), None) => {}
            (Store::Accumulated(acc), _) => add_scaled(acc, w, q),
        }
        Ok(())
    }

    /// `x <- x + gamma sum_{j in N_i} w_ij (x_hat_j - x_hat_i)`.
    pub fn consensus_step(&mut self, gamma: f64, w_row: &[f64]) {
        match &self.store {
            Store::Full(copies) => {
                for (&j, copy) in self.neighbors.iter().zip(copies) {
                    let w = gamma * w_row[j];
                    for ((x, c), h) in self.x.iter_mut().zip(copy).zip(&self.hat_self) {
                        *x += w * (c - h);
                    }
                }
            }
            Store::Accumulated(s) => {
                for ((x, a), h) in self.x.iter_mut().zip(s).zip(&self.hat_self) {
                    *x += gamma * (a - h);
                }
            }
        }
    }

    pub fn momentum_norm(&self) -> f64 {
        norm_sq(&self.v).sqrt()
    }
}

fn add_scaled(dst: &mut [f64], w: f64, q: &[f64]) {
    dst.iter_mut().zip(q).for_each(|(a, b)| *a += w * b);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::CompressorKind;
    use crate::rng;

    fn node(x: Vec<f64>, variant: Variant) -> NodeState {
        NodeState::new(0, x, &[1], variant)
    }

    #[test]
    fn zero_beta_is_plain_sgd() {
        let mut n = node(vec![1.0, 2.0], Variant::FullCopy);
        n.local_step(&[0.5, -1.0], 0.1, 0.0).unwrap();
        assert_eq!(n.x(), &[1.0 - 0.05, 2.0 + 0.1]);
        assert_eq!(n.v(), &[0.5, -1.0]);
    }

    #[test]
    fn first_momentum_step_scales_by_one_plus_beta() {
        let mut n = node(vec![0.0; 3], Variant::FullCopy);
        let g = [1.0, -2.0, 0.5];
        n.local_step(&g, 0.1, 0.9).unwrap();
        for (x, gi) in n.x().iter().zip(g) {
            assert!((x + 0.1 * 1.9 * gi).abs() < 1e-15);
        }
    }

    #[test]
    fn momentum_decays_without_gradient() {
        let mut n = node(vec![0.0], Variant::FullCopy);
        n.local_step(&[1.0], 1.0, 0.5).unwrap();
        for k in 1..6 {
            let before = n.x()[0];
            let v_prev = n.v()[0];
            n.local_step(&[0.0], 1.0, 0.5).unwrap();
            assert_eq!(n.v()[0], 0.5f64.powi(k));
            assert_eq!(n.x()[0], before - 0.5 * (0.5 * v_prev));
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut n = node(vec![0.0], Variant::FullCopy);
        assert!(matches!(
            n.local_step(&[f64::NAN], 0.1, 0.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn trigger_examples() {
        let n = node(vec![0.0, 0.0], Variant::FullCopy);
        assert!(!n.should_trigger(0.0, 1.0));
        let n = node(vec![2.0, 0.0], Variant::FullCopy);
        assert!(n.should_trigger(0.0, 1.0));
        assert!(n.should_trigger(3.0, 1.0));
        assert!(!n.should_trigger(3.0, 2.0));
        assert!(!n.should_trigger(f64::INFINITY, 1.0));
    }

    #[test]
    fn encode_leaves_state_and_zero_diff_gives_zero() {
        let mut r = rng::node_stream(1, 0);
        let n = node(vec![3.0, -1.0], Variant::FullCopy);
        let top1 = CompressorSpec::new(CompressorKind::TopK { k: 1 });
        assert_eq!(n.encode_update(&top1, &mut r).unwrap().decode(), vec![3.0, 0.0]);
        let id = CompressorSpec::identity();
        assert_eq!(n.encode_update(&id, &mut r).unwrap().decode(), vec![3.0, -1.0]);
        assert_eq!(n.x(), &[3.0, -1.0]);
        assert_eq!(n.hat_self(), &[0.0, 0.0]);
        let z = node(vec![0.0, 0.0], Variant::FullCopy);
        assert_eq!(z.encode_update(&top1, &mut r).unwrap().decode(), vec![0.0, 0.0]);
    }

    #[test]
    fn apply_incoming_full_and_accumulated() {
        let w = [0.5, 0.5];
        let mut full = node(vec![0.0, 0.0], Variant::FullCopy);
        full.apply_incoming(1, &[1.0, 2.0], &w).unwrap();
        assert_eq!(full.copy_of(1).unwrap(), &[1.0, 2.0]);
        full.apply_incoming(1, &[0.0, 0.0], &w).unwrap();
        assert_eq!(full.copy_of(1).unwrap(), &[1.0, 2.0]);

        let mut mem = node(vec![0.0, 0.0], Variant::MemEfficient);
        mem.apply_incoming(0, &[2.0, 4.0], &w).unwrap();
        assert_eq!(mem.hat_self(), &[2.0, 4.0]);
        assert_eq!(mem.accumulator().unwrap(), &[1.0, 2.0]);
        assert!(matches!(
            mem.apply_incoming(5, &[0.0, 0.0], &[0.2; 6]),
            Err(Error::InvalidTopology(_))
        ));
    }

    #[test]
    fn consensus_examples() {
        let w = [0.5, 0.5];
        for variant in [Variant::FullCopy, Variant::MemEfficient] {
            let mut n = node(vec![0.0, 0.0], variant);
            n.apply_incoming(1, &[2.0, 0.0], &w).unwrap();
            n.consensus_step(1.0, &w);
            assert_eq!(n.x(), &[1.0, 0.0]);

            let mut same = node(vec![1.0, 1.0], variant);
            same.apply_incoming(0, &[1.0, 1.0], &w).unwrap();
            same.apply_incoming(1, &[1.0, 1.0], &w).unwrap();
            same.consensus_step(0.7, &w);
            assert_eq!(same.x(), &[1.0, 1.0]);

            let mut frozen = node(vec![1.0, 1.0], variant);
            frozen.apply_incoming(1, &[5.0, 5.0], &w).unwrap();
            frozen.consensus_step(0.0, &w);
            assert_eq!(frozen.x(), &[1.0, 1.0]);
        }
    }
}
