//! Closed-form hyperparameters: learning rates, consensus step-sizes,
//! triggering thresholds and the weights of the averaged iterate.
//!
//! Everything here is plain arithmetic evaluated lazily per iteration.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { eta: f64 },
    /// `eta_t = b / (a + t)`.
    Decaying { b: f64, a: f64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant { eta } if eta > 0.0 && eta.is_finite() => Ok(()),
            LrSchedule::Constant { eta } => Err(Error::param(format!("eta must be > 0, got {eta}"))),
            LrSchedule::Decaying { b, a } if b > 0.0 && a >= 1.0 && b.is_finite() && a.is_finite() => {
                Ok(())
            }
            LrSchedule::Decaying { b, a } => Err(Error::param(format!(
                "decaying schedule needs b > 0 and a >= 1, got b={b} a={a}"
            ))),
        }
    }

    pub fn eta_at(&self, t: usize) -> f64 {
        match *self {
            LrSchedule::Constant { eta } => eta,
            LrSchedule::Decaying { b, a } => b / (a + t as f64),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, LrSchedule::Constant { .. })
    }

    /// Offset `a` of a decaying schedule.
    pub fn offset(&self) -> Option<f64> {
        match *self {
            LrSchedule::Decaying { a, .. } => Some(a),
            LrSchedule::Constant { .. } => None,
        }
    }
}

/// Triggering threshold `c_t`. A node communicates at a synchronization
/// index only when `||x - x_hat||^2 > c_t * eta^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdSchedule {
    /// `c_t = 0`.
    Always,
    /// Never communicate.
    Never,
    /// `c_t = c0 * t^(1 - epsilon)`.
    Poly { c0: f64, epsilon: f64 },
    /// `c_t = c0 / eta^(1 - epsilon)`.
    ConstEta { c0: f64, epsilon: f64 },
    /// `init + step * floor(t / period)`, frozen after `until` when given.
    Piecewise {
        init: f64,
        step: f64,
        period: usize,
        until: Option<usize>,
    },
}

impl ThresholdSchedule {
    pub fn validate(&self) -> Result<()> {
        let eps_ok = |c0: f64, eps: f64| {
            if c0 >= 0.0 && c0.is_finite() && eps > 0.0 && eps <= 1.0 {
                Ok(())
            } else {
                Err(Error::param(format!(
                    "threshold needs c0 >= 0 and epsilon in (0, 1], got c0={c0} epsilon={eps}"
                )))
            }
        };
        match *self {
            ThresholdSchedule::Always | ThresholdSchedule::Never => Ok(()),
            ThresholdSchedule::Poly { c0, epsilon } | ThresholdSchedule::ConstEta { c0, epsilon } => {
                eps_ok(c0, epsilon)
            }
            ThresholdSchedule::Piecewise {
                init, step, period, ..
            } => {
                if init >= 0.0 && step >= 0.0 && period >= 1 {
                    Ok(())
                } else {
                    Err(Error::param(
                        "piecewise threshold needs init >= 0, step >= 0 and period >= 1",
                    ))
                }
            }
        }
    }

    /// `c_t`; `Never` yields `+inf`.
    pub fn at(&self, t: usize, eta: f64) -> f64 {
        match *self {
            ThresholdSchedule::Always => 0.0,
            ThresholdSchedule::Never => f64::INFINITY,
            ThresholdSchedule::Poly { c0, epsilon } => c0 * (t as f64).powf(1.0 - epsilon),
            ThresholdSchedule::ConstEta { c0, epsilon } => c0 / eta.powf(1.0 - epsilon),
            ThresholdSchedule::Piecewise {
                init,
                step,
                period,
                until,
            } => {
                let t = until.map_or(t, |u| t.min(u));
                init + step * (t / period) as f64
            }
        }
    }
}

/// `eta = (1 - beta) sqrt(n / T)`.
pub fn constant_lr(n: usize, t: usize, beta: f64) -> f64 {
    (1.0 - beta) * (n as f64 / t as f64).sqrt()
}

/// `eta_t = 16 (1 - beta) / (mu (a + t))`.
pub fn decaying_lr(t: usize, mu: f64, beta: f64, a: f64) -> Result<f64> {
    if mu <= 0.0 {
        return Err(Error::param(format!("decaying rate needs mu > 0, got {mu}")));
    }
    if a < 1.0 {
        return Err(Error::param(format!("decaying rate needs a >= 1, got {a}")));
    }
    Ok(16.0 * (1.0 - beta) / (mu * (a + t as f64)))
}

fn check_consensus_inputs(delta: f64, omega: f64, lambda: f64) -> Result<()> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::param(format!("delta must lie in (0, 1], got {delta}")));
    }
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::param(format!("omega must lie in (0, 1], got {omega}")));
    }
    if !(lambda > 0.0 && lambda <= 2.0) {
        return Err(Error::param(format!("lambda must lie in (0, 2], got {lambda}")));
    }
    Ok(())
}

/// Consensus step-size under the relaxed assumptions:
/// `2 delta omega^3 / (4 delta^2 omega^2 + delta^2 + 128 lambda^2 + 24 omega^2 lambda^2)`.
///
/// Can exceed 1 for nearly-identity mixing matrices (tiny `delta` and
/// `lambda`); callers that need a valid step-size must cap it.
pub fn gamma_relaxed(delta: f64, omega: f64, lambda: f64) -> Result<f64> {
    check_consensus_inputs(delta, omega, lambda)?;
    let (d2, w2, l2) = (delta * delta, omega * omega, lambda * lambda);
    Ok(2.0 * delta * omega.powi(3) / (4.0 * d2 * w2 + d2 + 128.0 * l2 + 24.0 * w2 * l2))
}

/// Consensus step-size under bounded second moments:
/// `2 delta omega / (64 delta + delta^2 + 16 lambda^2 + 8 delta lambda^2 - 16 delta omega)`.
pub fn gamma_strong(delta: f64, omega: f64, lambda: f64) -> Result<f64> {
    check_consensus_inputs(delta, omega, lambda)?;
    let l2 = lambda * lambda;
    let denom = 64.0 * delta + delta * delta + 16.0 * l2 + 8.0 * delta * l2 - 16.0 * delta * omega;
    if denom <= 0.0 {
        return Err(Error::Numerical(format!("non-positive denominator {denom}")));
    }
    Ok(2.0 * delta * omega / denom)
}

/// `p = gamma * delta / 8`.
pub fn p_of(gamma: f64, delta: f64) -> f64 {
    gamma * delta / 8.0
}

/// `p` for the strong step-size, checked against `p >= delta^2 omega / 644`.
pub fn p_checked(delta: f64, omega: f64, lambda: f64) -> Result<f64> {
    let gamma = gamma_strong(delta, omega, lambda)?;
    let p = p_of(gamma, delta);
    let bound = delta * delta * omega / 644.0;
    if p < bound {
        return Err(Error::TheoremConsistency(format!(
            "p = {p} below delta^2 omega / 644 = {bound}"
        )));
    }
    Ok(p)
}

/// Smallest admissible offset `a` for the decaying rate:
/// `max{5H/p, 128L/mu, 16 (16 L beta^2)^2 / (mu (1 - beta))}`.
pub fn min_a_strongly_convex(h: usize, p: f64, l: f64, mu: f64, beta: f64) -> Result<f64> {
    if p <= 0.0 || mu <= 0.0 || !(0.0..1.0).contains(&beta) {
        return Err(Error::param(format!(
            "min_a needs p > 0, mu > 0, beta in [0, 1); got p={p} mu={mu} beta={beta}"
        )));
    }
    let inner = 16.0 * l * beta * beta;
    Ok((5.0 * h as f64 / p)
        .max(128.0 * l / mu)
        .max(16.0 * inner * inner / (mu * (1.0 - beta))))
}

/// `max{16 L^2 n, 8 L^2 beta^4 n / (1 - beta)^2}`.
pub fn min_t_nonconvex(l: f64, n: usize, beta: f64) -> f64 {
    let n = n as f64;
    let l2 = l * l;
    (16.0 * l2 * n).max(8.0 * l2 * beta.powi(4) * n / ((1.0 - beta) * (1.0 - beta)))
}

/// Averaging weight `w_t = (a + t)^2`.
pub fn weighted_avg_weight(a: f64, t: usize) -> f64 {
    let v = a + t as f64;
    v * v
}

/// `S_T = (T/6)(2T^2 + 6aT - 3T + 6a^2 - 6a + 1) = sum_{t<T} (a+t)^2`.
pub fn s_t(a: f64, t: usize) -> f64 {
    let tt = t as f64;
    // Dividing last keeps the result exact for integral inputs.
    tt * (2.0 * tt * tt + 6.0 * a * tt - 3.0 * tt + 6.0 * a * a - 6.0 * a + 1.0) / 6.0
}

/// Integer form of [`s_t`] for integral `a`.
pub fn s_t_exact(a: u64, t: u64) -> u128 {
    let (a, t) = (a as i128, t as i128);
    let v = t * (2 * t * t + 6 * a * t - 3 * t + 6 * a * a - 6 * a + 1);
    debug_assert_eq!(v % 6, 0);
    (v / 6) as u128
}
