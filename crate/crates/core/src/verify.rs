//! Invariant suites runnable from the command line.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::compress::{self, CompressorKind, CompressorSpec};
use crate::engine::{
    CompressorConfig, CompressorName, GammaSpec, LrSpec, ObjectiveSpec, OmegaSpec, Prepared,
    RunConfig,
};
use crate::node::Variant;
use crate::rng;
use crate::schedule::{self, ThresholdSchedule};
use crate::topology::{MixingMatrix, TopologySpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Compression,
    Spectral,
    Identities,
    Schedules,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "compression" => Suite::Compression,
            "spectral" => Suite::Spectral,
            "identities" => Suite::Identities,
            "schedules" => Suite::Schedules,
            "all" => Suite::All,
            other => return Err(format!("unknown suite `{other}`")),
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Compression => "compression",
            Suite::Spectral => "spectral",
            Suite::Identities => "identities",
            Suite::Schedules => "schedules",
            Suite::All => "all",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    /// `None` on success, else the first failing assertion.
    pub failure: Option<String>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

type Outcome = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn run(suite: Suite) -> Vec<Check> {
    match suite {
        Suite::All => [Suite::Compression, Suite::Spectral, Suite::Identities, Suite::Schedules]
            .into_iter()
            .flat_map(run)
            .collect(),
        s => checks(s)
            .into_iter()
            .map(|(name, f)| Check {
                suite: s,
                name,
                failure: f().err(),
            })
            .collect(),
    }
}

type Case = (String, Box<dyn Fn() -> Outcome>);

fn checks(suite: Suite) -> Vec<Case> {
    match suite {
        Suite::Compression => compression_checks(),
        Suite::Spectral => spectral_checks(),
        Suite::Identities => identity_checks(),
        Suite::Schedules => schedule_checks(),
        Suite::All => unreachable!(),
    }
}

pub fn compressor_zoo(d: usize) -> Vec<CompressorSpec> {
    let k = (d / 8).max(1);
    let s = 2 * (d as f64).sqrt().ceil() as u32;
    [
        CompressorKind::Identity,
        CompressorKind::TopK { k },
        CompressorKind::RandK { k },
        CompressorKind::Qsgd { s },
        CompressorKind::ScaledSign,
        CompressorKind::SignTopK { k },
        CompressorKind::QsgdTopK { k, s: 4 },
    ]
    .into_iter()
    .map(CompressorSpec::new)
    .collect()
}

fn compression_checks() -> Vec<Case> {
    let mut out: Vec<Case> = Vec::new();
    for d in [8usize, 64, 256] {
        for spec in compressor_zoo(d) {
            let name = format!("{} d={d}", spec.kind.name());
            out.push((
                name,
                Box::new(move || {
                    let mut r = rng::stream(d as u64, 17);
                    let zero = compress::compress(&spec, &vec![0.0; d], &mut r)
                        .map_err(|e| e.to_string())?
                        .decode();
                    ensure(zero.iter().all(|&v| v == 0.0), || "C(0) != 0".into())?;
                    let residual = compress::estimate_contraction(&spec, d, 2000, &mut r)
                        .map_err(|e| e.to_string())?;
                    match compress::omega_of(&spec, d) {
                        Some(omega) => ensure(residual <= 1.0 - omega + 0.02, || {
                            format!("residual {residual:.4} above 1 - omega = {:.4}", 1.0 - omega)
                        })?,
                        None => ensure(residual < 1.0, || format!("residual {residual:.4} >= 1"))?,
                    }
                    let x: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
                    let msg = compress::compress(&spec, &x, &mut r).map_err(|e| e.to_string())?;
                    ensure(msg.decode().len() == d, || "decoded length".into())?;
                    let bits = compress::bit_cost(&spec, d, &msg).map_err(|e| e.to_string())?;
                    ensure(bits == compress::nominal_bit_cost(&spec, d), || "bit cost".into())?;
                    if spec.kind == CompressorKind::ScaledSign {
                        let c = msg.decode();
                        let lhs: f64 = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                        let l1: f64 = x.iter().map(|v| v.abs()).sum();
                        let rhs = x.iter().map(|v| v * v).sum::<f64>() - l1 * l1 / d as f64;
                        ensure((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0), || {
                            format!("scaled-sign identity {lhs} vs {rhs}")
                        })?;
                    }
                    Ok(())
                }),
            ));
        }
    }
    out
}

fn spectral_checks() -> Vec<Case> {
    let mut out: Vec<Case> = Vec::new();
    for n in [4usize, 8, 16] {
        out.push((
            format!("ring n={n} power deviation"),
            Box::new(move || {
                let w = MixingMatrix::ring(n, 1.0 / 3.0).map_err(|e| e.to_string())?;
                // Closed-form eigenvalues of the circulant ring.
                let second = (1..n)
                    .map(|k| {
                        (1.0 / 3.0
                            + 2.0 / 3.0 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos())
                        .abs()
                    })
                    .fold(0.0_f64, f64::max);
                ensure((w.delta() - (1.0 - second)).abs() < 1e-10, || {
                    format!("delta {} vs closed form {}", w.delta(), 1.0 - second)
                })?;
                for k in 0..=10u32 {
                    let dev = w.power_deviation(k).map_err(|e| e.to_string())?;
                    let want = (1.0 - w.delta()).powi(k as i32);
                    ensure((dev - want).abs() < 1e-8, || {
                        format!("k={k}: ||W^k - J|| = {dev}, (1 - delta)^k = {want}")
                    })?;
                }
                Ok(())
            }),
        ));
    }
    for n in [2usize, 4, 8] {
        out.push((
            format!("complete n={n}"),
            Box::new(move || {
                let w = MixingMatrix::complete(n).map_err(|e| e.to_string())?;
                ensure((w.delta() - 1.0).abs() < 1e-12 && (w.lambda_dev() - 1.0).abs() < 1e-12, || {
                    format!("delta {} lambda {}", w.delta(), w.lambda_dev())
                })?;
                let jmi = w.power_deviation(0).map_err(|e| e.to_string())?;
                ensure((jmi - 1.0).abs() < 1e-10, || format!("||J - I|| = {jmi}"))
            }),
        ));
    }
    out
}

/// Twelve configurations mixing compressors, variants, `H`, `beta` and
/// thresholds; each must preserve the mean and the virtual recurrence.
pub fn identity_configs() -> Vec<RunConfig> {
    let compressors = [
        CompressorConfig {
            k: Some(2),
            ..CompressorConfig::new(CompressorName::SignTopK)
        },
        CompressorConfig {
            k: Some(3),
            ..CompressorConfig::new(CompressorName::TopK)
        },
        CompressorConfig {
            s: Some(4),
            ..CompressorConfig::new(CompressorName::Qsgd)
        },
        CompressorConfig::new(CompressorName::ScaledSign),
        CompressorConfig {
            k: Some(4),
            ..CompressorConfig::new(CompressorName::RandK)
        },
        CompressorConfig::new(CompressorName::Identity),
    ];
    let thresholds = [
        ThresholdSchedule::Piecewise {
            init: 2.5,
            step: 1.5,
            period: 50,
            until: None,
        },
        ThresholdSchedule::Poly {
            c0: 1.0,
            epsilon: 0.5,
        },
        ThresholdSchedule::Always,
    ];
    let mut out = Vec::new();
    for (i, comp) in compressors.into_iter().enumerate() {
        for variant in [Variant::FullCopy, Variant::MemEfficient] {
            let idx = out.len();
            out.push(RunConfig {
                topology: TopologySpec::Ring {
                    n: 6,
                    self_weight: 1.0 / 3.0,
                },
                objective: ObjectiveSpec {
                    d: 10,
                    curvature_spread: 0.2,
                    ..ObjectiveSpec::default()
                },
                compressor: comp,
                h: [1, 5, 3][idx % 3],
                beta: [0.9, 0.5, 0.0][i % 3],
                lr: LrSpec::Constant { eta: 0.01 },
                gamma: GammaSpec::Explicit(0.2),
                omega: OmegaSpec::Formula,
                threshold: thresholds[idx % 3],
                t: 300,
                seed: 11 + idx as u64,
                variant,
                diagnostics: true,
                init_scale: 1.0,
                ..RunConfig::default()
            });
        }
    }
    out
}

fn identity_checks() -> Vec<Case> {
    identity_configs()
        .into_iter()
        .enumerate()
        .map(|(i, cfg)| -> Case {
            let name = format!(
                "config {i}: {} {:?} H={} beta={}",
                cfg.compressor.kind.to_string_lossy(),
                cfg.variant,
                cfg.h,
                cfg.beta
            );
            (
                name,
                Box::new(move || {
                    let r = Prepared::new(cfg.clone())
                        .and_then(|p| p.run())
                        .map_err(|e| e.to_string())?;
                    let d = &r.diagnostics;
                    let shift = d.max_mean_shift.unwrap_or(0.0);
                    ensure(shift < 1e-10, || format!("mean shift {shift:e}"))?;
                    let resid = d.max_virtual_residual.unwrap_or(f64::NAN);
                    ensure(resid < 1e-8, || format!("virtual residual {resid:e}"))?;
                    ensure(d.drift_violations == 0, || {
                        format!("{} drift violations", d.drift_violations)
                    })
                }),
            )
        })
        .collect()
}

impl CompressorName {
    fn to_string_lossy(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }
}

fn schedule_checks() -> Vec<Case> {
    vec![
        (
            "gamma closed forms at (1, 1, 1)".into(),
            Box::new(|| {
                let s = schedule::gamma_strong(1.0, 1.0, 1.0).map_err(|e| e.to_string())?;
                let r = schedule::gamma_relaxed(1.0, 1.0, 1.0).map_err(|e| e.to_string())?;
                ensure((s - 2.0 / 73.0).abs() < 1e-12, || format!("strong {s}"))?;
                ensure((r - 2.0 / 157.0).abs() < 1e-12, || format!("relaxed {r}"))
            }),
        ),
        (
            "1000 random (delta, omega, lambda)".into(),
            Box::new(|| {
                let mut r = rng::stream(2024, 0);
                for _ in 0..1000 {
                    let delta = 1.0 - r.random::<f64>();
                    let omega = 1.0 - r.random::<f64>();
                    let lambda = 2.0 * (1.0 - r.random::<f64>());
                    let g = schedule::gamma_strong(delta, omega, lambda).map_err(|e| e.to_string())?;
                    ensure(g > 0.0 && g <= omega, || format!("gamma {g} vs omega {omega}"))?;
                    let p = schedule::p_checked(delta, omega, lambda).map_err(|e| e.to_string())?;
                    ensure(p >= delta * delta * omega / 644.0, || format!("p = {p}"))?;
                }
                Ok(())
            }),
        ),
        (
            "S_T closed form".into(),
            Box::new(|| {
                for a in 1..=5u64 {
                    for t in 1..=50u64 {
                        let direct: u128 = (0..t).map(|s| u128::from(a + s).pow(2)).sum();
                        ensure(schedule::s_t_exact(a, t) == direct, || format!("a={a} T={t}"))?;
                        ensure(schedule::s_t(a as f64, t as usize) == direct as f64, || {
                            format!("float form a={a} T={t}")
                        })?;
                    }
                }
                Ok(())
            }),
        ),
        (
            "decaying rate halves at most over H".into(),
            Box::new(|| {
                for h in [1usize, 5, 20] {
                    let a = schedule::min_a_strongly_convex(h, 0.01, 1.0, 1.0, 0.5)
                        .map_err(|e| e.to_string())?;
                    for t in (0..10_000).step_by(37) {
                        let e0 = schedule::decaying_lr(t, 1.0, 0.5, a).map_err(|e| e.to_string())?;
                        let e1 =
                            schedule::decaying_lr(t + h, 1.0, 0.5, a).map_err(|e| e.to_string())?;
                        ensure(e0 <= 2.0 * e1, || format!("H={h} t={t}"))?;
                    }
                }
                Ok(())
            }),
        ),
    ]
}
