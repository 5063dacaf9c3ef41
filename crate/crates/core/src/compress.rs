//! Compression operators, their contraction factors and message encodings.
//!
//! Every operator `C` satisfies `C(0) = 0` and, in expectation,
//! `||x - C(x)||^2 <= (1 - omega) ||x||^2` for some `omega` in `(0, 1]`.
//! Sparsifiers keep their selected entries unscaled. Sign-based operators
//! map zero coordinates to zero.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::par::{self, Execution};
use crate::rng::Stream;
use crate::{Error, Result};

pub const DEFAULT_VALUE_BITS: u32 = 32;

fn default_value_bits() -> u32 {
    DEFAULT_VALUE_BITS
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompressorKind {
    Identity,
    TopK { k: usize },
    RandK { k: usize },
    Qsgd { s: u32 },
    ScaledSign,
    SignTopK { k: usize },
    QsgdTopK { k: usize, s: u32 },
}

impl CompressorKind {
    pub fn name(&self) -> &'static str {
        match self {
            CompressorKind::Identity => "identity",
            CompressorKind::TopK { .. } => "top_k",
            CompressorKind::RandK { .. } => "rand_k",
            CompressorKind::Qsgd { .. } => "qsgd",
            CompressorKind::ScaledSign => "scaled_sign",
            CompressorKind::SignTopK { .. } => "sign_top_k",
            CompressorKind::QsgdTopK { .. } => "qsgd_top_k",
        }
    }

    fn k(&self) -> Option<usize> {
        match *self {
            CompressorKind::TopK { k }
            | CompressorKind::RandK { k }
            | CompressorKind::SignTopK { k }
            | CompressorKind::QsgdTopK { k, .. } => Some(k),
            _ => None,
        }
    }

    fn s(&self) -> Option<u32> {
        match *self {
            CompressorKind::Qsgd { s } | CompressorKind::QsgdTopK { s, .. } => Some(s),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressorSpec {
    #[serde(flatten)]
    pub kind: CompressorKind,
    #[serde(default = "default_value_bits")]
    pub value_bits: u32,
}

impl CompressorSpec {
    pub fn new(kind: CompressorKind) -> Self {
        Self {
            kind,
            value_bits: DEFAULT_VALUE_BITS,
        }
    }

    pub fn identity() -> Self {
        Self::new(CompressorKind::Identity)
    }

    /// Checks the parameters against a vector dimension.
    pub fn validate(&self, d: usize) -> Result<()> {
        if d == 0 {
            return Err(Error::param("dimension must be positive"));
        }
        if let Some(k) = self.kind.k() {
            if k == 0 {
                return Err(Error::param(format!("{}: k must be >= 1", self.kind.name())));
            }
            if k > d {
                return Err(Error::param(format!(
                    "{}: k = {k} exceeds dimension {d}",
                    self.kind.name()
                )));
            }
        }
        if let Some(s) = self.kind.s() {
            if s == 0 {
                return Err(Error::param(format!("{}: s must be >= 1", self.kind.name())));
            }
        }
        if self.value_bits == 0 {
            return Err(Error::param("value_bits must be >= 1"));
        }
        Ok(())
    }
}

/// Wire payload of one compressed vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Dense(Vec<f64>),
    Sparse {
        indices: Vec<u32>,
        values: Vec<f64>,
    },
    /// `scale * sign` on `support` (all coordinates when `None`).
    Sign {
        support: Option<Vec<u32>>,
        signs: Vec<i8>,
        scale: f64,
    },
    /// Stochastic levels `level / s` of `norm`, multiplied by `factor`.
    Quantized {
        support: Option<Vec<u32>>,
        norm: f64,
        levels: Vec<i32>,
        s: u32,
        factor: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedMessage {
    pub kind: CompressorKind,
    pub d: usize,
    pub payload: Payload,
}

impl CompressedMessage {
    /// Reconstructs the dense `d`-vector carried by the message.
    pub fn decode(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        match &self.payload {
            Payload::Dense(v) => out.copy_from_slice(v),
            Payload::Sparse { indices, values } => {
                for (&i, &v) in indices.iter().zip(values) {
                    out[i as usize] = v;
                }
            }
            Payload::Sign {
                support,
                signs,
                scale,
            } => scatter(&mut out, support.as_deref(), signs.iter().map(|&s| scale * f64::from(s))),
            Payload::Quantized {
                support,
                norm,
                levels,
                s,
                factor,
            } => {
                let unit = norm / f64::from(*s);
                scatter(
                    &mut out,
                    support.as_deref(),
                    levels.iter().map(|&l| factor * (unit * f64::from(l))),
                )
            }
        }
        out
    }
}

fn scatter(out: &mut [f64], support: Option<&[u32]>, values: impl Iterator<Item = f64>) {
    match support {
        Some(idx) => {
            for (&i, v) in idx.iter().zip(values) {
                out[i as usize] = v;
            }
        }
        None => {
            for (o, v) in out.iter_mut().zip(values) {
                *o = v;
            }
        }
    }
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Indices of the `k` largest-magnitude entries, ascending. Ties go to the
/// lower index.
pub fn top_k_indices(x: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    if k < x.len() {
        let cmp = |a: &usize, b: &usize| x[*b].abs().total_cmp(&x[*a].abs()).then(a.cmp(b));
        if k > 0 {
            idx.select_nth_unstable_by(k - 1, cmp);
        }
        idx.truncate(k);
        idx.sort_unstable();
    }
    idx
}

/// `beta_{d,s} = min(d / s^2, sqrt(d) / s)`, the QSGD variance factor.
pub fn qsgd_beta(d: usize, s: u32) -> f64 {
    let d = d as f64;
    let s = f64::from(s);
    (d / (s * s)).min(d.sqrt() / s)
}

/// Unbiased stochastic rounding of `|v_i| / ||v|| * s` to adjacent integers.
fn quantize(values: &[f64], s: u32, rng: &mut impl Rng) -> (f64, Vec<i32>) {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let levels = values
        .iter()
        .map(|&v| {
            let u: f64 = rng.random();
            if norm == 0.0 {
                return 0;
            }
            let r = v.abs() / norm * f64::from(s);
            let floor = r.floor();
            let level = if u < r - floor { floor + 1.0 } else { floor };
            i32::from(sign(v)) * level as i32
        })
        .collect();
    (norm, levels)
}

/// Applies the operator described by `spec` to `x`.
pub fn compress(spec: &CompressorSpec, x: &[f64], rng: &mut impl Rng) -> Result<CompressedMessage> {
    let d = x.len();
    spec.validate(d)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("compressor input"));
    }
    let payload = match spec.kind {
        CompressorKind::Identity => Payload::Dense(x.to_vec()),
        CompressorKind::TopK { k } => {
            let idx = top_k_indices(x, k);
            Payload::Sparse {
                values: idx.iter().map(|&i| x[i]).collect(),
                indices: idx.into_iter().map(|i| i as u32).collect(),
            }
        }
        CompressorKind::RandK { k } => {
            let mut idx = rand::seq::index::sample(rng, d, k).into_vec();
            idx.sort_unstable();
            Payload::Sparse {
                values: idx.iter().map(|&i| x[i]).collect(),
                indices: idx.into_iter().map(|i| i as u32).collect(),
            }
        }
        CompressorKind::Qsgd { s } => {
            let (norm, levels) = quantize(x, s, rng);
            Payload::Quantized {
                support: None,
                norm,
                levels,
                s,
                factor: 1.0,
            }
        }
        CompressorKind::ScaledSign => Payload::Sign {
            support: None,
            signs: x.iter().map(|&v| sign(v)).collect(),
            scale: x.iter().map(|v| v.abs()).sum::<f64>() / d as f64,
        },
        CompressorKind::SignTopK { k } => {
            let idx = top_k_indices(x, k);
            let l1: f64 = idx.iter().map(|&i| x[i].abs()).sum();
            Payload::Sign {
                signs: idx.iter().map(|&i| sign(x[i])).collect(),
                support: Some(idx.into_iter().map(|i| i as u32).collect()),
                scale: l1 / k as f64,
            }
        }
        CompressorKind::QsgdTopK { k, s } => {
            let idx = top_k_indices(x, k);
            let kept: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            let (norm, levels) = quantize(&kept, s, rng);
            Payload::Quantized {
                support: Some(idx.into_iter().map(|i| i as u32).collect()),
                norm,
                levels,
                s,
                factor: 1.0 / (1.0 + qsgd_beta(k, s)),
            }
        }
    };
    Ok(CompressedMessage {
        kind: spec.kind,
        d,
        payload,
    })
}

/// Closed-form contraction factor, or `None` when it depends on the input.
///
/// For the sign operators the contraction is input dependent: scaled sign
/// has `omega = ||x||_1^2 / (d ||x||_2^2)` and sign-top-k is quoted as
/// `max{1/d, (k/d)(||Comp_k(x)||_1^2 / (d ||Comp_k(x)||_2^2))}`. Use
/// [`estimate_contraction`] for those.
pub fn omega_of(spec: &CompressorSpec, d: usize) -> Option<f64> {
    match spec.kind {
        CompressorKind::Identity => Some(1.0),
        CompressorKind::TopK { k } | CompressorKind::RandK { k } => Some(k as f64 / d as f64),
        CompressorKind::Qsgd { s } => {
            let beta = qsgd_beta(d, s);
            (beta < 1.0).then_some(1.0 - beta)
        }
        // Contraction of (1/(1+beta_{k,s})) Q_s(Top_k(x)):
        // E||x - C(x)||^2 <= (1 - k/(d(1+beta_{k,s}))) ||x||^2.
        CompressorKind::QsgdTopK { k, s } => {
            Some(k as f64 / (d as f64 * (1.0 + qsgd_beta(k, s))))
        }
        CompressorKind::ScaledSign | CompressorKind::SignTopK { .. } => None,
    }
}

/// Trials evaluated per independent random stream.
const CHUNK: usize = 1024;

/// Empirical mean of `||x - C(x)||^2 / ||x||^2` over standard-normal `x`.
///
/// Trials are split into fixed-size chunks, each with its own stream derived
/// from a seed drawn from `rng`, so the estimate does not depend on whether
/// chunks run in parallel.
pub fn estimate_contraction(
    spec: &CompressorSpec,
    d: usize,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    estimate_contraction_with(spec, d, trials, rng, Execution::default())
}

pub fn estimate_contraction_with(
    spec: &CompressorSpec,
    d: usize,
    trials: usize,
    rng: &mut impl Rng,
    exec: Execution,
) -> Result<f64> {
    if trials < 100 {
        return Err(Error::param(format!(
            "contraction estimate needs at least 100 trials, got {trials}"
        )));
    }
    spec.validate(d)?;
    let base: u64 = rng.random();
    let chunks = trials.div_ceil(CHUNK);
    let sums = par::map_range(chunks, exec, |c| -> Result<f64> {
        let mut local: Stream = crate::rng::stream(base, c as u64);
        let count = CHUNK.min(trials - c * CHUNK);
        let mut x = vec![0.0; d];
        let mut acc = 0.0;
        for _ in 0..count {
            for v in x.iter_mut() {
                *v = local.sample(StandardNormal);
            }
            let c = compress(spec, &x, &mut local)?.decode();
            let num: f64 = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = x.iter().map(|a| a * a).sum();
            acc += num / den;
        }
        Ok(acc)
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / trials as f64)
}

pub(crate) fn ceil_log2(n: usize) -> u64 {
    if n <= 1 {
        0
    } else {
        u64::from(usize::BITS - (n - 1).leading_zeros())
    }
}

/// Bits needed to transmit `message`.
///
/// Sparse supports cost `ceil(log2 d)` bits per index, signs one bit each,
/// quantization levels `ceil(log2(2s+1))` bits each, and every real number
/// `value_bits`.
pub fn bit_cost(spec: &CompressorSpec, d: usize, message: &CompressedMessage) -> Result<u64> {
    if message.kind != spec.kind {
        return Err(Error::Contract(format!(
            "message of kind {} costed as {}",
            message.kind.name(),
            spec.kind.name()
        )));
    }
    if message.d != d {
        return Err(Error::Contract(format!(
            "message dimension {} costed at dimension {d}",
            message.d
        )));
    }
    Ok(nominal_bit_cost(spec, d))
}

/// Message size for `spec` at dimension `d`; every message of a given spec
/// has the same size.
pub fn nominal_bit_cost(spec: &CompressorSpec, d: usize) -> u64 {
    let vb = u64::from(spec.value_bits);
    let dd = d as u64;
    let idx = ceil_log2(d);
    let level_bits = |s: u32| ceil_log2(2 * s as usize + 1);
    match spec.kind {
        CompressorKind::Identity => dd * vb,
        CompressorKind::TopK { k } | CompressorKind::RandK { k } => k as u64 * (idx + vb),
        CompressorKind::ScaledSign => dd + vb,
        CompressorKind::SignTopK { k } => k as u64 * idx + k as u64 + vb,
        CompressorKind::Qsgd { s } => dd * level_bits(s) + vb,
        CompressorKind::QsgdTopK { k, s } => k as u64 * (idx + level_bits(s)) + vb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn all_kinds(d: usize) -> Vec<CompressorSpec> {
        let k = (d / 4).max(1);
        [
            CompressorKind::Identity,
            CompressorKind::TopK { k },
            CompressorKind::RandK { k },
            CompressorKind::Qsgd { s: 4 },
            CompressorKind::ScaledSign,
            CompressorKind::SignTopK { k },
            CompressorKind::QsgdTopK { k, s: 2 },
        ]
        .into_iter()
        .map(CompressorSpec::new)
        .collect()
    }

    fn apply(spec: CompressorKind, x: &[f64]) -> Vec<f64> {
        compress(&CompressorSpec::new(spec), x, &mut stream(1, 0))
            .unwrap()
            .decode()
    }

    #[test]
    fn top_k_examples() {
        let x = [3.0, -1.0, 2.0];
        assert_eq!(apply(CompressorKind::TopK { k: 3 }, &x), x.to_vec());
        assert_eq!(apply(CompressorKind::TopK { k: 1 }, &x), vec![3.0, 0.0, 0.0]);
        assert_eq!(apply(CompressorKind::TopK { k: 1 }, &[3.0, -1.0]), vec![3.0, 0.0]);
        // Ties resolve to the lowest index.
        assert_eq!(top_k_indices(&[1.0, -2.0, 2.0, 2.0], 2), vec![1, 2]);
    }

    #[test]
    fn scaled_sign_example() {
        let c = apply(CompressorKind::ScaledSign, &[3.0, 1.0]);
        assert_eq!(c, vec![2.0, 2.0]);
        let residual: f64 = [3.0 - c[0], 1.0 - c[1]].iter().map(|v| v * v).sum();
        assert_eq!(residual, 2.0);
        assert_eq!(apply(CompressorKind::ScaledSign, &[0.0, -4.0]), vec![0.0, -2.0]);
    }

    #[test]
    fn sign_top_k_and_qsgd_top_k_shapes() {
        let x = [0.5, -4.0, 2.0, 0.1];
        assert_eq!(apply(CompressorKind::SignTopK { k: 2 }, &x), vec![0.0, -3.0, 3.0, 0.0]);
        let c = apply(CompressorKind::QsgdTopK { k: 2, s: 2 }, &x);
        assert_eq!(c[0], 0.0);
        assert_eq!(c[3], 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        let spec = CompressorSpec::new(CompressorKind::TopK { k: 4 });
        assert!(matches!(
            compress(&spec, &[1.0, 2.0], &mut stream(0, 0)),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            compress(&CompressorSpec::identity(), &[1.0, f64::NAN], &mut stream(0, 0)),
            Err(Error::NonFinite(_))
        ));
        let zero_s = CompressorSpec::new(CompressorKind::Qsgd { s: 0 });
        assert!(compress(&zero_s, &[1.0], &mut stream(0, 0)).is_err());
    }

    #[test]
    fn omega_examples() {
        let top = CompressorSpec::new(CompressorKind::TopK { k: 1 });
        assert_eq!(omega_of(&top, 100), Some(0.01));
        assert_eq!(omega_of(&CompressorSpec::identity(), 7), Some(1.0));
        // beta_{4,2} = min(1, 1) = 1, omega = 4 / (8 * 2).
        let qt = CompressorSpec::new(CompressorKind::QsgdTopK { k: 4, s: 2 });
        assert_eq!(omega_of(&qt, 8), Some(0.25));
        assert_eq!(omega_of(&CompressorSpec::new(CompressorKind::ScaledSign), 8), None);
        assert_eq!(omega_of(&CompressorSpec::new(CompressorKind::SignTopK { k: 1 }), 8), None);
        // beta_{16,2} = min(4, 2) = 2 >= 1: no contraction guarantee.
        assert_eq!(omega_of(&CompressorSpec::new(CompressorKind::Qsgd { s: 2 }), 16), None);
        let q = omega_of(&CompressorSpec::new(CompressorKind::Qsgd { s: 8 }), 16).unwrap();
        assert!((q - 0.75).abs() < 1e-15);
    }

    #[test]
    fn bit_cost_examples() {
        let id = CompressorSpec::identity();
        let msg = compress(&id, &vec![1.0; 100], &mut stream(0, 0)).unwrap();
        assert_eq!(bit_cost(&id, 100, &msg).unwrap(), 3200);

        let stk = CompressorSpec::new(CompressorKind::SignTopK { k: 1 });
        let msg = compress(&stk, &vec![1.0; 100], &mut stream(0, 0)).unwrap();
        assert_eq!(bit_cost(&stk, 100, &msg).unwrap(), 40);

        let top = CompressorSpec::new(CompressorKind::TopK { k: 2 });
        let msg = compress(&top, &vec![1.0; 128], &mut stream(0, 0)).unwrap();
        assert_eq!(bit_cost(&top, 128, &msg).unwrap(), 78);

        assert!(matches!(bit_cost(&stk, 128, &msg), Err(Error::Contract(_))));
        assert!(matches!(bit_cost(&top, 64, &msg), Err(Error::Contract(_))));

        assert_eq!(nominal_bit_cost(&CompressorSpec::new(CompressorKind::ScaledSign), 64), 96);
        assert_eq!(nominal_bit_cost(&CompressorSpec::new(CompressorKind::Qsgd { s: 2 }), 8), 8 * 3 + 32);
        assert_eq!(
            nominal_bit_cost(&CompressorSpec::new(CompressorKind::QsgdTopK { k: 2, s: 1 }), 16),
            2 * (4 + 2) + 32
        );
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(100), 7);
        assert_eq!(ceil_log2(128), 7);
        assert_eq!(ceil_log2(129), 8);
    }

    #[test]
    fn contraction_estimates() {
        let mut rng = stream(11, 0);
        assert_eq!(
            estimate_contraction(&CompressorSpec::identity(), 16, 100, &mut rng).unwrap(),
            0.0
        );
        let rk = CompressorSpec::new(CompressorKind::RandK { k: 32 });
        let e = estimate_contraction(&rk, 64, 10_000, &mut rng).unwrap();
        assert!((e - 0.5).abs() < 0.02, "rand_k estimate {e}");
        let ss = CompressorSpec::new(CompressorKind::ScaledSign);
        let e = estimate_contraction(&ss, 64, 10_000, &mut rng).unwrap();
        assert!((e - (1.0 - 2.0 / std::f64::consts::PI)).abs() < 0.02, "sign estimate {e}");
        assert!(estimate_contraction(&ss, 64, 99, &mut rng).is_err());
    }

    #[test]
    fn estimate_is_schedule_independent() {
        let spec = CompressorSpec::new(CompressorKind::Qsgd { s: 3 });
        let a = estimate_contraction_with(&spec, 20, 5000, &mut stream(3, 0), Execution::Parallel)
            .unwrap();
        let b = estimate_contraction_with(&spec, 20, 5000, &mut stream(3, 0), Execution::Sequential)
            .unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn sparsifier_payload_is_exact() {
        let x = [0.1, -7.0, 3.0, 1e-300, -2.5];
        for kind in [
            CompressorKind::Identity,
            CompressorKind::TopK { k: 2 },
            CompressorKind::RandK { k: 3 },
        ] {
            let c = apply(kind, &x);
            for i in 0..x.len() {
                assert!(c[i] == 0.0 || c[i] == x[i]);
                assert_eq!((x[i] - c[i]) + c[i], x[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn zero_maps_to_zero(d in 1usize..40, seed in any::<u64>()) {
            for spec in all_kinds(d) {
                let c = compress(&spec, &vec![0.0; d], &mut stream(seed, 0)).unwrap().decode();
                prop_assert!(c.iter().all(|&v| v == 0.0), "{:?}", spec.kind);
            }
        }

        #[test]
        fn top_k_contracts(x in prop::collection::vec(-100.0f64..100.0, 1..60), frac in 0.0f64..1.0) {
            let d = x.len();
            let k = ((frac * d as f64) as usize).clamp(1, d);
            let c = apply(CompressorKind::TopK { k }, &x);
            let res: f64 = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            let nrm: f64 = x.iter().map(|a| a * a).sum();
            prop_assert!(res <= (1.0 - k as f64 / d as f64) * nrm * (1.0 + 1e-12) + 1e-300);
        }

        #[test]
        fn scaled_sign_residual_identity(x in prop::collection::vec(-50.0f64..50.0, 1..80)) {
            let d = x.len() as f64;
            let c = apply(CompressorKind::ScaledSign, &x);
            let res: f64 = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            let l1: f64 = x.iter().map(|a| a.abs()).sum();
            let l2: f64 = x.iter().map(|a| a * a).sum();
            let closed = l2 - l1 * l1 / d;
            prop_assert!((res - closed).abs() <= 1e-9 * l2.max(1e-300));
        }

        #[test]
        fn payload_reconstructs_input(x in prop::collection::vec(-10.0f64..10.0, 1..50), seed in any::<u64>()) {
            let d = x.len();
            for spec in all_kinds(d) {
                let c = compress(&spec, &x, &mut stream(seed, 0)).unwrap().decode();
                prop_assert_eq!(c.len(), d);
                for i in 0..d {
                    let back = c[i] + (x[i] - c[i]);
                    prop_assert!((back - x[i]).abs() <= 1e-12 * (1.0 + c[i].abs()));
                }
            }
        }
    }
}
