//! Full runs: `n` workers, `T` iterations, gossip every `H` steps.
//!
//! One iteration is a node-parallel local phase (gradient, momentum step,
//! trigger, encode) followed at synchronization points by message
//! application and the consensus correction. Metrics are evaluated at the
//! node average `x_bar` with exact gradients.

use std::io::Write;
use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compress::{self, CompressorKind, CompressorSpec, DEFAULT_VALUE_BITS};
use crate::node::{NodeState, Variant};
use crate::objective::{self, ObjectiveKind, ObjectiveSet, PartitionMode, QuadraticParams};
use crate::par::{self, Execution};
use crate::rng::{self, Stream};
use crate::schedule::{self, LrSchedule, ThresholdSchedule};
use crate::topology::{MixingMatrix, TopologySpec};
use crate::{norm_inf, norm_sq, Error, Result};

/// Objective description resolved against the node count and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub d: usize,
    pub noise_sigma: f64,
    pub mu: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub heterogeneity: f64,
    pub curvature_spread: f64,
    pub samples_per_node: usize,
    pub partition_mode: PartitionMode,
    pub dataset_path: Option<PathBuf>,
    pub alpha: f64,
    pub reg: f64,
    pub batch_size: usize,
    pub clip: Option<f64>,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Quadratic,
            d: 20,
            noise_sigma: 0.1,
            mu: 1.0,
            l: 10.0,
            heterogeneity: 1.0,
            curvature_spread: 0.0,
            samples_per_node: 64,
            partition_mode: PartitionMode::Iid,
            dataset_path: None,
            alpha: 0.1,
            reg: 0.01,
            batch_size: 1,
            clip: None,
        }
    }
}

impl ObjectiveSpec {
    /// Builds the per-node objectives. Synthetic data is drawn from the
    /// seed's data stream.
    pub fn build(&self, n: usize, seed: u64) -> Result<ObjectiveSet> {
        let mut rng = rng::stream(seed, rng::DATA_STREAM);
        let obj = match self.kind {
            ObjectiveKind::Quadratic => ObjectiveSet::synthetic_quadratic(
                &QuadraticParams {
                    n,
                    d: self.d,
                    mu: self.mu,
                    l: self.l,
                    noise_sigma: self.noise_sigma,
                    heterogeneity: self.heterogeneity,
                    curvature_spread: self.curvature_spread,
                },
                &mut rng,
            )?,
            kind => {
                let data = match &self.dataset_path {
                    Some(path) => objective::Dataset::load(path)?,
                    None => {
                        let m = n * self.samples_per_node;
                        if kind == ObjectiveKind::LogisticL2 {
                            objective::synthetic_classification(m, self.d, &mut rng)
                        } else {
                            objective::synthetic_regression(m, self.d, self.noise_sigma, &mut rng)
                        }
                    }
                };
                let shards =
                    objective::partition_heterogeneous(&data, n, self.partition_mode, &mut rng)?;
                match kind {
                    ObjectiveKind::LeastSquares => {
                        ObjectiveSet::least_squares(&shards, self.batch_size)?
                    }
                    ObjectiveKind::LogisticL2 => {
                        ObjectiveSet::logistic_l2(&shards, self.reg, self.batch_size)?
                    }
                    _ => ObjectiveSet::least_squares_nonconvex(&shards, self.alpha, self.batch_size)?,
                }
            }
        };
        match self.clip {
            Some(g) => obj.with_clip(g),
            None => Ok(obj),
        }
    }
}

/// Compressor with `k` given either absolutely or as a fraction of `d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressorConfig {
    pub kind: CompressorName,
    pub k: Option<usize>,
    pub k_fraction: Option<f64>,
    pub s: Option<u32>,
    pub value_bits: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressorName {
    Identity,
    TopK,
    RandK,
    Qsgd,
    ScaledSign,
    SignTopK,
    QsgdTopK,
}

impl std::str::FromStr for CompressorName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown compressor `{s}`"))
    }
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            kind: CompressorName::Identity,
            k: None,
            k_fraction: None,
            s: None,
            value_bits: DEFAULT_VALUE_BITS,
        }
    }
}

impl CompressorConfig {
    pub fn new(kind: CompressorName) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Resolves `k` (an absolute `k` wins over `k_fraction`, which rounds to
    /// the nearest count and is at least 1) and validates against `d`.
    pub fn resolve(&self, d: usize) -> Result<CompressorSpec> {
        let k = || -> Result<usize> {
            match (self.k, self.k_fraction) {
                (Some(k), _) => Ok(k),
                (None, Some(f)) if f > 0.0 && f <= 1.0 => {
                    Ok(((f * d as f64).round() as usize).clamp(1, d))
                }
                (None, Some(f)) => Err(Error::config(
                    "compressor.k_fraction",
                    format!("must lie in (0, 1], got {f}"),
                )),
                (None, None) => Err(Error::config("compressor.k", "sparsifier needs k or k_fraction")),
            }
        };
        let s = || self.s.ok_or_else(|| Error::config("compressor.s", "quantizer needs s"));
        let kind = match self.kind {
            CompressorName::Identity => CompressorKind::Identity,
            CompressorName::TopK => CompressorKind::TopK { k: k()? },
            CompressorName::RandK => CompressorKind::RandK { k: k()? },
            CompressorName::Qsgd => CompressorKind::Qsgd { s: s()? },
            CompressorName::ScaledSign => CompressorKind::ScaledSign,
            CompressorName::SignTopK => CompressorKind::SignTopK { k: k()? },
            CompressorName::QsgdTopK => CompressorKind::QsgdTopK { k: k()?, s: s()? },
        };
        let spec = CompressorSpec {
            kind,
            value_bits: self.value_bits,
        };
        spec.validate(d)
            .map_err(|e| Error::config("compressor", e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSpec {
    Constant { eta: f64 },
    Decaying { b: f64, a: f64 },
    /// `(1 - beta) sqrt(n / T)`.
    AutoConstant,
    /// `16 (1 - beta) / (mu (a + t))`; `mu` defaults to the objective's and
    /// `a` to the smallest admissible offset.
    AutoDecaying { mu: Option<f64>, a: Option<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaSpec {
    Explicit(f64),
    /// Relaxed-assumption formula, capped at 1.
    AutoRelaxed,
    AutoStrong,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaSpec {
    /// Closed form of the compressor; an error for the sign operators.
    Formula,
    Explicit(f64),
    /// `1 -` the empirical contraction over Gaussian inputs.
    Estimate { trials: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accounting {
    /// One message per triggering node per round.
    #[default]
    Broadcast,
    /// One message per triggering node and neighbor.
    Unicast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub topology: TopologySpec,
    pub objective: ObjectiveSpec,
    pub compressor: CompressorConfig,
    #[serde(rename = "H")]
    pub h: usize,
    pub beta: f64,
    pub lr: LrSpec,
    pub gamma: GammaSpec,
    pub omega: OmegaSpec,
    pub threshold: ThresholdSchedule,
    #[serde(rename = "T")]
    pub t: usize,
    pub seed: u64,
    pub variant: Variant,
    pub accounting: Accounting,
    /// Defaults to `max(1, T / 200)`.
    pub eval_every: Option<usize>,
    pub diagnostics: bool,
    pub execution: Execution,
    pub link_rate_bps: f64,
    /// Standard deviation of the initial iterates (0 starts every node at 0).
    pub init_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            topology: TopologySpec::Ring {
                n: 8,
                self_weight: 1.0 / 3.0,
            },
            objective: ObjectiveSpec::default(),
            compressor: CompressorConfig::default(),
            h: 1,
            beta: 0.0,
            lr: LrSpec::AutoConstant,
            gamma: GammaSpec::Explicit(1.0),
            omega: OmegaSpec::Formula,
            threshold: ThresholdSchedule::Always,
            t: 1000,
            seed: 0,
            variant: Variant::FullCopy,
            accounting: Accounting::Broadcast,
            eval_every: None,
            diagnostics: false,
            execution: Execution::Parallel,
            link_rate_bps: 100_000.0,
            init_scale: 0.0,
        }
    }
}

impl RunConfig {
    pub fn n(&self) -> usize {
        self.topology.n()
    }

    pub fn eval_every(&self) -> usize {
        self.eval_every.unwrap_or((self.t / 200).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::config("T", "must be >= 1"));
        }
        if self.h == 0 {
            return Err(Error::config("H", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::config("beta", format!("must lie in [0, 1), got {}", self.beta)));
        }
        if self.eval_every == Some(0) {
            return Err(Error::config("eval_every", "must be >= 1"));
        }
        if !(self.link_rate_bps > 0.0) {
            return Err(Error::config("link_rate_bps", "must be positive"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("init.scale", "must be >= 0"));
        }
        if let GammaSpec::Explicit(g) = self.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::config("gamma", format!("must lie in (0, 1], got {g}")));
            }
        }
        self.threshold
            .validate()
            .map_err(|e| Error::config("threshold", e.to_string()))
    }
}

/// Constants derived while preparing a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub n: usize,
    pub d: usize,
    pub delta: f64,
    pub lambda: f64,
    pub omega: Option<f64>,
    pub gamma: f64,
    pub p: f64,
    pub lr: LrSchedule,
    pub eta0: f64,
    pub a: Option<f64>,
    pub compressor: CompressorSpec,
    pub bits_per_message: u64,
    #[serde(rename = "L")]
    pub l: f64,
    pub mu: f64,
    pub f_star: Option<f64>,
}

/// A validated configuration with its topology, objective and constants.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: RunConfig,
    pub mixing: MixingMatrix,
    pub objective: ObjectiveSet,
    pub derived: Derived,
}

impl Prepared {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let objective = config
            .objective
            .build(config.n(), config.seed)
            .map_err(|e| match e {
                Error::Config { .. } | Error::Io(_) => e,
                other => Error::config("objective", other.to_string()),
            })?;
        Self::with_objective(config, objective)
    }

    /// Uses a caller-built objective instead of `config.objective`.
    pub fn with_objective(config: RunConfig, objective: ObjectiveSet) -> Result<Self> {
        config.validate()?;
        let mixing = config
            .topology
            .build()
            .map_err(|e| Error::config("topology", e.to_string()))?;
        let n = mixing.n();
        if objective.n() != n {
            return Err(Error::config(
                "n",
                format!("objective has {} nodes, topology {n}", objective.n()),
            ));
        }
        let d = objective.d();
        let compressor = config.compressor.resolve(d)?;
        let (delta, lambda) = (mixing.delta(), mixing.lambda_dev());

        let omega = match config.omega {
            OmegaSpec::Formula => compress::omega_of(&compressor, d),
            OmegaSpec::Explicit(w) if w > 0.0 && w <= 1.0 => Some(w),
            OmegaSpec::Explicit(w) => {
                return Err(Error::config("omega", format!("must lie in (0, 1], got {w}")))
            }
            OmegaSpec::Estimate { trials } => {
                let mut r = rng::stream(config.seed, rng::OMEGA_STREAM);
                let residual = compress::estimate_contraction_with(
                    &compressor,
                    d,
                    trials,
                    &mut r,
                    config.execution,
                )
                .map_err(|e| Error::config("omega", e.to_string()))?;
                Some((1.0 - residual).clamp(1e-12, 1.0))
            }
        };
        let need_omega = || {
            omega.ok_or_else(|| {
                Error::config(
                    "omega",
                    format!(
                        "{} has no closed-form omega; set omega explicitly or to `estimate`",
                        compressor.kind.name()
                    ),
                )
            })
        };
        let gamma = match config.gamma {
            GammaSpec::Explicit(g) => g,
            GammaSpec::AutoRelaxed => schedule::gamma_relaxed(delta, need_omega()?, lambda)
                .map_err(|e| Error::config("gamma", e.to_string()))?
                .min(1.0),
            GammaSpec::AutoStrong => schedule::gamma_strong(delta, need_omega()?, lambda)
                .map_err(|e| Error::config("gamma", e.to_string()))?,
        };
        let p = schedule::p_of(gamma, delta);

        let beta = config.beta;
        let (lr, a) = match config.lr {
            LrSpec::Constant { eta } => (LrSchedule::Constant { eta }, None),
            LrSpec::Decaying { b, a } => (LrSchedule::Decaying { b, a }, Some(a)),
            LrSpec::AutoConstant => (
                LrSchedule::Constant {
                    eta: schedule::constant_lr(n, config.t, beta),
                },
                None,
            ),
            LrSpec::AutoDecaying { mu, a } => {
                let mu = mu.unwrap_or(objective.mu());
                if !(mu > 0.0) {
                    return Err(Error::config("lr.mu", "decaying rate needs mu > 0"));
                }
                let a = match a {
                    Some(a) => a,
                    None => schedule::min_a_strongly_convex(config.h, p, objective.l(), mu, beta)
                        .map_err(|e| Error::config("lr", e.to_string()))?
                        .max(1.0),
                };
                (
                    LrSchedule::Decaying {
                        b: 16.0 * (1.0 - beta) / mu,
                        a,
                    },
                    Some(a),
                )
            }
        };
        lr.validate().map_err(|e| Error::config("lr", e.to_string()))?;

        let f_star = objective.optimum().ok().flatten().map(|(_, f)| f);
        let derived = Derived {
            n,
            d,
            delta,
            lambda,
            omega,
            gamma,
            p,
            eta0: lr.eta_at(0),
            lr,
            a,
            compressor,
            bits_per_message: compress::nominal_bit_cost(&compressor, d),
            l: objective.l(),
            mu: objective.mu(),
            f_star,
        };
        Ok(Self {
            config,
            mixing,
            objective,
            derived,
        })
    }

    pub fn run(&self) -> Result<RunResult> {
        self.run_with_observer(|_| {})
    }

    /// Runs and calls `observer` after every iteration.
    pub fn run_with_observer(&self, mut observer: impl FnMut(&StepView<'_>)) -> Result<RunResult> {
        Runner::new(self)?.run(&mut observer)
    }
}

pub fn run(config: RunConfig) -> Result<RunResult> {
    Prepared::new(config)?.run()
}

/// One evaluation record, taken at `x_bar^(t)` before iteration `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: usize,
    pub loss: f64,
    pub grad_norm_sq: f64,
    /// `sum_i ||x_i - x_bar||^2`.
    pub consensus: f64,
    pub bits_cum: u64,
    pub messages: u64,
    pub triggers: u64,
    /// Largest virtual-sequence defect over the steps since the previous row.
    pub virtual_residual: Option<f64>,
    /// Loss at the running weighted average (decaying schedules).
    pub weighted_avg_loss: Option<f64>,
}

pub const CSV_HEADER: &str =
    "t,loss,grad_norm_sq,consensus,bits_cum,messages,triggers,virtual_residual,weighted_avg_loss";

pub fn write_metrics_csv(rows: &[MetricsRow], mut out: impl Write) -> std::io::Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.t,
            r.loss,
            r.grad_norm_sq,
            r.consensus,
            r.bits_cum,
            r.messages,
            r.triggers,
            opt(r.virtual_residual),
            opt(r.weighted_avg_loss)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub sync_rounds: usize,
    /// Largest `||x_bar^(t+1) - x_bar^(t+1/2)||_inf` over rounds.
    pub max_mean_shift: Option<f64>,
    pub max_virtual_residual: Option<f64>,
    /// Non-triggering nodes whose drift exceeded `c_t eta^2`.
    pub drift_violations: usize,
    pub max_momentum_norm: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub rows: Vec<MetricsRow>,
    pub final_xbar: Vec<f64>,
    pub final_loss: f64,
    pub final_consensus: f64,
    pub weighted_avg: Option<Vec<f64>>,
    pub weighted_avg_loss: Option<f64>,
    pub total_bits: u64,
    pub total_messages: u64,
    pub total_triggers: u64,
    pub diagnostics: Diagnostics,
    pub derived: Derived,
    pub config: RunConfig,
}

/// Compact report written next to the metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub final_loss: f64,
    pub final_suboptimality: Option<f64>,
    pub final_consensus: f64,
    pub weighted_avg_loss: Option<f64>,
    pub total_bits: u64,
    pub total_messages: u64,
    pub total_triggers: u64,
    pub seconds_at_link_rate: f64,
    pub diagnostics: Diagnostics,
    pub derived: Derived,
    pub config: RunConfig,
}

impl RunResult {
    pub fn summary(&self) -> Summary {
        Summary {
            final_loss: self.final_loss,
            final_suboptimality: self.derived.f_star.map(|f| self.final_loss - f),
            final_consensus: self.final_consensus,
            weighted_avg_loss: self.weighted_avg_loss,
            total_bits: self.total_bits,
            total_messages: self.total_messages,
            total_triggers: self.total_triggers,
            seconds_at_link_rate: self.total_bits as f64 / self.config.link_rate_bps,
            diagnostics: self.diagnostics.clone(),
            derived: self.derived.clone(),
            config: self.config.clone(),
        }
    }

    pub fn metrics_csv(&self) -> String {
        let mut buf = Vec::new();
        write_metrics_csv(&self.rows, &mut buf).expect("writing to a Vec");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// What happened in one synchronization round.
#[derive(Clone, Debug)]
pub struct SyncRecord {
    pub c_t: f64,
    pub triggered: Vec<bool>,
    /// `||x^(t+1/2) - x_hat||^2` per node, before messages were applied.
    pub drift_sq: Vec<f64>,
    pub mean_shift: f64,
}

/// State visible to an observer after iteration `t`.
pub struct StepView<'a> {
    pub t: usize,
    pub eta: f64,
    pub sync: Option<&'a SyncRecord>,
    pub virtual_residual: Option<f64>,
    workers: &'a [Worker],
}

impl StepView<'_> {
    pub fn n(&self) -> usize {
        self.workers.len()
    }
    pub fn node(&self, i: usize) -> &NodeState {
        &self.workers[i].state
    }
    /// Stochastic gradient node `i` used in this iteration.
    pub fn grad(&self, i: usize) -> &[f64] {
        &self.workers[i].grad
    }
}

/// Synchronization indices `{0, H, 2H, ...}` below `T`.
pub fn sync_indices(t: usize, h: usize) -> Result<Vec<usize>> {
    if h == 0 {
        return Err(Error::param("H must be >= 1"));
    }
    Ok((0..t).step_by(h).collect())
}

pub fn bits_to_seconds(bits: u64, link_rate_bps: f64) -> Result<f64> {
    if !(link_rate_bps > 0.0) {
        return Err(Error::param(format!("link rate must be positive, got {link_rate_bps}")));
    }
    Ok(bits as f64 / link_rate_bps)
}

fn mean_of<'a>(xs: impl Iterator<Item = &'a [f64]>, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    let mut count = 0usize;
    for x in xs {
        m.iter_mut().zip(x).for_each(|(a, b)| *a += b);
        count += 1;
    }
    m.iter_mut().for_each(|a| *a /= count as f64);
    m
}

/// `||mean(after) - mean(before)||_inf`.
pub fn mean_preservation_check(before: &[Vec<f64>], after: &[Vec<f64>]) -> f64 {
    let d = before.first().map_or(0, Vec::len);
    let a = mean_of(before.iter().map(Vec::as_slice), d);
    let b = mean_of(after.iter().map(Vec::as_slice), d);
    a.iter().zip(&b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Tracks `x_tilde^(t) = x_bar^(t) - (eta beta^2 / (1 - beta)) v_bar^(t-1)`
/// and the defect of `x_tilde^(t+1) = x_tilde^(t) - eta/(1-beta) g_bar^(t)`.
#[derive(Clone, Debug)]
pub struct VirtualSequence {
    current: Vec<f64>,
}

impl VirtualSequence {
    /// Starts at `x_tilde^(0) = x_bar^(0)` (momentum starts at zero).
    pub fn new(xbar0: &[f64]) -> Self {
        Self {
            current: xbar0.to_vec(),
        }
    }

    pub fn current(&self) -> &[f64] {
        &self.current
    }

    /// Moves to `t + 1` given `x_bar^(t+1)`, `v_bar^(t)` and the mean
    /// stochastic gradient of step `t`; returns the defect in the inf-norm.
    pub fn advance(
        &mut self,
        xbar_next: &[f64],
        vbar: &[f64],
        gbar: &[f64],
        eta: f64,
        beta: f64,
    ) -> Result<f64> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::param(format!("virtual sequence needs beta in [0, 1), got {beta}")));
        }
        let c = eta * beta * beta / (1.0 - beta);
        let step = eta / (1.0 - beta);
        let mut defect = 0.0_f64;
        for j in 0..self.current.len() {
            let next = xbar_next[j] - c * vbar[j];
            let predicted = self.current[j] - step * gbar[j];
            defect = defect.max((next - predicted).abs());
            self.current[j] = next;
        }
        Ok(defect)
    }
}

struct Worker {
    state: NodeState,
    rng: Stream,
    grad: Vec<f64>,
    outbox: Option<Vec<f64>>,
    drift_sq: f64,
    fired: bool,
}

struct Runner<'p> {
    prep: &'p Prepared,
    workers: Vec<Worker>,
    rows_w: Vec<Vec<f64>>,
    senders: Vec<Vec<usize>>,
}

impl<'p> Runner<'p> {
    fn new(prep: &'p Prepared) -> Result<Self> {
        let cfg = &prep.config;
        let (n, d) = (prep.derived.n, prep.derived.d);
        let mut init = rng::stream(cfg.seed, rng::INIT_STREAM);
        let workers = (0..n)
            .map(|i| {
                let x0: Vec<f64> = (0..d)
                    .map(|_| {
                        if cfg.init_scale > 0.0 {
                            cfg.init_scale * init.sample::<f64, _>(StandardNormal)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Worker {
                    state: NodeState::new(i, x0, prep.mixing.neighbors(i), cfg.variant),
                    rng: rng::node_stream(cfg.seed, i),
                    grad: vec![0.0; d],
                    outbox: None,
                    drift_sq: 0.0,
                    fired: false,
                }
            })
            .collect();
        let rows_w = (0..n).map(|i| prep.mixing.row(i)).collect();
        // Fixed application order: ascending node index, self included.
        let senders = (0..n)
            .map(|i| {
                let mut s: Vec<usize> = prep.mixing.neighbors(i).to_vec();
                s.push(i);
                s.sort_unstable();
                s.dedup();
                s
            })
            .collect();
        Ok(Self {
            prep,
            workers,
            rows_w,
            senders,
        })
    }

    fn xbar(&self) -> Vec<f64> {
        mean_of(self.workers.iter().map(|w| w.state.x()), self.prep.derived.d)
    }

    fn consensus(&self, xbar: &[f64]) -> f64 {
        self.workers
            .iter()
            .map(|w| {
                w.state
                    .x()
                    .iter()
                    .zip(xbar)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    }

    fn run(mut self, observer: &mut dyn FnMut(&StepView<'_>)) -> Result<RunResult> {
        let prep = self.prep;
        let cfg = &prep.config;
        let der = &prep.derived;
        let obj = &prep.objective;
        let (n, d, beta, gamma) = (der.n, der.d, cfg.beta, der.gamma);
        let exec = cfg.execution;
        let eval_every = cfg.eval_every();
        let spec = der.compressor;
        let diag_on = cfg.diagnostics;
        let track_virtual = diag_on && der.lr.is_constant();

        let mut rows = Vec::new();
        let (mut bits, mut messages, mut triggers) = (0u64, 0u64, 0u64);
        let mut diag = Diagnostics::default();
        let mut weighted = der.a.map(|a| (a, vec![0.0; d], 0.0_f64));
        let mut virt = track_virtual.then(|| VirtualSequence::new(&self.xbar()));
        let mut resid_since_row: Option<f64> = track_virtual.then_some(0.0);

        let diverged = |t: usize, rows: &[MetricsRow]| Error::Divergence {
            t,
            rows: rows.to_vec(),
        };

        for t in 0..cfg.t {
            let xbar = self.xbar();
            if let Some((a, acc, s)) = weighted.as_mut() {
                let w = schedule::weighted_avg_weight(*a, t);
                acc.iter_mut().zip(&xbar).for_each(|(p, q)| *p += w * q);
                *s += w;
            }
            if t % eval_every == 0 || t + 1 == cfg.t {
                let loss = obj.loss(&xbar);
                if !loss.is_finite() || xbar.iter().any(|v| !v.is_finite()) {
                    return Err(diverged(t, &rows));
                }
                let wavg_loss = weighted.as_ref().map(|(_, acc, s)| {
                    let avg: Vec<f64> = acc.iter().map(|v| v / s).collect();
                    obj.loss(&avg)
                });
                rows.push(MetricsRow {
                    t,
                    loss,
                    grad_norm_sq: norm_sq(&obj.full_grad_global(&xbar)),
                    consensus: self.consensus(&xbar),
                    bits_cum: bits,
                    messages,
                    triggers,
                    virtual_residual: resid_since_row,
                    weighted_avg_loss: wavg_loss,
                });
                if track_virtual {
                    resid_since_row = Some(0.0);
                }
            }

            let eta = der.lr.eta_at(t);
            let local = par::try_for_each_mut(&mut self.workers, exec, |i, w| -> Result<()> {
                w.grad = obj.stochastic_grad(i, w.state.x(), &mut w.rng)?;
                w.state.local_step(&w.grad, eta, beta)
            });
            match local {
                Err(Error::NonFinite(_)) => return Err(diverged(t, &rows)),
                other => other?,
            }

            let mut record = None;
            if (t + 1) % cfg.h == 0 {
                let c_t = cfg.threshold.at(t, eta);
                par::try_for_each_mut(&mut self.workers, exec, |_, w| -> Result<()> {
                    w.drift_sq = w.state.drift_sq();
                    w.fired = w.state.should_trigger(c_t, eta);
                    w.outbox = if w.fired {
                        let msg = w.state.encode_update(&spec, &mut w.rng)?;
                        compress::bit_cost(&spec, d, &msg)?;
                        Some(msg.decode())
                    } else {
                        None
                    };
                    Ok(())
                })?;
                let before = diag_on.then(|| self.xbar());
                for w in &self.workers {
                    if w.fired {
                        let copies = match cfg.accounting {
                            Accounting::Broadcast => 1,
                            Accounting::Unicast => w.state.neighbors().len() as u64,
                        };
                        triggers += 1;
                        messages += copies;
                        bits += copies * der.bits_per_message;
                    } else if diag_on && c_t.is_finite() && w.drift_sq > c_t * eta * eta {
                        diag.drift_violations += 1;
                    }
                }
                let outboxes: Vec<Option<Vec<f64>>> =
                    self.workers.iter_mut().map(|w| w.outbox.take()).collect();
                let (rows_w, senders) = (&self.rows_w, &self.senders);
                par::try_for_each_mut(&mut self.workers, exec, |i, w| -> Result<()> {
                    for &j in &senders[i] {
                        if let Some(q) = &outboxes[j] {
                            w.state.apply_incoming(j, q, &rows_w[i])?;
                        }
                    }
                    w.state.consensus_step(gamma, &rows_w[i]);
                    Ok(())
                })?;
                let mean_shift = match before {
                    Some(b) => {
                        let after = self.xbar();
                        let shift = b.iter().zip(&after).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
                        diag.max_mean_shift = Some(diag.max_mean_shift.unwrap_or(0.0).max(shift));
                        shift
                    }
                    None => f64::NAN,
                };
                diag.sync_rounds += 1;
                record = Some(SyncRecord {
                    c_t,
                    triggered: self.workers.iter().map(|w| w.fired).collect(),
                    drift_sq: self.workers.iter().map(|w| w.drift_sq).collect(),
                    mean_shift,
                });
            }

            let mut step_resid = None;
            if diag_on {
                let vmax = self
                    .workers
                    .iter()
                    .map(|w| w.state.momentum_norm())
                    .fold(0.0_f64, f64::max);
                diag.max_momentum_norm = Some(diag.max_momentum_norm.unwrap_or(0.0).max(vmax));
            }
            if let Some(vs) = virt.as_mut() {
                let xbar_next = self.xbar();
                let vbar = mean_of(self.workers.iter().map(|w| w.state.v()), d);
                let gbar = mean_of(self.workers.iter().map(|w| w.grad.as_slice()), d);
                let r = vs.advance(&xbar_next, &vbar, &gbar, eta, beta)?;
                diag.max_virtual_residual = Some(diag.max_virtual_residual.unwrap_or(0.0).max(r));
                resid_since_row = resid_since_row.map(|m| m.max(r));
                step_resid = Some(r);
            }

            observer(&StepView {
                t,
                eta,
                sync: record.as_ref(),
                virtual_residual: step_resid,
                workers: &self.workers,
            });
        }

        let final_xbar = self.xbar();
        let final_loss = obj.loss(&final_xbar);
        if !final_loss.is_finite() {
            return Err(diverged(cfg.t, &rows));
        }
        let final_consensus = self.consensus(&final_xbar);
        let weighted_avg = weighted.map(|(_, acc, s)| acc.iter().map(|v| v / s).collect::<Vec<_>>());
        let weighted_avg_loss = weighted_avg.as_ref().map(|x| obj.loss(x));
        debug_assert!(n == self.workers.len());
        debug_assert!(norm_inf(&final_xbar).is_finite());
        Ok(RunResult {
            rows,
            final_xbar,
            final_loss,
            final_consensus,
            weighted_avg,
            weighted_avg_loss,
            total_bits: bits,
            total_messages: messages,
            total_triggers: triggers,
            diagnostics: diag,
            derived: der.clone(),
            config: cfg.clone(),
        })
    }
}
