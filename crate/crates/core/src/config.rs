//! Flat dotted-key configuration.
//!
//! A config is a JSON object whose keys name fields with dots for nesting
//! (`"threshold.kind": "poly"`). Nested objects are accepted and flattened.
//! Layers are merged as defaults < preset < file < overrides, and
//! `SQUARM_SEED` supplies the seed when no layer sets one.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use crate::compress::DEFAULT_VALUE_BITS;
use crate::engine::{
    Accounting, CompressorConfig, CompressorName, GammaSpec, LrSpec, ObjectiveSpec, OmegaSpec,
    RunConfig,
};
use crate::node::Variant;
use crate::par::Execution;
use crate::presets;
use crate::schedule::ThresholdSchedule;
use crate::topology::TopologySpec;
use crate::{Error, Result};

pub type ConfigMap = BTreeMap<String, Value>;

pub const SEED_ENV: &str = "SQUARM_SEED";

/// Trials used when `omega` is `"estimate"`.
pub const ESTIMATE_TRIALS: usize = 10_000;

pub const KEYS: &[&str] = &[
    "preset",
    "n",
    "topology.kind",
    "topology.self_weight",
    "topology.edges",
    "topology.self_weights",
    "objective.kind",
    "objective.d",
    "objective.noise_sigma",
    "objective.mu",
    "objective.L",
    "objective.heterogeneity",
    "objective.curvature_spread",
    "objective.samples_per_node",
    "objective.partition_mode",
    "objective.dataset_path",
    "objective.alpha",
    "objective.reg",
    "objective.batch_size",
    "objective.clip",
    "compressor.kind",
    "compressor.k",
    "compressor.k_fraction",
    "compressor.s",
    "compressor.value_bits",
    "H",
    "beta",
    "T",
    "seed",
    "variant",
    "accounting",
    "eval_every",
    "diagnostics",
    "parallel",
    "link_rate_bps",
    "init.scale",
    "lr.kind",
    "lr.eta",
    "lr.b",
    "lr.a",
    "lr.mu",
    "gamma",
    "omega",
    "threshold.kind",
    "threshold.c0",
    "threshold.epsilon",
    "threshold.init",
    "threshold.step",
    "threshold.period",
    "threshold.until",
];

/// Group names that stand for their `.kind` key on the command line.
const ALIASES: &[&str] = &["topology", "objective", "compressor", "lr", "threshold"];

pub fn canonical_key(key: &str) -> Result<String> {
    let key = if ALIASES.contains(&key) {
        format!("{key}.kind")
    } else {
        key.to_string()
    };
    if KEYS.contains(&key.as_str()) {
        Ok(key)
    } else {
        Err(Error::config(key, "unknown key"))
    }
}

fn flatten_into(prefix: &str, value: &Value, out: &mut ConfigMap) -> Result<()> {
    match value {
        Value::Object(obj) => {
            for (k, v) in obj {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                // Leaf objects are only meaningful under a known key.
                if v.is_object() && !KEYS.contains(&key.as_str()) {
                    flatten_into(&key, v, out)?;
                } else {
                    out.insert(canonical_key(&key)?, v.clone());
                }
            }
            Ok(())
        }
        _ => Err(Error::config(
            if prefix.is_empty() { "<root>" } else { prefix },
            "expected a JSON object",
        )),
    }
}

/// Flattens a JSON object into dotted keys, rejecting unknown keys.
pub fn flatten(value: &Value) -> Result<ConfigMap> {
    let mut out = ConfigMap::new();
    flatten_into("", value, &mut out)?;
    Ok(out)
}

pub fn parse_str(text: &str) -> Result<ConfigMap> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
    flatten(&value)
}

pub fn load(path: &Path) -> Result<ConfigMap> {
    parse_str(&std::fs::read_to_string(path)?)
}

/// Command-line values are JSON when they parse as JSON, strings otherwise.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `key` (aliases allowed) to the parsed `raw` value.
pub fn set_override(map: &mut ConfigMap, key: &str, raw: &str) -> Result<()> {
    map.insert(canonical_key(key)?, parse_value(raw));
    Ok(())
}

/// Merges the layers and builds a run configuration.
///
/// The preset is taken from `overrides` first, then from `file`.
pub fn resolve(file: Option<&ConfigMap>, overrides: &ConfigMap) -> Result<RunConfig> {
    resolve_with_env(file, overrides, std::env::var(SEED_ENV).ok())
}

pub fn resolve_with_env(
    file: Option<&ConfigMap>,
    overrides: &ConfigMap,
    env_seed: Option<String>,
) -> Result<RunConfig> {
    let empty = ConfigMap::new();
    let file = file.unwrap_or(&empty);
    let preset = overrides.get("preset").or_else(|| file.get("preset"));
    let mut map = match preset {
        Some(Value::String(name)) => presets::preset(name)?,
        Some(_) => return Err(Error::config("preset", "expected a preset name")),
        None => ConfigMap::new(),
    };
    map.extend(file.iter().map(|(k, v)| (k.clone(), v.clone())));
    map.extend(overrides.iter().map(|(k, v)| (k.clone(), v.clone())));
    if !map.contains_key("seed") {
        if let Some(raw) = env_seed {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| Error::config("seed", format!("{SEED_ENV}={raw} is not a u64")))?;
            map.insert("seed".into(), Value::from(seed));
        }
    }
    build(&map)
}

struct Reader<'a> {
    map: &'a ConfigMap,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> Option<&Value> {
        self.map.get(key).filter(|v| !v.is_null())
    }

    fn f64(&self, key: &str) -> Result<Option<f64>> {
        self.raw(key)
            .map(|v| v.as_f64().ok_or_else(|| Error::config(key, "expected a number")))
            .transpose()
    }

    fn usize(&self, key: &str) -> Result<Option<usize>> {
        self.raw(key)
            .map(|v| {
                v.as_u64()
                    .map(|u| u as usize)
                    .ok_or_else(|| Error::config(key, "expected a non-negative integer"))
            })
            .transpose()
    }

    fn u64(&self, key: &str) -> Result<Option<u64>> {
        self.raw(key)
            .map(|v| v.as_u64().ok_or_else(|| Error::config(key, "expected a non-negative integer")))
            .transpose()
    }

    fn bool(&self, key: &str) -> Result<Option<bool>> {
        self.raw(key)
            .map(|v| v.as_bool().ok_or_else(|| Error::config(key, "expected true or false")))
            .transpose()
    }

    fn str(&self, key: &str) -> Result<Option<&str>> {
        self.raw(key)
            .map(|v| v.as_str().ok_or_else(|| Error::config(key, "expected a string")))
            .transpose()
    }

    fn required_f64(&self, key: &str) -> Result<f64> {
        self.f64(key)?.ok_or_else(|| Error::config(key, "required"))
    }

    fn parsed<T: std::str::FromStr<Err = String>>(&self, key: &str) -> Result<Option<T>> {
        self.str(key)?
            .map(|s| s.parse().map_err(|e: String| Error::config(key, e)))
            .transpose()
    }

    fn enum_of<T: serde::de::DeserializeOwned>(&self, key: &str, allowed: &str) -> Result<Option<T>> {
        self.str(key)?
            .map(|s| {
                serde_json::from_value(Value::String(s.to_string()))
                    .map_err(|_| Error::config(key, format!("`{s}` is not one of {allowed}")))
            })
            .transpose()
    }
}

fn topology(r: &Reader<'_>) -> Result<TopologySpec> {
    let n = r.usize("n")?.unwrap_or(8);
    Ok(match r.str("topology.kind")?.unwrap_or("ring") {
        "ring" => TopologySpec::Ring {
            n,
            self_weight: r.f64("topology.self_weight")?.unwrap_or(1.0 / 3.0),
        },
        "complete" => TopologySpec::Complete { n },
        "custom" => {
            let edges = r
                .raw("topology.edges")
                .ok_or_else(|| Error::config("topology.edges", "custom topology needs edges"))?;
            let edges: Vec<(usize, usize, f64)> = serde_json::from_value(edges.clone())
                .map_err(|_| Error::config("topology.edges", "expected [[i, j, w], ...]"))?;
            let self_weights = r
                .raw("topology.self_weights")
                .map(|v| {
                    serde_json::from_value::<Vec<f64>>(v.clone())
                        .map_err(|_| Error::config("topology.self_weights", "expected a number list"))
                })
                .transpose()?;
            TopologySpec::Custom {
                n,
                edges,
                self_weights,
            }
        }
        other => {
            return Err(Error::config(
                "topology.kind",
                format!("`{other}` is not one of ring|complete|custom"),
            ))
        }
    })
}

fn objective(r: &Reader<'_>) -> Result<ObjectiveSpec> {
    let def = ObjectiveSpec::default();
    Ok(ObjectiveSpec {
        kind: r.parsed("objective.kind")?.unwrap_or(def.kind),
        d: r.usize("objective.d")?.unwrap_or(def.d),
        noise_sigma: r.f64("objective.noise_sigma")?.unwrap_or(def.noise_sigma),
        mu: r.f64("objective.mu")?.unwrap_or(def.mu),
        l: r.f64("objective.L")?.unwrap_or(def.l),
        heterogeneity: r.f64("objective.heterogeneity")?.unwrap_or(def.heterogeneity),
        curvature_spread: r.f64("objective.curvature_spread")?.unwrap_or(def.curvature_spread),
        samples_per_node: r.usize("objective.samples_per_node")?.unwrap_or(def.samples_per_node),
        partition_mode: r.parsed("objective.partition_mode")?.unwrap_or(def.partition_mode),
        dataset_path: r.str("objective.dataset_path")?.map(Into::into),
        alpha: r.f64("objective.alpha")?.unwrap_or(def.alpha),
        reg: r.f64("objective.reg")?.unwrap_or(def.reg),
        batch_size: r.usize("objective.batch_size")?.unwrap_or(def.batch_size),
        clip: r.f64("objective.clip")?,
    })
}

fn compressor(r: &Reader<'_>) -> Result<CompressorConfig> {
    let kind: CompressorName = r.parsed("compressor.kind")?.unwrap_or(CompressorName::Identity);
    let value_bits = match r.u64("compressor.value_bits")? {
        Some(b) => u32::try_from(b).map_err(|_| Error::config("compressor.value_bits", "too large"))?,
        None => DEFAULT_VALUE_BITS,
    };
    let s = r
        .u64("compressor.s")?
        .map(|s| u32::try_from(s).map_err(|_| Error::config("compressor.s", "too large")))
        .transpose()?;
    Ok(CompressorConfig {
        kind,
        k: r.usize("compressor.k")?,
        k_fraction: r.f64("compressor.k_fraction")?,
        s,
        value_bits,
    })
}

fn lr(r: &Reader<'_>) -> Result<LrSpec> {
    Ok(match r.str("lr.kind")?.unwrap_or("auto_constant") {
        "constant" => LrSpec::Constant {
            eta: r.required_f64("lr.eta")?,
        },
        "decaying" => LrSpec::Decaying {
            b: r.required_f64("lr.b")?,
            a: r.required_f64("lr.a")?,
        },
        "auto_constant" => LrSpec::AutoConstant,
        "auto_decaying" => LrSpec::AutoDecaying {
            mu: r.f64("lr.mu")?,
            a: r.f64("lr.a")?,
        },
        other => {
            return Err(Error::config(
                "lr.kind",
                format!("`{other}` is not one of constant|decaying|auto_constant|auto_decaying"),
            ))
        }
    })
}

fn gamma(r: &Reader<'_>) -> Result<GammaSpec> {
    match r.raw("gamma") {
        None => Ok(GammaSpec::Explicit(1.0)),
        Some(Value::Number(x)) => Ok(GammaSpec::Explicit(x.as_f64().unwrap_or(f64::NAN))),
        Some(Value::String(s)) if s == "auto_strong" => Ok(GammaSpec::AutoStrong),
        Some(Value::String(s)) if s == "auto_relaxed" => Ok(GammaSpec::AutoRelaxed),
        Some(_) => Err(Error::config("gamma", "expected a number, auto_strong or auto_relaxed")),
    }
}

fn omega(r: &Reader<'_>) -> Result<OmegaSpec> {
    match r.raw("omega") {
        None => Ok(OmegaSpec::Formula),
        Some(Value::Number(x)) => Ok(OmegaSpec::Explicit(x.as_f64().unwrap_or(f64::NAN))),
        Some(Value::String(s)) if s == "formula" => Ok(OmegaSpec::Formula),
        Some(Value::String(s)) if s == "estimate" => Ok(OmegaSpec::Estimate {
            trials: ESTIMATE_TRIALS,
        }),
        Some(_) => Err(Error::config("omega", "expected a number, formula or estimate")),
    }
}

fn threshold(r: &Reader<'_>) -> Result<ThresholdSchedule> {
    let c0 = || Ok::<_, Error>(r.f64("threshold.c0")?.unwrap_or(1.0));
    let eps = || Ok::<_, Error>(r.f64("threshold.epsilon")?.unwrap_or(0.5));
    Ok(match r.str("threshold.kind")?.unwrap_or("always") {
        "always" => ThresholdSchedule::Always,
        "never" => ThresholdSchedule::Never,
        "poly" => ThresholdSchedule::Poly {
            c0: c0()?,
            epsilon: eps()?,
        },
        "const_eta" => ThresholdSchedule::ConstEta {
            c0: c0()?,
            epsilon: eps()?,
        },
        "piecewise" => ThresholdSchedule::Piecewise {
            init: r.f64("threshold.init")?.unwrap_or(2.5),
            step: r.f64("threshold.step")?.unwrap_or(1.5),
            period: r.usize("threshold.period")?.unwrap_or(100),
            until: r.usize("threshold.until")?,
        },
        other => {
            return Err(Error::config(
                "threshold.kind",
                format!("`{other}` is not one of always|never|poly|const_eta|piecewise"),
            ))
        }
    })
}

/// Builds a run configuration from a merged map. Unset keys take defaults.
pub fn build(map: &ConfigMap) -> Result<RunConfig> {
    for key in map.keys() {
        canonical_key(key)?;
    }
    let r = Reader { map };
    let def = RunConfig::default();
    let cfg = RunConfig {
        topology: topology(&r)?,
        objective: objective(&r)?,
        compressor: compressor(&r)?,
        h: r.usize("H")?.unwrap_or(def.h),
        beta: r.f64("beta")?.unwrap_or(def.beta),
        lr: lr(&r)?,
        gamma: gamma(&r)?,
        omega: omega(&r)?,
        threshold: threshold(&r)?,
        t: r.usize("T")?.unwrap_or(def.t),
        seed: r.u64("seed")?.unwrap_or(def.seed),
        variant: r
            .enum_of::<Variant>("variant", "full_copy|mem_efficient")?
            .unwrap_or(def.variant),
        accounting: r
            .enum_of::<Accounting>("accounting", "broadcast|unicast")?
            .unwrap_or(def.accounting),
        eval_every: r.usize("eval_every")?,
        diagnostics: r.bool("diagnostics")?.unwrap_or(def.diagnostics),
        execution: match r.bool("parallel")? {
            Some(false) => Execution::Sequential,
            _ => Execution::Parallel,
        },
        link_rate_bps: r.f64("link_rate_bps")?.unwrap_or(def.link_rate_bps),
        init_scale: r.f64("init.scale")?.unwrap_or(def.init_scale),
    };
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn nested_and_dotted_agree() {
        let a = flatten(&json!({"threshold": {"kind": "poly", "c0": 2.0}, "T": 10})).unwrap();
        let b = flatten(&json!({"threshold.kind": "poly", "threshold.c0": 2.0, "T": 10})).unwrap();
        assert_eq!(a, b);
        assert_eq!(build(&a).unwrap(), build(&b).unwrap());
    }

    #[test]
    fn unknown_key_is_named() {
        assert_eq!(key_of(parse_str(r#"{"betta": 0.9}"#).unwrap_err()), "betta");
        assert_eq!(key_of(parse_str(r#"{"lr": {"rate": 1}}"#).unwrap_err()), "lr.rate");
    }

    #[test]
    fn bad_value_names_key() {
        let map = parse_str(r#"{"beta": "high"}"#).unwrap();
        assert_eq!(key_of(build(&map).unwrap_err()), "beta");
        let map = parse_str(r#"{"threshold.kind": "sometimes"}"#).unwrap();
        assert_eq!(key_of(build(&map).unwrap_err()), "threshold.kind");
        assert_eq!(key_of(parse_str("[1, 2]").unwrap_err()), "<root>");
        assert_eq!(key_of(parse_str("{").unwrap_err()), "<file>");
    }

    #[test]
    fn layer_precedence() {
        let file = parse_str(r#"{"preset": "dpsgd", "T": 50, "beta": 0.3}"#).unwrap();
        let mut ov = ConfigMap::new();
        set_override(&mut ov, "T", "70").unwrap();
        let cfg = resolve_with_env(Some(&file), &ov, None).unwrap();
        assert_eq!(cfg.t, 70);
        assert_eq!(cfg.beta, 0.3);
        assert_eq!(cfg.threshold, ThresholdSchedule::Always);
        assert_eq!(cfg.gamma, GammaSpec::Explicit(1.0));
    }

    #[test]
    fn seed_env_is_a_fallback() {
        let cfg = resolve_with_env(None, &ConfigMap::new(), Some("7".into())).unwrap();
        assert_eq!(cfg.seed, 7);
        let mut ov = ConfigMap::new();
        set_override(&mut ov, "seed", "3").unwrap();
        let cfg = resolve_with_env(None, &ov, Some("7".into())).unwrap();
        assert_eq!(cfg.seed, 3);
        assert!(resolve_with_env(None, &ConfigMap::new(), Some("x".into())).is_err());
    }

    #[test]
    fn aliases_and_value_parsing() {
        let mut ov = ConfigMap::new();
        set_override(&mut ov, "objective", "logistic_l2").unwrap();
        set_override(&mut ov, "gamma", "auto_strong").unwrap();
        set_override(&mut ov, "compressor", "top_k").unwrap();
        set_override(&mut ov, "compressor.k", "3").unwrap();
        set_override(&mut ov, "parallel", "false").unwrap();
        let cfg = build(&ov).unwrap();
        assert_eq!(cfg.objective.kind, crate::objective::ObjectiveKind::LogisticL2);
        assert_eq!(cfg.gamma, GammaSpec::AutoStrong);
        assert_eq!(cfg.compressor.k, Some(3));
        assert_eq!(cfg.execution, Execution::Sequential);
        assert!(set_override(&mut ov, "bogus", "1").is_err());
    }

    #[test]
    fn custom_topology_from_config() {
        let map = parse_str(
            r#"{"n": 2, "topology.kind": "custom", "topology.edges": [[0, 1, 0.5]]}"#,
        )
        .unwrap();
        let cfg = build(&map).unwrap();
        let w = cfg.topology.build().unwrap();
        assert_eq!(w.weight(0, 0), 0.5);
    }
}
