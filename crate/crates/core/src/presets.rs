//! Named configurations for the algorithm and its baselines.
//!
//! Each preset is a partial config map; it sits below the config file and
//! command-line overrides.

use serde_json::{json, Value};

use crate::config::ConfigMap;
use crate::{Error, Result};

pub const NAMES: &[&str] = &["squarm", "sparq", "choco", "dpsgd", "local_sgd"];

pub fn describe(name: &str) -> Option<&'static str> {
    Some(match name {
        "squarm" => "momentum 0.9, H=5, sign-top-k 1%, piecewise trigger threshold",
        "sparq" => "squarm without momentum",
        "choco" => "compressed gossip every step, top-k 1%, no trigger, no momentum",
        "dpsgd" => "uncompressed gossip every step, gamma = 1, no momentum",
        "local_sgd" => "local steps only, never communicates",
        _ => return None,
    })
}

fn map(value: Value) -> ConfigMap {
    crate::config::flatten(&value).expect("preset keys are valid")
}

pub fn preset(name: &str) -> Result<ConfigMap> {
    Ok(match name {
        "squarm" => squarm(0.9),
        "sparq" => squarm(0.0),
        "choco" => map(json!({
            "H": 1,
            "beta": 0.0,
            "threshold.kind": "always",
            "compressor.kind": "top_k",
            "compressor.k_fraction": 0.01,
            "gamma": "auto_strong",
            "omega": "formula",
        })),
        "dpsgd" => map(json!({
            "H": 1,
            "beta": 0.0,
            "threshold.kind": "always",
            "compressor.kind": "identity",
            "gamma": 1.0,
        })),
        "local_sgd" => map(json!({
            "beta": 0.0,
            "threshold.kind": "never",
            "compressor.kind": "identity",
            "gamma": 1.0,
        })),
        other => {
            return Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (known: {})", NAMES.join(", ")),
            ))
        }
    })
}

fn squarm(beta: f64) -> ConfigMap {
    map(json!({
        "H": 5,
        "beta": beta,
        "threshold.kind": "piecewise",
        "threshold.init": 2.5,
        "threshold.step": 1.5,
        "threshold.period": 100,
        "compressor.kind": "sign_top_k",
        "compressor.k_fraction": 0.01,
        "gamma": "auto_strong",
        "omega": "estimate",
    }))
}
