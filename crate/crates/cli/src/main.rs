//! `squarm` command-line driver.
//!
//! Exit codes: 0 success, 1 run or verification failure, 2 usage or config
//! error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use squarm::config::{self, ConfigMap};
use squarm::engine::{self, Prepared, RunResult};
use squarm::verify::{self, Suite};
use squarm::{presets, Error};

#[derive(Parser)]
#[command(name = "squarm", version, about = "Decentralized momentum SGD with compressed, event-triggered gossip")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv and summary.json.
    Run(RunArgs),
    /// Run invariant suites: compression, spectral, identities, schedules or all.
    Verify {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Run one experiment per value of a config key.
    Sweep(SweepArgs),
    /// List the named presets.
    Presets {
        #[arg(default_value = "list")]
        action: String,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Config overrides as `--key value` or `--key=value`, e.g. `--preset dpsgd --T 2000`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Key to vary: T, n, H or k.
    #[arg(long)]
    axis: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<String>,
    #[command(flatten)]
    common: CommonArgs,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Parameter(_) | Error::Io(_) => Failure::Usage(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Run(format!("{}: {e}", path.display()))
}

/// Splits `--key value` / `--key=value` pairs into a config map.
fn parse_overrides(args: &[String]) -> Result<ConfigMap, Failure> {
    let mut map = ConfigMap::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(Failure::Usage(format!("unexpected argument `{arg}`")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Failure::Usage(format!("missing value for --{flag}")))?;
                (flag.to_string(), v.clone())
            }
        };
        config::set_override(&mut map, &key, &value)?;
    }
    Ok(map)
}

fn load_config(common: &CommonArgs, extra: Option<(&str, &str)>) -> Result<engine::RunConfig, Failure> {
    let file = match &common.config {
        Some(path) => Some(config::load(path).map_err(|e| match e {
            Error::Io(io) => Failure::Usage(format!("{}: {io}", path.display())),
            other => Failure::from(other),
        })?),
        None => None,
    };
    let mut overrides = parse_overrides(&common.overrides)?;
    if let Some((key, value)) = extra {
        config::set_override(&mut overrides, key, value)?;
    }
    Ok(config::resolve(file.as_ref(), &overrides)?)
}

fn write_outputs(dir: &Path, result: &RunResult) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let metrics = dir.join("metrics.csv");
    fs::write(&metrics, result.metrics_csv()).map_err(|e| io_err(&metrics, e))?;
    let summary = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&result.summary()).expect("summary serializes");
    fs::write(&summary, json + "\n").map_err(|e| io_err(&summary, e))
}

fn execute(cfg: engine::RunConfig, dir: &Path) -> Result<RunResult, Failure> {
    let prep = Prepared::new(cfg)?;
    match prep.run() {
        Ok(r) => {
            write_outputs(dir, &r)?;
            Ok(r)
        }
        Err(Error::Divergence { t, rows }) => {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut buf = Vec::new();
            engine::write_metrics_csv(&rows, &mut buf).map_err(|e| io_err(&path, e))?;
            fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
            Err(Failure::Run(format!(
                "run diverged at t={t}; partial metrics in {}",
                path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.common, None)?;
    let r = execute(cfg, &args.common.out)?;
    let d = &r.derived;
    println!("final loss        {:.6e}", r.final_loss);
    if let Some(f) = d.f_star {
        println!("suboptimality     {:.6e}", r.final_loss - f);
    }
    if let Some(w) = r.weighted_avg_loss {
        println!("weighted avg loss {w:.6e}");
    }
    println!("consensus (Xi)    {:.6e}", r.final_consensus);
    println!(
        "bits              {} ({:.3} s at {} bps)",
        r.total_bits,
        engine::bits_to_seconds(r.total_bits, r.config.link_rate_bps)?,
        r.config.link_rate_bps
    );
    println!("messages/triggers {}/{}", r.total_messages, r.total_triggers);
    let omega = d.omega.map_or("-".to_string(), |w| format!("{w:.4e}"));
    println!(
        "delta={:.5} lambda={:.5} omega={omega} gamma={:.4e} p={:.4e} eta0={:.4e}",
        d.delta, d.lambda, d.gamma, d.p, d.eta0
    );
    if let Some(a) = d.a {
        println!("a={a:.4e}");
    }
    println!("wrote {}", args.common.out.display());
    Ok(())
}

fn cmd_verify(suite: &str) -> Result<(), Failure> {
    let suite: Suite = suite.parse().map_err(Failure::Usage)?;
    let checks = verify::run(suite);
    for c in &checks {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        println!("{status}  {:<11} {}", c.suite.to_string(), c.name);
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    println!("{} checks, {} failed", checks.len(), failed.len());
    match failed.first() {
        Some(c) => Err(Failure::Run(format!(
            "{}: {}",
            c.name,
            c.failure.as_deref().unwrap_or("")
        ))),
        None => Ok(()),
    }
}

const SWEEP_HEADER: [&str; 10] = [
    "axis",
    "value",
    "final_loss",
    "final_suboptimality",
    "final_consensus",
    "weighted_avg_loss",
    "total_bits",
    "total_messages",
    "total_triggers",
    "seconds_at_link_rate",
];

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let key = match args.axis.as_str() {
        "T" | "n" | "H" => args.axis.as_str(),
        "k" => "compressor.k",
        other => {
            return Err(Failure::Usage(format!("unknown axis `{other}` (expected T, n, H or k)")))
        }
    };
    let values: Vec<&str> = args.values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Failure::Usage("--values needs at least one value".into()));
    }
    // Validate every point before running any.
    let configs = values
        .iter()
        .map(|v| {
            let cfg = load_config(&args.common, Some((key, v)))?;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let out = &args.common.out;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::Run(e.to_string()))?;
    w.write_record(SWEEP_HEADER).map_err(|e| Failure::Run(e.to_string()))?;
    for (v, cfg) in values.iter().zip(configs) {
        let dir = out.join(format!("{}={v}", args.axis));
        let r = execute(cfg, &dir)?;
        let s = r.summary();
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            args.axis.clone(),
            v.to_string(),
            s.final_loss.to_string(),
            opt(s.final_suboptimality),
            s.final_consensus.to_string(),
            opt(s.weighted_avg_loss),
            s.total_bits.to_string(),
            s.total_messages.to_string(),
            s.total_triggers.to_string(),
            s.seconds_at_link_rate.to_string(),
        ])
        .map_err(|e| Failure::Run(e.to_string()))?;
        println!("{}={v}: loss {:.6e}, bits {}", args.axis, s.final_loss, s.total_bits);
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    drop(w);

    // Read the aggregate back so a malformed file fails loudly here.
    let mut rd = csv::Reader::from_path(&path).map_err(|e| Failure::Run(e.to_string()))?;
    let rows = rd.records().collect::<Result<Vec<_>, _>>().map_err(|e| Failure::Run(e.to_string()))?;
    if rows.len() != values.len() || rows.iter().any(|r| r.len() != SWEEP_HEADER.len()) {
        return Err(Failure::Run(format!("{} failed read-back", path.display())));
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_presets(action: &str) -> Result<(), Failure> {
    if action != "list" {
        return Err(Failure::Usage(format!("unknown presets action `{action}`")));
    }
    for name in presets::NAMES {
        println!("{name:<10} {}", presets::describe(name).unwrap_or(""));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Verify { suite } => cmd_verify(suite),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Presets { action } => cmd_presets(action),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
