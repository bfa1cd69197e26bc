//! `ldpma` command-line driver.
//!
//! ```text
//! ldpma run <experiment> [key=value | --key value ...] [--seed N] [--out DIR] [--json]
//! ldpma run --config run.toml
//! ldpma <experiment> --key value ...
//! ldpma report <dir>... [--out FILE] [--json]
//! ldpma list
//! ```
//!
//! Exit codes: 0 when every check passes, 1 on a tolerance failure or a
//! numerical error, 2 for an unknown experiment or bad arguments.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ldpma::experiments::{self, default_out_dir, RunConfig, RunSummary};
use ldpma::Error;

#[derive(Parser)]
#[command(name = "ldpma", version, about = "Large-deviation and Monge-Ampere verification runs")]
struct Cli {
    /// Print the summary as JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a registered experiment.
    Run {
        /// Experiment name (omit when --config names it), then parameters
        /// as `key=value` or `--key value`.
        #[arg(allow_hyphen_values = true, trailing_var_arg = true)]
        args: Vec<String>,
    },
    /// Merge the result tables of finished runs.
    Report {
        dirs: Vec<PathBuf>,
        /// Write the merged CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List registered experiments and their parameters.
    List,
    #[command(external_subcommand)]
    External(Vec<String>),
}

/// Options shared by every run, split from experiment parameters.
struct RunArgs {
    params: BTreeMap<String, String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    json: bool,
}

fn split_args(args: &[String]) -> Result<RunArgs, String> {
    let mut r = RunArgs { params: BTreeMap::new(), seed: None, out: None, config: None, json: false };
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let (key, value) = if let Some(flag) = a.strip_prefix("--") {
            if flag == "json" {
                r.json = true;
                continue;
            }
            match flag.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| format!("missing value for --{flag}"))?;
                    (flag.to_string(), v.clone())
                }
            }
        } else if let Some((k, v)) = a.split_once('=') {
            (k.to_string(), v.to_string())
        } else {
            return Err(format!("unexpected argument `{a}`; use key=value or --key value"));
        };
        match key.as_str() {
            "seed" => r.seed = Some(value.parse().map_err(|_| format!("seed `{value}` is not a 64-bit integer"))?),
            "out" => r.out = Some(PathBuf::from(value)),
            "config" => r.config = Some(PathBuf::from(value)),
            _ => {
                r.params.insert(key.replace('-', "_"), value);
            }
        }
    }
    Ok(r)
}

fn build_config(experiment: Option<String>, args: RunArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::parse(&std::fs::read_to_string(path)?)?,
        None => {
            let name = experiment.clone().ok_or_else(|| Error::Config("no experiment given".into()))?;
            RunConfig::new(&name, 0, default_out_dir(&name, 0))
        }
    };
    if let Some(name) = experiment {
        if args.config.is_some() && name != cfg.experiment {
            return Err(Error::Config(format!("config names `{}` but `{name}` was requested", cfg.experiment)));
        }
    }
    let explicit_out = args.out.is_some() || args.config.is_some();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    } else if !explicit_out {
        cfg.out_dir = default_out_dir(&cfg.experiment, cfg.seed);
    }
    cfg.params.extend(args.params);
    Ok(cfg)
}

fn print_summary(s: &RunSummary, json: bool) {
    if json {
        let v = serde_json::json!({
            "experiment": s.manifest.experiment,
            "seed": s.manifest.seed,
            "out_dir": s.out_dir,
            "passed": s.manifest.passed,
            "checks": s.manifest.checks,
        });
        println!("{}", serde_json::to_string_pretty(&v).expect("summary serializes"));
        return;
    }
    println!("{} (seed {}) -> {}", s.manifest.experiment, s.manifest.seed, s.out_dir.display());
    for c in &s.manifest.checks {
        println!("  [{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed: Vec<&str> = s.manifest.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", s.manifest.checks.len());
    } else {
        println!("{} failing: {}", failed.len(), failed.join(", "));
    }
}

fn list() {
    for e in experiments::registry() {
        let keys: Vec<String> =
            e.keys.iter().map(|(k, d)| if d.is_empty() { k.to_string() } else { format!("{k}={d}") }).collect();
        println!("{:<20} {}", e.name, keys.join(" "));
    }
    println!("{:<20} dirs=<run dir>,...", "report");
}

fn do_report(dirs: Vec<PathBuf>, out: Option<PathBuf>) -> Result<ExitCode, Error> {
    let table = experiments::report(&dirs)?;
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            table.write_csv(std::fs::File::create(path)?)?
        }
        None => table.write_csv(std::io::stdout().lock())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn do_run(experiment: Option<String>, args: &[String], json: bool) -> Result<ExitCode, Error> {
    let args = split_args(args).map_err(Error::Config)?;
    let json = json || args.json;
    if experiment.as_deref() == Some("report") {
        let dirs = args.params.get("dirs").map(|d| d.split(',').map(PathBuf::from).collect()).unwrap_or_default();
        return do_report(dirs, args.out);
    }
    let cfg = build_config(experiment, args)?;
    let summary = experiments::run(&cfg)?;
    print_summary(&summary, json);
    Ok(ExitCode::from(summary.exit_code() as u8))
}

fn init_threads() {
    if let Some(n) = std::env::var("LDPMA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { mut args } => {
            let named = args.first().is_some_and(|a| !a.starts_with('-') && !a.contains('='));
            let experiment = named.then(|| args.remove(0));
            do_run(experiment, &args, cli.json)
        }
        Command::External(mut argv) => {
            let name = argv.remove(0);
            do_run(Some(name), &argv, cli.json)
        }
        Command::Report { dirs, out } => do_report(dirs, out),
        Command::List => {
            list();
            Ok(ExitCode::SUCCESS)
        }
    };
    match result {
        Ok(code) => code,
        Err(e @ (Error::UnknownExperiment { .. } | Error::Config(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
