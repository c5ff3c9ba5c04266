//! `liouville`: compiles a sectioned key-value config into torus charts,
//! action integrals, conservation averages, and exact normal forms, then
//! writes a deterministic JSON report.
//!
//! Exit status: 0 when every requested check passes, 2 when the report was
//! written but some tolerance or hypothesis failed, 1 on config/IO errors
//! (diagnostics on stderr, no report).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

mod analyses;
mod config;
mod plotdata;

use analyses::{build_charts, BlockResult, Charts};
use config::{apply_tolerance, parse_tol_flag, tolerance_echo, AnalysisConfig};

#[derive(Parser)]
#[command(name = "liouville", version, about = "Liouville torus charts, action integrals, and exact normal forms")]
struct Cli {
    /// Config file (sectioned key-value; grammar in docs/config.md).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Directory for report.json and CSV exports.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Override the normal-form truncation degree.
    #[arg(long, global = true, value_name = "N")]
    maxdeg: Option<usize>,

    /// Override the per-angle averaging grid for actions and conservation.
    #[arg(long, global = true, value_name = "N")]
    grid: Option<usize>,

    /// Worker threads for torus averaging (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Tolerance override, repeatable (keys as in [tolerances]).
    #[arg(long = "tol", global = true, value_name = "KEY=VAL")]
    tol: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every analysis the config requests.
    Analyze,
    /// Torus charts plus action integrals.
    Actions,
    /// Torus-averaged conservation checks.
    Conserve,
    /// Exact normal form of the declared jet.
    Normalize,
    /// Williamson type and toric degree of a quadratic Hamiltonian.
    Classify,
    /// Emit CSV files from an existing report.
    Plotdata {
        /// Block to export: torus, actions, or deviation.
        what: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<bool, String> {
    if let Some(n) = cli.threads {
        // A second build_global in the same process (tests) is harmless:
        // the pool is already sized, so the error is ignored.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    if let Command::Plotdata { what } = &cli.command {
        return plotdata::emit(&cli.out, what).map(|()| true);
    }

    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| "--config PATH is required".to_string())?;
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| format!("{}: {e}", config_path.display()))?;
    let mut cfg = AnalysisConfig::from_text(&text).map_err(|e| e.to_string())?;

    for flag in &cli.tol {
        let (key, val) = parse_tol_flag(flag).map_err(|e| format!("--tol {flag}: {e}"))?;
        apply_tolerance(&mut cfg.tols, &mut cfg.gates, &key, val)
            .map_err(|e| format!("--tol {flag}: {e}"))?;
    }
    if let Some(g) = cli.grid {
        if let Some(c) = cfg.conservation.as_mut() {
            c.grid = g;
        }
        if let Some(a) = cfg.actions.as_mut() {
            a.grid = g;
        }
    }

    let requested: Vec<String> = match &cli.command {
        Command::Analyze => cfg.requested_analyses(),
        Command::Actions => vec!["chart".into(), "actions".into()],
        Command::Conserve => vec!["chart".into(), "conservation".into()],
        Command::Normalize => vec!["normalform".into()],
        Command::Classify => vec!["classify".into()],
        Command::Plotdata { .. } => unreachable!("handled above"),
    };

    let started = Instant::now();
    let mut warnings: Vec<String> = Vec::new();
    let needs_charts = requested
        .iter()
        .any(|b| matches!(b.as_str(), "chart" | "actions" | "conservation"));
    let charts: Option<Result<Charts, String>> =
        needs_charts.then(|| build_charts(&cfg));

    let mut blocks = Map::new();
    let mut pass = true;
    for name in &requested {
        let result: BlockResult = match name.as_str() {
            "chart" | "actions" | "conservation" => match charts.as_ref().unwrap() {
                Err(e) => BlockResult {
                    value: json!({ "error": e, "pass": false }),
                    pass: false,
                },
                Ok(charts) => match name.as_str() {
                    "chart" => analyses::chart_block(&cfg, charts, &mut warnings),
                    "actions" => analyses::actions_block(&cfg, charts, &mut warnings),
                    _ => analyses::conservation_block(&cfg, charts),
                },
            },
            "normalform" => analyses::normalform_block(&cfg, cli.maxdeg, &mut warnings),
            "classify" => analyses::classify_block(&cfg),
            other => return Err(format!("unknown analysis `{other}` in [analyses] run")),
        };
        pass &= result.pass;
        blocks.insert(name.clone(), result.value);
    }

    write_series_files(&cli.out, &mut blocks)?;

    let report = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": requested,
        "config_hash": config_hash(&cfg.canonical),
        "tolerances": tolerance_echo(&cfg.tols, &cfg.gates),
        "blocks": Value::Object(blocks),
        "warnings": warnings,
        "pass": pass,
        "timing": { "elapsed_seconds": started.elapsed().as_secs_f64() },
    });
    let path = write_report_atomic(&cli.out, &report)?;
    eprintln!(
        "report: {} ({})",
        path.display(),
        if pass { "pass" } else { "FAIL" }
    );
    Ok(pass)
}

/// The normalized series doubles as a standalone text artifact (one line
/// per monomial, `k_1 … k_m : coefficient`); a single series goes to
/// `normal_form.series`, vector-field components to `normal_form_<j>.series`.
fn write_series_files(out_dir: &Path, blocks: &mut Map<String, Value>) -> Result<(), String> {
    let Some(block) = blocks.get_mut("normalform") else {
        return Ok(());
    };
    let Some(result) = block.get("result").and_then(Value::as_array) else {
        return Ok(());
    };
    let texts: Vec<String> = result
        .iter()
        .filter_map(Value::as_str)
        .map(str::to_string)
        .collect();
    std::fs::create_dir_all(out_dir)
        .map_err(|e| format!("{}: {e}", out_dir.display()))?;
    let mut files = Vec::new();
    for (j, text) in texts.iter().enumerate() {
        let name = if texts.len() == 1 {
            "normal_form.series".to_string()
        } else {
            format!("normal_form_{j}.series")
        };
        let path = out_dir.join(&name);
        std::fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?;
        files.push(Value::String(name));
    }
    block
        .as_object_mut()
        .expect("normalform block is an object")
        .insert("series_files".into(), Value::Array(files));
    Ok(())
}

fn config_hash(canonical: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write-then-rename so a crash never leaves a truncated report behind.
fn write_report_atomic(out_dir: &Path, report: &Value) -> Result<PathBuf, String> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| format!("{}: {e}", out_dir.display()))?;
    let tmp = out_dir.join(".report.json.tmp");
    let path = out_dir.join("report.json");
    let text = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    std::fs::write(&tmp, text).map_err(|e| format!("{}: {e}", tmp.display()))?;
    std::fs::rename(&tmp, &path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(path)
}
