use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use wft_cli::commands::{self, Command, Context, Timings};
use wft_cli::config::{DerivedSeeds, ExperimentConfig, DEFAULT_CONFIG};
use wft_cli::error::CliError;
use wft_cli::report::{Emitter, OutputFormat, Provenance, WrittenFile, SCHEMA_VERSION};

/// Fault-tolerance experiments on direct and Winograd convolution.
#[derive(Debug, Parser)]
#[command(name = "wft", version)]
struct Cli {
    /// TOML config; the built-in default is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Write the model (WFTM) and self-labeled dataset (WFTD).
    Gen {
        /// Synthetic profile: default, small or single_fc.
        #[arg(long)]
        profile: Option<String>,
    },
    /// Accuracy vs ber for both engines.
    Sweep,
    /// Neuron-level vs operation-level injection on both engines.
    CompareFi,
    /// Per-layer vulnerability factors.
    LayerVuln,
    /// MUL-fault-free vs ADD-fault-free accuracy.
    OptypeVuln,
    /// Selective TMR overhead of the three planning modes.
    Tmr,
    /// Minimum safe voltage and energy per loss budget.
    Energy,
}

#[derive(Serialize)]
struct Manifest<'a> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    command: &'static str,
    derived_seeds: DerivedSeeds,
    analysis_ber: Option<f64>,
    versions: Versions,
    workers: usize,
    files: &'a [WrittenFile],
    timings_s: Vec<(String, f64)>,
    total_s: f64,
}

#[derive(Serialize)]
struct Versions {
    wft_cli: &'static str,
    wft_core: &'static str,
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let start = Instant::now();
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::parse(DEFAULT_CONFIG)?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    let cmd = match &cli.command {
        Sub::Gen { profile } => {
            if let Some(p) = profile {
                cfg.model.profile = p.clone();
                cfg.model.path = None;
            }
            Command::Gen
        }
        Sub::Sweep => Command::Sweep,
        Sub::CompareFi => Command::CompareFi,
        Sub::LayerVuln => Command::LayerVuln,
        Sub::OptypeVuln => Command::OptypeVuln,
        Sub::Tmr => Command::Tmr,
        Sub::Energy => Command::Energy,
    };
    cfg.validate()?;
    // The output directory is where results go, not what they are.
    let hash = {
        let mut h = cfg.clone();
        h.out = PathBuf::new();
        h.hash()
    };
    let provenance = Provenance {
        schema_version: SCHEMA_VERSION,
        config_sha256: hash,
        seed: cfg.seed,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| CliError::Usage(format!("--workers: {e}")))?;
    let mut ctx = Context {
        cfg: &cfg,
        seeds: cfg.seeds(),
        emitter: Emitter::new(&cfg.out, cli.format, provenance.clone())?,
        timings: Timings::default(),
        analysis_ber: None,
    };
    pool.install(|| commands::run(cmd, &mut ctx))?;
    let manifest = Manifest {
        provenance: &provenance,
        command: cmd.name(),
        derived_seeds: ctx.seeds,
        analysis_ber: ctx.analysis_ber,
        versions: Versions {
            wft_cli: env!("CARGO_PKG_VERSION"),
            wft_core: wft_core::VERSION,
        },
        workers: pool.current_num_threads(),
        files: ctx.emitter.written(),
        timings_s: ctx.timings.phases,
        total_s: start.elapsed().as_secs_f64(),
    };
    let path = cfg.out.join(format!("{}.manifest.json", cmd.name()));
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
    bytes.push(b'\n');
    std::fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
