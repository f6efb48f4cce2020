use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tunnelmag::pipeline::{run, PipelineConfig, Stage};
use tunnelmag::Error;

/// Phase-based motion magnification and optical-flow convergence
/// measurement for tunnel image sequences.
#[derive(Parser, Debug)]
#[command(name = "tunnelmag", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Pipeline config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides `output.dir` from the config.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest, magnify, flow and analyze in one go.
    Full(Common),
    /// Load, downsample and illumination-correct the input frames.
    Ingest(Common),
    /// Magnify and Wiener-smooth previously ingested frames.
    Magnify(Common),
    /// Compute flow on previously magnified frames.
    Flow(Common),
    /// Turn flow dumps into convergence and deformation-map outputs.
    Analyze(Common),
    /// Render the config's `[synth]` scene next to `input.manifest_path`.
    Synth(Common),
}

impl Command {
    fn split(self) -> (Stage, Common) {
        match self {
            Command::Full(c) => (Stage::Full, c),
            Command::Ingest(c) => (Stage::Ingest, c),
            Command::Magnify(c) => (Stage::Magnify, c),
            Command::Flow(c) => (Stage::Flow, c),
            Command::Analyze(c) => (Stage::Analyze, c),
            Command::Synth(c) => (Stage::Synth, c),
        }
    }
}

fn execute(stage: Stage, common: &Common) -> Result<(), Error> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::config("--threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("--threads", e.to_string()))?;
    }
    let cfg = PipelineConfig::from_file(&common.config)?;
    let (report, _) = run(stage, &cfg, common.output.as_deref())?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let total: f64 = report.timings.iter().map(|t| t.seconds).sum();
    println!(
        "{stage}: ok in {total:.1} s, {} outputs, {} warnings",
        report.outputs.len(),
        report.warnings.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TUNNELMAG_LOG", "warn")).init();
    let cli = Cli::parse();
    let (stage, common) = cli.command.split();
    match execute(stage, &common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
