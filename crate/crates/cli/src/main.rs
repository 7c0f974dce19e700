use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::{info, LevelFilter};

use feedopt::scenario::{self, Scenario};
use feedopt::{ConfigError, Error, ExperimentConfig};

/// Exit status for unreadable or invalid configs.
const EXIT_CONFIG: u8 = 2;
/// Exit status when a certificate's conditions do not hold.
const EXIT_UNCERTIFIED: u8 = 3;

#[derive(Parser)]
#[command(name = "feedopt", version, about = "Online primal-dual feedback controllers for LTI plants and ramp metering")]
struct Cli {
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true, env = "FEEDOPT_OUT_DIR")]
    out: Option<PathBuf>,

    /// Only print errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate each config and write trajectory.csv, report.toml and certificate.toml.
    Run {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
    /// Print the gain certificate for a config.
    Certify { config: PathBuf },
    /// Run configs that share a horizon and plant, and tabulate their metrics.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

fn output_root(cli_out: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    cli_out.map(Path::to_path_buf).or_else(|| config.resolved_output_dir()).unwrap_or_else(|| PathBuf::from("results"))
}

fn run(cli: &Cli, paths: &[PathBuf]) -> Result<()> {
    for path in paths {
        let config = load(path)?;
        let outcome = scenario::run(&config).with_context(|| format!("running {}", path.display()))?;
        let dir = output_root(cli.out.as_deref(), &config).join(&config.name);
        let written = outcome.write_artifacts(&dir).with_context(|| format!("writing {}", dir.display()))?;
        info!("{}: wrote {} files to {}", config.name, written.len(), dir.display());
        if !cli.quiet {
            let t = &outcome.tracking;
            println!(
                "{}: {} samples, final error {:.3e}, envelope violations {}, wall time {:.2}s -> {}",
                config.name,
                outcome.log.len(),
                t.final_error,
                t.violations,
                outcome.metrics.wall_time,
                dir.display()
            );
            if let Some(note) = &outcome.certificate_note {
                println!("  note: {note}");
            }
        }
    }
    Ok(())
}

fn certify(cli: &Cli, path: &Path) -> Result<bool> {
    let config = load(path)?;
    let cert = Scenario::build(&config)?.certify()?;
    if !cli.quiet {
        println!("{cert}");
    }
    Ok(cert.pass())
}

fn compare(cli: &Cli, paths: &[PathBuf]) -> Result<()> {
    let configs = paths.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let (table, outcomes) = scenario::compare(&configs)?;
    let root = output_root(cli.out.as_deref(), &configs[0]);
    for o in &outcomes {
        let dir = root.join(&o.name);
        o.write_artifacts(&dir).with_context(|| format!("writing {}", dir.display()))?;
    }
    std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let csv = root.join("comparison.csv");
    std::fs::write(&csv, table.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    if !cli.quiet {
        print!("{table}");
        println!("-> {}", csv.display());
    }
    Ok(())
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some() || matches!(c.downcast_ref::<Error>(), Some(Error::Config(_)))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { LevelFilter::Error } else { LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    let result = match &cli.command {
        Command::Run { configs } => run(&cli, configs).map(|_| true),
        Command::Certify { config } => certify(&cli, config),
        Command::Compare { configs } => compare(&cli, configs).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: certificate conditions do not hold");
            ExitCode::from(EXIT_UNCERTIFIED)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { 1 })
        }
    }
}
