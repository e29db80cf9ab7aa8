use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gmsfem::error::GmsError;
use gmsfem::fields::{parse_field, preset_field, save_field, FieldPreset};
use gmsfem::harness::{load_config, run_experiment, workers_from_env, ConfigError};
use gmsfem::mesh::{build_grid, GridSpec};

#[derive(Parser)]
#[command(name = "gmsfem", version, about = "Adaptive mixed GMsFEM experiments for Darcy flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every job of an experiment config and write its CSV reports.
    Run {
        config: PathBuf,
        /// Worker threads; overrides GMSFEM_WORKERS.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Check a config without solving anything.
    Validate {
        config: PathBuf,
        /// Print the resolved parameters and job list.
        #[arg(long)]
        dry_run: bool,
    },
    /// Generate or inspect permeability rasters.
    #[command(subcommand)]
    Field(FieldCommand),
}

#[derive(Subcommand)]
enum FieldCommand {
    /// Write a bundled field family as a raster.
    Gen(GenArgs),
    /// Print size and value statistics of a raster.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    ncx: usize,
    #[arg(long)]
    ncy: usize,
    #[arg(long)]
    nf: usize,
    #[arg(long, value_parser = parse_preset, default_value = "inclusions")]
    preset: FieldPreset,
    #[arg(long, default_value_t = 1e4)]
    contrast: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

fn parse_preset(s: &str) -> Result<FieldPreset, String> {
    match s {
        "inclusions" => Ok(FieldPreset::Inclusions),
        "channels" => Ok(FieldPreset::Channels),
        _ => Err(format!("unknown preset {s:?}, expected inclusions or channels")),
    }
}

enum Failure {
    Config(Vec<ConfigError>),
    Runtime(GmsError),
}

impl From<GmsError> for Failure {
    fn from(e: GmsError) -> Self {
        match e {
            GmsError::Config(m) => Failure::Config(vec![ConfigError { line: None, message: m }]),
            other => Failure::Runtime(other),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(errors)) => {
            for e in errors {
                eprintln!("config error: {e}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, workers } => {
            let cfg = load_config(&config).map_err(Failure::Config)?;
            let workers = match workers {
                Some(0) => return Err(GmsError::Config("--workers must be positive".into()).into()),
                Some(n) => Some(n),
                None => workers_from_env()?,
            };
            let summary = run_experiment(&cfg, workers)?;
            for job in &summary.jobs {
                let last = job.rows.last();
                println!(
                    "{}: {} levels, final dof {} e {:.3e}",
                    job.path.display(),
                    job.rows.len(),
                    last.map_or(0, |r| r.dof),
                    last.map_or(f64::NAN, |r| r.e)
                );
            }
            println!("{}", summary.plot_path.display());
            Ok(())
        }
        Command::Validate { config, dry_run } => {
            let cfg = load_config(&config).map_err(Failure::Config)?;
            if dry_run {
                print!("{}", cfg.describe());
            }
            println!("{}: ok ({} jobs)", config.display(), cfg.jobs().len());
            Ok(())
        }
        Command::Field(FieldCommand::Gen(a)) => {
            let grid = build_grid(GridSpec::new(a.ncx, a.ncy, a.nf))?;
            let field = preset_field(&grid, a.preset, a.contrast, a.seed)?;
            save_field(&field, &a.out)?;
            println!("{}: {}x{} cells", a.out.display(), grid.nx, grid.ny);
            Ok(())
        }
        Command::Field(FieldCommand::Inspect { path }) => {
            let field = parse_field(&std::fs::read_to_string(&path).map_err(GmsError::from)?)?;
            let (nx, ny) = field.dims();
            let background = field.values()[0];
            let other = field.values().iter().filter(|&&v| v != background).count();
            println!("{}: {nx}x{ny} cells", path.display());
            println!("min {:e} max {:e} ratio {:e}", field.min(), field.max(), field.max() / field.min());
            println!("{other} cells differ from the first cell value {background:e}");
            Ok(())
        }
    }
}
