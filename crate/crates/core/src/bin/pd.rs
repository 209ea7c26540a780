use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pd_core::app::{self, output, ConvergeOptions, Overrides, Scheme, SimulationConfig};
use pd_core::{PdError, Result};

#[derive(Parser, Debug)]
#[command(name = "pd", version, about = "Bond-based peridynamics with single- and two-rate Runge-Kutta stepping")]
struct Cli {
    /// Worker threads for the solver (default: all cores).
    #[arg(long, global = true, env = "PD_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Source {
    /// TOML configuration file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario: plate2d, block3d or crack2d.
    #[arg(long)]
    preset: Option<String>,
    /// Use the full-size meshes of a preset scenario.
    #[arg(long)]
    full_scale: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemeArg {
    Upd,
    Mts,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a simulation and write snapshots, the resolved config and a timing report.
    Run {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_enum)]
        scheme: Option<SchemeArg>,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long = "K")]
        substeps: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep step sizes and substep counts against a single-rate reference.
    Converge {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_delimiter = ',', required = true)]
        dt_list: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        k_list: Vec<usize>,
        /// Pair the two lists entry by entry.
        #[arg(long)]
        paired: bool,
        /// Also report coarse-region and fine-region errors.
        #[arg(long)]
        scoped: bool,
        #[arg(long)]
        ref_dt: Option<f64>,
        #[arg(long)]
        order: Option<usize>,
        /// Directory for cached reference states.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Where to write the table (default: convergence.csv in the output directory).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Time a two-rate run against the single-rate run at the fine step.
    Compare {
        #[command(flatten)]
        source: Source,
        #[arg(long = "K", default_value_t = 2)]
        substeps: usize,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Check a configuration without running it.
    Validate {
        #[command(flatten)]
        source: Source,
    },
}

fn load(source: &Source, overrides: &Overrides) -> Result<SimulationConfig> {
    match (&source.config, &source.preset) {
        (Some(path), _) => app::load_config(path, source.full_scale, overrides),
        (None, Some(name)) => app::preset_config(name, source.full_scale, overrides),
        (None, None) => Err(PdError::Invalid("give --config or --preset".into())),
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { source, scheme, order, dt, substeps, steps, out } => {
            let overrides = Overrides {
                scheme: scheme.map(|s| match s {
                    SchemeArg::Upd => Scheme::Upd,
                    SchemeArg::Mts => Scheme::Mts,
                }),
                order,
                dt,
                steps,
                substeps,
                output: out,
            };
            let config = load(&source, &overrides)?;
            let dir = config.output.directory.clone();
            let summary = app::run_to_disk(config)?;
            println!(
                "wrote {} snapshot file(s) to {} (t = {:e} s)",
                summary.snapshots.len(),
                dir.display(),
                summary.final_time
            );
            print!("{}", summary.timing);
        }
        Command::Converge { source, dt_list, k_list, paired, scoped, ref_dt, order, cache, csv } => {
            let config = load(&source, &Overrides::default())?;
            let options = ConvergeOptions {
                dts: dt_list,
                substeps: k_list,
                paired,
                scoped,
                reference_dt: ref_dt,
                order,
                cache,
            };
            let rows = app::converge(&config, &options)?;
            let path = match csv {
                Some(p) => p,
                None => {
                    std::fs::create_dir_all(&config.output.directory)?;
                    config.output.directory.join("convergence.csv")
                }
            };
            app::write_csv(&rows, &path)?;
            print!("{}", output::convergence_csv(&rows));
        }
        Command::Compare { source, substeps, dt, steps } => {
            let overrides = Overrides { dt, steps, ..Default::default() };
            let config = load(&source, &overrides)?;
            let report = app::compare(&config, substeps)?;
            println!("{report}");
        }
        Command::Validate { source } => {
            let config = load(&source, &Overrides::default())?;
            println!("ok: {} ({} steps of {:e} s)", config.scenario.name(), config.time.steps, config.time.dt);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
