//! `weaksearch` command-line pipeline.

mod artifact;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 1.
    Usage(String),
    /// Failure while running; exit code 2.
    Runtime(String),
}

impl From<weaksearch::Error> for CliError {
    fn from(e: weaksearch::Error) -> Self {
        match e {
            weaksearch::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "weaksearch", version, about = "Weakly supervised detectors and sequential search on synthetic scenes")]
struct Cli {
    /// Worker threads (0 = all cores). Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with one table per subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set restarts=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Dataset file; a `.summary.json` is written beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        images: Option<i64>,
        #[arg(long)]
        classes: Option<i64>,
    },
    /// Train one detector per class with a C grid on validation.
    TrainDetector {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// bb, eye or il.
        #[arg(long)]
        mode: Option<String>,
        /// on or off.
        #[arg(long)]
        constraints: Option<String>,
        /// Comma-separated C values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        restarts: Option<i64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a search policy on top of a detector.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        restarts: Option<i64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a detector, and a policy if given.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        repeats: Option<i64>,
        /// train, val, test or trainval.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Merge eval files into comparison tables.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Text output (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn section(common: &Common, name: &str) -> Result<toml::Table, CliError> {
    let mut table = config::load_section(common.config.as_deref(), name)?;
    config::apply_overrides(&mut table, &common.sets)?;
    Ok(table)
}

fn seed(table: &mut toml::Table, seed: Option<u64>) -> Result<(), CliError> {
    if let Some(s) = seed {
        let v = i64::try_from(s).map_err(|_| CliError::Usage("seed must fit in 63 bits".into()))?;
        table.insert("seed".into(), v.into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    match cli.command {
        Command::GenData {
            common,
            out,
            seed: s,
            images,
            classes,
        } => {
            let mut t = section(&common, "gen-data")?;
            seed(&mut t, s)?;
            config::set(&mut t, "images", images);
            config::set(&mut t, "classes", classes);
            commands::gen_data(t, &out)
        }
        Command::TrainDetector {
            common,
            data,
            out,
            mode,
            constraints,
            grid,
            restarts,
            seed: s,
        } => {
            let mut t = section(&common, "train-detector")?;
            seed(&mut t, s)?;
            config::set(&mut t, "mode", mode);
            if let Some(c) = constraints {
                let on = match c.as_str() {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    other => return Err(CliError::Usage(format!("--constraints expects on|off, got `{other}`"))),
                };
                t.insert("constraints".into(), on.into());
            }
            config::set(&mut t, "c_grid", grid);
            config::set(&mut t, "restarts", restarts);
            commands::train_detector_cmd(t, &data, &out)
        }
        Command::TrainPolicy {
            common,
            data,
            detector,
            out,
            grid,
            restarts,
            seed: s,
        } => {
            let mut t = section(&common, "train-policy")?;
            seed(&mut t, s)?;
            config::set(&mut t, "lambda_grid", grid);
            config::set(&mut t, "restarts", restarts);
            commands::train_policy_cmd(t, &data, &detector, &out)
        }
        Command::Evaluate {
            common,
            data,
            detector,
            policy,
            out,
            repeats,
            split,
            seed: s,
        } => {
            let mut t = section(&common, "evaluate")?;
            seed(&mut t, s)?;
            config::set(&mut t, "repeats", repeats);
            config::set(&mut t, "split", split);
            commands::evaluate_cmd(t, &data, &detector, policy.as_deref(), &out)
        }
        Command::Report { inputs, out, json } => {
            commands::report_cmd(&inputs, out.as_deref(), json.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
