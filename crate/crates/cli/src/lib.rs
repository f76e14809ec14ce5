//! Command-line driver: registration, sweeps, bound checks, classification and filter
//! schedules, each written as a CSV table.
//!
//! Every table starts with a `# tanreg <command> config_sha256=<hash> seed=<seed>` line, so
//! a result file identifies the configuration that produced it.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tanreg::{ModelKind, Table, TransformModel};

pub use commands::{BoundCheck, SweepAxis};
pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<tanreg::Error> for CliError {
    fn from(e: tanreg::Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tanreg", version, about = "Tangent-distance registration experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand; flags override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON or TOML experiment config.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; all cores when omitted.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Standard model of this kind: translation2d, trans_rot3d or trans_rot_scale4d.
    #[arg(long, value_parser = parse_kind)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Noise levels relative to the reference norm, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub nus: Option<Vec<f64>>,
    /// Filter sizes, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub rhos: Option<Vec<f64>>,
    #[arg(long)]
    pub pattern_seed: Option<u64>,
    /// Reference pattern as JSON.
    #[arg(long)]
    pub pattern_file: Option<PathBuf>,
    /// Find the optimal parameters by brute-force projection.
    #[arg(long)]
    pub brute_force_oracle: bool,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Hierarchical registration of one target; one row per iteration.
    Register {
        #[command(flatten)]
        common: Common,
    },
    /// Smoothed one-step alignment error and its bound over filter sizes or noise levels.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "rho")]
        axis: SweepAxis,
    },
    /// Misclassification rate and likeliness per filter size, or bounded-class trials.
    Classify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        repetitions: Option<usize>,
        /// Linearize each class at the query's exact projection.
        #[arg(long)]
        oracle: bool,
        /// Bounded-class trials against the misclassification bound.
        #[arg(long)]
        bounded: bool,
    },
    /// Measured errors against the alignment and convergence bounds.
    Bounds {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "alignment")]
        check: BoundCheck,
    },
    /// Filter sizes of the configured schedule.
    Schedule {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Register { common }
            | Command::Sweep { common, .. }
            | Command::Classify { common, .. }
            | Command::Bounds { common, .. }
            | Command::Schedule { common } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Register { .. } => "register",
            Command::Sweep { .. } => "sweep",
            Command::Classify { .. } => "classify",
            Command::Bounds { .. } => "bounds",
            Command::Schedule { .. } => "schedule",
        }
    }
}

/// Config file, then flag overrides, then validation.
pub fn resolve_config(cmd: &Command) -> Result<ExperimentConfig, CliError> {
    let c = cmd.common();
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(kind) = c.model {
        cfg.model = TransformModel::standard(kind);
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = &c.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = c.trials {
        cfg.trials = v;
    }
    if let Some(v) = &c.nus {
        cfg.nus = v.clone();
    }
    if let Some(v) = &c.rhos {
        cfg.rhos = v.clone();
    }
    if let Some(v) = c.pattern_seed {
        cfg.pattern.seed = Some(v);
        cfg.pattern.file = None;
    }
    if let Some(v) = &c.pattern_file {
        cfg.pattern.file = Some(v.clone());
    }
    cfg.brute_force_oracle |= c.brute_force_oracle;
    if let Command::Classify { repetitions, oracle, .. } = cmd {
        if let Some(r) = repetitions {
            cfg.classify.repetitions = Some(*r);
        }
        cfg.classify.oracle_references |= *oracle;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cmd: &Command, cfg: &ExperimentConfig) -> Result<Table, CliError> {
    let mut table = match cmd {
        Command::Register { .. } => commands::cmd_register(cfg)?,
        Command::Sweep { axis, .. } => commands::cmd_sweep(cfg, *axis)?,
        Command::Classify { bounded, .. } => commands::cmd_classify(cfg, *bounded)?,
        Command::Bounds { check, .. } => commands::cmd_bounds(cfg, *check)?,
        Command::Schedule { .. } => commands::cmd_schedule(cfg)?,
    };
    table.comments.insert(0, format!("tanreg {} config_sha256={} seed={}", cmd.name(), cfg.hash(), cfg.seed));
    Ok(table)
}

/// Runs one command and writes its table; the error carries the exit code.
pub fn run_command(cmd: &Command) -> Result<(), CliError> {
    let cfg = resolve_config(cmd)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cmd.common().threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Config(format!("field `threads`: {e}")))?;
    let table = pool.install(|| execute(cmd, &cfg))?;
    let written = match &cfg.out {
        Some(path) => tanreg::raster::save_csv(&table, path),
        None => table.write_to(std::io::stdout().lock()),
    };
    written.map_err(|e| CliError::Config(format!("field `out`: {e}")))
}

pub fn run(cli: Cli) -> ExitCode {
    match run_command(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tanreg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
