//! `mergecal` — build, merge, calibrate and diagnose small multi-task
//! models with deterministic, seeded runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mergecal_cli::config::{MergeMethod, PipelineConfig};
use mergecal_cli::pipeline::{self, resolve_config, RunPaths};
use mergecal_cli::report::{metrics_csv, write_text};
use mergecal_core::calib::ModuleFilter;
use mergecal_core::CoreError;

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  command-line usage error
  3  invalid configuration, spec or artifact contract
  4  i/o or serialization failure
  5  numerical failure (shape mismatch, divergence, non-finite values)";

#[derive(Parser)]
#[command(
    name = "mergecal",
    about = "Merge task experts in weight space, measure feature drift, and repair it with closed-form forward-order calibration",
    after_help = EXIT_HELP,
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run directory holding all artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Optional config file (JSON); missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct CalibArgs {
    /// Ridge strength toward the anchor.
    #[arg(long)]
    lambda: Option<f64>,
    /// Anchor blend rho*merged + (1-rho)*base.
    #[arg(long)]
    rho: Option<f64>,
    /// Target interpolation alpha*expert + (1-alpha)*current, in [0,1].
    #[arg(long)]
    alpha: Option<f64>,
    /// Numerical stabilizer (> 0).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Per-task calibration sample budget.
    #[arg(long)]
    n: Option<usize>,
    /// Calibrate linear-module biases.
    #[arg(long, value_parser = parse_on_off)]
    bias: Option<bool>,
    /// Calibrate LayerNorm affine parameters.
    #[arg(long, value_parser = parse_on_off)]
    layernorm: Option<bool>,
    /// Module-path glob(s), comma separated; `*` matches any run.
    #[arg(long)]
    modules: Option<String>,
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected `on` or `off`, got `{other}`")),
    }
}

impl CalibArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(v) = self.lambda {
            cfg.calib.lambda = v;
        }
        if let Some(v) = self.rho {
            cfg.calib.rho = v;
        }
        if let Some(v) = self.alpha {
            cfg.calib.alpha = v;
        }
        if let Some(v) = self.epsilon {
            cfg.calib.epsilon = v;
        }
        if let Some(v) = self.n {
            cfg.calib.samples_per_task = v;
        }
        if let Some(v) = self.bias {
            cfg.calib.calibrate_bias = v;
        }
        if let Some(v) = self.layernorm {
            cfg.calib.calibrate_layernorm = v;
        }
        if let Some(v) = &self.modules {
            cfg.calib.module_filter = ModuleFilter::new(v.clone());
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-task datasets.
    GenTasks {
        #[command(flatten)]
        common: CommonArgs,
        /// Seed for the whole suite (mandatory; runs never use wall-clock
        /// seeds).
        #[arg(long)]
        seed: u64,
    },
    /// Pretrain the shared base and fine-tune one expert per task.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Training seed; must match the suite seed used by gen-tasks.
        #[arg(long)]
        seed: u64,
    },
    /// Merge the experts in weight space.
    Merge {
        #[command(flatten)]
        common: CommonArgs,
        /// average | task-arithmetic
        #[arg(long, value_enum)]
        method: Option<CliMergeMethod>,
        /// Task-vector scale for task arithmetic.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Calibrate the merged model against the experts.
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        calib: CalibArgs,
    },
    /// Emit per-sample drift CSVs and the JSON summary.
    DriftReport {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate all models on the test splits.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run every stage in order and write metrics.csv plus the manifest.
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum)]
        method: Option<CliMergeMethod>,
        #[arg(long)]
        scale: Option<f64>,
        #[command(flatten)]
        calib: CalibArgs,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliMergeMethod {
    Average,
    TaskArithmetic,
}

impl From<CliMergeMethod> for MergeMethod {
    fn from(m: CliMergeMethod) -> Self {
        match m {
            CliMergeMethod::Average => MergeMethod::Average,
            CliMergeMethod::TaskArithmetic => MergeMethod::TaskArithmetic,
        }
    }
}

fn load_cli_config(common: &CommonArgs) -> Result<Option<PipelineConfig>, CoreError> {
    match &common.config {
        Some(path) => Ok(Some(PipelineConfig::load(path)?)),
        None => Ok(None),
    }
}

fn run() -> Result<(), CoreError> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenTasks { common, seed } => {
            let paths = RunPaths::new(&common.out);
            let mut cfg = load_cli_config(&common)?.unwrap_or_default();
            cfg.suite.seed = seed;
            pipeline::gen_tasks(&paths, &cfg)
        }
        Command::Train { common, seed } => {
            let paths = RunPaths::new(&common.out);
            let cfg = resolve_config(&paths, load_cli_config(&common)?)?;
            if cfg.suite.seed != seed {
                return Err(CoreError::InvalidConfig(format!(
                    "--seed {seed} does not match the run's seed {}",
                    cfg.suite.seed
                )));
            }
            pipeline::train(&paths, &cfg)
        }
        Command::Merge {
            common,
            method,
            scale,
        } => {
            let paths = RunPaths::new(&common.out);
            let mut cfg = resolve_config(&paths, load_cli_config(&common)?)?;
            if let Some(m) = method {
                cfg.merge.method = m.into();
            }
            if let Some(s) = scale {
                cfg.merge.scale = s;
            }
            cfg.save(&paths.config())?;
            pipeline::merge(&paths, &cfg)
        }
        Command::Calibrate { common, calib } => {
            let paths = RunPaths::new(&common.out);
            let mut cfg = resolve_config(&paths, load_cli_config(&common)?)?;
            calib.apply(&mut cfg);
            cfg.validate()?;
            cfg.save(&paths.config())?;
            pipeline::calibrate_stage(&paths, &cfg)
        }
        Command::DriftReport { common } => {
            let paths = RunPaths::new(&common.out);
            let cfg = resolve_config(&paths, load_cli_config(&common)?)?;
            let rows = pipeline::drift_report(&paths, &cfg)?;
            write_text(&paths.root.join("drift_metrics.csv"), &metrics_csv(&rows))
        }
        Command::Eval { common } => {
            let paths = RunPaths::new(&common.out);
            let cfg = resolve_config(&paths, load_cli_config(&common)?)?;
            let rows = pipeline::eval_stage(&paths, &cfg)?;
            write_text(&paths.root.join("eval_metrics.csv"), &metrics_csv(&rows))
        }
        Command::Pipeline {
            common,
            seed,
            method,
            scale,
            calib,
        } => {
            let paths = RunPaths::new(&common.out);
            let mut cfg = load_cli_config(&common)?.unwrap_or_default();
            cfg.suite.seed = seed;
            if let Some(m) = method {
                cfg.merge.method = m.into();
            }
            if let Some(s) = scale {
                cfg.merge.scale = s;
            }
            calib.apply(&mut cfg);
            cfg.validate()?;
            pipeline::run_pipeline(&paths, &cfg)
        }
    }
}

/// Maps the innermost error kind to a documented exit code.
fn exit_code(err: &CoreError) -> u8 {
    match err {
        CoreError::Module { source, .. } => exit_code(source),
        CoreError::InvalidConfig(_)
        | CoreError::InvalidSpec { .. }
        | CoreError::BadEntry { .. }
        | CoreError::MissingEntry { .. } => 3,
        CoreError::Io(_) | CoreError::Json(_) => 4,
        CoreError::ShapeMismatch { .. }
        | CoreError::NonFinite { .. }
        | CoreError::Diverged(_)
        | CoreError::Numerical(_) => 5,
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
