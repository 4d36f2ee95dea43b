//! The `gidnet` command line: synthetic data generation, training,
//! evaluation, false-positive diagnosis and inference with attention export.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

pub use config::RunConfig;

/// Exit status for success, bad input or configuration, and failures while
/// running.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o error on {}: {e}", path.display()))
    }
}

impl From<gidnet_core::Error> for CliError {
    fn from(e: gidnet_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gidnet", version, about = "Human-object interaction detection with global/instance dependency reasoning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train and test sets to the output directory.
    SynthGen(Common),
    /// Train on a dataset and write a checkpoint and a loss log.
    Train(Common),
    /// Score a checkpoint on a dataset and write the role mAP report.
    Eval(Common),
    /// Classify the false positives of a prediction file.
    Diagnose(DiagnoseArgs),
    /// Emit scored triplets for every image, optionally with attention maps.
    Infer(InferArgs),
}

/// Settings shared by every command. Flags override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Flat `key = value` file with JSON scalar values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// both, global_only, instance_only or off.
    #[arg(long)]
    pub gid_mode: Option<String>,
    /// concat, add or multiply.
    #[arg(long)]
    pub fusion_mode: Option<String>,
    /// Comma-separated subset of human, object, interaction.
    #[arg(long)]
    pub branches: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: Common,
    /// Prediction file as written by `eval` or `infer`, or a bare array.
    #[arg(long)]
    pub predictions: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory for PGM attention maps and their raw-weight sidecars.
    #[arg(long)]
    pub export_attention: Option<PathBuf>,
}

impl Common {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = RunConfig::default();
        if let Some(p) = &self.config {
            c.apply_file(p)?;
        }
        let path = |p: &PathBuf| Value::from(p.to_string_lossy().into_owned());
        let flags: [(&str, &str, Option<Value>); 9] = [
            ("seed", "--seed", self.seed.map(Value::from)),
            ("out", "--out", self.out.as_ref().map(path)),
            ("checkpoint", "--checkpoint", self.checkpoint.as_ref().map(path)),
            ("dataset", "--dataset", self.dataset.as_ref().map(path)),
            ("gid_mode", "--gid-mode", self.gid_mode.clone().map(Value::from)),
            ("fusion_mode", "--fusion-mode", self.fusion_mode.clone().map(Value::from)),
            ("branches", "--branches", self.branches.clone().map(Value::from)),
            ("iterations", "--iterations", self.iterations.map(Value::from)),
            ("threshold", "--threshold", self.threshold.map(Value::from)),
        ];
        for (key, flag, v) in flags {
            if let Some(v) = v {
                c.set(key, &v).map_err(|m| CliError::Validation(format!("configuration error: {flag}: {m}")))?;
            }
        }
        Ok(c)
    }
}

/// Parse `args` (program name first), run the command and return the exit
/// status. The summary goes to `stdout`, errors to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    EXIT_VALIDATION
                }
            };
        }
    };
    match commands::dispatch(&cli.command) {
        Ok(summary) => {
            let _ = writeln!(stdout, "{summary}");
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
