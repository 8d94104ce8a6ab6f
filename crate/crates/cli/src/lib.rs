//! Command-line front end for pace-prediction pretraining and evaluation.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::CliError;
pub use config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "pacepred", version, about = "Self-supervised video representations by pace prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// `key = value` config file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// none, same_context or same_pace.
    #[arg(long, global = true)]
    pub contrastive: Option<String>,

    /// Retrieval queries use every clip instead of the pooled video feature.
    #[arg(long, global = true)]
    pub per_clip: bool,

    /// Corpus directory written by `gen-corpus`; generated in memory if absent.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,

    /// Pretrained checkpoint; random initialization if absent.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,

    /// Any config key, as `key=value`; may repeat.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus into --out.
    GenCorpus,
    /// Train the pace-prediction network, writing metrics and checkpoints to --out.
    Pretrain,
    /// Compare analytic and numeric gradients of the training objective.
    Gradcheck,
    /// Shape classification on top of pretrained conv blocks.
    Probe,
    /// Nearest-neighbour clip retrieval.
    Retrieve,
    /// Spatio-temporal attention maps for one video.
    Attention,
}

impl Cli {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        let mut set = |key: &str, value: String| cfg.set(key, &value);
        if let Some(s) = self.seed {
            set("run.seed", s.to_string())?;
        }
        if let Some(w) = self.workers {
            set("run.workers", w.to_string())?;
        }
        if let Some(c) = &self.contrastive {
            set("train.contrastive", c.clone())?;
        }
        if self.per_clip {
            set("eval.per_clip", "true".into())?;
        }
        if let Some(d) = &self.corpus {
            set("corpus.dir", d.display().to_string())?;
        }
        if let Some(p) = &self.checkpoint {
            set("eval.checkpoint", p.display().to_string())?;
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
