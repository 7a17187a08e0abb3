//! `crackseg`: train, infer, evaluate, compute class weights and compare
//! against externally produced masks.
//!
//! Exit codes: 0 ok, 2 configuration, 3 ingestion, 4 training, 5 checkpoint.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::manifest::SelectRule;
use crackseg::losses::WeightScheme;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: 2, message: msg.into() }
    }

    pub fn ingestion(msg: impl Into<String>) -> Self {
        Self { code: 3, message: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<crackseg::Error> for CliError {
    fn from(e: crackseg::Error) -> Self {
        Self {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "crackseg", version, about = "U-Net crack and delamination segmentation")]
#[command(after_help = "Exit codes: 0 ok, 2 configuration error, 3 ingestion error, 4 training error, 5 checkpoint error.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a JSON configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out` in the config file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `train.workers`; 1 is the single-worker mode.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Predict class-index masks for every image in a directory.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-class softmax maps as `<stem>.prob.<class>.pfm`.
        #[arg(long)]
        prob_maps: bool,
        /// Also write the neighbourhood crack-probability map with radius N.
        #[arg(long, value_name = "N")]
        crackmap_n: Option<usize>,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Pooled ROC curve as CSV `threshold,fpr,tpr`.
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Per-class pixel counts, frequencies and loss weights of a mask set.
    Weights {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, default_value = "median", value_parser = parse_scheme)]
        scheme: WeightScheme,
        /// Write the JSON here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare engine predictions and external masks against ground truth.
    Compare {
        #[arg(long)]
        engine_pred: PathBuf,
        #[arg(long)]
        external: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// How multiple external masks per image become one crack map.
        #[arg(long, default_value = "highest-score", value_parser = parse_select)]
        select: SelectRule,
    },
}

fn parse_scheme(s: &str) -> Result<WeightScheme, String> {
    s.parse()
}

fn parse_select(s: &str) -> Result<SelectRule, String> {
    s.parse()
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train {
            config,
            out,
            resume,
            seed,
            workers,
        } => commands::train(&config, out, resume, seed, workers),
        Command::Infer {
            model,
            input,
            out,
            prob_maps,
            crackmap_n,
        } => commands::infer(&model, &input, &out, prob_maps, crackmap_n),
        Command::Eval {
            pred,
            truth,
            report,
            roc,
        } => commands::eval(&pred, &truth, &report, roc.as_deref()),
        Command::Weights { masks, scheme, out } => commands::weights(&masks, scheme, out.as_deref()),
        Command::Compare {
            engine_pred,
            external,
            truth,
            report,
            select,
        } => commands::compare(&engine_pred, &external, &truth, &report, select),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cmd = Cli::command().mut_subcommand("train", |c| {
        c.after_help(format!(
            "Configuration file (JSON, unknown keys rejected). Defaults:\n{}",
            config::documented_defaults()
        ))
    });
    let matches = cmd.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
