//! `d2l`: the command-line harness. Subcommands run the pipeline stages
//! against a run directory resolved from the config (`out_dir`, else
//! `$D2L_RUN_DIR`, else `./runs`); each prints a JSON summary on success.
//! Exit codes: 0 success, 2 validation/config error, 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use d2l::harness::{
    cmd_cd_baseline, cmd_eval, cmd_gen_data, cmd_meta_train, cmd_pretrain_lm, cmd_report,
    load_config, ExperimentConfig, RunDir,
};

#[derive(Parser)]
#[command(
    name = "d2l",
    version,
    about = "Compile contexts into adapters: train and evaluate a context-to-LoRA hypernetwork over a frozen tiny language model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; keys not present fall back to desk defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted-key override applied after the file (repeatable), e.g.
    /// --set lm.d_model=128 --set eval.lengths=[33,64]
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_set)]
    set: Vec<(String, String)>,
}

fn parse_set(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

impl ConfigArgs {
    fn load(&self) -> d2l::Result<ExperimentConfig> {
        load_config(self.config.as_deref(), &self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the frozen target model on the synthetic corpus.
    PretrainLm(ConfigArgs),
    /// Generate the meta-training dataset and held-out evaluation instances.
    GenData(ConfigArgs),
    /// Meta-train the hypernetwork (LoRA or prefix-KV, per config).
    MetaTrain(ConfigArgs),
    /// Train gradient-descent context-distillation baseline adapters.
    CdBaseline(ConfigArgs),
    /// Evaluate every configured method and write the metrics table.
    Eval(ConfigArgs),
    /// Consolidate metrics from several runs into plotting-ready tables.
    Report {
        /// Run directories (or metrics.csv files) to merge.
        #[arg(required = true, value_name = "RUN")]
        runs: Vec<PathBuf>,
        /// Output directory for the consolidated tables.
        #[arg(long, default_value = "report", value_name = "DIR")]
        out: PathBuf,
    },
}

fn emit(summary: impl serde::Serialize) -> d2l::Result<()> {
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn run(cli: Cli) -> d2l::Result<()> {
    match cli.command {
        Command::PretrainLm(args) => {
            let config = args.load()?;
            let run = RunDir::create(&config)?;
            emit(cmd_pretrain_lm(&config, &run)?)
        }
        Command::GenData(args) => {
            let config = args.load()?;
            let run = RunDir::create(&config)?;
            emit(cmd_gen_data(&config, &run)?)
        }
        Command::MetaTrain(args) => {
            let config = args.load()?;
            let run = RunDir::create(&config)?;
            emit(cmd_meta_train(&config, &run)?)
        }
        Command::CdBaseline(args) => {
            let config = args.load()?;
            let run = RunDir::create(&config)?;
            emit(cmd_cd_baseline(&config, &run)?)
        }
        Command::Eval(args) => {
            let config = args.load()?;
            let run = RunDir::create(&config)?;
            emit(cmd_eval(&config, &run)?)
        }
        Command::Report { runs, out } => emit(cmd_report(&runs, &out)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
