use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use slice_verify_core::agent::AgentMode;
use slice_verify_core::datagen::{generate, load_csv, save_csv};
use slice_verify_core::domain::SliceId;
use slice_verify_core::experiment::{
    evaluate_model, render_report, run_experiment, ExperimentConfig, ExperimentError, ModelSwap, ReportBundle,
    ReportFormat, RunMode,
};
use slice_verify_core::ran_sim::DriftSpec;
use slice_verify_core::tree::{load_model, save_model};
use slice_verify_core::verifier::{train_verifier_split, VerifierModel};

#[derive(Debug, Parser)]
#[command(name = "slice-verify", version, about = "Slice-aware verification of RAN slicing decisions")]
struct Cli {
    /// JSON experiment config; unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Agent orientation.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Text)]
    format: FormatArg,
    /// Writes one NDJSON verdict per line.
    #[arg(long, global = true)]
    verdict_log: Option<PathBuf>,
    /// `inproc` or `tcp://HOST:PORT`.
    #[arg(long, global = true)]
    bus: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Embb,
    Urllc,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Markdown,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SliceArg {
    Embb,
    Mmtc,
    Urllc,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic KPI dataset into OUT/dataset.csv.
    GenData {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train a verifier; writes OUT/model.json and OUT/holdout.csv.
    Train {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Score a saved model on a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run the experiment described by the config (closed loop by default).
    Run,
    /// Closed-loop run with an injected scenario.
    Inject {
        #[command(subcommand)]
        scenario: Scenario,
    },
    /// Re-render a saved report.json.
    Report { path: PathBuf },
    /// Print the config document.
    Config {
        #[arg(long)]
        print_defaults: bool,
    },
}

#[derive(Debug, Subcommand)]
enum Scenario {
    /// Scale one traffic parameter of a slice from a given window on.
    Drift {
        #[arg(long, value_enum)]
        slice: SliceArg,
        #[arg(long, default_value = "mean_arrival_kbps")]
        parameter: String,
        #[arg(long)]
        multiplier: f64,
        #[arg(long)]
        start: u64,
    },
    /// Swap in a label-permuted verifier model at a given window.
    Conflict {
        #[arg(long)]
        window: u64,
        #[arg(long, value_delimiter = ',', default_value = "1,2,0")]
        permutation: Vec<usize>,
    },
}

/// Errors the user can fix by changing inputs; mapped to exit code 1.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn experiment_err(e: ExperimentError) -> anyhow::Error {
    if e.is_validation() {
        invalid(e.to_string())
    } else {
        e.into()
    }
}

enum Outcome {
    Ok,
    Escalated,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Escalated) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Invalid>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.agent_mode = match mode {
            ModeArg::Embb => AgentMode::EmbbOriented,
            ModeArg::Urllc => AgentMode::UrllcOriented,
        };
    }
    if let Some(bus) = &cli.bus {
        cfg.bus = bus.clone();
    }
    if let Some(log) = &cli.verdict_log {
        cfg.verdict_log = Some(log.clone());
    }
    Ok(cfg.resolved())
}

fn format(cli: &Cli) -> ReportFormat {
    match cli.format {
        FormatArg::Text => ReportFormat::Text,
        FormatArg::Markdown => ReportFormat::Markdown,
        FormatArg::Json => ReportFormat::Json,
    }
}

fn out_path(cli: &Cli, name: &str) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    Ok(cli.out.join(name))
}

fn emit(cli: &Cli, bundle: &ReportBundle) -> anyhow::Result<Outcome> {
    let path = out_path(cli, "report.json")?;
    fs::write(&path, bundle.to_json()).with_context(|| format!("writing {}", path.display()))?;
    print!("{}", render_report(bundle, format(cli)));
    Ok(if bundle.escalations.is_empty() { Outcome::Ok } else { Outcome::Escalated })
}

fn read_dataset(path: &Path) -> anyhow::Result<(Vec<slice_verify_core::domain::UserKpi>, usize)> {
    let data = load_csv(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok((data.kpis, data.imputed_cells))
}

fn execute(cli: &Cli) -> anyhow::Result<Outcome> {
    match &cli.command {
        Command::Config { print_defaults } => {
            let cfg = if *print_defaults { ExperimentConfig::default().resolved() } else { load_config(cli)? };
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(Outcome::Ok)
        }
        Command::GenData { samples } => {
            let cfg = load_config(cli)?;
            let mut gen = cfg.gen_config();
            if let Some(n) = samples {
                gen.n_samples = *n;
            }
            gen.validate().map_err(|e| invalid(e.to_string()))?;
            let data = generate(&gen)?;
            let path = out_path(cli, "dataset.csv")?;
            save_csv(&data, &path)?;
            println!("wrote {} samples to {}", data.len(), path.display());
            Ok(Outcome::Ok)
        }
        Command::Train { dataset } => {
            let cfg = load_config(cli)?;
            cfg.verifier.validate().map_err(|e| invalid(e.to_string()))?;
            let (data, _) = read_dataset(dataset)?;
            let trained = train_verifier_split(&data, &cfg.verifier)?;
            let model_path = out_path(cli, "model.json")?;
            save_model(&trained.model, &model_path)?;
            let holdout_path = out_path(cli, "holdout.csv")?;
            save_csv(&trained.holdout, &holdout_path)?;
            println!(
                "trained on {} samples, {} held out; model at {}",
                trained.train.len(),
                trained.holdout.len(),
                model_path.display()
            );
            Ok(Outcome::Ok)
        }
        Command::Evaluate { model, dataset } => {
            let mut cfg = load_config(cli)?;
            cfg.mode = RunMode::Offline;
            let model: VerifierModel = load_model(model).map_err(|e| invalid(format!("{}: {e}", model.display())))?;
            let (data, imputed) = read_dataset(dataset)?;
            let bundle = evaluate_model(&cfg, model, &data, imputed).map_err(experiment_err)?;
            emit(cli, &bundle)
        }
        Command::Run => {
            let cfg = load_config(cli)?;
            let bundle = run_experiment(&cfg).map_err(experiment_err)?;
            emit(cli, &bundle)
        }
        Command::Inject { scenario } => {
            let mut cfg = load_config(cli)?;
            cfg.mode = RunMode::ClosedLoop;
            match scenario {
                Scenario::Drift {
                    slice,
                    parameter,
                    multiplier,
                    start,
                } => cfg.drift.push(DriftSpec {
                    slice: match slice {
                        SliceArg::Embb => SliceId::Embb,
                        SliceArg::Mmtc => SliceId::Mmtc,
                        SliceArg::Urllc => SliceId::Urllc,
                    },
                    parameter: parameter.clone(),
                    multiplier: *multiplier,
                    start_window: *start,
                }),
                Scenario::Conflict { window, permutation } => {
                    let permutation: [usize; 3] = permutation
                        .as_slice()
                        .try_into()
                        .map_err(|_| invalid("permutation needs exactly three labels"))?;
                    cfg.closed_loop.model_swap = Some(ModelSwap {
                        window: *window,
                        permutation,
                    });
                }
            }
            let bundle = run_experiment(&cfg).map_err(experiment_err)?;
            emit(cli, &bundle)
        }
        Command::Report { path } => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let bundle = ReportBundle::from_json(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            print!("{}", render_report(&bundle, format(cli)));
            Ok(if bundle.escalations.is_empty() { Outcome::Ok } else { Outcome::Escalated })
        }
    }
}
