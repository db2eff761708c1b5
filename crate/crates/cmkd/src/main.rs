use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use cmkd::commands::{self, Mode, TrainJob};
use cmkd::config::RunConfig;
use cmkd::dataset::read_dataset;
use cmkd::error::exit;
use cmkd::report::{ReportRow, REPORT_HEADER};
use cmkd::runner::Threaded;
use cmkd::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "cmkd",
    version,
    about = "Relational teacher-student distillation for referring segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Run configuration (`key = value` lines); `-` reads stdin.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Training seed; defaults to the first entry of `seeds`.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV trace.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Continue from this checkpoint up to the configured epoch count.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Training set; defaults to `train_path`.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation set; defaults to `val_path`.
    #[arg(long)]
    val: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the training and validation sets.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        train_out: Option<PathBuf>,
        #[arg(long)]
        val_out: Option<PathBuf>,
    },
    /// Train the teacher on the segmentation loss.
    TrainTeacher(TrainArgs),
    /// Train the student on the segmentation loss alone.
    TrainBaseline(TrainArgs),
    /// Train the student against a frozen teacher.
    Distill {
        #[command(flatten)]
        train: TrainArgs,
        /// Teacher checkpoint.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Report mIoU of a checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `teacher` or `student`.
        #[arg(long)]
        role: String,
        /// Dataset to score; defaults to `val_path`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Append a report row with this label (`teacher`, `baseline`, `distilled`).
        #[arg(long, requires = "row_out")]
        label: Option<String>,
        /// Seed recorded in the report row.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, requires = "label")]
        row_out: Option<PathBuf>,
    },
    /// Finite-difference check of the full distillation objective.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Merge report rows into one table and compare distilled with baseline.
    Report {
        /// CSV files written by `eval --row-out`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn run_training(args: &TrainArgs, mode: Mode, runner: &Threaded) -> Result<(), CliError> {
    let cfg = commands::load_config(args.config.config.as_deref())?;
    let (train, val) = commands::datasets(&cfg, args.train.as_deref(), args.val.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    let job = TrainJob {
        mode,
        seed,
        train: &train,
        val: &val,
        out: &args.out,
        trace: args.trace.as_deref(),
        resume: args.resume.as_deref(),
    };
    let records = commands::train(&cfg, &job, runner)?;
    if let Some(last) = records.last() {
        println!("epochs={} l_d={} val_miou={}", last.epoch + 1, last.losses.l_d, last.val_miou);
    }
    println!("checkpoint={}", args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let runner = Threaded::from_env();
    match cli.command {
        Command::GenData {
            config,
            train_out,
            val_out,
        } => {
            let cfg = commands::load_config(config.config.as_deref())?;
            let train_out = train_out.unwrap_or_else(|| cfg.train_path.clone());
            let val_out = val_out.unwrap_or_else(|| cfg.val_path.clone());
            let (n_train, n_val) = commands::gen_data(&cfg, &train_out, &val_out, &runner)?;
            println!("train={} samples={n_train}", train_out.display());
            println!("val={} samples={n_val}", val_out.display());
        }
        Command::TrainTeacher(args) => run_training(&args, Mode::Teacher, &runner)?,
        Command::TrainBaseline(args) => run_training(&args, Mode::Baseline, &runner)?,
        Command::Distill { train, teacher } => run_training(&train, Mode::Distill { teacher }, &runner)?,
        Command::Eval {
            config,
            checkpoint,
            role,
            data,
            label,
            seed,
            row_out,
        } => {
            let cfg: RunConfig = commands::load_config(config.config.as_deref())?;
            let role = commands::parse_role(&role)?;
            let data = read_dataset(data.as_deref().unwrap_or(&cfg.val_path))?;
            let (evaluation, params) = commands::eval(&cfg, role, &checkpoint, &data, &runner)?;
            println!("miou={} params={params} samples={}", evaluation.miou, data.len());
            if let (Some(label), Some(out)) = (label, row_out) {
                let row = ReportRow {
                    flavor: cfg.flavor().to_string(),
                    label,
                    seed,
                    miou: evaluation.miou,
                    params,
                };
                write(&out, &format!("{REPORT_HEADER}\n{}\n", row.to_csv()))?;
            }
        }
        Command::Gradcheck { config, seed, eps } => {
            let cfg = commands::load_config(config.config.as_deref())?;
            let report = commands::gradcheck(&cfg, seed, eps)?;
            println!(
                "max_rel_error={:e} coordinates={} tolerance={:e}",
                report.max_rel_error,
                report.coordinates,
                commands::GRADCHECK_TOLERANCE
            );
        }
        Command::Report { inputs, out } => {
            let report = commands::report(&inputs)?;
            let csv = report.to_csv();
            match out {
                Some(path) => write(&path, &csv)?,
                None => print!("{csv}"),
            }
            for s in &report.summaries {
                let means: Vec<String> = s.means.iter().map(|(l, m)| format!("{l}={m}")).collect();
                let status = if s.pass { "PASS" } else { "FAIL" };
                println!("flavor={} {} check={status}", s.flavor, means.join(" "));
            }
            if let Some(failed) = report.summaries.iter().find(|s| !s.pass) {
                return Err(CliError::ReportFailed(failed.flavor.clone()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::from(exit::OK as u8);
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: E_USAGE: {}", first.trim_start_matches("error: "));
            return ExitCode::from(exit::CONFIG as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {}: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
