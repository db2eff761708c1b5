//! Subcommand implementations, shared by the binary and the integration tests.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use cmkd_core::data::{generate_dataset, DatasetSpec, ReferringSample};
use cmkd_core::gradcheck::{distill_objective_check, GradCheckReport};
use cmkd_core::segmenter::Segmenter;
use cmkd_core::train::{distill_into, evaluate, train_epochs, EpochRecord, Evaluation, TrainState};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ConfigError, Role, RunConfig};
use crate::dataset::{read_dataset, write_dataset};
use crate::report::{trace_csv, trace_rows, Report, ReportRow, REPORT_HEADER};
use crate::runner::Threaded;
use crate::CliError;

/// Threshold for the `gradcheck` command.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) if p == Path::new("-") => {
            let mut buf = Vec::new();
            std::io::Read::read_to_end(&mut std::io::stdin(), &mut buf).map_err(|e| CliError::io(p, e))?;
            Ok(RunConfig::parse_bytes(&buf)?)
        }
        Some(p) => match fs::read(p) {
            Ok(bytes) => Ok(RunConfig::parse_bytes(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CliError::NoInput(p.to_path_buf())),
            Err(e) => Err(CliError::io(p, e)),
        },
    }
}

/// Writes the training and validation sets; returns their sizes.
pub fn gen_data(cfg: &RunConfig, train_out: &Path, val_out: &Path, runner: &Threaded) -> Result<(usize, usize), CliError> {
    let spec = |seed, count| DatasetSpec {
        seed,
        count,
        canvas: cfg.canvas,
        appearance_only: cfg.appearance_only,
    };
    let train = generate_dataset(&spec(cfg.train_data_seed, cfg.train_count), runner)?;
    write_dataset(train_out, &train)?;
    let val = generate_dataset(&spec(cfg.val_data_seed, cfg.val_count), runner)?;
    write_dataset(val_out, &val)?;
    Ok((train.len(), val.len()))
}

/// What a training command optimises.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mode {
    Teacher,
    Baseline,
    Distill { teacher: PathBuf },
}

impl Mode {
    pub fn role(&self) -> Role {
        match self {
            Mode::Teacher => Role::Teacher,
            Mode::Baseline | Mode::Distill { .. } => Role::Student,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainJob<'a> {
    pub mode: Mode,
    pub seed: u64,
    pub train: &'a [ReferringSample],
    pub val: &'a [ReferringSample],
    pub out: &'a Path,
    pub trace: Option<&'a Path>,
    pub resume: Option<&'a Path>,
}

/// Trains up to `cfg.train.epochs`, writes the checkpoint and trace, and
/// returns the records of the epochs run by this call.
///
/// When resuming, the trace rows are appended to an existing trace file.
pub fn train(cfg: &RunConfig, job: &TrainJob<'_>, runner: &Threaded) -> Result<Vec<EpochRecord>, CliError> {
    let role = job.mode.role();
    let enc = cfg.encoder(role);
    let train_cfg = cfg.train_config(job.seed);
    let fingerprint = cfg.fingerprint(role);
    let mut state: TrainState<f32> = match job.resume {
        Some(path) => load_checkpoint(path, &fingerprint, enc, cfg.model_options())?,
        None => TrainState::fresh(enc, cfg.model_options(), &train_cfg)?,
    };
    let epochs = train_cfg.epochs;
    let opts = cfg.distill_options();
    let records = match &job.mode {
        Mode::Teacher | Mode::Baseline => train_epochs(&mut state, job.train, job.val, None, &train_cfg, &opts, epochs, runner)?,
        Mode::Distill { teacher } => {
            let teacher = load_model(cfg, Role::Teacher, teacher)?;
            distill_into(&mut state, job.train, job.val, &teacher, &train_cfg, &opts, epochs, runner)?
        }
    };
    save_checkpoint(job.out, &state, fingerprint)?;
    if let Some(trace) = job.trace {
        write_trace(trace, &records, job.resume.is_some())?;
    }
    Ok(records)
}

fn write_trace(path: &Path, records: &[EpochRecord], append: bool) -> Result<(), CliError> {
    if append && path.exists() {
        let mut f = OpenOptions::new().append(true).open(path).map_err(|e| CliError::io(path, e))?;
        f.write_all(trace_rows(records).as_bytes()).map_err(|e| CliError::io(path, e))
    } else {
        fs::write(path, trace_csv(records)).map_err(|e| CliError::io(path, e))
    }
}

pub fn load_model(cfg: &RunConfig, role: Role, path: &Path) -> Result<Segmenter<f32>, CliError> {
    let state: TrainState<f32> = load_checkpoint(path, &cfg.fingerprint(role), cfg.encoder(role), cfg.model_options())?;
    Ok(state.model)
}

pub fn eval(
    cfg: &RunConfig,
    role: Role,
    checkpoint: &Path,
    data: &[ReferringSample],
    runner: &Threaded,
) -> Result<(Evaluation, usize), CliError> {
    let model = load_model(cfg, role, checkpoint)?;
    Ok((evaluate(&model, data, runner)?, model.num_params()))
}

/// Full-objective gradient check; fails when the error reaches the tolerance.
pub fn gradcheck(cfg: &RunConfig, seed: u64, eps: f64) -> Result<GradCheckReport, CliError> {
    let report = distill_objective_check(seed, eps, &cfg.distill_options(), cfg.model_options())?;
    if report.max_rel_error.is_nan() || report.max_rel_error >= GRADCHECK_TOLERANCE {
        let location = report.worst.as_ref().map_or_else(String::new, |(name, i)| format!("{name}[{i}]"));
        return Err(CliError::GradCheckFailed {
            max_rel_error: report.max_rel_error,
            location,
        });
    }
    Ok(report)
}

/// Reads report rows from CSV files (header lines are skipped).
pub fn read_rows(paths: &[PathBuf]) -> Result<Vec<ReportRow>, CliError> {
    let mut rows = Vec::new();
    for path in paths {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(CliError::NoInput(path.clone())),
            Err(e) => return Err(CliError::io(path, e)),
        };
        for line in text.lines().filter(|l| !l.trim().is_empty() && l.trim() != REPORT_HEADER) {
            let row = ReportRow::parse(line).ok_or_else(|| CliError::BadReportRow {
                path: path.clone(),
                line: line.to_string(),
            })?;
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn report(inputs: &[PathBuf]) -> Result<Report, CliError> {
    Ok(Report::new(read_rows(inputs)?))
}

/// Parses a `--role` value.
pub fn parse_role(s: &str) -> Result<Role, CliError> {
    match s {
        "teacher" => Ok(Role::Teacher),
        "student" => Ok(Role::Student),
        _ => Err(ConfigError::TypeError("role".into()).into()),
    }
}

pub fn datasets(
    cfg: &RunConfig,
    train: Option<&Path>,
    val: Option<&Path>,
) -> Result<(Vec<ReferringSample>, Vec<ReferringSample>), CliError> {
    let train = read_dataset(train.unwrap_or(&cfg.train_path))?;
    let val = read_dataset(val.unwrap_or(&cfg.val_path))?;
    Ok((train, val))
}
