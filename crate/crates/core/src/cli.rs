//! `starlit gen-data|mechanism|run|sweep --config <path> [--seed <u64>] [--out <dir>]`

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, MechanismSource};
use crate::datamodel::{generate_synthetic, read_dataset, write_dataset, DataError, Dataset};
use crate::fednet::{
    derive_seed, run_pipeline, FedError, Federation, FlagCollectionConfig, RunConfig, TrainingConfig,
};
use crate::game::{expected_privacy, PrivacyMetric};
use crate::ldp::{ldp_epsilon, rr_matrix};
use crate::metrics::write_metrics_csv;

#[derive(Debug, Parser)]
#[command(name = "starlit", version, about = "Federated anomaly detection over private bank flags")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (transactions.csv and one file per bank).
    GenData(CommonArgs),
    /// Build the configured flag mechanism and report its guarantees.
    Mechanism(CommonArgs),
    /// Run the full pipeline once.
    Run(CommonArgs),
    /// AUPRC over mechanisms and epsilons, averaged over repetitions.
    Sweep(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Protocol(#[from] FedError),
    #[error("leakage audit failed:\n{0}")]
    Audit(String),
    #[error("writing {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Data(DataError::Config(_)) => 2,
            CliError::Protocol(FedError::Config(_)) => 2,
            CliError::Protocol(_) => 3,
            CliError::Audit(_) => 4,
            CliError::Data(_) | CliError::Output { .. } => 1,
        }
    }
}

fn out_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Output { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(out_err(path))
}

pub fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    fs::create_dir_all(&cfg.output_dir).map_err(out_err(&cfg.output_dir))?;
    Ok(cfg)
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    Ok(match &cfg.data_dir {
        Some(dir) => read_dataset(dir)?,
        None => generate_synthetic(&cfg.synth)?,
    })
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(&load_config(a)?),
        Command::Mechanism(a) => cmd_mechanism(&load_config(a)?),
        Command::Run(a) => cmd_run(&load_config(a)?).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&load_config(a)?).map(|_| ()),
    }
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let data = generate_synthetic(&cfg.synth)?;
    write_dataset(&cfg.output_dir, &data)?;
    println!(
        "wrote {} transactions and {} bank files to {}",
        data.transactions.len(),
        data.banks.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

pub fn cmd_mechanism(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let m = cfg.mechanism_for(cfg.mechanism, cfg.epsilon)?;
    let path = cfg.output_dir.join("mechanism.csv");
    write_file(&path, m.to_csv_string().as_bytes())?;

    let hamming = PrivacyMetric::Hamming(2);
    let rr = rr_matrix(cfg.epsilon, 2).map_err(ConfigError::from)?;
    let mut report = String::new();
    report.push_str(&format!("source {}\n", cfg.mechanism));
    report.push_str(&format!("epsilon {}\n", cfg.epsilon));
    report.push_str(&format!("achieved_epsilon {}\n", ldp_epsilon(&m)));
    report.push_str(&format!("prior {:?}\n", cfg.game.prior));
    report.push_str(&format!("expected_privacy {}\n", expected_privacy(&m, &cfg.game.prior, &hamming)));
    report.push_str(&format!("rr_expected_privacy {}\n", expected_privacy(&rr, &cfg.game.prior, &hamming)));
    for (v, row) in m.rows().enumerate() {
        report.push_str(&format!("row {v} {row:?}\n"));
    }
    let report_path = cfg.output_dir.join("mechanism_report.txt");
    write_file(&report_path, report.as_bytes())?;
    print!("{report}");
    Ok(())
}

fn flag_config(cfg: &ExperimentConfig, source: MechanismSource, epsilon: f64) -> Result<FlagCollectionConfig, CliError> {
    let mut flags = FlagCollectionConfig::new(cfg.mechanism_for(source, epsilon)?);
    flags.noise_discrepancy = cfg.noise_discrepancy;
    flags.silent_clients = cfg.silent_clients.iter().cloned().collect();
    Ok(flags)
}

fn training_config(cfg: &ExperimentConfig, backend: crate::fednet::Backend) -> TrainingConfig {
    TrainingConfig {
        boost: cfg.boost.clone(),
        backend,
        key_bits: cfg.key_bits,
        test_fraction: cfg.test_fraction,
        equality_bit: cfg.equality_bit,
        compare_srv_only: true,
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub test_auprc: Option<f64>,
    pub srv_only_test_auprc: Option<f64>,
    pub audit_passed: bool,
}

/// Writes model.txt, metrics.csv, audit.txt and messages.csv.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary, CliError> {
    let data = load_data(cfg)?;
    let run = RunConfig {
        flags: flag_config(cfg, cfg.mechanism, cfg.epsilon)?,
        training: training_config(cfg, cfg.backend),
        seed: cfg.seed,
        faults: cfg.faults.clone(),
    };
    let report = run_pipeline(&data, &run)?;
    let dir = &cfg.output_dir;
    write_file(&dir.join("model.txt"), report.outcome.model.to_text().as_bytes())?;

    let metrics_path = dir.join("metrics.csv");
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &report.metrics).map_err(|e| CliError::Output { path: metrics_path.clone(), source: e.into() })?;
    write_file(&metrics_path, &buf)?;

    let log_path = dir.join("messages.csv");
    let mut buf = Vec::new();
    report
        .federation
        .router()
        .write_log_csv(&mut buf)
        .map_err(|e| CliError::Output { path: log_path.clone(), source: e.into() })?;
    write_file(&log_path, &buf)?;

    let audit = report.audit.to_string();
    write_file(&dir.join("audit.txt"), audit.as_bytes())?;

    let o = &report.outcome;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!("mechanism {} epsilon {}", cfg.mechanism, cfg.epsilon);
    println!("rows train {} test {} excluded {}", o.n_train, o.n_test, o.excluded_rows);
    println!("test auprc {} (srv only {})", show(o.test_auprc), show(o.srv_only_test_auprc));
    println!("training time {:.2}s, {} bytes on the wire", o.train_seconds, report.federation.router().total_bytes());
    print!("{audit}");
    if !report.audit.passed() {
        return Err(CliError::Audit(audit));
    }
    Ok(RunSummary {
        test_auprc: o.test_auprc,
        srv_only_test_auprc: o.srv_only_test_auprc,
        audit_passed: true,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub mechanism: String,
    /// `None` for the non-private baseline.
    pub epsilon: Option<f64>,
    pub split: &'static str,
    pub mean_auprc: f64,
}

pub const SWEEP_HEADER: [&str; 4] = ["mechanism", "epsilon", "split", "mean_auprc"];

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Runs the sweep and appends its rows to `sweep.csv` in the output dir.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, CliError> {
    let rows = sweep(cfg)?;
    let path = cfg.output_dir.join("sweep.csv");
    append_sweep_csv(&path, &rows)?;
    for r in &rows {
        println!(
            "{:<13} eps {:>5} {:<5} {:.4}",
            r.mechanism,
            r.epsilon.map_or("inf".into(), |e| e.to_string()),
            r.split,
            r.mean_auprc
        );
    }
    Ok(rows)
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, CliError> {
    let data = load_data(cfg)?;
    let mut base = Federation::new(&data, cfg.seed)?;
    base.run_discrepancy_phase()?;
    let training = TrainingConfig { compare_srv_only: false, ..training_config(cfg, cfg.sweep_backend) };

    let mut cells: Vec<(MechanismSource, Option<f64>)> = Vec::new();
    for &m in &cfg.sweep_mechanisms {
        for &e in &cfg.sweep_epsilons {
            cells.push((m, Some(e)));
        }
    }
    cells.push((MechanismSource::Identity, None));

    let mut scores: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let started = Instant::now();
    for rep in 0..cfg.repetitions {
        let rep_seed = if rep == 0 { cfg.seed } else { derive_seed(cfg.seed, &format!("repetition:{rep}")) };
        for (c, &(m, e)) in cells.iter().enumerate() {
            let mut fed = base.clone();
            fed.reseed(rep_seed);
            fed.run_flag_collection(&flag_config(cfg, m, e.unwrap_or(f64::INFINITY))?)?;
            let outcome = fed.run_training_phase(&training)?;
            let entry = scores.entry(c).or_default();
            entry.0.extend(outcome.train_auprc);
            entry.1.extend(outcome.test_auprc);
        }
        eprintln!("repetition {}/{} done after {:.1}s", rep + 1, cfg.repetitions, started.elapsed().as_secs_f64());
    }

    let mut rows = Vec::new();
    for (c, &(m, e)) in cells.iter().enumerate() {
        let (train, test) = &scores[&c];
        let name = m.name().to_string();
        rows.push(SweepRow { mechanism: name.clone(), epsilon: e, split: "train", mean_auprc: mean(train) });
        rows.push(SweepRow { mechanism: name, epsilon: e, split: "test", mean_auprc: mean(test) });
    }
    Ok(rows)
}

/// Appends rows; the header is written only when the file is new or empty.
pub fn append_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(out_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    let io = |e: csv::Error| CliError::Output { path: path.to_path_buf(), source: e.into() };
    if fresh {
        w.write_record(SWEEP_HEADER).map_err(io)?;
    }
    for r in rows {
        w.write_record([
            r.mechanism.clone(),
            r.epsilon.map_or("inf".into(), |e| e.to_string()),
            r.split.to_string(),
            r.mean_auprc.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(out_err(path))?;
    Ok(())
}

pub fn main_with(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            e.exit_code()
        }
    }
}
