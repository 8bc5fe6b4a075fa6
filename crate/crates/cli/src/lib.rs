//! Command-line front end: load a config, apply flag overrides, run one or
//! more seeds or a sweep, and write reports with a content-hashed manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mas_core::datagen::{export_clients, gen_suite, partition_clients};
use mas_core::sim::{self, ExperimentConfig, ExperimentReport, Method};

#[derive(Debug, Parser)]
#[command(
    name = "mas",
    version,
    about = "Merge-and-split federated multi-task simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one method for one or more seeds.
    Run(RunArgs),
    /// Run a grid over one config axis.
    Sweep(SweepArgs),
    /// Write the generated client data of a config as CSV files.
    Export(ExportArgs),
    /// Print the effective config as JSON.
    Config(Overrides),
}

/// Flags that override fields of the config file.
#[derive(Debug, Default, Clone, Args)]
pub struct Overrides {
    /// JSON config file; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long)]
    pub splits: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub r0: Option<usize>,
    #[arg(long)]
    pub score_round: Option<usize>,
    #[arg(long)]
    pub rho: Option<usize>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub select: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seeds; each gets its own output subdirectory.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    #[value(alias = "R0")]
    R0,
    #[value(alias = "E")]
    Epochs,
    #[value(alias = "K")]
    Select,
    #[value(alias = "x")]
    Splits,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::R0 => "r0",
            Axis::Epochs => "epochs",
            Axis::Select => "select",
            Axis::Splits => "splits",
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig, value: usize) {
        match self {
            Axis::R0 => cfg.r0 = value,
            Axis::Epochs => cfg.epochs = value,
            Axis::Select => cfg.select = value,
            Axis::Splits => cfg.splits = value,
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, value_enum)]
    pub axis: Axis,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<usize>,
    /// Methods to run at every grid point; defaults to the config method.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Vec<Method>,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: mas_core::Error| e.to_string())
}

impl Overrides {
    /// The config file (or defaults) with every given flag applied.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f {
                    cfg.$f = v;
                }
            )*};
        }
        set!(
            method,
            splits,
            rounds,
            r0,
            score_round,
            rho,
            clients,
            select,
            epochs,
            seed
        );
        if self.clients.is_some() {
            cfg.sizes = rescale_sizes(&cfg);
        }
        Ok(cfg)
    }

    pub fn seeds(&self, cfg: &ExperimentConfig) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![cfg.seed]
        } else {
            self.seeds.clone()
        }
    }
}

/// Keeps the per-client average when `--clients` changes a skewed total.
fn rescale_sizes(cfg: &ExperimentConfig) -> mas_core::datagen::SizeProfile {
    use mas_core::datagen::SizeProfile;
    match (&cfg.sizes, ExperimentConfig::default().sizes) {
        (SizeProfile::Skewed { total, ratio }, SizeProfile::Skewed { total: d, .. })
            if *total == d =>
        {
            let per = d / ExperimentConfig::default().clients;
            SizeProfile::Skewed {
                total: per * cfg.clients,
                ratio: *ratio,
            }
        }
        (other, _) => other.clone(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Partial,
}

/// Lists every file written to an output directory with its SHA-256.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: Option<PathBuf>,
    pub config_hash: String,
    /// Hash of the config plus any frozen data manifest it reads.
    pub input_hash: String,
    pub output_dir: PathBuf,
    pub started_at: String,
    pub finished_at: String,
    pub status: RunStatus,
    pub error: Option<String>,
    pub files: BTreeMap<String, String>,
}

fn input_hash(cfg: &ExperimentConfig, config_json: &str) -> String {
    let mut h = Sha256::new();
    h.update(config_json.as_bytes());
    if let Some(dir) = &cfg.data_dir {
        if let Ok(bytes) = fs::read(dir.join("manifest.json")) {
            h.update(&bytes);
        }
    }
    hex::encode(h.finalize())
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Writes `name` into `dir` and records its hash.
fn emit(
    dir: &Path,
    files: &mut BTreeMap<String, String>,
    name: &str,
    contents: &[u8],
) -> Result<()> {
    fs::write(dir.join(name), contents).with_context(|| format!("writing {name}"))?;
    files.insert(name.to_string(), sha256_hex(contents));
    Ok(())
}

pub fn summary_table(reports: &[&ExperimentReport]) -> String {
    let mut out = format!(
        "{:<12} {:>16} {:>14} {:>14}\n",
        "method", "total_test_loss", "time_proxy", "energy_proxy"
    );
    for r in reports {
        out += &format!(
            "{:<12} {:>16.6} {:>14.4} {:>14.4}\n",
            r.method.as_str(),
            r.final_total_test_loss,
            r.cost.time,
            r.cost.energy
        );
    }
    out
}

fn summary_text(report: &ExperimentReport) -> String {
    let mut out = summary_table(&[report]);
    out += &format!("\nseed: {}\n", report.seed);
    for (t, l) in &report.final_test_losses {
        out += &format!("test_loss[{t}]: {l:.6}\n");
    }
    if let Some(p) = &report.partition {
        let blocks: Vec<String> = p
            .partition
            .blocks()
            .iter()
            .map(|b| {
                let ids: Vec<&str> = b.iter().map(|t| t.as_str()).collect();
                format!("{{{}}}", ids.join(","))
            })
            .collect();
        out += &format!("partition: {} (score {:.6})\n", blocks.join(" "), p.total);
    }
    if let Some(ok) = report.recovered_ground_truth() {
        out += &format!("matches ground truth: {ok}\n");
    }
    out
}

/// Runs `cfg` and writes its outputs into `dir`. On failure the manifest
/// is still written, marked partial, listing whatever was emitted.
pub fn run_to_dir(
    cfg: &ExperimentConfig,
    config_path: Option<&Path>,
    dir: &Path,
) -> Result<ExperimentReport> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let started_at = now();
    let config_json = serde_json::to_string_pretty(cfg)?;
    let mut files = BTreeMap::new();
    let result = (|| -> Result<ExperimentReport> {
        emit(dir, &mut files, "config.json", config_json.as_bytes())?;
        let report = sim::run(cfg)?;
        emit(dir, &mut files, "report.json", report.to_json()?.as_bytes())?;
        emit(
            dir,
            &mut files,
            "rounds.csv",
            report.rounds_csv().as_bytes(),
        )?;
        for m in &report.affinity {
            emit(
                dir,
                &mut files,
                &format!("affinity_r{}.csv", m.round()),
                m.to_csv().as_bytes(),
            )?;
        }
        emit(
            dir,
            &mut files,
            "summary.txt",
            summary_text(&report).as_bytes(),
        )?;
        Ok(report)
    })();
    let manifest = RunManifest {
        config_path: config_path.map(Path::to_path_buf),
        config_hash: sha256_hex(config_json.as_bytes()),
        input_hash: input_hash(cfg, &config_json),
        output_dir: dir.to_path_buf(),
        started_at,
        finished_at: now(),
        status: if result.is_ok() {
            RunStatus::Complete
        } else {
            RunStatus::Partial
        },
        error: result.as_ref().err().map(|e| format!("{e:#}")),
        files,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    result
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Mean and sample standard deviation of the headline numbers over seeds.
pub fn seed_summary(reports: &[ExperimentReport]) -> String {
    let col =
        |f: fn(&ExperimentReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let (loss, loss_sd) = col(|r| r.final_total_test_loss);
    let (time, time_sd) = col(|r| r.cost.time);
    let (energy, energy_sd) = col(|r| r.cost.energy);
    let seeds: Vec<String> = reports.iter().map(|r| r.seed.to_string()).collect();
    let mut out = format!(
        "method: {}\nseeds: {}\n\n",
        reports[0].method.as_str(),
        seeds.join(",")
    );
    out += &format!("{:<16} {:>14} {:>14}\n", "metric", "mean", "std");
    out += &format!(
        "{:<16} {:>14.6} {:>14.6}\n",
        "total_test_loss", loss, loss_sd
    );
    out += &format!("{:<16} {:>14.4} {:>14.4}\n", "time_proxy", time, time_sd);
    out += &format!(
        "{:<16} {:>14.4} {:>14.4}\n",
        "energy_proxy", energy, energy_sd
    );
    if reports[0].partition.is_some() {
        let hits = reports
            .iter()
            .filter(|r| r.recovered_ground_truth() == Some(true))
            .count();
        out += &format!("\nground truth recovered: {hits}/{}\n", reports.len());
    }
    out
}

pub fn cmd_run(args: &RunArgs) -> Result<Vec<ExperimentReport>> {
    let base = args.overrides.resolve()?;
    let seeds = args.overrides.seeds(&base);
    let cfgs: Vec<ExperimentConfig> = seeds
        .iter()
        .map(|&s| ExperimentConfig {
            seed: s,
            ..base.clone()
        })
        .collect();
    for c in &cfgs {
        c.validate()?;
    }
    if cfgs.len() == 1 {
        let r = run_to_dir(&cfgs[0], args.overrides.config.as_deref(), &args.out)?;
        return Ok(vec![r]);
    }
    let reports = cfgs
        .par_iter()
        .map(|c| {
            let dir = args.out.join(format!("seed_{}", c.seed));
            run_to_dir(c, args.overrides.config.as_deref(), &dir)
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("summary.txt"), seed_summary(&reports))?;
    Ok(reports)
}

/// One row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: usize,
    pub seed: u64,
    pub method: String,
    pub total_test_loss: f64,
    pub time_proxy: f64,
    pub energy_proxy: f64,
}

pub const SWEEP_HEADER: &str = "axis,value,seed,method,total_test_loss,time_proxy,energy_proxy";

pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<SweepRow>> {
    let base = args.overrides.resolve()?;
    let seeds = args.overrides.seeds(&base);
    let methods = if args.methods.is_empty() {
        vec![base.method]
    } else {
        args.methods.clone()
    };
    let mut jobs = Vec::new();
    for &value in &args.values {
        for &seed in &seeds {
            for &method in &methods {
                let mut cfg = ExperimentConfig {
                    seed,
                    method,
                    ..base.clone()
                };
                args.axis.apply(&mut cfg, value);
                cfg.validate()
                    .with_context(|| format!("{}={value}", args.axis.name()))?;
                jobs.push((value, cfg));
            }
        }
    }
    let rows = jobs
        .par_iter()
        .map(|(value, cfg)| {
            let dir = args.out.join(format!(
                "{}_{value}/{}/seed_{}",
                args.axis.name(),
                cfg.method.as_str(),
                cfg.seed
            ));
            let r = run_to_dir(cfg, args.overrides.config.as_deref(), &dir)?;
            Ok(SweepRow {
                axis: args.axis.name().to_string(),
                value: *value,
                seed: cfg.seed,
                method: cfg.method.as_str().to_string(),
                total_test_loss: r.final_total_test_loss,
                time_proxy: r.cost.time,
                energy_proxy: r.cost.energy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        csv += &format!(
            "{},{},{},{},{},{},{}\n",
            r.axis, r.value, r.seed, r.method, r.total_test_loss, r.time_proxy, r.energy_proxy
        );
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("sweep.csv"), csv)?;
    Ok(rows)
}

pub fn cmd_export(args: &ExportArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    if cfg.data_dir.is_some() {
        bail!("config already reads frozen data from data_dir");
    }
    let suite = gen_suite(&cfg.suite, cfg.seed)?;
    let layout = cfg.client_layout();
    let clients = partition_clients(&suite, &layout, cfg.seed)?;
    export_clients(&args.out, &suite, &layout, cfg.seed, &clients)?;
    Ok(())
}

/// Whether an error came from config validation rather than the run.
pub fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<mas_core::Error>(),
            Some(mas_core::Error::InvalidConfig { .. })
        ) || c.is::<serde_json::Error>()
    })
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(args) => {
            let reports = cmd_run(args)?;
            let refs: Vec<&ExperimentReport> = reports.iter().collect();
            print!("{}", summary_table(&refs));
        }
        Command::Sweep(args) => {
            let rows = cmd_sweep(args)?;
            println!(
                "{} runs written to {}",
                rows.len(),
                args.out.join("sweep.csv").display()
            );
        }
        Command::Export(args) => {
            cmd_export(args)?;
            println!("client data written to {}", args.out.display());
        }
        Command::Config(overrides) => {
            let cfg = overrides.resolve()?;
            cfg.validate()?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(())
}
