//! Subcommands of the `groupdir` binary.
//!
//! Every command writes into an output directory and finishes with a
//! `manifest.json` listing the files it produced. Exit codes: 0 success,
//! 1 runtime failure, 2 usage or configuration error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::datagen::{generate, load_csv, save_csv, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::full_report;
use crate::experiment::{median, run_once, run_parallel, RunSummary};
use crate::grouping::{group_counts, ShotThresholds};
use crate::softlabel::Criterion;
use crate::training::{TrainConfig, TrainHistory};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

pub const COMPARE_HEADER: &str = "criterion,seed,group_acc,mean_absdiff,mae_cls,mae_gt,gm_cls,gm_gt";
pub const SWEEP_HEADER: &str = "groups,seed,mae,gm,mae_gt,gm_gt,group_acc";
pub const ABSDIFF_HEADER: &str = "criterion,seed,absdiff,count";

#[derive(Debug, Parser)]
#[command(name = "groupdir", version, about = "Group-routed multi-expert imbalanced regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic train/val/test splits.
    Generate(GenerateArgs),
    /// Train a model and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare group classification criteria across seeds.
    Compare(CompareArgs),
    /// Sweep the number of groups across seeds.
    SweepGroups(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub y_min: f64,
    #[arg(long, default_value_t = 100.0, allow_hyphen_values = true)]
    pub y_max: f64,
    #[arg(long, default_value_t = 4.0, allow_hyphen_values = true)]
    pub skew_rate: f64,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub num_fourier: usize,
    #[arg(long, default_value_t = 0.05, allow_hyphen_values = true)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 2000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_val: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_test: usize,
}

/// Hyperparameters shared by every training command.
#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 20)]
    pub groups: usize,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub beta: f64,
    #[arg(long, default_value_t = 2.5, allow_hyphen_values = true)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub lambda2: f64,
    /// Logit-adjustment strength for `--criterion la`.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub la_tau: f64,
    /// Re-weight the regression loss with label distribution smoothing.
    #[arg(long)]
    pub lds: bool,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    /// Head-only epochs with a frozen encoder after joint training.
    #[arg(long, default_value_t = 0)]
    pub stage2_epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3, allow_hyphen_values = true)]
    pub lr: f64,
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
    /// Override the label range read from the dataset's config.json.
    #[arg(long, allow_hyphen_values = true)]
    pub y_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub y_max: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub many_min: usize,
    #[arg(long, default_value_t = 20)]
    pub few_max: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding train.csv, val.csv and test.csv.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "soft")]
    pub criterion: Criterion,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
    /// Expected group count; must agree with the checkpoint.
    #[arg(long)]
    pub groups: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub many_min: usize,
    #[arg(long, default_value_t = 20)]
    pub few_max: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "soft,ce,la")]
    pub criteria: Vec<Criterion>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub group_list: Vec<usize>,
    #[arg(long, default_value = "soft")]
    pub criterion: Criterion,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

/// Record of one command invocation and everything it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub version: &'static str,
    pub command: &'static str,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::SweepGroups(a) => cmd_sweep_groups(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let config = SynthConfig {
        y_min: args.y_min,
        y_max: args.y_max,
        skew_rate: args.skew_rate,
        feature_dim: args.feature_dim,
        num_fourier: args.num_fourier,
        noise_sigma: args.noise_sigma,
        n_train: args.n_train,
        n_val: args.n_val,
        n_test: args.n_test,
        seed: args.seed,
    };
    config.validate()?;
    let splits = generate(&config)?;
    create_dir(&args.out)?;
    save_csv(&splits.train, &args.out.join("train.csv"))?;
    save_csv(&splits.val, &args.out.join("val.csv"))?;
    save_csv(&splits.test, &args.out.join("test.csv"))?;
    config.save(&args.out.join("config.json"))?;
    RunManifest {
        version: VERSION,
        command: "generate",
        config: serde_json::to_value(&config).expect("config serializes"),
        seeds: vec![args.seed],
        output_dir: args.out.clone(),
        outputs: ["train.csv", "val.csv", "test.csv", "config.json"]
            .map(String::from)
            .to_vec(),
    }
    .write(&args.out)
}

pub struct DataSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Label range from the generator config, when present.
    pub range: Option<(f64, f64)>,
}

pub fn load_data_dir(dir: &Path) -> Result<DataSplits> {
    let cfg = dir.join("config.json");
    let range = if cfg.exists() {
        let c = SynthConfig::load(&cfg)?;
        Some((c.y_min, c.y_max))
    } else {
        None
    };
    Ok(DataSplits {
        train: load_csv(&dir.join("train.csv"))?,
        val: load_csv(&dir.join("val.csv"))?,
        test: load_csv(&dir.join("test.csv"))?,
        range,
    })
}

impl TrainFlags {
    pub fn to_config(&self, criterion: Criterion, seed: u64, data: &DataSplits) -> Result<TrainConfig> {
        let (lo, hi) = data.range.unwrap_or((0.0, 100.0));
        let config = TrainConfig {
            y_min: self.y_min.unwrap_or(lo),
            y_max: self.y_max.unwrap_or(hi),
            num_groups: self.groups,
            hidden_dims: self.hidden.clone(),
            embed_dim: self.embed_dim,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            temperature: self.temperature,
            beta: self.beta,
            criterion,
            la_tau: self.la_tau,
            use_lds: self.lds,
            learning_rate: self.lr,
            epochs: self.epochs,
            stage2_epochs: self.stage2_epochs,
            batch_size: self.batch_size,
            seed,
            ..TrainConfig::default()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn thresholds(&self) -> Result<ShotThresholds> {
        ShotThresholds::new(self.many_min, self.few_max)
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let data = load_data_dir(&args.data)?;
    let config = args.flags.to_config(args.criterion, args.seed, &data)?;
    let thresholds = args.flags.thresholds()?;
    let run = run_once(&config, &data.train, &data.val, &data.test, thresholds)?;
    create_dir(&args.out)?;
    Checkpoint::new(config.clone(), run.model).save(&args.out.join("checkpoint.json"))?;
    write_history(&run.history, &args.out.join("history.csv"))?;
    write_file(&args.out.join("report.json"), &run.report.to_json())?;
    write_file(&args.out.join("report.txt"), &run.report.to_text())?;
    print!("{}", run.report.to_text());
    RunManifest {
        version: VERSION,
        command: "train",
        config: serde_json::to_value(&config).expect("config serializes"),
        seeds: vec![args.seed],
        output_dir: args.out.clone(),
        outputs: ["checkpoint.json", "history.csv", "report.json", "report.txt"]
            .map(String::from)
            .to_vec(),
    }
    .write(&args.out)
}

fn write_history(history: &TrainHistory, path: &Path) -> Result<()> {
    write_file(path, &history.to_csv())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.model;
    if let Some(g) = args.groups {
        if g != model.scheme.num_groups() {
            return Err(Error::GroupMismatch {
                checkpoint: model.scheme.num_groups(),
                requested: g,
            });
        }
    }
    let thresholds = ShotThresholds::new(args.many_min, args.few_max)?;
    let train = load_csv(&args.data.join("train.csv"))?;
    let split = load_csv(&args.data.join(format!("{}.csv", args.split)))?;
    let counts = group_counts(&train.labels, &model.scheme)?;
    let report = full_report(&model, &split, thresholds, &counts)?;
    match &args.out {
        Some(p) => write_file(p, &report.to_json()),
        None => {
            print!("{}", report.to_json());
            Ok(())
        }
    }
}

fn fmt_row(fields: &[String]) -> String {
    let mut s = fields.join(",");
    s.push('\n');
    s
}

fn summary_fields(r: &RunSummary) -> [f64; 6] {
    [r.group_acc, r.mean_absdiff, r.mae_cls, r.mae_gt, r.gm_cls, r.gm_gt]
}

/// Compare CSV: one row per (criterion, seed) and a `median` row per
/// criterion.
pub fn compare_csv(rows: &[(Criterion, RunSummary)]) -> String {
    let mut out = format!("{COMPARE_HEADER}\n");
    let mut criteria: Vec<Criterion> = Vec::new();
    for (c, _) in rows {
        if !criteria.contains(c) {
            criteria.push(*c);
        }
    }
    for c in criteria {
        let runs: Vec<&RunSummary> = rows.iter().filter(|(k, _)| *k == c).map(|(_, r)| r).collect();
        for r in &runs {
            let mut f = vec![c.to_string(), r.seed.to_string()];
            f.extend(summary_fields(r).iter().map(|v| v.to_string()));
            out.push_str(&fmt_row(&f));
        }
        let mut f = vec![c.to_string(), "median".to_string()];
        for k in 0..6 {
            let col: Vec<f64> = runs.iter().map(|r| summary_fields(r)[k]).collect();
            f.push(median(&col).to_string());
        }
        out.push_str(&fmt_row(&f));
    }
    out
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    if args.criteria.is_empty() || args.seeds.is_empty() {
        return Err(Error::Config("compare needs at least one criterion and one seed".into()));
    }
    let data = load_data_dir(&args.data)?;
    let thresholds = args.flags.thresholds()?;
    let mut jobs = Vec::new();
    for &c in &args.criteria {
        for &s in &args.seeds {
            jobs.push((c, args.flags.to_config(c, s, &data)?));
        }
    }
    let rows = run_parallel(jobs, |(c, config)| {
        let run = run_once(&config, &data.train, &data.val, &data.test, thresholds)?;
        Ok((c, run.summary))
    })?;
    create_dir(&args.out)?;
    write_file(&args.out.join("compare.csv"), &compare_csv(&rows))?;
    let mut hist = format!("{ABSDIFF_HEADER}\n");
    for (c, r) in &rows {
        for (d, n) in r.absdiff_histogram.iter().enumerate() {
            let _ = writeln!(hist, "{c},{},{d},{n}", r.seed);
        }
    }
    write_file(&args.out.join("absdiff.csv"), &hist)?;
    let config = args.flags.to_config(args.criteria[0], args.seeds[0], &data)?;
    RunManifest {
        version: VERSION,
        command: "compare",
        config: serde_json::to_value(&config).expect("config serializes"),
        seeds: args.seeds.clone(),
        output_dir: args.out.clone(),
        outputs: vec!["compare.csv".into(), "absdiff.csv".into()],
    }
    .write(&args.out)
}

/// Sweep CSV: one row per (groups, seed) and a `median` row per group count.
pub fn sweep_csv(rows: &[RunSummary]) -> String {
    let fields = |r: &RunSummary| [r.mae_cls, r.gm_cls, r.mae_gt, r.gm_gt, r.group_acc];
    let mut out = format!("{SWEEP_HEADER}\n");
    let mut groups: Vec<usize> = Vec::new();
    for r in rows {
        if !groups.contains(&r.num_groups) {
            groups.push(r.num_groups);
        }
    }
    for g in groups {
        let runs: Vec<&RunSummary> = rows.iter().filter(|r| r.num_groups == g).collect();
        for r in &runs {
            let mut f = vec![g.to_string(), r.seed.to_string()];
            f.extend(fields(r).iter().map(|v| v.to_string()));
            out.push_str(&fmt_row(&f));
        }
        let mut f = vec![g.to_string(), "median".to_string()];
        for k in 0..5 {
            let col: Vec<f64> = runs.iter().map(|r| fields(r)[k]).collect();
            f.push(median(&col).to_string());
        }
        out.push_str(&fmt_row(&f));
    }
    out
}

pub fn cmd_sweep_groups(args: &SweepArgs) -> Result<()> {
    if args.group_list.is_empty() || args.seeds.is_empty() {
        return Err(Error::Config("sweep needs a non-empty --group-list and --seeds".into()));
    }
    let data = load_data_dir(&args.data)?;
    let thresholds = args.flags.thresholds()?;
    let mut jobs = Vec::new();
    for &g in &args.group_list {
        for &s in &args.seeds {
            let flags = TrainFlags {
                groups: g,
                ..args.flags.clone()
            };
            jobs.push(flags.to_config(args.criterion, s, &data)?);
        }
    }
    let rows = run_parallel(jobs, |config| {
        Ok(run_once(&config, &data.train, &data.val, &data.test, thresholds)?.summary)
    })?;
    create_dir(&args.out)?;
    write_file(&args.out.join("sweep_groups.csv"), &sweep_csv(&rows))?;
    let config = args.flags.to_config(args.criterion, args.seeds[0], &data)?;
    RunManifest {
        version: VERSION,
        command: "sweep-groups",
        config: serde_json::json!({ "base": config, "group_list": args.group_list }),
        seeds: args.seeds.clone(),
        output_dir: args.out.clone(),
        outputs: vec!["sweep_groups.csv".into()],
    }
    .write(&args.out)
}
