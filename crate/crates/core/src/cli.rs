//! The `asymoe` command-line tool.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Config, Task};
use crate::diagnostics::{diagnose, LabelledTraces};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::model::{AsyMoeModel, LossWeights, MultimodalSample};
use crate::synth_data::{build_datasets, generate_conflict, generate_containment, read_jsonl, write_jsonl, ConflictParams, Dataset};
use crate::trainer::{collect_traces, evaluate, load_checkpoint, save_checkpoint, train, EvalReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "asymoe", version, about = "Asymmetric mixture-of-experts for multimodal token sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate JSONL datasets for the configured task.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint, metrics and reports.
    Train(TrainArgs),
    /// Evaluate a checkpoint on datasets.
    Eval(EvalArgs),
    /// Compute routing and attention diagnostics for a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Train with α frozen at each grid value and tabulate metrics.
    AlphaSweep(AlphaSweepArgs),
    /// Compare analytic gradients against central differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML config file; defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed (overrides the config file).
    #[arg(long)]
    pub seed: Option<u64>,
    /// `section.key=value`, applied after the file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<Config> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        Config::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// containment | conflict (overrides data.task).
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset directory from `gen-data`; generated in memory when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Samples of the first evaluation split exported to the routing trace.
    #[arg(long, default_value_t = 16)]
    pub trace_samples: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file or directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub trace_samples: usize,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file or directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Must describe the same model as the checkpoint when given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cap on samples traced per split.
    #[arg(long, default_value_t = 256)]
    pub max_samples: usize,
}

#[derive(Args, Debug)]
pub struct AlphaSweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated α values in (0,1).
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.3, 0.5, 0.7])]
    pub alphas: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Scale analytic gradients by 1+x before comparing (negative control).
    #[arg(long, hide = true)]
    pub corrupt: Option<f64>,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
        Command::AlphaSweep(a) => cmd_alpha_sweep(&a),
        Command::GradCheck(a) => cmd_grad_check(&a),
    }
}

fn prepare_out(dir: &Path, cfg: &Config) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Serialize)]
struct FileEntry {
    split: String,
    file: String,
    count: usize,
    sha256: String,
}

#[derive(Serialize)]
struct DataManifest {
    seed: u64,
    config_hash: String,
    task: Task,
    files: Vec<FileEntry>,
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg_args = a.cfg.clone();
    if let Some(t) = &a.task {
        let task: Task = t.parse()?;
        cfg_args.overrides.push(format!("data.task=\"{}\"", task.name()));
    }
    let cfg = cfg_args.resolve()?;
    prepare_out(&a.out, &cfg)?;
    let mut files = Vec::new();
    for d in build_datasets(cfg.seed, &cfg.data)? {
        let name = format!("{}.jsonl", d.header.split);
        let path = a.out.join(&name);
        write_jsonl(&d, &path)?;
        files.push(FileEntry {
            split: d.header.split.clone(),
            file: name,
            count: d.len(),
            sha256: file_sha256(&path)?,
        });
    }
    let manifest = DataManifest {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        task: cfg.data.task,
        files,
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    println!("wrote {} datasets to {}", manifest.files.len(), a.out.display());
    Ok(())
}

/// Reads one JSONL file, or every `*.jsonl` in a directory (sorted by name).
pub fn load_datasets(path: &Path) -> Result<Vec<Dataset>> {
    if path.is_file() {
        return Ok(vec![read_jsonl(path)?]);
    }
    if !path.is_dir() {
        return Err(Error::InvalidArgument(format!("no dataset at {}", path.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no .jsonl files in {}", path.display())));
    }
    files.iter().map(|f| read_jsonl(f)).collect()
}

fn split_train(datasets: Vec<Dataset>) -> Result<(Dataset, Vec<(String, Dataset)>)> {
    let mut train = None;
    let mut evals = Vec::new();
    for d in datasets {
        if d.header.split == "train" {
            train = Some(d);
        } else {
            evals.push((d.header.split.clone(), d));
        }
    }
    let train = train.ok_or_else(|| Error::InvalidArgument("dataset has no train split".into()))?;
    Ok((train, evals))
}

fn datasets_for(cfg: &Config, data: Option<&Path>) -> Result<Vec<Dataset>> {
    match data {
        Some(p) => load_datasets(p),
        None => build_datasets(cfg.seed, &cfg.data),
    }
}

pub fn write_eval_csv(path: &Path, reports: &BTreeMap<String, EvalReport>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["split", "n", "accuracy", "mean_task_loss", "context_faithful", "memory_answer", "other"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
    for (split, r) in reports {
        w.write_record([
            split.clone(),
            r.n.to_string(),
            format!("{:e}", r.accuracy),
            format!("{:e}", r.mean_task_loss),
            opt(r.context_faithful),
            opt(r.memory_answer),
            opt(r.other),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per routing decision: sample, layer, token, modality, experts, gates, s_evd.
pub fn write_routing_trace(path: &Path, model: &AsyMoeModel, samples: &[MultimodalSample]) -> Result<()> {
    let traces = collect_traces(model, samples)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample", "layer", "token", "modality", "experts", "gates", "s_evd"])?;
    for t in &traces {
        for (l, layer) in t.layers.iter().enumerate() {
            for d in &layer.routing {
                let experts: Vec<String> = d.experts.iter().map(|e| e.to_string()).collect();
                let gates: Vec<String> = d.gates.iter().map(|g| format!("{g:e}")).collect();
                w.write_record([
                    t.sample_id.to_string(),
                    l.to_string(),
                    d.token.to_string(),
                    d.modality.name().to_string(),
                    experts.join(";"),
                    gates.join(";"),
                    d.s_evd.map_or(String::new(), |s| format!("{s:e}")),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TrainManifest {
    seed: u64,
    config_hash: String,
    param_hash: String,
    checkpoint_sha256: String,
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    prepare_out(&a.out, &cfg)?;
    let (train_set, evals) = split_train(datasets_for(&cfg, a.data.as_deref())?)?;
    let mut model = AsyMoeModel::new(&cfg)?;
    let report = train(&mut model, &train_set.to_multimodal(), &evals, Some(&a.out))?;
    let ckpt = a.out.join("checkpoint.json");
    save_checkpoint(&model, &ckpt)?;
    report.write_metrics_csv(&a.out.join("metrics.csv"))?;
    write_json(&a.out.join("train_report.json"), &report)?;
    write_json(&a.out.join("eval.json"), &report.final_eval)?;
    write_eval_csv(&a.out.join("eval.csv"), &report.final_eval)?;
    let trace_src = evals.first().map_or(&train_set, |e| &e.1);
    let trace: Vec<_> = trace_src.to_multimodal().into_iter().take(a.trace_samples).collect();
    write_routing_trace(&a.out.join("routing_trace.csv"), &model, &trace)?;
    write_json(
        &a.out.join("manifest.json"),
        &TrainManifest {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            param_hash: report.param_hash.clone(),
            checkpoint_sha256: file_sha256(&ckpt)?,
        },
    )?;
    if let Some(last) = report.steps.last() {
        println!("step {} loss {:.6} acc {:.4}", last.step + 1, last.total, last.accuracy);
    }
    for (split, r) in &report.final_eval {
        println!("{split}: accuracy {:.4}", r.accuracy);
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    prepare_out(&a.out, &model.config)?;
    let datasets = load_datasets(&a.data)?;
    let mut reports = BTreeMap::new();
    for d in &datasets {
        reports.insert(d.header.split.clone(), evaluate(&model, d)?);
    }
    write_json(&a.out.join("eval.json"), &reports)?;
    write_eval_csv(&a.out.join("eval.csv"), &reports)?;
    let trace_src = datasets.iter().find(|d| d.header.split != "train").unwrap_or(&datasets[0]);
    let trace: Vec<_> = trace_src.to_multimodal().into_iter().take(a.trace_samples).collect();
    write_routing_trace(&a.out.join("routing_trace.csv"), &model, &trace)?;
    for (split, r) in &reports {
        println!("{split}: accuracy {:.4}", r.accuracy);
    }
    Ok(())
}

pub fn cmd_diagnose(a: &DiagnoseArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    if let Some(p) = &a.config {
        let given = Config::load(p)?;
        if given.model != model.config.model || given.asymoe != model.config.asymoe {
            return Err(Error::Checkpoint(format!(
                "config {} does not describe the checkpoint's model",
                p.display()
            )));
        }
    }
    prepare_out(&a.out, &model.config)?;
    let datasets = load_datasets(&a.data)?;
    let traces = datasets
        .iter()
        .map(|d| {
            let samples: Vec<_> = d.to_multimodal().into_iter().take(a.max_samples).collect();
            collect_traces(&model, &samples).map(|t| (d.header.split.clone(), t))
        })
        .collect::<Result<Vec<_>>>()?;
    let labelled: Vec<LabelledTraces> = traces
        .iter()
        .map(|(label, t)| LabelledTraces { label, traces: t })
        .collect();
    let report = diagnose(&model.expert_kinds(), &labelled, Some("conflict"), Some("consistent"))?;
    write_json(&a.out.join("diagnostics.json"), &report)?;
    report.write_csv(&a.out.join("diagnostics.csv"))?;
    println!(
        "entropy fit: h0 {:.6} beta {:.6}",
        report.entropy_fit_h0, report.entropy_fit_beta
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    alpha: f64,
    split: String,
    accuracy: f64,
    mean_task_loss: f64,
    context_faithful: Option<f64>,
    memory_answer: Option<f64>,
    other: Option<f64>,
}

pub fn cmd_alpha_sweep(a: &AlphaSweepArgs) -> Result<()> {
    if a.alphas.is_empty() {
        return Err(Error::InvalidArgument("empty α grid".into()));
    }
    if let Some(bad) = a.alphas.iter().find(|x| !(**x > 0.0 && **x < 1.0)) {
        return Err(Error::InvalidArgument(format!("α = {bad} is outside (0,1)")));
    }
    let base = a.cfg.resolve()?;
    prepare_out(&a.out, &base)?;
    let (train_set, evals) = split_train(datasets_for(&base, a.data.as_deref())?)?;
    let train_samples = train_set.to_multimodal();
    let mut rows = Vec::new();
    for &alpha in &a.alphas {
        let mut overrides = a.cfg.clone();
        overrides.overrides.push(format!("asymoe.frozen_alpha={alpha}"));
        let cfg = overrides.resolve()?;
        let dir = a.out.join(format!("alpha_{alpha}"));
        prepare_out(&dir, &cfg)?;
        let mut model = AsyMoeModel::new(&cfg)?;
        let report = train(&mut model, &train_samples, &evals, Some(&dir))?;
        for p in &report.alpha_trajectory {
            if p.values != report.initial_alphas {
                return Err(Error::Contract(format!("frozen α = {alpha} moved by step {}", p.step)));
            }
        }
        if let Some(v) = report.initial_alphas.iter().find(|v| (**v - alpha).abs() > 1e-12) {
            return Err(Error::Contract(format!("frozen α initialised to {v}, expected {alpha}")));
        }
        report.write_metrics_csv(&dir.join("metrics.csv"))?;
        write_json(&dir.join("eval.json"), &report.final_eval)?;
        for (split, r) in &report.final_eval {
            rows.push(SweepRow {
                alpha,
                split: split.clone(),
                accuracy: r.accuracy,
                mean_task_loss: r.mean_task_loss,
                context_faithful: r.context_faithful,
                memory_answer: r.memory_answer,
                other: r.other,
            });
        }
        println!("alpha {alpha}: done");
    }
    let mut w = csv::Writer::from_path(a.out.join("alpha_sweep.csv"))?;
    w.write_record(["alpha", "split", "accuracy", "mean_task_loss", "context_faithful", "memory_answer", "other"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
    for r in &rows {
        w.write_record([
            r.alpha.to_string(),
            r.split.clone(),
            format!("{:e}", r.accuracy),
            format!("{:e}", r.mean_task_loss),
            opt(r.context_faithful),
            opt(r.memory_answer),
            opt(r.other),
        ])?;
    }
    w.flush()?;
    write_json(&a.out.join("alpha_sweep.json"), &rows)?;
    Ok(())
}

/// A positive containment sample (order loss active) and a conflict sample
/// with a context statement, dropping any that do not fit the model.
pub fn grad_check_samples(cfg: &Config) -> Vec<MultimodalSample> {
    let d = &cfg.data;
    let mut out = Vec::new();
    if let Ok(items) = generate_containment(cfg.seed, 8, d.n_attributes, d.scene_size) {
        if let Some(s) = items.iter().find(|s| s.label) {
            out.push(s.to_multimodal());
        }
    }
    let p = ConflictParams {
        n_train: 8,
        n_eval: 2,
        null_context_rate: 0.0,
        ..ConflictParams::from(d)
    };
    if let Ok(c) = generate_conflict(cfg.seed, &p) {
        if let Some(s) = c.train.iter().find(|s| s.value_ctx.is_some()) {
            out.push(s.to_multimodal(d.n_keys, d.n_values));
        }
    }
    out.retain(|s| s.validate(&cfg.model).is_ok());
    out
}

pub fn cmd_grad_check(a: &GradCheckArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let model = AsyMoeModel::new(&cfg)?;
    let samples = grad_check_samples(&cfg);
    let mut w = LossWeights::from(&cfg.train);
    if w.align == 0.0 {
        w.align = 0.1;
    }
    if w.order == 0.0 {
        w.order = 0.1;
    }
    let opts = GradCheckOptions {
        h: a.h,
        tolerance: a.tolerance,
        corrupt: a.corrupt,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&model, &samples, w, &opts)?;
    if let Some(out) = &a.out {
        prepare_out(out, &cfg)?;
        write_json(&out.join("grad_check.json"), &report)?;
    }
    for p in &report.params {
        println!("{:<40} {:<18} worst rel err {:.3e}", p.param, p.group, p.worst_rel_err);
    }
    println!(
        "loss {:.6e} (order {:.3e}, align {:.3e})",
        report.loss, report.order_loss, report.align_loss
    );
    println!(
        "worst rel err {:.3e} ({}) tolerance {:.1e}: {}",
        report.worst_rel_err,
        report.worst_param,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if report.passed {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "gradient check failed: worst relative error {:.3e} at {}",
            report.worst_rel_err, report.worst_param
        )))
    }
}
