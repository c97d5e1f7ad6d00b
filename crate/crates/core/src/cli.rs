//! Command-line entry point: `train`, `detect`, `score`, `evaluate` and
//! `export-features`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{encode_tokens, tokenize, Split};
use crate::detector::{decide_lof_score, lof_fit, DetectorFile, Label};
use crate::encoder::{class_scores, forward, normalize_rows, HeadMode};
use crate::error::{Error, Result};
use crate::evaluation::{
    export_features, read_features, run_experiment, DatasetInput, ExperimentSpec, SplitPlan,
};
use crate::trainer::{extract_features, train, TrainedModel};

#[derive(Debug, Parser)]
#[command(name = "open-intent", version, about = "Unknown-intent detection for dialogue utterances")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set lmcl.m=0.2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one encoder on a known-class subset and fit its LOF detector.
    Train(TrainArgs),
    /// Classify utterances from a text file, one per line.
    Detect(DetectArgs),
    /// LOF-score rows of an exported feature file.
    Score(ScoreArgs),
    /// Run the evaluation grid and print the aggregate table.
    Evaluate(EvaluateArgs),
    /// Write encoder features for one split.
    ExportFeatures(ExportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = ["softmax", "lmcl", "sigmoid"])]
    pub loss: Option<String>,
    /// Dataset name from the configuration; defaults to the first.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Comma-separated known classes.
    #[arg(long, value_delimiter = ',', conflicts_with = "fraction")]
    pub known_classes: Option<Vec<String>>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `detector.json` next to the checkpoint.
    #[arg(long)]
    pub detector: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub detector: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub datasets: Option<Vec<String>>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub base_seed: Option<u64>,
    #[arg(long)]
    pub parallel_cells: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an error: 2 for numeric divergence, 1 otherwise.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Diverged { .. } | Error::NonFinite { .. } => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Train(a) => cmd_train(cfg, a),
        Command::Detect(a) => cmd_detect(&cfg, a),
        Command::Score(a) => cmd_score(a),
        Command::Evaluate(a) => cmd_evaluate(cfg, a),
        Command::ExportFeatures(a) => cmd_export(&cfg, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(loss) = &a.loss {
        cfg.train.loss_mode = loss.parse()?;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    cfg.validate()?;
    let ds = cfg.dataset(a.dataset.as_deref())?.clone();
    let (corpus, table) = cfg.load_dataset(&ds)?;
    let seed = cfg.train.seed;
    let plan = match (&a.known_classes, a.fraction) {
        (Some(known), _) => {
            let fraction = known.len() as f64 / corpus.classes.len() as f64;
            SplitPlan::with_classes(&ds.name, &corpus, known, fraction, seed)?
        }
        (None, Some(f)) => SplitPlan::sampled(&ds.name, &corpus, f, seed)?,
        (None, None) => {
            return Err(Error::Config("train needs --known-classes or --fraction".into()))
        }
    };
    plan.check_leakage()?;

    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    cfg.write_resolved(&out)?;
    let train_cfg = cfg.train_config(cfg.train.loss_mode, seed);
    let lmcl = (train_cfg.loss_mode == HeadMode::Lmcl).then_some(train_cfg.lmcl);
    let (model, report) = match train(&plan.training, &table, &train_cfg) {
        Ok(r) => r,
        Err(Error::Diverged {
            epoch,
            loss,
            last_finite,
        }) => {
            let partial = TrainedModel {
                params: (*last_finite).clone(),
                classes: plan.known_classes().to_vec(),
                max_len: corpus.max_len,
                vocab_hash: table.vocab_hash(),
                lmcl,
            };
            partial.save(&out.join("checkpoint.diverged.json"))?;
            return Err(Error::Diverged {
                epoch,
                loss,
                last_finite,
            });
        }
        Err(e) => return Err(e),
    };
    let checkpoint = out.join("checkpoint.json");
    model.save(&checkpoint)?;
    report.write_log(&out.join("train_log.jsonl"))?;

    let feats = extract_features(&model, &corpus, &table, &plan.training.train.ids)?;
    let k = cfg.detection.lof_k.min(feats.len().saturating_sub(1));
    let lof = lof_fit(&feats.rows, k)?;
    DetectorFile::new(cfg.detection.clone(), lof).save(&out.join("detector.json"))?;
    println!(
        "trained {} encoder on {} known classes ({}), best epoch {} of {}, validation accuracy {:.4}",
        train_cfg.loss_mode,
        plan.known_classes().len(),
        plan.known_classes().join(","),
        report.best_epoch,
        report.epochs_run,
        report.best_validation_accuracy
    );
    println!("checkpoint: {}", checkpoint.display());
    Ok(())
}

#[derive(Serialize)]
struct DetectRecord<'a> {
    line: usize,
    text: &'a str,
    prediction: &'a str,
    lof: f64,
    class_scores: BTreeMap<&'a str, f64>,
}

fn cmd_detect(cfg: &RunConfig, a: DetectArgs) -> Result<()> {
    let model = TrainedModel::load(&a.checkpoint)?;
    let detector_path = a.detector.unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("detector.json")
    });
    let detector = DetectorFile::load(&detector_path)?;
    let ds = cfg.dataset(a.dataset.as_deref())?;
    let (_, table) = cfg.load_dataset(ds)?;
    let found = table.vocab_hash();
    if found != model.vocab_hash {
        return Err(Error::VocabMismatch {
            expected: model.vocab_hash.clone(),
            found,
        });
    }
    let text = fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('\t').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let mut out = fs::File::create(&a.output).map_err(|e| Error::io(&a.output, e))?;
    if lines.is_empty() {
        return Ok(());
    }
    let tokens: Vec<Vec<String>> = lines.iter().map(|(_, l)| tokenize(l)).collect();
    if let Some(i) = tokens.iter().position(Vec::is_empty) {
        return Err(Error::Validation(format!("input line {} has no tokens", lines[i].0)));
    }
    let rows: Vec<&[String]> = tokens.iter().map(Vec::as_slice).collect();
    let batch = encode_tokens(&table, &rows, model.max_len);
    let raw = forward(&model.params, &batch, &table)?;
    let scores = class_scores(&model.params, &raw)?;
    let feats = match model.mode() {
        HeadMode::Lmcl => normalize_rows(&raw),
        _ => raw,
    };
    let lofs = detector.lof.score_rows(&feats)?;
    for (((line, text), lof), row) in lines.iter().zip(lofs).zip(scores.rows()) {
        let row = row.to_vec();
        let d = decide_lof_score(lof, &row, detector.config.lof_threshold);
        let prediction = match d.predicted {
            Label::Known(k) => model.classes[k].as_str(),
            Label::Unknown => "unknown",
        };
        let rec = DetectRecord {
            line: *line,
            text,
            prediction,
            lof,
            class_scores: model.classes.iter().map(String::as_str).zip(row).collect(),
        };
        let json = serde_json::to_string(&rec).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(out, "{json}").map_err(|e| Error::io(&a.output, e))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ScoreRecord<'a> {
    id: &'a str,
    label: &'a str,
    lof: f64,
    unknown: bool,
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let detector = DetectorFile::load(&a.detector)?;
    let (ids, labels, rows) = read_features(&a.features)?;
    let lofs = if rows.nrows() == 0 {
        Vec::new()
    } else {
        detector.lof.score_rows(&rows)?
    };
    let mut out = fs::File::create(&a.output).map_err(|e| Error::io(&a.output, e))?;
    for ((id, label), lof) in ids.iter().zip(&labels).zip(lofs) {
        let rec = ScoreRecord {
            id,
            label,
            lof,
            unknown: lof > detector.config.lof_threshold,
        };
        let json = serde_json::to_string(&rec).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(out, "{json}").map_err(|e| Error::io(&a.output, e))?;
    }
    Ok(())
}

fn cmd_evaluate(mut cfg: RunConfig, a: EvaluateArgs) -> Result<()> {
    if let Some(methods) = &a.methods {
        cfg.experiment.methods = methods.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    }
    if let Some(f) = a.fractions {
        cfg.experiment.fractions = f;
    }
    if let Some(r) = a.runs {
        cfg.experiment.runs = r;
    }
    if let Some(s) = a.base_seed {
        cfg.experiment.base_seed = s;
    }
    if let Some(p) = a.parallel_cells {
        cfg.experiment.parallel_cells = p;
    }
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    cfg.validate()?;
    let names: Vec<String> = match &a.datasets {
        Some(n) => n.clone(),
        None => cfg.datasets.iter().map(|d| d.name.clone()).collect(),
    };
    if names.is_empty() {
        return Err(Error::Config("no datasets configured".into()));
    }
    let mut datasets = Vec::new();
    for name in &names {
        let ds = cfg.dataset(Some(name))?;
        let (corpus, table) = cfg.load_dataset(ds)?;
        datasets.push(DatasetInput {
            name: name.clone(),
            corpus,
            table,
        });
    }
    let mut methods = cfg.experiment.methods.clone();
    methods.sort();
    methods.dedup();
    let spec = ExperimentSpec {
        datasets,
        fractions: cfg.experiment.fractions.clone(),
        methods,
        runs: cfg.experiment.runs,
        base_seed: cfg.experiment.base_seed,
        train: cfg.train_config(cfg.train.loss_mode, cfg.experiment.base_seed),
        detection: cfg.detection.clone(),
        parallel_cells: cfg.experiment.parallel_cells,
    };
    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    cfg.write_resolved(&out)?;
    let report = run_experiment(&spec)?;
    report.write_jsonl(&out.join("runs.jsonl"))?;
    report.write_summary(&out.join("summary.json"))?;
    let table = report.render_table();
    fs::write(out.join("table.txt"), &table).map_err(|e| Error::io(out.join("table.txt"), e))?;
    print!("{table}");
    if report.any_completed() {
        Ok(())
    } else {
        Err(Error::Validation("every evaluation cell failed".into()))
    }
}

fn cmd_export(cfg: &RunConfig, a: ExportArgs) -> Result<()> {
    let model = TrainedModel::load(&a.checkpoint)?;
    let ds = cfg.dataset(a.dataset.as_deref())?;
    let (corpus, table) = cfg.load_dataset(ds)?;
    // the checkpoint's max_len wins so features match training
    let corpus = corpus.with_max_len(model.max_len)?;
    let n = export_features(&model, &corpus, &table, a.split, &a.out)?;
    println!("wrote {n} rows to {}", a.out.display());
    Ok(())
}
