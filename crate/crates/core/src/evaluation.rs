//! Open-set evaluation protocol: hold out a weighted-random subset of
//! classes as unknown, train on the rest, detect on the full test split and
//! score with macro-F1 averaged over seeded runs.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, EmbeddingTable, Split};
use crate::detector::{
    decide_doc, decide_lof_score, decide_msp, doc_fit, lof_fit, DetectionConfig, Decision, Label,
};
use crate::encoder::{class_scores, normalize_rows, HeadMode};
use crate::error::{Error, Result};
use crate::objective::{sigmoid, softmax_rows};
use crate::trainer::{encode_ids, extract_features, stream_seed, train, TrainConfig, TrainedModel, TrainingSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Msp,
    Doc,
    DocSoftmax,
    LofSoftmax,
    LofLmcl,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Msp,
        Method::Doc,
        Method::DocSoftmax,
        Method::LofSoftmax,
        Method::LofLmcl,
    ];

    /// Head the method's encoder is trained with.
    pub fn encoder_mode(self) -> HeadMode {
        match self {
            Method::Msp | Method::DocSoftmax | Method::LofSoftmax => HeadMode::Softmax,
            Method::Doc => HeadMode::Sigmoid,
            Method::LofLmcl => HeadMode::Lmcl,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Method::Msp => "msp",
            Method::Doc => "doc",
            Method::DocSoftmax => "doc-softmax",
            Method::LofSoftmax => "lof-softmax",
            Method::LofLmcl => "lof-lmcl",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Msp => "MSP",
            Method::Doc => "DOC",
            Method::DocSoftmax => "DOC (Softmax)",
            Method::LofSoftmax => "LOF (Softmax)",
            Method::LofLmcl => "LOF (LMCL)",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Known-class count for a fraction: rounded half-up, at least 2.
pub fn known_class_count(fraction: f64, total: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("known fraction must be in (0, 1], got {fraction}")));
    }
    if total < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes to hold any out, dataset has {total}"
        )));
    }
    Ok(round_half_up(fraction * total as f64).clamp(2, total))
}

/// Draws `n` classes without replacement; each draw picks among the
/// remaining classes with probability proportional to their counts.
/// Returned in drawing order.
pub fn draw_weighted<R: Rng + ?Sized>(
    counts: &BTreeMap<String, usize>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    if n > counts.len() {
        return Err(Error::Config(format!(
            "cannot draw {n} classes from {}",
            counts.len()
        )));
    }
    let mut remaining: Vec<(&String, usize)> = counts.iter().map(|(c, &n)| (c, n)).collect();
    let mut chosen = Vec::with_capacity(n);
    for _ in 0..n {
        let pick = if remaining.iter().all(|&(_, w)| w == 0) {
            rng.random_range(0..remaining.len())
        } else {
            WeightedIndex::new(remaining.iter().map(|&(_, w)| w))
                .expect("positive total weight")
                .sample(rng)
        };
        chosen.push(remaining.remove(pick).0.clone());
    }
    Ok(chosen)
}

/// `round(fraction * classes)` classes drawn by [`draw_weighted`], seeded.
pub fn sample_known_classes(
    counts: &BTreeMap<String, usize>,
    fraction: f64,
    seed: u64,
) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("known fraction must be in (0, 1], got {fraction}")));
    }
    let n = round_half_up(fraction * counts.len() as f64).min(counts.len());
    if n == 0 {
        return Err(Error::Config(format!(
            "fraction {fraction} of {} classes selects none",
            counts.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_weighted(counts, n, &mut rng)
}

/// One open-set split of a dataset.
#[derive(Debug, Clone)]
pub struct SplitPlan<'a> {
    pub dataset: String,
    pub known_fraction: f64,
    pub seed: u64,
    /// Known classes filtered into training and validation.
    pub training: TrainingSet<'a>,
    pub test_ids: Vec<usize>,
    /// Known-class index, or unknown for held-out classes.
    pub test_gold: Vec<Label>,
}

impl<'a> SplitPlan<'a> {
    pub fn sampled(dataset: &str, corpus: &'a Corpus, fraction: f64, seed: u64) -> Result<Self> {
        let counts = corpus.train_class_counts();
        let n = known_class_count(fraction, counts.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "known-classes", 0));
        let known = draw_weighted(&counts, n, &mut rng)?;
        Self::with_classes(dataset, corpus, &known, fraction, seed)
    }

    pub fn with_classes(
        dataset: &str,
        corpus: &'a Corpus,
        known: &[String],
        fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let training = TrainingSet::new(corpus, known)?;
        let test_ids = corpus.split_indices(Split::Test);
        let test_gold = test_ids
            .iter()
            .map(|&i| {
                let label = &corpus.utterances[i].label;
                match training.classes.binary_search(label) {
                    Ok(k) => Label::Known(k),
                    Err(_) => Label::Unknown,
                }
            })
            .collect();
        Ok(SplitPlan {
            dataset: dataset.to_owned(),
            known_fraction: fraction,
            seed,
            training,
            test_ids,
            test_gold,
        })
    }

    pub fn known_classes(&self) -> &[String] {
        &self.training.classes
    }

    /// Fails if any training or validation utterance belongs to a class
    /// outside the known set.
    pub fn check_leakage(&self) -> Result<()> {
        let corpus = self.training.corpus;
        for &i in self.training.train.ids.iter().chain(&self.training.validation.ids) {
            let label = &corpus.utterances[i].label;
            if self.training.classes.binary_search(label).is_err() {
                return Err(Error::Validation(format!(
                    "utterance {i} of unknown class `{label}` leaked into training"
                )));
            }
        }
        Ok(())
    }
}

/// Per-label F1 with `F1 = 0` whenever precision + recall is zero.
pub fn f1_for(predicted: &[Label], gold: &[Label], label: Label) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&p, &g) in predicted.iter().zip(gold) {
        match (p == label, g == label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Unweighted mean of per-label F1 over `scope`.
pub fn macro_f1(predicted: &[Label], gold: &[Label], scope: &[Label]) -> f64 {
    assert_eq!(predicted.len(), gold.len(), "prediction/gold length mismatch");
    if scope.is_empty() {
        return 0.0;
    }
    scope.iter().map(|&l| f1_for(predicted, gold, l)).sum::<f64>() / scope.len() as f64
}

/// Known classes `0..known` followed by the unknown label.
pub fn full_scope(known: usize) -> Vec<Label> {
    (0..known).map(Label::Known).chain([Label::Unknown]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub macro_f1_all: f64,
    pub f1_unknown: f64,
}

pub fn f1_scores(predicted: &[Label], gold: &[Label], known: usize) -> F1Scores {
    F1Scores {
        macro_f1_all: macro_f1(predicted, gold, &full_scope(known)),
        f1_unknown: macro_f1(predicted, gold, &[Label::Unknown]),
    }
}

/// `(known + 1) x (known + 1)` counts, gold on rows, predictions on
/// columns; the last row/column is the unknown label.
pub fn confusion(predicted: &[Label], gold: &[Label], known: usize) -> Vec<Vec<usize>> {
    let idx = |l: Label| match l {
        Label::Known(k) => k,
        Label::Unknown => known,
    };
    let mut m = vec![vec![0; known + 1]; known + 1];
    for (&p, &g) in predicted.iter().zip(gold) {
        m[idx(g)][idx(p)] += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub fraction: f64,
    pub method: Method,
    pub seed: u64,
    pub known_classes: Vec<String>,
    pub macro_f1_all: f64,
    pub f1_unknown: f64,
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dataset: String,
    pub fraction: f64,
    pub method: Method,
    pub runs: usize,
    pub runs_expected: usize,
    pub mean_macro_f1_all: f64,
    pub mean_f1_unknown: f64,
}

impl Aggregate {
    pub fn complete(&self) -> bool {
        self.runs == self.runs_expected
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub dataset: String,
    pub fraction: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub datasets: Vec<String>,
    pub fractions: Vec<f64>,
    pub methods: Vec<Method>,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub detection: DetectionConfig,
    pub records: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
    pub failures: Vec<CellFailure>,
}

/// A loaded dataset ready for the grid.
pub struct DatasetInput {
    pub name: String,
    pub corpus: Corpus,
    pub table: EmbeddingTable,
}

pub struct ExperimentSpec {
    pub datasets: Vec<DatasetInput>,
    pub fractions: Vec<f64>,
    pub methods: Vec<Method>,
    pub runs: usize,
    pub base_seed: u64,
    /// Shared training settings; the loss mode and seed are set per encoder.
    pub train: TrainConfig,
    pub detection: DetectionConfig,
    /// Grid cells evaluated concurrently.
    pub parallel_cells: usize,
}

/// Decisions of every requested method on one split.
pub struct CellOutcome {
    pub decisions: BTreeMap<Method, Vec<Decision>>,
    pub gold: Vec<Label>,
    pub known: usize,
}

fn train_encoder(
    plan: &SplitPlan<'_>,
    table: &EmbeddingTable,
    base: &TrainConfig,
    mode: HeadMode,
) -> Result<TrainedModel> {
    let cfg = TrainConfig {
        loss_mode: mode,
        seed: plan.seed,
        ..base.clone()
    };
    let (model, _) = train(&plan.training, table, &cfg)?;
    Ok(model)
}

/// Trains the encoders the methods need on `plan` and decides on its test
/// split.
pub fn evaluate_plan(
    plan: &SplitPlan<'_>,
    table: &EmbeddingTable,
    methods: &[Method],
    train_cfg: &TrainConfig,
    detection: &DetectionConfig,
) -> Result<CellOutcome> {
    plan.check_leakage()?;
    detection.validate()?;
    let corpus = plan.training.corpus;
    let train_ids = &plan.training.train.ids;
    let mut modes: Vec<HeadMode> = methods.iter().map(|m| m.encoder_mode()).collect();
    modes.sort_by_key(|m| *m as u8);
    modes.dedup();

    let mut decisions = BTreeMap::new();
    for mode in modes {
        let model = train_encoder(plan, table, train_cfg, mode)?;
        let test_raw = encode_ids(&model.params, corpus, table, &plan.test_ids)?;
        let test_scores = class_scores(&model.params, &test_raw)?;
        let train_raw = encode_ids(&model.params, corpus, table, train_ids)?;
        let train_scores = class_scores(&model.params, &train_raw)?;

        for &method in methods.iter().filter(|m| m.encoder_mode() == mode) {
            let made: Vec<Decision> = match method {
                Method::Msp => softmax_rows(&test_scores)
                    .rows()
                    .into_iter()
                    .map(|p| decide_msp(p.as_slice().expect("contiguous"), detection))
                    .collect(),
                Method::Doc | Method::DocSoftmax => {
                    let (train_p, test_p) = if method == Method::Doc {
                        (train_scores.mapv(sigmoid), test_scores.mapv(sigmoid))
                    } else {
                        (softmax_rows(&train_scores), softmax_rows(&test_scores))
                    };
                    let thresholds =
                        doc_fit(&train_p, &plan.training.train.labels, detection.doc_risk_factor);
                    test_p
                        .rows()
                        .into_iter()
                        .map(|p| decide_doc(p.as_slice().expect("contiguous"), &thresholds))
                        .collect()
                }
                Method::LofSoftmax | Method::LofLmcl => {
                    let (reference, queries) = if mode == HeadMode::Lmcl {
                        (normalize_rows(&train_raw), normalize_rows(&test_raw))
                    } else {
                        (train_raw.clone(), test_raw.clone())
                    };
                    let k = detection.lof_k.min(reference.nrows().saturating_sub(1));
                    let lof = lof_fit(&reference, k)?;
                    let scores = lof.score_rows(&queries)?;
                    scores
                        .iter()
                        .zip(test_scores.rows())
                        .map(|(&s, row)| {
                            decide_lof_score(s, row.as_slice().expect("contiguous"), detection.lof_threshold)
                        })
                        .collect()
                }
            };
            decisions.insert(method, made);
        }
    }
    Ok(CellOutcome {
        decisions,
        gold: plan.test_gold.clone(),
        known: plan.known_classes().len(),
    })
}

struct Cell {
    dataset: usize,
    fraction: f64,
    seed: u64,
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    if spec.runs == 0 {
        return Err(Error::Config("runs must be positive".into()));
    }
    if spec.methods.is_empty() || spec.fractions.is_empty() || spec.datasets.is_empty() {
        return Err(Error::Config("experiment grid is empty".into()));
    }
    spec.detection.validate()?;
    spec.train.validate()?;
    let seeds: Vec<u64> = (0..spec.runs as u64).map(|i| spec.base_seed + i).collect();
    let mut cells = Vec::new();
    for (d, _) in spec.datasets.iter().enumerate() {
        for &fraction in &spec.fractions {
            for &seed in &seeds {
                cells.push(Cell {
                    dataset: d,
                    fraction,
                    seed,
                });
            }
        }
    }

    let results: Mutex<Vec<(usize, Result<Vec<RunRecord>>)>> = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let workers = spec.parallel_cells.max(1).min(cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let out = run_cell(spec, cell);
                results.lock().expect("poisoned").push((i, out));
            });
        }
    });
    let mut results = results.into_inner().expect("poisoned");
    results.sort_by_key(|(i, _)| *i);

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (i, out) in results {
        let cell = &cells[i];
        match out {
            Ok(recs) => records.extend(recs),
            Err(e) => failures.push(CellFailure {
                dataset: spec.datasets[cell.dataset].name.clone(),
                fraction: cell.fraction,
                seed: cell.seed,
                error: e.to_string(),
            }),
        }
    }

    let mut aggregates = Vec::new();
    for ds in &spec.datasets {
        for &fraction in &spec.fractions {
            for &method in &spec.methods {
                let runs: Vec<&RunRecord> = records
                    .iter()
                    .filter(|r| r.dataset == ds.name && r.fraction == fraction && r.method == method)
                    .collect();
                let n = runs.len();
                let mean = |f: fn(&RunRecord) -> f64| {
                    if n == 0 {
                        f64::NAN
                    } else {
                        runs.iter().map(|r| f(r)).sum::<f64>() / n as f64
                    }
                };
                aggregates.push(Aggregate {
                    dataset: ds.name.clone(),
                    fraction,
                    method,
                    runs: n,
                    runs_expected: spec.runs,
                    mean_macro_f1_all: mean(|r| r.macro_f1_all),
                    mean_f1_unknown: mean(|r| r.f1_unknown),
                });
            }
        }
    }

    Ok(ExperimentReport {
        datasets: spec.datasets.iter().map(|d| d.name.clone()).collect(),
        fractions: spec.fractions.clone(),
        methods: spec.methods.clone(),
        runs: spec.runs,
        seeds,
        detection: spec.detection.clone(),
        records,
        aggregates,
        failures,
    })
}

fn run_cell(spec: &ExperimentSpec, cell: &Cell) -> Result<Vec<RunRecord>> {
    let ds = &spec.datasets[cell.dataset];
    let plan = SplitPlan::sampled(&ds.name, &ds.corpus, cell.fraction, cell.seed)?;
    let outcome = evaluate_plan(&plan, &ds.table, &spec.methods, &spec.train, &spec.detection)?;
    Ok(spec
        .methods
        .iter()
        .map(|&method| {
            let predicted: Vec<Label> = outcome.decisions[&method].iter().map(|d| d.predicted).collect();
            let scores = f1_scores(&predicted, &outcome.gold, outcome.known);
            RunRecord {
                dataset: ds.name.clone(),
                fraction: cell.fraction,
                method,
                seed: cell.seed,
                known_classes: plan.known_classes().to_vec(),
                macro_f1_all: scores.macro_f1_all,
                f1_unknown: scores.f1_unknown,
                confusion: confusion(&predicted, &outcome.gold, outcome.known),
            }
        })
        .collect())
}

impl ExperimentReport {
    pub fn aggregate(&self, dataset: &str, fraction: f64, method: Method) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.dataset == dataset && a.fraction == fraction && a.method == method)
    }

    /// True when at least one grid cell produced records.
    pub fn any_completed(&self) -> bool {
        !self.records.is_empty()
    }

    /// Methods down the side, dataset x fraction across, scores x 100.
    /// Cells with missing runs carry a `*`.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        for (title, pick) in [
            ("F1 of the unknown class", (|a: &Aggregate| a.mean_f1_unknown) as fn(&Aggregate) -> f64),
            ("Macro F1 over known classes + unknown", |a: &Aggregate| a.mean_macro_f1_all),
        ] {
            let _ = writeln!(out, "{title} (mean over {} run(s))", self.runs);
            let mut header = format!("{:<16}", "");
            for ds in &self.datasets {
                for f in &self.fractions {
                    let col = format!("{} {}%", ds.to_uppercase(), (f * 100.0).round());
                    let _ = write!(header, " {col:>12}");
                }
            }
            let _ = writeln!(out, "{header}");
            for &method in &self.methods {
                let mut line = format!("{:<16}", method.to_string());
                for ds in &self.datasets {
                    for &f in &self.fractions {
                        let cell = match self.aggregate(ds, f, method) {
                            Some(a) if a.runs > 0 => {
                                let mark = if a.complete() { "" } else { "*" };
                                format!("{:.1}{mark}", 100.0 * pick(a))
                            }
                            _ => "-".to_owned(),
                        };
                        let _ = write!(line, " {cell:>12}");
                    }
                }
                let _ = writeln!(out, "{line}");
            }
            let _ = writeln!(out);
        }
        let d = &self.detection;
        let _ = writeln!(
            out,
            "assumed settings: lof_k={} lof_threshold={} msp_threshold={} doc_risk_factor={}",
            d.lof_k, d.lof_threshold, d.msp_threshold, d.doc_risk_factor
        );
        for f in &self.failures {
            let _ = writeln!(
                out,
                "incomplete: {} {}% seed {}: {}",
                f.dataset,
                (f.fraction * 100.0).round(),
                f.seed,
                f.error
            );
        }
        out
    }

    /// One JSON record per run.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Tab-separated `id`, gold label, then one column per feature.
pub fn render_features(corpus: &Corpus, rows: &Array2<f64>, ids: &[usize]) -> String {
    let mut out = String::from("id\tlabel");
    for j in 0..rows.ncols() {
        let _ = write!(out, "\tf{j}");
    }
    out.push('\n');
    for (row, &id) in rows.rows().into_iter().zip(ids) {
        let _ = write!(out, "{id}\t{}", corpus.utterances[id].label);
        for v in row {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

pub fn export_features(
    model: &TrainedModel,
    corpus: &Corpus,
    table: &EmbeddingTable,
    split: Split,
    out: &Path,
) -> Result<usize> {
    let ids = corpus.split_indices(split);
    let feats = extract_features(model, corpus, table, &ids)?;
    fs::write(out, render_features(corpus, &feats.rows, &ids)).map_err(|e| Error::io(out, e))?;
    Ok(ids.len())
}

/// Reads a file written by [`export_features`]: `(id, label, features)`.
pub fn read_features(path: &Path) -> Result<(Vec<String>, Vec<String>, Array2<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let dim = match lines.next() {
        Some((_, header)) => header.split('\t').count().saturating_sub(2),
        None => return Err(Error::Validation(format!("{}: missing header", path.display()))),
    };
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != dim + 2 {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: format!("expected {} columns, found {}", dim + 2, cols.len()),
            });
        }
        ids.push(cols[0].to_owned());
        labels.push(cols[1].to_owned());
        for v in &cols[2..] {
            values.push(v.parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: format!("bad float `{v}`: {e}"),
            })?);
        }
    }
    let rows = Array2::from_shape_vec((ids.len(), dim), values).expect("row widths checked");
    Ok((ids, labels, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Known, Unknown};

    #[test]
    fn hand_computed_macro_f1() {
        let gold = [Known(0), Known(0), Known(1), Unknown];
        let pred = [Known(0), Known(1), Known(1), Unknown];
        let s = f1_scores(&pred, &gold, 2);
        assert!((s.macro_f1_all - 7.0 / 9.0).abs() < 1e-15);
        assert_eq!(s.f1_unknown, 1.0);
        assert_eq!(f1_scores(&gold, &gold, 2).macro_f1_all, 1.0);
    }

    #[test]
    fn never_rejecting_scores_zero_on_unknown() {
        let gold = [Known(0), Unknown, Unknown, Known(1)];
        let pred = [Known(0), Known(0), Known(1), Known(1)];
        assert_eq!(f1_scores(&pred, &gold, 2).f1_unknown, 0.0);
    }

    #[test]
    fn known_count_rounding() {
        assert_eq!(known_class_count(0.25, 7).unwrap(), 2);
        assert_eq!(known_class_count(0.5, 7).unwrap(), 4);
        assert_eq!(known_class_count(0.75, 7).unwrap(), 5);
        assert_eq!(known_class_count(0.25, 18).unwrap(), 5);
        assert_eq!(known_class_count(0.5, 18).unwrap(), 9);
        assert_eq!(known_class_count(0.75, 18).unwrap(), 14);
        assert_eq!(known_class_count(0.1, 4).unwrap(), 2);
        assert!(known_class_count(0.5, 1).is_err());
        assert!(known_class_count(0.0, 5).is_err());
    }

    #[test]
    fn sampling_edge_cases() {
        let counts: BTreeMap<String, usize> =
            [("a".to_string(), 999_999), ("b".to_string(), 1)].into_iter().collect();
        let a_wins = (0..200)
            .filter(|&s| sample_known_classes(&counts, 0.5, s).unwrap() == ["a"])
            .count();
        assert_eq!(a_wins, 200);

        let counts: BTreeMap<String, usize> =
            (0..6).map(|i| (format!("c{i}"), i * 10)).collect();
        for seed in 0..20 {
            let mut all = sample_known_classes(&counts, 1.0 - 1e-9, seed).unwrap();
            all.sort();
            assert_eq!(all, counts.keys().cloned().collect::<Vec<_>>());
        }
        let a = sample_known_classes(&counts, 0.5, 42).unwrap();
        assert_eq!(a, sample_known_classes(&counts, 0.5, 42).unwrap());
    }

    #[test]
    fn method_ids_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.id().parse::<Method>().unwrap(), m);
        }
        assert!("lof".parse::<Method>().is_err());
    }
}
