//! Mini-batch Adam training with validation-based early stopping.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{encode_batch, Corpus, EmbeddingTable, Split};
use crate::detector::argmax;
use crate::encoder::checkpoint::Checkpoint;
use crate::encoder::{
    self, backward_into, class_scores, forward_train, head_backward, normalize_rows, EncoderParams,
    FeatureMatrix, HeadMode,
};
use crate::error::{Error, Result};
use crate::objective::{lmcl, sigmoid_bce, softmax_ce, LmclConfig, LossOutput};

/// Rows per inference batch when extracting features.
const INFERENCE_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_mode: HeadMode,
    pub hidden: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub seed: u64,
    pub lmcl: LmclConfig,
    pub trainable_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_mode: HeadMode::Lmcl,
            hidden: 64,
            batch_size: 128,
            max_epochs: 200,
            patience: 10,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            seed: 0,
            lmcl: LmclConfig::default(),
            trainable_embeddings: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "hidden, batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("learning_rate and clip_norm must be positive".into()));
        }
        self.lmcl.validate()
    }
}

/// Derives an independent RNG seed for a named stream.
pub fn stream_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Corpus indices and known-class labels for one split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledIds {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
}

/// The training and validation utterances of the known classes.
#[derive(Debug, Clone)]
pub struct TrainingSet<'a> {
    pub corpus: &'a Corpus,
    /// Known class names; a label `i` refers to `classes[i]`.
    pub classes: Vec<String>,
    pub train: LabeledIds,
    pub validation: LabeledIds,
}

impl<'a> TrainingSet<'a> {
    /// Keeps only utterances whose label is in `known`.
    pub fn new(corpus: &'a Corpus, known: &[String]) -> Result<Self> {
        let mut classes = known.to_vec();
        classes.sort();
        classes.dedup();
        if let Some(c) = classes.iter().find(|c| corpus.class_index(c).is_none()) {
            return Err(Error::Config(format!("known class `{c}` is not in the corpus")));
        }
        let pick = |split: Split| {
            let mut out = LabeledIds::default();
            for (i, u) in corpus.utterances.iter().enumerate() {
                if u.split != split {
                    continue;
                }
                if let Ok(label) = classes.binary_search(&u.label) {
                    out.ids.push(i);
                    out.labels.push(label);
                }
            }
            out
        };
        let set = TrainingSet {
            corpus,
            train: pick(Split::Train),
            validation: pick(Split::Validation),
            classes,
        };
        if set.train.ids.is_empty() {
            return Err(Error::Validation("no training utterances for the known classes".into()));
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for rec in &self.epochs {
            let line = serde_json::to_string(rec).map_err(|e| Error::Serde(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Trained parameters plus everything needed to apply them again.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: EncoderParams,
    pub classes: Vec<String>,
    pub max_len: usize,
    pub vocab_hash: String,
    pub lmcl: Option<LmclConfig>,
}

impl TrainedModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            &self.params,
            self.max_len,
            self.vocab_hash.clone(),
            self.classes.clone(),
            self.lmcl,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(TrainedModel {
            params: ck.params()?,
            classes: ck.classes.clone(),
            max_len: ck.max_len,
            vocab_hash: ck.vocab_hash.clone(),
            lmcl: ck.lmcl,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn mode(&self) -> HeadMode {
        self.params.mode
    }
}

struct Adam {
    m: EncoderParams,
    v: EncoderParams,
    step: i32,
}

impl Adam {
    fn new(params: &EncoderParams) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut EncoderParams, grads: &EncoderParams, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        let lr = cfg.learning_rate;
        for ((((_, p), (_, m)), (_, v)), (_, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads.tensors())
        {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

fn clip_gradients(grads: &mut EncoderParams, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in grads.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// Loss of a batch of class scores under the head's training objective.
pub fn batch_loss(
    mode: HeadMode,
    scores: &Array2<f64>,
    labels: &[usize],
    lmcl_cfg: &LmclConfig,
) -> Result<LossOutput> {
    match mode {
        HeadMode::Softmax => softmax_ce(scores, labels),
        HeadMode::Lmcl => lmcl(scores, labels, lmcl_cfg),
        HeadMode::Sigmoid => sigmoid_bce(scores, labels),
    }
}

/// Loss and full parameter gradient for one mini-batch.
pub fn loss_and_gradients(
    params: &EncoderParams,
    corpus: &Corpus,
    table: &EmbeddingTable,
    ids: &[usize],
    labels: &[usize],
    lmcl_cfg: &LmclConfig,
) -> Result<(f64, EncoderParams)> {
    let batch = encode_batch(corpus, table, ids);
    let pass = forward_train(params, &batch, table)?;
    let scores = class_scores(params, &pass.features)?;
    let loss = batch_loss(params.mode, &scores, labels, lmcl_cfg)?;
    let mut grads = params.zeros_like();
    let d_features = head_backward(params, &pass.features, &loss.score_gradients, &mut grads)?;
    backward_into(params, &pass, &d_features, &mut grads)?;
    Ok((loss.value, grads))
}

/// Encoder features for `ids`, in order, computed in parallel batches.
pub fn encode_ids(
    params: &EncoderParams,
    corpus: &Corpus,
    table: &EmbeddingTable,
    ids: &[usize],
) -> Result<Array2<f64>> {
    if ids.is_empty() {
        return Ok(Array2::zeros((0, params.feature_dim())));
    }
    let parts: Vec<Array2<f64>> = ids
        .par_chunks(INFERENCE_BATCH)
        .map(|chunk| encoder::forward(params, &encode_batch(corpus, table, chunk), table))
        .collect::<Result<_>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
}

/// Fraction of `labels` matched by the argmax of the raw class scores.
pub fn accuracy(
    params: &EncoderParams,
    corpus: &Corpus,
    table: &EmbeddingTable,
    split: &LabeledIds,
) -> Result<f64> {
    if split.ids.is_empty() {
        return Ok(0.0);
    }
    let feats = encode_ids(params, corpus, table, &split.ids)?;
    let scores = class_scores(params, &feats)?;
    let correct = scores
        .rows()
        .into_iter()
        .zip(&split.labels)
        .filter(|(row, &y)| argmax(row.as_slice().expect("contiguous")) == y)
        .count();
    Ok(correct as f64 / split.ids.len() as f64)
}

pub fn train(
    data: &TrainingSet<'_>,
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainReport)> {
    cfg.validate()?;
    let corpus = data.corpus;
    let mut init_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "init", 0));
    let mut params = EncoderParams::init(
        cfg.loss_mode,
        table.dim(),
        cfg.hidden,
        data.classes.len(),
        &mut init_rng,
    );
    if cfg.trainable_embeddings {
        params.embedding = Some(table.vectors.clone());
    }
    let mut adam = Adam::new(&params);
    // an empty validation split falls back to the training split
    let validation = if data.validation.ids.is_empty() {
        &data.train
    } else {
        &data.validation
    };

    let mut best = params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..data.train.ids.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "shuffle", epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let ids: Vec<usize> = chunk.iter().map(|&i| data.train.ids[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.train.labels[i]).collect();
            let step = loss_and_gradients(&params, corpus, table, &ids, &labels, &cfg.lmcl);
            let (loss, mut grads) = match step {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                        last_finite: Box::new(best),
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss,
                    last_finite: Box::new(best),
                });
            }
            total += loss * ids.len() as f64;
            clip_gradients(&mut grads, cfg.clip_norm);
            adam.update(&mut params, &grads, cfg);
        }
        let train_loss = total / data.train.ids.len() as f64;
        let val_acc = accuracy(&params, corpus, table, validation)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
        });
        if val_acc > best_acc {
            best_acc = val_acc;
            best_epoch = epoch;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let report = TrainReport {
        epochs_run: epochs.len(),
        best_epoch,
        best_validation_accuracy: best_acc,
        epochs,
        checkpoint: None,
    };
    let model = TrainedModel {
        params: best,
        classes: data.classes.clone(),
        max_len: corpus.max_len,
        vocab_hash: table.vocab_hash(),
        lmcl: (cfg.loss_mode == HeadMode::Lmcl).then_some(cfg.lmcl),
    };
    Ok((model, report))
}

/// Features for `ids` in order. LMCL-mode rows are L2-normalized; the other
/// heads return raw features.
pub fn extract_features(
    model: &TrainedModel,
    corpus: &Corpus,
    table: &EmbeddingTable,
    ids: &[usize],
) -> Result<FeatureMatrix> {
    let found = table.vocab_hash();
    if found != model.vocab_hash {
        return Err(Error::VocabMismatch {
            expected: model.vocab_hash.clone(),
            found,
        });
    }
    if corpus.max_len != model.max_len {
        return Err(Error::Contract(format!(
            "corpus max_len {} differs from the trained model's {}",
            corpus.max_len, model.max_len
        )));
    }
    let rows = encode_ids(&model.params, corpus, table, ids)?;
    let rows = match model.mode() {
        HeadMode::Lmcl => normalize_rows(&rows),
        HeadMode::Softmax | HeadMode::Sigmoid => rows,
    };
    Ok(FeatureMatrix {
        rows,
        row_ids: ids.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_embeddings, tokenize, Utterance};

    fn toy_corpus() -> Corpus {
        let mut utterances = Vec::new();
        let rows = [
            ("play some jazz music", "music", Split::Train),
            ("play a rock song", "music", Split::Train),
            ("put on music please", "music", Split::Train),
            ("play my song", "music", Split::Train),
            ("start the music", "music", Split::Train),
            ("what is the weather", "weather", Split::Train),
            ("will it rain tomorrow", "weather", Split::Train),
            ("is it sunny today", "weather", Split::Train),
            ("weather forecast please", "weather", Split::Train),
            ("will it snow", "weather", Split::Train),
            ("play jazz", "music", Split::Validation),
            ("rain today", "weather", Split::Validation),
            ("book a table", "restaurant", Split::Test),
        ];
        for (t, l, s) in rows {
            utterances.push(Utterance {
                tokens: tokenize(t),
                label: l.into(),
                split: s,
            });
        }
        Corpus::new(utterances, None).unwrap()
    }

    fn small_cfg(mode: HeadMode) -> TrainConfig {
        TrainConfig {
            loss_mode: mode,
            hidden: 8,
            batch_size: 4,
            max_epochs: 50,
            patience: 50,
            learning_rate: 0.01,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_toy_corpus_is_learned() {
        let corpus = toy_corpus();
        let table = build_embeddings(&corpus, None, 10, 0).unwrap();
        let known = vec!["music".to_string(), "weather".to_string()];
        let mut data = TrainingSet::new(&corpus, &known).unwrap();
        assert_eq!(data.train.ids.len(), 10);
        // select on training accuracy so the returned model is the final fit
        data.validation = data.train.clone();
        for mode in [HeadMode::Softmax, HeadMode::Lmcl, HeadMode::Sigmoid] {
            let (model, report) = train(&data, &table, &small_cfg(mode)).unwrap();
            let acc = accuracy(&model.params, &corpus, &table, &data.train).unwrap();
            assert!(acc >= 0.99, "{mode}: training accuracy {acc}");
            let losses: Vec<f64> = report.epochs.iter().map(|e| e.train_loss).collect();
            let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
            let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
            assert!(head > tail, "{mode}: loss did not decrease ({head} vs {tail})");
        }
    }

    #[test]
    fn early_stopping_contract_and_determinism() {
        let corpus = toy_corpus();
        let table = build_embeddings(&corpus, None, 10, 0).unwrap();
        let known = vec!["music".to_string(), "weather".to_string()];
        let data = TrainingSet::new(&corpus, &known).unwrap();
        let cfg = TrainConfig {
            patience: 3,
            max_epochs: 200,
            ..small_cfg(HeadMode::Lmcl)
        };
        let (model, report) = train(&data, &table, &cfg).unwrap();
        assert!(report.epochs_run < 200);
        assert!(report.best_epoch < report.epochs_run);
        assert_eq!(report.epochs_run - report.best_epoch, 3);
        let best = report.epochs[report.best_epoch - 1].val_acc;
        assert_eq!(best, report.best_validation_accuracy);
        assert!(report.epochs[report.best_epoch..].iter().all(|e| e.val_acc <= best));

        let (model2, report2) = train(&data, &table, &cfg).unwrap();
        assert_eq!(report, report2);
        assert_eq!(model, model2);
    }

    #[test]
    fn extraction_contracts() {
        let corpus = toy_corpus();
        let table = build_embeddings(&corpus, None, 10, 0).unwrap();
        let known = vec!["music".to_string(), "weather".to_string()];
        let data = TrainingSet::new(&corpus, &known).unwrap();
        let cfg = TrainConfig {
            max_epochs: 3,
            ..small_cfg(HeadMode::Lmcl)
        };
        let (model, _) = train(&data, &table, &cfg).unwrap();
        let all: Vec<usize> = (0..corpus.utterances.len()).collect();
        let f = extract_features(&model, &corpus, &table, &all).unwrap();
        assert_eq!(f.dim(), 16);
        for row in f.rows.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        }
        assert_eq!(f, extract_features(&model, &corpus, &table, &all).unwrap());
        let empty = extract_features(&model, &corpus, &table, &[]).unwrap();
        assert!(empty.is_empty());

        let mut other = corpus.clone();
        other.utterances[0].tokens.push("unseen".into());
        let other_table = build_embeddings(&other, None, 10, 0).unwrap();
        assert!(matches!(
            extract_features(&model, &other, &other_table, &all),
            Err(Error::VocabMismatch { .. })
        ));
    }

    #[test]
    fn unknown_known_class_rejected() {
        let corpus = toy_corpus();
        assert!(TrainingSet::new(&corpus, &["nope".to_string()]).is_err());
    }
}
