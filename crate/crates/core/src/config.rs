//! TOML run configuration.
//!
//! ```toml
//! output_dir = "runs/snips"
//!
//! [[datasets]]
//! name = "snips"
//! path = "data/snips"
//!
//! [embedding]
//! path = "glove.840B.300d.txt"
//! dim = 300
//!
//! [train]
//! loss_mode = "lmcl"
//!
//! [experiment]
//! fractions = [0.25, 0.5, 0.75]
//! runs = 10
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{build_embeddings, load_corpus, Corpus, DatasetFormat, EmbeddingTable};
use crate::detector::DetectionConfig;
use crate::error::{Error, Result};
use crate::evaluation::Method;
use crate::objective::LmclConfig;
use crate::trainer::TrainConfig;

pub const OUTPUT_DIR_ENV: &str = "OPEN_INTENT_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub format: DatasetFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    /// Whitespace-separated `word v1 .. vd` lines. Without it every word
    /// gets a seeded random vector.
    pub path: Option<PathBuf>,
    pub dim: usize,
    pub oov_seed: u64,
    pub trainable: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            path: None,
            dim: 300,
            oov_seed: 0,
            trainable: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden: usize,
    /// Defaults to the longest training utterance.
    pub max_len: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 64,
            max_len: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub fractions: Vec<f64>,
    pub methods: Vec<Method>,
    pub runs: usize,
    pub base_seed: u64,
    pub parallel_cells: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            fractions: vec![0.25, 0.5, 0.75],
            methods: Method::ALL.to_vec(),
            runs: 10,
            base_seed: 0,
            parallel_cells: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub datasets: Vec<DatasetConfig>,
    pub embedding: EmbeddingConfig,
    pub encoder: EncoderConfig,
    /// `hidden`, `lmcl` and `trainable_embeddings` here are overwritten from
    /// the `encoder`, `lmcl` and `embedding` sections.
    pub train: TrainConfig,
    pub lmcl: LmclConfig,
    pub detection: DetectionConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs"),
            datasets: Vec::new(),
            embedding: EmbeddingConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            lmcl: LmclConfig::default(),
            detection: DetectionConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

/// Sets `a.b.c = value` in a TOML tree. The value is parsed as TOML and
/// falls back to a plain string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `key=value`
    /// overrides, then the output directory environment variable.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut tree = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let mut cfg: RunConfig = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.lmcl.validate()?;
        self.detection.validate()?;
        self.train_config(self.train.loss_mode, self.train.seed).validate()?;
        if self.embedding.dim == 0 {
            return Err(Error::Config("embedding.dim must be positive".into()));
        }
        if let Some(f) = self.experiment.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
        }
        if self.experiment.runs == 0 {
            return Err(Error::Config("experiment.runs must be positive".into()));
        }
        Ok(())
    }

    /// Training settings with the encoder, margin and embedding sections
    /// folded in.
    pub fn train_config(&self, mode: crate::encoder::HeadMode, seed: u64) -> TrainConfig {
        TrainConfig {
            loss_mode: mode,
            seed,
            hidden: self.encoder.hidden,
            lmcl: self.lmcl,
            trainable_embeddings: self.embedding.trainable,
            ..self.train.clone()
        }
    }

    /// The configuration as it will actually be used.
    pub fn resolved(&self) -> RunConfig {
        let mut out = self.clone();
        out.train = self.train_config(self.train.loss_mode, self.train.seed);
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.resolved()).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.toml");
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Dataset by name, or the first one when `name` is `None`.
    pub fn dataset(&self, name: Option<&str>) -> Result<&DatasetConfig> {
        match name {
            Some(n) => self
                .datasets
                .iter()
                .find(|d| d.name == n)
                .ok_or_else(|| Error::Config(format!("no dataset named `{n}` in the configuration"))),
            None => self
                .datasets
                .first()
                .ok_or_else(|| Error::Config("no datasets configured".into())),
        }
    }

    pub fn load_dataset(&self, ds: &DatasetConfig) -> Result<(Corpus, EmbeddingTable)> {
        let mut corpus = load_corpus(&ds.path, ds.format)?;
        if let Some(n) = self.encoder.max_len {
            corpus = corpus.with_max_len(n)?;
        }
        if let Some(p) = &self.embedding.path {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "embedding file {} does not exist",
                    p.display()
                )));
            }
        }
        let table = build_embeddings(
            &corpus,
            self.embedding.path.as_deref(),
            self.embedding.dim,
            self.embedding.oov_seed,
        )?;
        Ok((corpus, table))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::HeadMode;

    #[test]
    fn defaults_survive_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg.resolved());
        assert_eq!(back.lmcl, LmclConfig { s: 30.0, m: 0.35 });
    }

    #[test]
    fn overrides_use_flat_keys() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "lmcl.m=0.2").unwrap();
        apply_override(&mut t, "train.loss_mode=softmax").unwrap();
        apply_override(&mut t, "experiment.fractions=[0.5]").unwrap();
        let cfg: RunConfig = t.try_into().unwrap();
        assert_eq!(cfg.lmcl.m, 0.2);
        assert_eq!(cfg.train.loss_mode, HeadMode::Softmax);
        assert_eq!(cfg.experiment.fractions, vec![0.5]);
        assert!(apply_override(&mut toml::Table::new(), "nokey").is_err());
    }

    #[test]
    fn sections_fold_into_training() {
        let mut cfg = RunConfig::default();
        cfg.encoder.hidden = 8;
        cfg.lmcl.m = 0.1;
        cfg.embedding.trainable = true;
        let t = cfg.train_config(HeadMode::Lmcl, 4);
        assert_eq!((t.hidden, t.lmcl.m, t.trainable_embeddings, t.seed), (8, 0.1, true, 4));
    }

    #[test]
    fn invalid_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "[lmcl]\nm = 1.5\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&p), &[]), Err(Error::Config(_))));
        fs::write(&p, "[experiment]\nfractions = [0.0]\n").unwrap();
        assert!(RunConfig::load(Some(&p), &[]).is_err());
    }
}
