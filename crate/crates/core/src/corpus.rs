//! Dataset ingestion, tokenization, vocabulary and pretrained word vectors.
//!
//! Two on-disk layouts are understood:
//!
//! * SNIPS-style: a directory with one sub-directory per split. Each split is
//!   either a `seq.in`/`label` pair, a set of per-intent files (file stem is
//!   the intent, one utterance per line), or a `<split>.tsv` file holding
//!   `text<TAB>label` rows. A single delimited file is also accepted.
//! * ATIS-style: `*.iob` files whose lines read
//!   `BOS w1 .. wn EOS<TAB>O B-x .. intent`; slot tags are ignored.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";
const OOV_RANGE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    fn from_name(name: &str) -> Option<Split> {
        let name = name.to_ascii_lowercase();
        if name.contains("train") {
            Some(Split::Train)
        } else if name.contains("valid") || name.contains("dev") {
            Some(Split::Validation)
        } else if name.contains("test") {
            Some(Split::Test)
        } else {
            None
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    #[default]
    Auto,
    Snips,
    Atis,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(DatasetFormat::Auto),
            "snips" | "a" => Ok(DatasetFormat::Snips),
            "atis" | "b" => Ok(DatasetFormat::Atis),
            other => Err(Error::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

/// Lowercases, splits on whitespace and breaks punctuation out into
/// single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars().flat_map(char::to_lowercase) {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    /// Sorted set of every label seen in any split.
    pub classes: Vec<String>,
    pub max_len: usize,
}

impl Corpus {
    /// Builds a corpus; `max_len` defaults to the longest training utterance.
    pub fn new(utterances: Vec<Utterance>, max_len: Option<usize>) -> Result<Corpus> {
        if utterances.is_empty() {
            return Err(Error::Validation("corpus has no utterances".into()));
        }
        for (i, u) in utterances.iter().enumerate() {
            if u.tokens.is_empty() {
                return Err(Error::Validation(format!("utterance {i} has no tokens")));
            }
            if u.label.is_empty() {
                return Err(Error::Validation(format!("utterance {i} has an empty label")));
            }
        }
        let classes: BTreeSet<&str> = utterances.iter().map(|u| u.label.as_str()).collect();
        let classes = classes.into_iter().map(str::to_owned).collect();
        let longest_train = utterances
            .iter()
            .filter(|u| u.split == Split::Train)
            .map(|u| u.tokens.len())
            .max();
        let max_len = match (max_len, longest_train) {
            (Some(0), _) => return Err(Error::Config("max_len must be positive".into())),
            (Some(l), _) => l,
            (None, Some(l)) => l,
            (None, None) => utterances.iter().map(|u| u.tokens.len()).max().unwrap_or(1),
        };
        Ok(Corpus {
            utterances,
            classes,
            max_len,
        })
    }

    pub fn with_max_len(mut self, max_len: usize) -> Result<Corpus> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        self.max_len = max_len;
        Ok(self)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.utterances.iter().filter(|u| u.split == split).count()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(label)).ok()
    }

    /// Training-split utterance count for every class (zero for classes only
    /// seen in other splits).
    pub fn train_class_counts(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> =
            self.classes.iter().map(|c| (c.clone(), 0)).collect();
        for u in self.utterances.iter().filter(|u| u.split == Split::Train) {
            *counts.get_mut(&u.label).expect("label in classes") += 1;
        }
        counts
    }
}

pub fn load_corpus(path: &Path, format: DatasetFormat) -> Result<Corpus> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset path does not exist"),
        ));
    }
    let format = match format {
        DatasetFormat::Auto => detect_format(path)?,
        f => f,
    };
    let utterances = match format {
        DatasetFormat::Atis => load_atis(path)?,
        _ => load_snips(path)?,
    };
    Corpus::new(utterances, None)
}

fn detect_format(path: &Path) -> Result<DatasetFormat> {
    if path.is_file() {
        return Ok(if has_extension(path, "iob") {
            DatasetFormat::Atis
        } else {
            DatasetFormat::Snips
        });
    }
    let any_iob = sorted_entries(path)?
        .iter()
        .any(|p| p.is_file() && has_extension(p, "iob"));
    Ok(if any_iob {
        DatasetFormat::Atis
    } else {
        DatasetFormat::Snips
    })
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.trim_end_matches('\r').to_owned()).collect())
}

fn utterance(path: &Path, line: usize, text: &str, label: &str, split: Split) -> Result<Utterance> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::Parse {
            path: path.to_owned(),
            line,
            message: "utterance has no tokens".into(),
        });
    }
    let label = label.trim();
    if label.is_empty() {
        return Err(Error::Parse {
            path: path.to_owned(),
            line,
            message: "empty intent label".into(),
        });
    }
    Ok(Utterance {
        tokens,
        label: label.to_owned(),
        split,
    })
}

fn check_nonempty(path: &Path, split: Split, found: usize) -> Result<()> {
    if found == 0 {
        return Err(Error::Validation(format!(
            "{}: {split} split is empty",
            path.display()
        )));
    }
    Ok(())
}

/// `text<TAB>label[<TAB>split]`; rows without a split column go to `default_split`.
fn load_delimited(path: &Path, default_split: Split) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let split = match cols.len() {
            2 => default_split,
            3 => cols[2].trim().parse().map_err(|_| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: format!("unknown split `{}`", cols[2].trim()),
            })?,
            n => {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: i + 1,
                    message: format!("expected text<TAB>label, found {n} column(s)"),
                })
            }
        };
        out.push(utterance(path, i + 1, cols[0], cols[1], split)?);
    }
    Ok(out)
}

fn load_snips(path: &Path) -> Result<Vec<Utterance>> {
    if path.is_file() {
        let out = load_delimited(path, Split::Train)?;
        if out.is_empty() {
            return Err(Error::Validation(format!("{}: no utterances", path.display())));
        }
        return Ok(out);
    }
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for entry in sorted_entries(path)? {
        let Some(name) = entry.file_name().and_then(|n| n.to_str()).map(str::to_owned) else {
            continue;
        };
        let Some(split) = Split::from_name(&name) else {
            continue;
        };
        let before = out.len();
        if entry.is_dir() {
            let seq_in = entry.join("seq.in");
            let label = entry.join("label");
            if seq_in.is_file() && label.is_file() {
                out.extend(load_seq_in_pair(&seq_in, &label, split)?);
            } else {
                for file in sorted_entries(&entry)? {
                    if !file.is_file() {
                        continue;
                    }
                    let intent = file
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or_default()
                        .to_owned();
                    for (i, line) in read_lines(&file)?.iter().enumerate() {
                        if !line.trim().is_empty() {
                            out.push(utterance(&file, i + 1, line, &intent, split)?);
                        }
                    }
                }
            }
        } else if entry.is_file() {
            out.extend(load_delimited(&entry, split)?);
        }
        check_nonempty(&entry, split, out.len() - before)?;
        seen.insert(split);
    }
    if !seen.contains(&Split::Train) {
        return Err(Error::Validation(format!(
            "{}: no training split found",
            path.display()
        )));
    }
    Ok(out)
}

fn load_seq_in_pair(seq_in: &Path, label: &Path, split: Split) -> Result<Vec<Utterance>> {
    let texts = read_lines(seq_in)?;
    let labels = read_lines(label)?;
    let texts: Vec<_> = texts.iter().enumerate().filter(|(_, l)| !l.trim().is_empty()).collect();
    let labels: Vec<_> = labels.iter().filter(|l| !l.trim().is_empty()).collect();
    if texts.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{}: {} utterances but {} labels in {}",
            seq_in.display(),
            texts.len(),
            labels.len(),
            label.display()
        )));
    }
    texts
        .into_iter()
        .zip(labels)
        .map(|((i, text), lab)| utterance(seq_in, i + 1, text, lab, split))
        .collect()
}

fn load_atis(path: &Path) -> Result<Vec<Utterance>> {
    let files: Vec<(PathBuf, Split)> = if path.is_file() {
        vec![(path.to_owned(), Split::Train)]
    } else {
        sorted_entries(path)?
            .into_iter()
            .filter(|p| p.is_file() && has_extension(p, "iob"))
            .filter_map(|p| {
                let split = Split::from_name(p.file_name()?.to_str()?)?;
                Some((p, split))
            })
            .collect()
    };
    if !files.iter().any(|(_, s)| *s == Split::Train) {
        return Err(Error::Validation(format!(
            "{}: no training split found",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (file, split) in files {
        let before = out.len();
        for (i, line) in read_lines(&file)?.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: &str| Error::Parse {
                path: file.clone(),
                line: i + 1,
                message: message.into(),
            };
            let (words, tags) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("missing TAB between words and tags"))?;
            let words: Vec<&str> = words.split_whitespace().collect();
            let inner = match words.as_slice() {
                ["BOS", inner @ .., "EOS"] => inner,
                _ => return Err(parse_err("utterance must be wrapped in BOS ... EOS")),
            };
            let intent = tags
                .split_whitespace()
                .last()
                .ok_or_else(|| parse_err("missing intent label"))?;
            out.push(utterance(&file, i + 1, &inner.join(" "), intent, split)?);
        }
        check_nonempty(&file, split, out.len() - before)?;
    }
    Ok(out)
}

/// Word index plus a `|vocab| x m` matrix of vectors. Row 0 is padding (all
/// zero), row 1 the shared out-of-vocabulary vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    words: Vec<String>,
    index: HashMap<String, usize>,
    pub vectors: Array2<f64>,
    pretrained_hits: usize,
}

/// Deterministic vector in `[-0.25, 0.25]^dim` keyed by the word string.
pub fn oov_vector(word: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(word.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    let mut rng = ChaCha8Rng::from_seed(key);
    (0..dim)
        .map(|_| rng.random_range(-OOV_RANGE..=OOV_RANGE))
        .collect()
}

/// Builds a table covering every token in `corpus` (all splits). Words found
/// in the pretrained file take its vector verbatim; the rest get
/// [`oov_vector`].
pub fn build_embeddings(
    corpus: &Corpus,
    pretrained: Option<&Path>,
    dim: usize,
    oov_seed: u64,
) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let vocab: BTreeSet<&str> = corpus
        .utterances
        .iter()
        .flat_map(|u| u.tokens.iter().map(String::as_str))
        .collect();
    let mut words = vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
    words.extend(vocab.into_iter().map(str::to_owned));
    let index: HashMap<String, usize> =
        words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();

    let mut vectors = Array2::<f64>::zeros((words.len(), dim));
    let mut filled = vec![false; words.len()];
    filled[PAD_INDEX] = true;
    let mut pretrained_hits = 0;

    if let Some(path) = pretrained {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let values: Vec<&str> = fields.collect();
            if values.len() != dim {
                return Err(Error::Validation(format!(
                    "{}:{}: expected {dim} values for `{word}`, found {}",
                    path.display(),
                    i + 1,
                    values.len()
                )));
            }
            let Some(&row) = index.get(word) else { continue };
            if filled[row] || row == UNK_INDEX {
                continue;
            }
            for (j, v) in values.iter().enumerate() {
                vectors[[row, j]] = v.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_owned(),
                    line: i + 1,
                    message: format!("bad float `{v}`: {e}"),
                })?;
            }
            filled[row] = true;
            pretrained_hits += 1;
        }
    }

    for (row, word) in words.iter().enumerate() {
        if !filled[row] {
            let v = oov_vector(word, dim, oov_seed);
            vectors.row_mut(row).assign(&ndarray::ArrayView1::from(&v));
        }
    }

    Ok(EmbeddingTable {
        words,
        index,
        vectors,
        pretrained_hits,
    })
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Rows in the table, reserved tokens included.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Word types, not counting padding and OOV.
    pub fn vocab_size(&self) -> usize {
        self.words.len() - 2
    }

    pub fn pretrained_hits(&self) -> usize {
        self.pretrained_hits
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_INDEX)
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    /// SHA-256 over the ordered word list; identifies the index space a
    /// checkpoint was trained against.
    pub fn vocab_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for w in &self.words {
            hasher.update(w.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

/// Right-padded index matrix with the true (clipped) length of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Array2<usize>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.indices.ncols()
    }
}

pub fn encode_tokens<S: AsRef<str>>(table: &EmbeddingTable, rows: &[&[S]], max_len: usize) -> Batch {
    let mut indices = Array2::from_elem((rows.len(), max_len), PAD_INDEX);
    let mut lengths = Vec::with_capacity(rows.len());
    for (r, tokens) in rows.iter().enumerate() {
        let len = tokens.len().min(max_len);
        for (t, tok) in tokens.iter().take(len).enumerate() {
            indices[[r, t]] = table.lookup(tok.as_ref());
        }
        lengths.push(len);
    }
    Batch { indices, lengths }
}

pub fn encode_batch(corpus: &Corpus, table: &EmbeddingTable, ids: &[usize]) -> Batch {
    let rows: Vec<&[String]> = ids
        .iter()
        .map(|&i| corpus.utterances[i].tokens.as_slice())
        .collect();
    encode_tokens(table, &rows, corpus.max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn utt(text: &str, label: &str, split: Split) -> Utterance {
        Utterance {
            tokens: tokenize(text),
            label: label.into(),
            split,
        }
    }

    #[test]
    fn tokenizer_separates_punctuation() {
        assert_eq!(
            tokenize("Book a flight, NOW!"),
            vec!["book", "a", "flight", ",", "now", "!"]
        );
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn singleton_delimited_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.tsv");
        fs::write(&path, "book a flight\tbook\n").unwrap();
        let corpus = load_corpus(&path, DatasetFormat::Auto).unwrap();
        assert_eq!(corpus.classes, vec!["book"]);
        assert_eq!(corpus.utterances.len(), 1);
        assert_eq!(corpus.max_len, 3);
    }

    #[test]
    fn malformed_record_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "ok line\tlabel\nno tab here\n").unwrap();
        match load_corpus(&path, DatasetFormat::Snips) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn snips_split_dirs_and_empty_split() {
        let dir = tempfile::tempdir().unwrap();
        for (split, n) in [("train", 3), ("valid", 1), ("test", 2)] {
            let d = dir.path().join(split);
            fs::create_dir(&d).unwrap();
            let texts: Vec<String> = (0..n).map(|i| format!("play song {i}")).collect();
            let labels: Vec<&str> = (0..n).map(|_| "PlayMusic").collect();
            fs::write(d.join("seq.in"), texts.join("\n")).unwrap();
            fs::write(d.join("label"), labels.join("\n")).unwrap();
        }
        let corpus = load_corpus(dir.path(), DatasetFormat::Auto).unwrap();
        assert_eq!(corpus.split_len(Split::Train), 3);
        assert_eq!(corpus.split_len(Split::Validation), 1);
        assert_eq!(corpus.split_len(Split::Test), 2);

        fs::write(dir.path().join("test").join("seq.in"), "").unwrap();
        fs::write(dir.path().join("test").join("label"), "").unwrap();
        assert!(matches!(
            load_corpus(dir.path(), DatasetFormat::Auto),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn per_intent_files() {
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("train");
        fs::create_dir(&train).unwrap();
        fs::write(train.join("GetWeather.txt"), "will it rain\nis it sunny\n").unwrap();
        fs::write(train.join("RateBook.txt"), "rate this book five stars\n").unwrap();
        let corpus = load_corpus(dir.path(), DatasetFormat::Snips).unwrap();
        assert_eq!(corpus.classes, vec!["GetWeather", "RateBook"]);
        assert_eq!(corpus.train_class_counts()["GetWeather"], 2);
    }

    #[test]
    fn atis_iob_lines() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = fs::File::create(dir.path().join("atis.train.w-intent.iob")).unwrap();
        writeln!(f, "BOS i want to fly from boston EOS\tO O O O O O B-fromloc atis_flight").unwrap();
        writeln!(f, "BOS what is the fare EOS\tO O O O O atis_airfare").unwrap();
        let mut f = fs::File::create(dir.path().join("atis.test.w-intent.iob")).unwrap();
        writeln!(f, "BOS show flights EOS\tO O O atis_flight").unwrap();
        let corpus = load_corpus(dir.path(), DatasetFormat::Auto).unwrap();
        assert_eq!(corpus.classes, vec!["atis_airfare", "atis_flight"]);
        let first = &corpus.utterances[corpus.split_indices(Split::Train)[0]];
        assert_eq!(first.tokens, ["i", "want", "to", "fly", "from", "boston"]);
        assert_eq!(corpus.split_len(Split::Test), 1);

        fs::write(dir.path().join("atis.dev.w-intent.iob"), "i want\tO O x\n").unwrap();
        assert!(matches!(
            load_corpus(dir.path(), DatasetFormat::Atis),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn embedding_lookup_and_oov() {
        let corpus = Corpus::new(vec![utt("the zxqv", "x", Split::Train)], None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.txt");
        fs::write(&path, "the 0.1 0.2\nother 1 2\n").unwrap();
        let table = build_embeddings(&corpus, Some(&path), 2, 7).unwrap();
        assert_eq!(table.vocab_size(), 2);
        assert_eq!(table.pretrained_hits(), 1);
        let the = table.lookup("the");
        assert_eq!(table.vectors.row(the).to_vec(), vec![0.1, 0.2]);
        assert!(table.vectors.row(PAD_INDEX).iter().all(|&v| v == 0.0));
        let oov = table.vectors.row(table.lookup("zxqv")).to_vec();
        assert_eq!(oov, oov_vector("zxqv", 2, 7));
        assert!(oov.iter().all(|v| v.abs() <= 0.25));
        assert_ne!(oov, oov_vector("zxqv", 2, 8));
        assert_eq!(table.lookup("never-seen"), UNK_INDEX);
    }

    #[test]
    fn embedding_dimension_mismatch() {
        let corpus = Corpus::new(vec![utt("the", "x", Split::Train)], None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.txt");
        fs::write(&path, "the 0.1 0.2 0.3\n").unwrap();
        assert!(matches!(
            build_embeddings(&corpus, Some(&path), 2, 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn padding_truncation_and_empty_batch() {
        let corpus = Corpus::new(
            vec![
                utt("a b c", "x", Split::Train),
                utt("a b c d e f g", "x", Split::Train),
            ],
            Some(5),
        )
        .unwrap();
        let table = build_embeddings(&corpus, None, 3, 0).unwrap();
        let b = encode_batch(&corpus, &table, &[0]);
        let ids: Vec<usize> = ["a", "b", "c"].iter().map(|w| table.lookup(w)).collect();
        assert_eq!(b.indices.row(0).to_vec(), vec![ids[0], ids[1], ids[2], PAD_INDEX, PAD_INDEX]);
        assert_eq!(b.lengths, vec![3]);

        let b = encode_batch(&corpus, &table, &[1]);
        assert_eq!(b.lengths, vec![5]);
        assert_eq!(table.word(b.indices[[1 - 1, 4]]), Some("e"));

        let b = encode_batch(&corpus, &table, &[]);
        assert_eq!(b.indices.dim(), (0, 5));
        assert!(b.lengths.is_empty());
    }
}
