//! JSON checkpoint holding every encoder tensor with its shape.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{EncoderParams, HeadMode, LstmCellParams};
use crate::error::{Error, Result};
use crate::objective::LmclConfig;

pub const FORMAT: &str = "open-intent/encoder";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub mode: HeadMode,
    pub hidden: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    pub vocab_hash: String,
    /// Known class names, in head-column order.
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lmcl: Option<LmclConfig>,
    pub tensors: Vec<NamedTensor>,
}

fn tensor2(name: &str, a: &Array2<f64>) -> NamedTensor {
    NamedTensor {
        name: name.to_owned(),
        shape: vec![a.nrows(), a.ncols()],
        data: a.iter().copied().collect(),
    }
}

fn tensor1(name: &str, a: &Array1<f64>) -> NamedTensor {
    NamedTensor {
        name: name.to_owned(),
        shape: vec![a.len()],
        data: a.to_vec(),
    }
}

impl Checkpoint {
    pub fn new(
        params: &EncoderParams,
        max_len: usize,
        vocab_hash: String,
        classes: Vec<String>,
        lmcl: Option<LmclConfig>,
    ) -> Self {
        let mut tensors = Vec::new();
        for (prefix, cell) in [("forward", &params.forward_cell), ("backward", &params.backward_cell)] {
            tensors.push(tensor2(&format!("{prefix}.w_input"), &cell.w_input));
            tensors.push(tensor2(&format!("{prefix}.w_hidden"), &cell.w_hidden));
            tensors.push(tensor1(&format!("{prefix}.bias"), &cell.bias));
        }
        tensors.push(tensor2("head.weights", &params.head_weights));
        if let Some(b) = &params.head_bias {
            tensors.push(tensor1("head.bias", b));
        }
        if let Some(e) = &params.embedding {
            tensors.push(tensor2("embedding", e));
        }
        Checkpoint {
            format: FORMAT.to_owned(),
            version: VERSION,
            mode: params.mode,
            hidden: params.hidden(),
            embed_dim: params.embed_dim(),
            max_len,
            vocab_hash,
            classes,
            lmcl,
            tensors,
        }
    }

    fn take(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let t = self
            .take(name)
            .ok_or_else(|| Error::Serde(format!("checkpoint is missing tensor `{name}`")))?;
        if t.shape != [rows, cols] {
            return Err(Error::Serde(format!(
                "tensor `{name}` has shape {:?}, expected [{rows}, {cols}]",
                t.shape
            )));
        }
        Array2::from_shape_vec((rows, cols), t.data.clone())
            .map_err(|e| Error::Serde(format!("tensor `{name}`: {e}")))
    }

    fn vector(&self, name: &str, len: usize) -> Result<Array1<f64>> {
        let t = self
            .take(name)
            .ok_or_else(|| Error::Serde(format!("checkpoint is missing tensor `{name}`")))?;
        if t.shape != [len] || t.data.len() != len {
            return Err(Error::Serde(format!(
                "tensor `{name}` has shape {:?}, expected [{len}]",
                t.shape
            )));
        }
        Ok(Array1::from(t.data.clone()))
    }

    pub fn params(&self) -> Result<EncoderParams> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint format {} v{}",
                self.format, self.version
            )));
        }
        let (h, m, c) = (self.hidden, self.embed_dim, self.classes.len());
        let cell = |prefix: &str| -> Result<LstmCellParams> {
            Ok(LstmCellParams {
                w_input: self.matrix(&format!("{prefix}.w_input"), 4 * h, m)?,
                w_hidden: self.matrix(&format!("{prefix}.w_hidden"), 4 * h, h)?,
                bias: self.vector(&format!("{prefix}.bias"), 4 * h)?,
            })
        };
        let head_bias = match self.mode {
            HeadMode::Lmcl => None,
            _ => Some(self.vector("head.bias", c)?),
        };
        let embedding = match self.take("embedding") {
            Some(t) if t.shape.len() == 2 => Some(self.matrix("embedding", t.shape[0], m)?),
            Some(_) => return Err(Error::Serde("embedding tensor must be 2-d".into())),
            None => None,
        };
        Ok(EncoderParams {
            mode: self.mode,
            forward_cell: cell("forward")?,
            backward_cell: cell("backward")?,
            head_weights: self.matrix("head.weights", 2 * h, c)?,
            head_bias,
            embedding,
        })
    }

    /// Fails unless the checkpoint was trained against `table_hash`.
    pub fn check_vocab(&self, table_hash: &str) -> Result<()> {
        if self.vocab_hash != table_hash {
            return Err(Error::VocabMismatch {
                expected: self.vocab_hash.clone(),
                found: table_hash.to_owned(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for mode in [HeadMode::Softmax, HeadMode::Lmcl, HeadMode::Sigmoid] {
            let mut p = EncoderParams::init(mode, 7, 3, 4, &mut rng);
            if mode == HeadMode::Sigmoid {
                p.embedding = Some(Array2::from_elem((5, 7), 0.1 + 1e-17));
            }
            let ck = Checkpoint::new(&p, 9, "abc".into(), vec!["a".into(); 4], None);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ck.json");
            ck.save(&path).unwrap();
            let loaded = Checkpoint::load(&path).unwrap();
            assert_eq!(loaded, ck);
            assert_eq!(loaded.params().unwrap(), p);
        }
    }

    #[test]
    fn vocab_mismatch_detected() {
        let p = EncoderParams::zeros(HeadMode::Lmcl, 2, 2, 2);
        let ck = Checkpoint::new(&p, 3, "aaa".into(), vec!["x".into(), "y".into()], None);
        assert!(ck.check_vocab("aaa").is_ok());
        assert!(matches!(ck.check_vocab("bbb"), Err(Error::VocabMismatch { .. })));
    }
}
