//! Second stage: decide whether a test utterance belongs to a known class.
//!
//! [`FittedLof`] scores queries against a fixed reference set in novelty
//! mode; the remaining rules are the probability-threshold baselines.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to every reachability distance so duplicated points keep a
/// finite density.
pub const REACH_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub lof_k: usize,
    pub lof_threshold: f64,
    pub msp_threshold: f64,
    pub doc_risk_factor: f64,
    pub metric: Metric,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            lof_k: 20,
            lof_threshold: 1.5,
            msp_threshold: 0.5,
            doc_risk_factor: 3.0,
            metric: Metric::Euclidean,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lof_k == 0 {
            return Err(Error::Config("lof_k must be positive".into()));
        }
        for (name, v) in [
            ("lof_threshold", self.lof_threshold),
            ("msp_threshold", self.msp_threshold),
            ("doc_risk_factor", self.doc_risk_factor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// A known class index, or the single catch-all unknown label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Known(usize),
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub predicted: Label,
    /// LOF value for the LOF rule, top probability for the others.
    pub score: f64,
    pub class_scores: Vec<f64>,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Reference features with their k-distances and local reachability
/// densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedLof {
    pub k: usize,
    pub dim: usize,
    /// Row-major `n x dim`.
    reference: Vec<f64>,
    pub kdist: Vec<f64>,
    pub lrd: Vec<f64>,
    /// LOF of each reference point within the reference set.
    pub reference_lof: Vec<f64>,
}

/// Distances from `query` to every reference row, skipping `exclude`.
fn distances(reference: ArrayView2<f64>, query: ArrayView1<f64>, exclude: Option<usize>) -> Vec<(usize, f64)> {
    reference
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != exclude)
        .map(|(j, row)| (j, euclidean(query, row)))
        .collect()
}

/// `k`-distance and the neighbourhood `{B : d(B) <= k-distance}`.
fn neighbourhood(mut dists: Vec<(usize, f64)>, k: usize) -> (f64, Vec<(usize, f64)>) {
    let kth = {
        let mut only: Vec<f64> = dists.iter().map(|&(_, d)| d).collect();
        let (_, kth, _) = only.select_nth_unstable_by(k - 1, f64::total_cmp);
        *kth
    };
    dists.retain(|&(_, d)| d <= kth);
    (kth, dists)
}

fn lrd_of(neighbours: &[(usize, f64)], kdist: &[f64]) -> f64 {
    let reach: f64 = neighbours
        .iter()
        .map(|&(b, d)| kdist[b].max(d).max(REACH_EPS))
        .sum();
    neighbours.len() as f64 / reach
}

pub fn lof_fit(reference: &Array2<f64>, k: usize) -> Result<FittedLof> {
    let n = reference.nrows();
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "LOF needs 0 < k < number of reference points (k = {k}, n = {n})"
        )));
    }
    if reference.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite reference feature".into()));
    }
    let first = reference.row(0);
    if reference.rows().into_iter().all(|r| r == first) {
        return Err(Error::DegenerateDensity(
            "all reference points are identical".into(),
        ));
    }
    let view = reference.view();
    let hoods: Vec<(f64, Vec<(usize, f64)>)> = (0..n)
        .into_par_iter()
        .map(|a| neighbourhood(distances(view, view.row(a), Some(a)), k))
        .collect();
    let kdist: Vec<f64> = hoods.iter().map(|(kd, _)| *kd).collect();
    let lrd: Vec<f64> = hoods.iter().map(|(_, nb)| lrd_of(nb, &kdist)).collect();
    if let Some(i) = lrd.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::DegenerateDensity(format!(
            "reference point {i} has density {}",
            lrd[i]
        )));
    }
    let reference_lof = hoods
        .iter()
        .enumerate()
        .map(|(a, (_, nb))| nb.iter().map(|&(b, _)| lrd[b] / lrd[a]).sum::<f64>() / nb.len() as f64)
        .collect();
    Ok(FittedLof {
        k,
        dim: reference.ncols(),
        reference: reference.iter().copied().collect(),
        kdist,
        lrd,
        reference_lof,
    })
}

impl FittedLof {
    pub fn len(&self) -> usize {
        self.kdist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kdist.is_empty()
    }

    pub fn reference(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.dim), &self.reference).expect("consistent shape")
    }

    /// Novelty-mode LOF of a point that is not part of the reference set.
    pub fn score(&self, query: ArrayView1<f64>) -> Result<f64> {
        if query.len() != self.dim {
            return Err(Error::Contract(format!(
                "query has dimension {}, reference has {}",
                query.len(),
                self.dim
            )));
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite query".into()));
        }
        let (_, hood) = neighbourhood(distances(self.reference(), query, None), self.k);
        let lrd_q = lrd_of(&hood, &self.kdist);
        Ok(hood.iter().map(|&(b, _)| self.lrd[b] / lrd_q).sum::<f64>() / hood.len() as f64)
    }

    pub fn score_rows(&self, queries: &Array2<f64>) -> Result<Vec<f64>> {
        (0..queries.nrows())
            .into_par_iter()
            .map(|i| self.score(queries.row(i)))
            .collect()
    }
}

/// Versioned on-disk form of a fitted LOF plus the decision settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorFile {
    pub format: String,
    pub version: u32,
    pub config: DetectionConfig,
    pub lof: FittedLof,
}

impl DetectorFile {
    pub const FORMAT: &'static str = "open-intent/lof";
    pub const VERSION: u32 = 1;

    pub fn new(config: DetectionConfig, lof: FittedLof) -> Self {
        DetectorFile {
            format: Self::FORMAT.into(),
            version: Self::VERSION,
            config,
            lof,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: DetectorFile = serde_json::from_str(&text)
            .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if file.format != Self::FORMAT || file.version != Self::VERSION {
            return Err(Error::Serde(format!(
                "{}: unsupported detector format {} v{}",
                path.display(),
                file.format,
                file.version
            )));
        }
        if file.lof.reference.len() != file.lof.len() * file.lof.dim
            || file.lof.lrd.len() != file.lof.len()
        {
            return Err(Error::Serde(format!("{}: inconsistent tensor sizes", path.display())));
        }
        Ok(file)
    }
}

/// Rejects when the LOF value exceeds the threshold, otherwise takes the
/// classifier's argmax.
pub fn decide_lof_score(lof: f64, class_scores: &[f64], threshold: f64) -> Decision {
    let predicted = if lof > threshold {
        Label::Unknown
    } else {
        Label::Known(argmax(class_scores))
    };
    Decision {
        predicted,
        score: lof,
        class_scores: class_scores.to_vec(),
    }
}

pub fn decide_lof(
    model: &FittedLof,
    class_scores: &[f64],
    query: ArrayView1<f64>,
    cfg: &DetectionConfig,
) -> Result<Decision> {
    let lof = model.score(query)?;
    Ok(decide_lof_score(lof, class_scores, cfg.lof_threshold))
}

/// Maximum softmax probability rule: reject when the top probability is
/// strictly below the threshold.
pub fn decide_msp(probabilities: &[f64], cfg: &DetectionConfig) -> Decision {
    let best = argmax(probabilities);
    let top = probabilities[best];
    Decision {
        predicted: if top < cfg.msp_threshold {
            Label::Unknown
        } else {
            Label::Known(best)
        },
        score: top,
        class_scores: probabilities.to_vec(),
    }
}

/// Per-class thresholds `max(0.5, 1 - alpha * sigma_j)`, where `sigma_j` is
/// the spread of `1 - p_j` over class `j`'s own training examples mirrored
/// about zero.
pub fn doc_fit(probabilities: &Array2<f64>, labels: &[usize], alpha: f64) -> Vec<f64> {
    let classes = probabilities.ncols();
    let mut sums = vec![0.0; classes];
    let mut counts = vec![0usize; classes];
    for (row, &y) in probabilities.rows().into_iter().zip(labels) {
        let dev = 1.0 - row[y];
        sums[y] += dev * dev;
        counts[y] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(&ss, &n)| {
            if n < 2 {
                0.5
            } else {
                // the mirrored sample has mean zero, so its spread is the RMS
                let sigma = (ss / n as f64).sqrt();
                (1.0 - alpha * sigma).max(0.5)
            }
        })
        .collect()
}

/// Rejects only when every class falls below its threshold; otherwise the
/// argmax over the classes that pass.
pub fn decide_doc(probabilities: &[f64], thresholds: &[f64]) -> Decision {
    let passing: Vec<f64> = probabilities
        .iter()
        .zip(thresholds)
        .map(|(&p, &t)| if p >= t { p } else { f64::NEG_INFINITY })
        .collect();
    let best = argmax(&passing);
    let predicted = if passing[best] == f64::NEG_INFINITY {
        Label::Unknown
    } else {
        Label::Known(best)
    };
    Decision {
        predicted,
        score: probabilities.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        class_scores: probabilities.to_vec(),
    }
}
