#![allow(dead_code)]

use std::fs;
use std::path::Path;

use ndarray::Array2;
use open_intent::corpus::{tokenize, Corpus, Split, Utterance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct O(n^2) local outlier factor, written from the definitions with
/// plain nested loops and no shared code with the library.
pub struct BruteLof {
    pub points: Vec<Vec<f64>>,
    pub k: usize,
    pub kdist: Vec<f64>,
    pub lrd: Vec<f64>,
    pub lof: Vec<f64>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

/// k-th smallest of `ds` (1-based k).
fn kth(mut ds: Vec<f64>, k: usize) -> f64 {
    ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ds[k - 1]
}

impl BruteLof {
    pub fn fit(points: Vec<Vec<f64>>, k: usize) -> BruteLof {
        let n = points.len();
        let mut kdist = vec![0.0; n];
        for a in 0..n {
            let ds: Vec<f64> = (0..n).filter(|&b| b != a).map(|b| dist(&points[a], &points[b])).collect();
            kdist[a] = kth(ds, k);
        }
        let mut lrd = vec![0.0; n];
        for a in 0..n {
            let mut count = 0.0;
            let mut reach = 0.0;
            for b in 0..n {
                if b == a {
                    continue;
                }
                let d = dist(&points[a], &points[b]);
                if d <= kdist[a] {
                    count += 1.0;
                    reach += f64::max(f64::max(kdist[b], d), 1e-12);
                }
            }
            lrd[a] = count / reach;
        }
        let mut lof = vec![0.0; n];
        for a in 0..n {
            let mut count = 0.0;
            let mut ratio = 0.0;
            for b in 0..n {
                if b != a && dist(&points[a], &points[b]) <= kdist[a] {
                    count += 1.0;
                    ratio += lrd[b] / lrd[a];
                }
            }
            lof[a] = ratio / count;
        }
        BruteLof {
            points,
            k,
            kdist,
            lrd,
            lof,
        }
    }

    /// Novelty-mode score: neighbours come from the reference points only.
    pub fn score(&self, q: &[f64]) -> f64 {
        let ds: Vec<f64> = self.points.iter().map(|p| dist(q, p)).collect();
        let kd = kth(ds.clone(), self.k);
        let mut count = 0.0;
        let mut reach = 0.0;
        for (b, &d) in ds.iter().enumerate() {
            if d <= kd {
                count += 1.0;
                reach += f64::max(f64::max(self.kdist[b], d), 1e-12);
            }
        }
        let lrd_q = count / reach;
        let mut ratio = 0.0;
        for (b, &d) in ds.iter().enumerate() {
            if d <= kd {
                ratio += self.lrd[b] / lrd_q;
            }
        }
        ratio / count
    }
}

pub fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Gaussian blobs with random centres, for LOF instances.
pub fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let blobs = rng.random_range(1..4);
    let centres: Vec<Vec<f64>> = (0..blobs)
        .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect();
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let c = &centres[rng.random_range(0..blobs)];
        let spread = rng.random_range(0.2..2.0);
        for j in 0..d {
            let noise: f64 = rng.sample(rand_distr::StandardNormal);
            out[[i, j]] = c[j] + spread * noise;
        }
    }
    out
}

const DOMAINS: [(&str, [&str; 8]); 8] = [
    ("play_music", ["play", "song", "music", "album", "track", "jazz", "playlist", "artist"]),
    ("get_weather", ["weather", "rain", "sunny", "forecast", "temperature", "snow", "cold", "wind"]),
    ("book_restaurant", ["book", "table", "restaurant", "dinner", "reservation", "party", "seats", "brunch"]),
    ("rate_book", ["rate", "stars", "novel", "points", "rating", "chronicle", "saga", "score"]),
    ("search_movie", ["movie", "schedule", "cinema", "showtimes", "theatre", "film", "screening", "tickets"]),
    ("add_playlist", ["add", "playlist", "onto", "list", "include", "collection", "tune", "put"]),
    ("search_work", ["find", "creative", "work", "painting", "game", "trailer", "tv", "show"]),
    ("flight", ["flight", "fly", "airport", "fares", "airline", "depart", "arrive", "boston"]),
];

const FILLER: [&str; 12] = [
    "please", "i", "want", "to", "the", "a", "for", "me", "can", "you", "now", "my",
];

fn utterance(rng: &mut ChaCha8Rng, domain: usize) -> String {
    let keys = &DOMAINS[domain].1;
    let len = rng.random_range(3..9);
    let mut words = Vec::with_capacity(len);
    for _ in 0..len {
        if rng.random_bool(0.55) {
            words.push(keys[rng.random_range(0..keys.len())]);
        } else {
            words.push(FILLER[rng.random_range(0..FILLER.len())]);
        }
    }
    if !words.iter().any(|w| keys.contains(w)) {
        words.push(keys[rng.random_range(0..keys.len())]);
    }
    words.join(" ")
}

/// Keyword-driven intents with uneven class sizes.
pub fn synthetic_corpus(seed: u64, classes: usize, train_per_class: usize, eval_per_class: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut utterances = Vec::new();
    for c in 0..classes {
        let n_train = train_per_class + c * train_per_class / 4;
        for (split, n) in [
            (Split::Train, n_train),
            (Split::Validation, eval_per_class),
            (Split::Test, eval_per_class),
        ] {
            for _ in 0..n {
                utterances.push(Utterance {
                    tokens: tokenize(&utterance(&mut rng, c)),
                    label: DOMAINS[c].0.to_owned(),
                    split,
                });
            }
        }
    }
    Corpus::new(utterances, None).unwrap()
}

/// Writes `corpus` as `<split>/seq.in` + `<split>/label` directories.
pub fn write_seq_dataset(corpus: &Corpus, dir: &Path) {
    for (split, name) in [(Split::Train, "train"), (Split::Validation, "valid"), (Split::Test, "test")] {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).unwrap();
        let mut seq = String::new();
        let mut lab = String::new();
        for u in corpus.utterances.iter().filter(|u| u.split == split) {
            seq.push_str(&u.tokens.join(" "));
            seq.push('\n');
            lab.push_str(&u.label);
            lab.push('\n');
        }
        fs::write(sub.join("seq.in"), seq).unwrap();
        fs::write(sub.join("label"), lab).unwrap();
    }
}
