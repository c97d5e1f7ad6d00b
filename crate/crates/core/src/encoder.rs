//! Bidirectional LSTM sentence encoder with a linear or cosine head.
//!
//! A sentence is represented by the forward LSTM's output at the last real
//! token concatenated with the backward LSTM's output at the first token. The
//! backward direction consumes the unpadded sequence in reverse, so padding
//! never enters either recurrence.

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, EmbeddingTable};
use crate::error::{Error, Result};

/// Added under the square root of every norm in the cosine head.
pub const NORM_EPS: f64 = 1e-12;
const FORGET_BIAS: f64 = 1.0;

/// Output head and the loss it is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Affine logits, softmax cross-entropy.
    Softmax,
    /// Cosine scores between normalized features and class weights.
    Lmcl,
    /// Affine logits, one-vs-rest sigmoid cross-entropy.
    Sigmoid,
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::Softmax => "softmax",
            HeadMode::Lmcl => "lmcl",
            HeadMode::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softmax" => Ok(HeadMode::Softmax),
            "lmcl" => Ok(HeadMode::Lmcl),
            "sigmoid" => Ok(HeadMode::Sigmoid),
            other => Err(Error::Config(format!("unknown loss mode `{other}`"))),
        }
    }
}

/// Gate blocks are stacked `[input, forget, cell, output]` along the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    pub w_input: Array2<f64>,
    pub w_hidden: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LstmCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmCellParams {
            w_input: Array2::zeros((4 * hidden, input)),
            w_hidden: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut cell = Self::zeros(input, hidden);
        cell.w_input = xavier(4 * hidden, input, input, 4 * hidden, rng);
        for gate in 0..4 {
            cell.w_hidden
                .slice_mut(s![gate * hidden..(gate + 1) * hidden, ..])
                .assign(&orthogonal(hidden, rng));
        }
        cell.bias
            .slice_mut(s![hidden..2 * hidden])
            .fill(FORGET_BIAS);
        cell
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.ncols()
    }

    pub fn input(&self) -> usize {
        self.w_input.ncols()
    }
}

fn xavier<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Gram-Schmidt on a Gaussian matrix.
fn orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    loop {
        let mut q: Array2<f64> =
            Array2::from_shape_simple_fn((n, n), || StandardNormal.sample(&mut *rng));
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let proj = q.row(i).dot(&q.row(j));
                let rj = q.row(j).to_owned();
                q.row_mut(i).scaled_add(-proj, &rj);
            }
            let norm = q.row(i).dot(&q.row(i)).sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            q.row_mut(i).mapv_inplace(|v| v / norm);
        }
        if ok {
            return q;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub mode: HeadMode,
    pub forward_cell: LstmCellParams,
    pub backward_cell: LstmCellParams,
    /// `d x C`, one column per known class.
    pub head_weights: Array2<f64>,
    /// Present in softmax and sigmoid mode only.
    pub head_bias: Option<Array1<f64>>,
    /// Fine-tuned copy of the embedding table when embeddings are trainable.
    pub embedding: Option<Array2<f64>>,
}

impl EncoderParams {
    pub fn zeros(mode: HeadMode, embed_dim: usize, hidden: usize, classes: usize) -> Self {
        EncoderParams {
            mode,
            forward_cell: LstmCellParams::zeros(embed_dim, hidden),
            backward_cell: LstmCellParams::zeros(embed_dim, hidden),
            head_weights: Array2::zeros((2 * hidden, classes)),
            head_bias: (mode != HeadMode::Lmcl).then(|| Array1::zeros(classes)),
            embedding: None,
        }
    }

    pub fn init<R: Rng + ?Sized>(
        mode: HeadMode,
        embed_dim: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let d = 2 * hidden;
        EncoderParams {
            mode,
            forward_cell: LstmCellParams::init(embed_dim, hidden, rng),
            backward_cell: LstmCellParams::init(embed_dim, hidden, rng),
            head_weights: xavier(d, classes, d, classes, rng),
            head_bias: (mode != HeadMode::Lmcl).then(|| Array1::zeros(classes)),
            embedding: None,
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward_cell.hidden()
    }

    pub fn embed_dim(&self) -> usize {
        self.forward_cell.input()
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.hidden()
    }

    pub fn num_classes(&self) -> usize {
        self.head_weights.ncols()
    }

    /// Same shapes, all zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            mode: self.mode,
            forward_cell: LstmCellParams::zeros(self.embed_dim(), self.hidden()),
            backward_cell: LstmCellParams::zeros(self.embed_dim(), self.hidden()),
            head_weights: Array2::zeros(self.head_weights.raw_dim()),
            head_bias: self.head_bias.as_ref().map(|b| Array1::zeros(b.len())),
            embedding: self.embedding.as_ref().map(|e| Array2::zeros(e.raw_dim())),
        }
    }

    /// Every trainable tensor by name, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> = vec![
            ("forward.w_input", slice(&self.forward_cell.w_input)),
            ("forward.w_hidden", slice(&self.forward_cell.w_hidden)),
            ("forward.bias", self.forward_cell.bias.as_slice().expect("contiguous")),
            ("backward.w_input", slice(&self.backward_cell.w_input)),
            ("backward.w_hidden", slice(&self.backward_cell.w_hidden)),
            ("backward.bias", self.backward_cell.bias.as_slice().expect("contiguous")),
            ("head.weights", slice(&self.head_weights)),
        ];
        if let Some(b) = &self.head_bias {
            out.push(("head.bias", b.as_slice().expect("contiguous")));
        }
        if let Some(e) = &self.embedding {
            out.push(("embedding", slice(e)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = vec![
            ("forward.w_input", slice_mut(&mut self.forward_cell.w_input)),
            ("forward.w_hidden", slice_mut(&mut self.forward_cell.w_hidden)),
            ("forward.bias", self.forward_cell.bias.as_slice_mut().expect("contiguous")),
            ("backward.w_input", slice_mut(&mut self.backward_cell.w_input)),
            ("backward.w_hidden", slice_mut(&mut self.backward_cell.w_hidden)),
            ("backward.bias", self.backward_cell.bias.as_slice_mut().expect("contiguous")),
            ("head.weights", slice_mut(&mut self.head_weights)),
        ];
        if let Some(b) = &mut self.head_bias {
            out.push(("head.bias", b.as_slice_mut().expect("contiguous")));
        }
        if let Some(e) = &mut self.embedding {
            out.push(("embedding", slice_mut(e)));
        }
        out
    }

    fn embeddings<'a>(&'a self, table: &'a EmbeddingTable) -> ArrayView2<'a, f64> {
        match &self.embedding {
            Some(e) => e.view(),
            None => table.vectors.view(),
        }
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Encoder output rows together with the utterance each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Array2<f64>,
    pub row_ids: Vec<usize>,
}

impl FeatureMatrix {
    pub fn empty(dim: usize) -> Self {
        FeatureMatrix {
            rows: Array2::zeros((0, dim)),
            row_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

struct Step {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    /// Gate activations after their nonlinearity, `B x 4h`.
    gates: Array2<f64>,
    tanh_c: Array2<f64>,
    active: Vec<bool>,
}

struct DirectionTrace {
    steps: Vec<Step>,
    tokens: Vec<Vec<usize>>,
}

/// Forward activations kept for [`backward`].
pub struct ForwardPass {
    pub features: Array2<f64>,
    forward: DirectionTrace,
    backward: DirectionTrace,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Token index at recurrence step `t` for every row, or `None` once the row
/// has run out of real tokens.
fn direction_tokens(batch: &Batch, reverse: bool) -> Vec<Vec<Option<usize>>> {
    let steps = batch.lengths.iter().copied().max().unwrap_or(0);
    (0..steps)
        .map(|t| {
            batch
                .lengths
                .iter()
                .enumerate()
                .map(|(r, &len)| {
                    (t < len).then(|| {
                        let pos = if reverse { len - 1 - t } else { t };
                        batch.indices[[r, pos]]
                    })
                })
                .collect()
        })
        .collect()
}

fn run_direction(
    cell: &LstmCellParams,
    embeddings: ArrayView2<f64>,
    batch: &Batch,
    reverse: bool,
    keep_trace: bool,
) -> Result<(Array2<f64>, DirectionTrace)> {
    let n = batch.len();
    let h = cell.hidden();
    let m = cell.input();
    let mut h_state = Array2::<f64>::zeros((n, h));
    let mut c_state = Array2::<f64>::zeros((n, h));
    let mut steps = Vec::new();
    let mut trace_tokens = Vec::new();
    let w_input_t = cell.w_input.t();
    let w_hidden_t = cell.w_hidden.t();

    for (t, tokens) in direction_tokens(batch, reverse).into_iter().enumerate() {
        let mut x = Array2::<f64>::zeros((n, m));
        for (r, tok) in tokens.iter().enumerate() {
            if let Some(tok) = tok {
                x.row_mut(r).assign(&embeddings.row(*tok));
            }
        }
        let mut gates = x.dot(&w_input_t) + h_state.dot(&w_hidden_t);
        gates += &cell.bias;
        for mut row in gates.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if (2 * h..3 * h).contains(&j) {
                    v.tanh()
                } else {
                    sigmoid(*v)
                };
            }
        }
        let mut c_new = c_state.clone();
        let mut h_new = h_state.clone();
        let mut tanh_c = Array2::<f64>::zeros((n, h));
        let active: Vec<bool> = tokens.iter().map(Option::is_some).collect();
        for r in (0..n).filter(|&r| active[r]) {
            let g = gates.row(r);
            for j in 0..h {
                let c = g[h + j] * c_state[[r, j]] + g[j] * g[2 * h + j];
                let tc = c.tanh();
                let hv = g[3 * h + j] * tc;
                if !hv.is_finite() || !c.is_finite() {
                    return Err(Error::NonFinite { row: r, step: t });
                }
                c_new[[r, j]] = c;
                tanh_c[[r, j]] = tc;
                h_new[[r, j]] = hv;
            }
        }
        if keep_trace {
            trace_tokens.push(tokens.iter().map(|t| t.unwrap_or(usize::MAX)).collect());
            steps.push(Step {
                x,
                h_prev: std::mem::replace(&mut h_state, h_new),
                c_prev: std::mem::replace(&mut c_state, c_new),
                gates,
                tanh_c,
                active,
            });
        } else {
            h_state = h_new;
            c_state = c_new;
        }
    }
    Ok((
        h_state,
        DirectionTrace {
            steps,
            tokens: trace_tokens,
        },
    ))
}

fn check_batch(params: &EncoderParams, batch: &Batch, table: &EmbeddingTable) -> Result<()> {
    if let Some(r) = batch.lengths.iter().position(|&l| l == 0) {
        return Err(Error::Contract(format!("batch row {r} has length 0")));
    }
    if let Some(r) = batch.lengths.iter().position(|&l| l > batch.max_len()) {
        return Err(Error::Contract(format!("batch row {r} is longer than the index matrix")));
    }
    let emb = params.embeddings(table);
    if emb.ncols() != params.embed_dim() {
        return Err(Error::Contract(format!(
            "embedding dimension {} does not match encoder input {}",
            emb.ncols(),
            params.embed_dim()
        )));
    }
    if batch.indices.iter().any(|&i| i >= emb.nrows()) {
        return Err(Error::Contract("token index outside the embedding table".into()));
    }
    Ok(())
}

fn encode(
    params: &EncoderParams,
    batch: &Batch,
    table: &EmbeddingTable,
    keep_trace: bool,
) -> Result<ForwardPass> {
    check_batch(params, batch, table)?;
    let emb = params.embeddings(table);
    let (h_fwd, forward) = run_direction(&params.forward_cell, emb, batch, false, keep_trace)?;
    let (h_bwd, backward) = run_direction(&params.backward_cell, emb, batch, true, keep_trace)?;
    let features = ndarray::concatenate(Axis(1), &[h_fwd.view(), h_bwd.view()])
        .expect("matching row counts");
    Ok(ForwardPass {
        features,
        forward,
        backward,
    })
}

/// Sentence features, `n x 2h`.
pub fn forward(params: &EncoderParams, batch: &Batch, table: &EmbeddingTable) -> Result<Array2<f64>> {
    Ok(encode(params, batch, table, false)?.features)
}

/// Like [`forward`] but keeps the activations needed by [`backward`].
pub fn forward_train(
    params: &EncoderParams,
    batch: &Batch,
    table: &EmbeddingTable,
) -> Result<ForwardPass> {
    encode(params, batch, table, true)
}

fn backward_direction(
    cell: &LstmCellParams,
    trace: &DirectionTrace,
    d_final: Array2<f64>,
    grads: &mut LstmCellParams,
    mut d_embedding: Option<&mut Array2<f64>>,
) {
    let h = cell.hidden();
    let mut dh = d_final;
    let mut dc = Array2::<f64>::zeros(dh.raw_dim());
    for (step, tokens) in trace.steps.iter().zip(&trace.tokens).rev() {
        let n = dh.nrows();
        let mut dz = Array2::<f64>::zeros((n, 4 * h));
        let mut dc_prev = dc.clone();
        for r in (0..n).filter(|&r| step.active[r]) {
            let g = step.gates.row(r);
            for j in 0..h {
                let (ig, fg, cg, og) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = step.tanh_c[[r, j]];
                let dhv = dh[[r, j]];
                let dct = dc[[r, j]] + dhv * og * (1.0 - tc * tc);
                dz[[r, 3 * h + j]] = dhv * tc * og * (1.0 - og);
                dz[[r, j]] = dct * cg * ig * (1.0 - ig);
                dz[[r, 2 * h + j]] = dct * ig * (1.0 - cg * cg);
                dz[[r, h + j]] = dct * step.c_prev[[r, j]] * fg * (1.0 - fg);
                dc_prev[[r, j]] = dct * fg;
            }
        }
        grads.w_input += &dz.t().dot(&step.x);
        grads.w_hidden += &dz.t().dot(&step.h_prev);
        grads.bias += &dz.sum_axis(Axis(0));
        let dh_recur = dz.dot(&cell.w_hidden);
        if let Some(d_emb) = d_embedding.as_deref_mut() {
            let dx = dz.dot(&cell.w_input);
            for (r, &tok) in tokens.iter().enumerate() {
                if step.active[r] {
                    let mut row = d_emb.row_mut(tok);
                    row += &dx.row(r);
                }
            }
        }
        for (r, &active) in step.active.iter().enumerate() {
            if active {
                dh.row_mut(r).assign(&dh_recur.row(r));
            }
        }
        dc = dc_prev;
    }
}

/// Parameter gradients for an upstream gradient on the features of the
/// batch that produced `pass`. Head gradients are left at zero; see
/// [`head_backward`].
pub fn backward(
    params: &EncoderParams,
    pass: &ForwardPass,
    d_features: &Array2<f64>,
) -> Result<EncoderParams> {
    let mut grads = params.zeros_like();
    backward_into(params, pass, d_features, &mut grads)?;
    Ok(grads)
}

/// [`backward`], accumulating into an existing gradient buffer.
pub fn backward_into(
    params: &EncoderParams,
    pass: &ForwardPass,
    d_features: &Array2<f64>,
    grads: &mut EncoderParams,
) -> Result<()> {
    if d_features.dim() != pass.features.dim() {
        return Err(Error::Contract(format!(
            "upstream gradient shape {:?} does not match features {:?}",
            d_features.dim(),
            pass.features.dim()
        )));
    }
    let h = params.hidden();
    let d_fwd = d_features.slice(s![.., ..h]).to_owned();
    let d_bwd = d_features.slice(s![.., h..]).to_owned();
    backward_direction(
        &params.forward_cell,
        &pass.forward,
        d_fwd,
        &mut grads.forward_cell,
        grads.embedding.as_mut(),
    );
    backward_direction(
        &params.backward_cell,
        &pass.backward,
        d_bwd,
        &mut grads.backward_cell,
        grads.embedding.as_mut(),
    );
    Ok(())
}

fn guarded_norm(v: ndarray::ArrayView1<f64>) -> f64 {
    (v.dot(&v) + NORM_EPS).sqrt()
}

/// Divides every row by `sqrt(|row|^2 + eps)`.
pub fn normalize_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let n = guarded_norm(row.view());
        row.mapv_inplace(|v| v / n);
    }
    out
}

fn normalize_columns(a: &Array2<f64>) -> Array2<f64> {
    normalize_rows(&a.t().to_owned()).t().to_owned()
}

/// Raw logits (`x W + b`) for the affine heads, cosines for the LMCL head.
pub fn class_scores(params: &EncoderParams, features: &Array2<f64>) -> Result<Array2<f64>> {
    if features.ncols() != params.feature_dim() {
        return Err(Error::Contract(format!(
            "feature width {} does not match encoder output {}",
            features.ncols(),
            params.feature_dim()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature passed to the head".into()));
    }
    Ok(match params.mode {
        HeadMode::Lmcl => {
            normalize_rows(features).dot(&normalize_columns(&params.head_weights))
        }
        HeadMode::Softmax | HeadMode::Sigmoid => {
            let mut z = features.dot(&params.head_weights);
            if let Some(b) = &params.head_bias {
                z += b;
            }
            z
        }
    })
}

/// Backpropagates a score gradient through the head. Fills the head fields
/// of `grads` and returns the gradient w.r.t. the features.
pub fn head_backward(
    params: &EncoderParams,
    features: &Array2<f64>,
    d_scores: &Array2<f64>,
    grads: &mut EncoderParams,
) -> Result<Array2<f64>> {
    if d_scores.dim() != (features.nrows(), params.num_classes()) {
        return Err(Error::Contract("score gradient shape mismatch".into()));
    }
    match params.mode {
        HeadMode::Lmcl => {
            let xn = normalize_rows(features);
            let wn = normalize_columns(&params.head_weights);
            let d_xn = d_scores.dot(&wn.t());
            let d_wn = xn.t().dot(d_scores);
            let mut d_x = Array2::zeros(features.raw_dim());
            for ((x, g), mut out) in features.rows().into_iter().zip(d_xn.rows()).zip(d_x.rows_mut()) {
                out.assign(&normalization_vjp(x, g));
            }
            for ((w, g), mut out) in params
                .head_weights
                .columns()
                .into_iter()
                .zip(d_wn.columns())
                .zip(grads.head_weights.columns_mut())
            {
                out += &normalization_vjp(w, g);
            }
            Ok(d_x)
        }
        HeadMode::Softmax | HeadMode::Sigmoid => {
            grads.head_weights += &features.t().dot(d_scores);
            if let Some(b) = &mut grads.head_bias {
                *b += &d_scores.sum_axis(Axis(0));
            }
            Ok(d_scores.dot(&params.head_weights.t()))
        }
    }
}

/// Vector-Jacobian product of `v -> v / sqrt(v.v + eps)`.
fn normalization_vjp(v: ndarray::ArrayView1<f64>, g: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let r = guarded_norm(v);
    let vg = v.dot(&g);
    let r3 = r * r * r;
    Zip::from(v).and(g).map_collect(|&vi, &gi| gi / r - vi * vg / r3)
}
