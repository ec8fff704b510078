//! Interpolated next-token prediction and evaluation.
//!
//! Three systems share one decoder: the plain LM, the LM interpolated with a
//! nearest-neighbour retriever, and the LM interpolated with the trained MLP
//! memory. The mixture is `λ·p_aux + (1−λ)·p_LM`, with `p_aux` produced
//! either by searching the datastore or by one memory forward pass over the
//! same hidden state the datastore was keyed on.
//!
//! Perplexity uses a sliding-window protocol: the first window scores every
//! position it covers, and each later window advances by `stride` tokens and
//! scores only those new positions, so every scored token conditions on up to
//! `window_len − 1` prior tokens. Negative log-likelihoods accumulate in
//! `f64` regardless of model precision.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datastore::Datastore;
use crate::error::{Error, Result};
use crate::io::hex;
use crate::knn::{KnnIndex, Neighbor, SparseDistribution};
use crate::linalg::{logsumexp, Matrix};
use crate::lm::{layer_for_fraction, DecoderLm};
use crate::memory::MlpMemory;

/// Which auxiliary model, if any, the decoder is interpolated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    LmOnly,
    KnnLm,
    MlpMem,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::LmOnly => "lm-only",
            Mode::KnnLm => "knn-lm",
            Mode::MlpMem => "mlp-mem",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "lm" | "lm-only" => Ok(Mode::LmOnly),
            "knn" | "knn-lm" => Ok(Mode::KnnLm),
            "mlp" | "mlp-mem" => Ok(Mode::MlpMem),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected lm, knn, or mlp)"
            ))),
        }
    }
}

/// Sliding-window evaluation protocol.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Window length: each scored token sees at most `window_len − 1`
    /// context tokens, so `window_len − 1` must not exceed the model's
    /// context limit.
    pub window_len: usize,
    /// Tokens scored per window after the first; must leave at least one
    /// context token, i.e. `stride ≤ window_len − 1`.
    pub stride: usize,
    /// Interpolation weight on the auxiliary distribution.
    pub lambda: f64,
    /// Cap on scored tokens; `None` scores the whole split.
    pub max_scored: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            window_len: 1024,
            stride: 512,
            lambda: 0.25,
            max_scored: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.window_len < 2 {
            problems.push("window_len must be at least 2".to_string());
        }
        if self.stride == 0 || self.stride + 1 > self.window_len {
            problems.push(format!(
                "stride {} must be in 1..={} so every scored token keeps context",
                self.stride,
                self.window_len.saturating_sub(1)
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            problems.push(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Result of one perplexity evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PerplexityReport {
    pub mode: Mode,
    pub lambda: f64,
    /// Neighbour count, for retrieval mode.
    pub k: Option<usize>,
    pub window_len: usize,
    /// Scored tokens.
    pub token_count: usize,
    /// Total negative log-likelihood, nats.
    pub nll: f64,
    /// Set when the split was shorter than one full window.
    pub truncated: bool,
}

/// CSV header matching [`PerplexityReport::csv_row`].
pub const EVAL_CSV_HEADER: &str = "mode,lambda,k,window,split,ppl,nll,tokens";

impl PerplexityReport {
    pub fn ppl(&self) -> f64 {
        (self.nll / self.token_count as f64).exp()
    }

    pub fn csv_row(&self, split: &str) -> String {
        let k = self.k.map(|k| k.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.mode,
            self.lambda,
            k,
            self.window_len,
            split,
            self.ppl(),
            self.nll,
            self.token_count
        )
    }
}

// ---------------------------------------------------------------------------
// Predictor
// ---------------------------------------------------------------------------

/// Auxiliary resource paired with the decoder.
pub enum Aux<'a> {
    None,
    Knn {
        index: KnnIndex<'a>,
        datastore: &'a Datastore,
        k: usize,
    },
    Memory {
        memory: &'a MlpMemory<f32>,
        /// Depth fraction the memory's inputs were extracted at.
        layer_fraction: f64,
    },
}

/// A decoder plus whatever auxiliary model the mode requires, with
/// compatibility checked once at construction.
pub struct Predictor<'a> {
    pub lm: &'a DecoderLm<f32>,
    pub aux: Aux<'a>,
    /// 1-based block whose output feeds the auxiliary model.
    query_layer: Option<usize>,
}

impl<'a> Predictor<'a> {
    pub fn lm_only(lm: &'a DecoderLm<f32>) -> Self {
        Predictor {
            lm,
            aux: Aux::None,
            query_layer: None,
        }
    }

    /// Pair the decoder with a datastore retriever. When `lm_hash` (the
    /// decoder checkpoint digest) is known, it is checked against the hash
    /// recorded in the datastore at build time.
    pub fn with_knn(
        lm: &'a DecoderLm<f32>,
        lm_hash: Option<[u8; 32]>,
        datastore: &'a Datastore,
        k: usize,
    ) -> Result<Self> {
        if let Some(h) = lm_hash {
            if datastore.model_hash != h {
                return Err(Error::Incompatible(format!(
                    "datastore was built from model {} but the loaded model is {}",
                    hex(&datastore.model_hash),
                    hex(&h)
                )));
            }
        }
        if datastore.d_model() != lm.config.d_model {
            return Err(Error::Incompatible(format!(
                "datastore keys have width {} but the model width is {}",
                datastore.d_model(),
                lm.config.d_model
            )));
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(Predictor {
            lm,
            aux: Aux::Knn {
                index: KnnIndex::new(datastore),
                datastore,
                k,
            },
            query_layer: Some(layer_for_fraction(
                datastore.layer_fraction as f64,
                lm.config.n_layer,
            )),
        })
    }

    /// Pair the decoder with a trained memory. `layer_fraction` must be the
    /// depth fraction the memory's training inputs were extracted at (it is
    /// carried in the datastore and in checkpoint provenance).
    pub fn with_memory(
        lm: &'a DecoderLm<f32>,
        memory: &'a MlpMemory<f32>,
        layer_fraction: f64,
    ) -> Result<Self> {
        if memory.config.d_model != lm.config.d_model {
            return Err(Error::Incompatible(format!(
                "memory expects width {} but the model width is {}",
                memory.config.d_model, lm.config.d_model
            )));
        }
        if memory.config.n_vocab != lm.config.n_vocab {
            return Err(Error::Incompatible(format!(
                "memory vocabulary {} but the model vocabulary is {}",
                memory.config.n_vocab, lm.config.n_vocab
            )));
        }
        if !(0.0..=1.0).contains(&layer_fraction) {
            return Err(Error::Config(format!(
                "layer fraction {layer_fraction} outside [0, 1]"
            )));
        }
        Ok(Predictor {
            lm,
            aux: Aux::Memory {
                memory,
                layer_fraction,
            },
            query_layer: Some(layer_for_fraction(layer_fraction, lm.config.n_layer)),
        })
    }

    pub fn mode(&self) -> Mode {
        match self.aux {
            Aux::None => Mode::LmOnly,
            Aux::Knn { .. } => Mode::KnnLm,
            Aux::Memory { .. } => Mode::MlpMem,
        }
    }

    fn k(&self) -> Option<usize> {
        match self.aux {
            Aux::Knn { k, .. } => Some(k),
            _ => None,
        }
    }

    /// Dense next-token distribution after the context, using at most the
    /// final `n_ctx` tokens. `lambda` is ignored in LM-only mode.
    pub fn predict(&self, context: &[u32], lambda: f64) -> Result<Vec<f64>> {
        Ok(self.predict_timed(context, lambda)?.0)
    }

    /// [`predict`](Self::predict) plus wall-clock seconds spent in the
    /// decoder forward and in the auxiliary model.
    pub fn predict_timed(&self, context: &[u32], lambda: f64) -> Result<(Vec<f64>, f64, f64)> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
        }
        let start = context.len().saturating_sub(self.lm.config.n_ctx);
        let t0 = Instant::now();
        let enc = self.lm.encode_context(&context[start..])?;
        let lse = logsumexp(&enc.logits);
        let mut p: Vec<f64> = enc
            .logits
            .iter()
            .map(|&z| (z as f64 - lse).exp())
            .collect();
        let lm_seconds = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        match &self.aux {
            Aux::None => {}
            Aux::Knn { index, k, .. } => {
                let query = &enc.hidden[self.query_layer.expect("knn has a query layer") - 1];
                let neighbors = index.search(query, *k, None);
                let sparse = SparseDistribution::from_neighbors(&neighbors);
                for v in &mut p {
                    *v *= 1.0 - lambda;
                }
                for (&tok, &prob) in sparse.tokens.iter().zip(&sparse.probs) {
                    p[tok as usize] += lambda * prob;
                }
            }
            Aux::Memory { memory, .. } => {
                let query = &enc.hidden[self.query_layer.expect("memory has a query layer") - 1];
                let p_mem = memory.forward_one(query)?;
                for (v, m) in p.iter_mut().zip(&p_mem) {
                    *v = (1.0 - lambda) * *v + lambda * m;
                }
            }
        }
        let aux_seconds = t1.elapsed().as_secs_f64();
        Ok((p, lm_seconds, aux_seconds))
    }
}

// ---------------------------------------------------------------------------
// Sliding-window evaluation
// ---------------------------------------------------------------------------

/// One window's scored slice: `logits` row `j` (for `j` in `rows`) predicts
/// `targets[j − rows.start]`; `hidden` rows align with logits rows.
struct WindowSlice<'w> {
    rows: Range<usize>,
    targets: &'w [u32],
    logits: Matrix<f32>,
    hidden: Option<Matrix<f32>>,
}

/// Drive the sliding-window protocol, calling `sink` once per window with
/// the rows to score. Returns `(scored_count, truncated)`.
fn walk_windows(
    lm: &DecoderLm<f32>,
    tokens: &[u32],
    config: &EvalConfig,
    query_layer: Option<usize>,
    mut sink: impl FnMut(WindowSlice<'_>) -> Result<()>,
) -> Result<(usize, bool)> {
    config.validate()?;
    if tokens.len() < 2 {
        return Err(Error::Config(
            "evaluation needs at least 2 tokens (one context, one target)".into(),
        ));
    }
    // Forward length per window: the scored token itself is not part of its
    // own context, so a `window_len` window means at most `window_len − 1`
    // conditioning tokens.
    let w = config.window_len - 1;
    if w > lm.config.n_ctx {
        return Err(Error::Config(format!(
            "window {} needs a model context of at least {}, but n_ctx is {}",
            config.window_len,
            w,
            lm.config.n_ctx
        )));
    }
    let truncated = tokens.len() < config.window_len;
    let last_target = tokens.len() - 1;
    let budget = config.max_scored.unwrap_or(usize::MAX).max(1);

    let mut scored = 0usize;
    let mut prev_end = 0usize; // highest target position scored so far
    let mut end = w.min(last_target);
    loop {
        let a = end.saturating_sub(w);
        let t = end - a;
        let fwd = lm.forward_batch(&tokens[a..end], 1, t, true, false)?;
        let mut block_outputs = fwd.block_outputs;
        let logits = fwd.logits.expect("requested logits");
        let mut rows = (prev_end - a)..(end - a);
        let mut targets = &tokens[prev_end + 1..=end];
        let mut done = end == last_target;
        if scored + rows.len() >= budget {
            let keep = budget - scored;
            rows = rows.start..rows.start + keep;
            targets = &targets[..keep];
            done = true;
        }
        scored += rows.len();
        let hidden = query_layer.map(|q| block_outputs.swap_remove(q - 1));
        sink(WindowSlice {
            rows,
            targets,
            logits,
            hidden,
        })?;
        if done {
            break;
        }
        prev_end = end;
        end = (end + config.stride).min(last_target);
    }
    Ok((scored, truncated))
}

/// `ln p_LM(target)` for one logits row, computed through the same
/// exp/ln rounding as the interpolated path so that `λ = 0` matches the
/// LM-only mode bit for bit.
fn lm_target_prob(logits_row: &[f32], target: u32) -> f64 {
    let lse = logsumexp(logits_row);
    (logits_row[target as usize] as f64 - lse).exp()
}

/// Sliding-window perplexity of the predictor's mode over `tokens`.
pub fn evaluate_ppl(
    predictor: &Predictor<'_>,
    tokens: &[u32],
    config: &EvalConfig,
) -> Result<PerplexityReport> {
    let lambda = config.lambda;
    let mut nll = 0.0f64;
    let (scored, truncated) = walk_windows(
        predictor.lm,
        tokens,
        config,
        predictor.query_layer,
        |slice| {
            let aux = aux_target_probs(predictor, &slice, predictor.k())?;
            for (i, row) in slice.rows.clone().enumerate() {
                let p_lm = lm_target_prob(slice.logits.row(row), slice.targets[i]);
                let p = match &aux {
                    Some(probs) => (1.0 - lambda) * p_lm + lambda * probs[i],
                    None => p_lm,
                };
                nll -= p.ln();
            }
            Ok(())
        },
    )?;
    Ok(PerplexityReport {
        mode: predictor.mode(),
        lambda: if predictor.mode() == Mode::LmOnly {
            0.0
        } else {
            lambda
        },
        k: predictor.k(),
        window_len: config.window_len,
        token_count: scored,
        nll,
        truncated,
    })
}

/// Auxiliary probability of each scored target in a window, or `None` in
/// LM-only mode. `k_override` narrows retrieval to the first `k` neighbours.
fn aux_target_probs(
    predictor: &Predictor<'_>,
    slice: &WindowSlice<'_>,
    k: Option<usize>,
) -> Result<Option<Vec<f64>>> {
    match &predictor.aux {
        Aux::None => Ok(None),
        Aux::Knn { index, .. } => {
            let k = k.expect("retrieval mode carries k");
            let queries = gather_rows(slice);
            let results = index.search_batch(&queries, k, None);
            Ok(Some(
                results
                    .iter()
                    .zip(slice.targets)
                    .map(|(ns, &t)| SparseDistribution::from_neighbors(ns).prob_of(t))
                    .collect(),
            ))
        }
        Aux::Memory { memory, .. } => {
            let queries = gather_rows(slice);
            let (z, _) = memory.forward(&queries, false);
            Ok(Some(
                slice
                    .targets
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| {
                        let row = z.row(i);
                        let lse = logsumexp(row);
                        (row[t as usize] as f64 - lse).exp()
                    })
                    .collect(),
            ))
        }
    }
}

fn gather_rows(slice: &WindowSlice<'_>) -> Matrix<f32> {
    let hidden = slice
        .hidden
        .as_ref()
        .expect("auxiliary modes extract hidden states");
    let mut m = Matrix::zeros(slice.rows.len(), hidden.cols);
    for (i, row) in slice.rows.clone().enumerate() {
        m.row_mut(i).copy_from_slice(hidden.row(row));
    }
    m
}

/// Perplexity at several interpolation weights from one shared pass: the
/// decoder forwards and datastore searches run once, not once per λ.
pub fn sweep_lambda(
    predictor: &Predictor<'_>,
    tokens: &[u32],
    config: &EvalConfig,
    lambdas: &[f64],
) -> Result<Vec<PerplexityReport>> {
    if predictor.mode() == Mode::LmOnly {
        return Err(Error::Config(
            "lambda sweep needs an auxiliary model; LM-only ignores lambda".into(),
        ));
    }
    for &l in lambdas {
        if !(0.0..=1.0).contains(&l) {
            return Err(Error::Config(format!("lambda {l} outside [0, 1]")));
        }
    }
    let mut nll = vec![0.0f64; lambdas.len()];
    let (scored, truncated) = walk_windows(
        predictor.lm,
        tokens,
        config,
        predictor.query_layer,
        |slice| {
            let aux = aux_target_probs(predictor, &slice, predictor.k())?
                .expect("auxiliary mode");
            for (i, row) in slice.rows.clone().enumerate() {
                let p_lm = lm_target_prob(slice.logits.row(row), slice.targets[i]);
                for (li, &lambda) in lambdas.iter().enumerate() {
                    nll[li] -= ((1.0 - lambda) * p_lm + lambda * aux[i]).ln();
                }
            }
            Ok(())
        },
    )?;
    Ok(lambdas
        .iter()
        .zip(nll)
        .map(|(&lambda, nll)| PerplexityReport {
            mode: predictor.mode(),
            lambda,
            k: predictor.k(),
            window_len: config.window_len,
            token_count: scored,
            nll,
            truncated,
        })
        .collect())
}

/// Retrieval perplexity at several neighbour counts from one shared pass:
/// the datastore is searched once at `max(ks)` and each smaller `k` reuses
/// the nearest prefix of that result, which is exactly the `k`-neighbour
/// search result because neighbours are sorted by distance.
pub fn sweep_k(
    predictor: &Predictor<'_>,
    tokens: &[u32],
    config: &EvalConfig,
    ks: &[usize],
) -> Result<Vec<PerplexityReport>> {
    let Aux::Knn { index, .. } = &predictor.aux else {
        return Err(Error::Config("k sweep needs retrieval mode".into()));
    };
    if ks.is_empty() || ks.iter().any(|&k| k == 0) {
        return Err(Error::Config("k sweep needs positive neighbour counts".into()));
    }
    let k_max = *ks.iter().max().expect("nonempty");
    let lambda = config.lambda;
    let mut nll = vec![0.0f64; ks.len()];
    let (scored, truncated) = walk_windows(
        predictor.lm,
        tokens,
        config,
        predictor.query_layer,
        |slice| {
            let queries = gather_rows(&slice);
            let results = index.search_batch(&queries, k_max, None);
            for (i, row) in slice.rows.clone().enumerate() {
                let p_lm = lm_target_prob(slice.logits.row(row), slice.targets[i]);
                let target = slice.targets[i];
                let neighbors: &[Neighbor] = &results[i];
                for (ki, &k) in ks.iter().enumerate() {
                    let head = &neighbors[..k.min(neighbors.len())];
                    let p_aux = SparseDistribution::from_neighbors(head).prob_of(target);
                    nll[ki] -= ((1.0 - lambda) * p_lm + lambda * p_aux).ln();
                }
            }
            Ok(())
        },
    )?;
    Ok(ks
        .iter()
        .zip(nll)
        .map(|(&k, nll)| PerplexityReport {
            mode: Mode::KnnLm,
            lambda,
            k: Some(k),
            window_len: config.window_len,
            token_count: scored,
            nll,
            truncated,
        })
        .collect())
}

/// Stream the predictor's full next-token distribution at every scored
/// position of the sliding-window protocol, in evaluation order.
///
/// Each callback receives one dense distribution over the vocabulary —
/// exactly the mixture whose target probability [`evaluate_ppl`] scores, so
/// sharpness statistics over the stream describe what perplexity sees.
/// Returns the number of positions visited (respecting `max_scored`).
pub fn stream_distributions(
    predictor: &Predictor<'_>,
    tokens: &[u32],
    config: &EvalConfig,
    mut sink: impl FnMut(&[f64]) -> Result<()>,
) -> Result<usize> {
    let lambda = config.lambda;
    let mut dense = vec![0.0f64; predictor.lm.config.n_vocab];
    let fill_lm = |dense: &mut [f64], logits_row: &[f32]| {
        let lse = logsumexp(logits_row);
        for (d, &z) in dense.iter_mut().zip(logits_row) {
            *d = (z as f64 - lse).exp();
        }
    };
    let (scored, _truncated) = walk_windows(
        predictor.lm,
        tokens,
        config,
        predictor.query_layer,
        |slice| {
            match &predictor.aux {
                Aux::None => {
                    for row in slice.rows.clone() {
                        fill_lm(&mut dense, slice.logits.row(row));
                        sink(&dense)?;
                    }
                }
                Aux::Knn { index, k, .. } => {
                    let queries = gather_rows(&slice);
                    let results = index.search_batch(&queries, *k, None);
                    for (i, row) in slice.rows.clone().enumerate() {
                        fill_lm(&mut dense, slice.logits.row(row));
                        for v in dense.iter_mut() {
                            *v *= 1.0 - lambda;
                        }
                        let sparse = SparseDistribution::from_neighbors(&results[i]);
                        for (&tok, &p) in sparse.tokens.iter().zip(&sparse.probs) {
                            dense[tok as usize] += lambda * p;
                        }
                        sink(&dense)?;
                    }
                }
                Aux::Memory { memory, .. } => {
                    let queries = gather_rows(&slice);
                    let (z, _) = memory.forward(&queries, false);
                    for (i, row) in slice.rows.clone().enumerate() {
                        fill_lm(&mut dense, slice.logits.row(row));
                        let mem_row = z.row(i);
                        let mem_lse = logsumexp(mem_row);
                        for (d, &mz) in dense.iter_mut().zip(mem_row) {
                            *d = (1.0 - lambda) * *d + lambda * (mz as f64 - mem_lse).exp();
                        }
                        sink(&dense)?;
                    }
                }
            }
            Ok(())
        },
    )?;
    Ok(scored)
}

/// Fraction of scored positions where two predictors' interpolated argmax
/// tokens agree. Both predictors must share the same decoder and query
/// layer (they see identical hidden states).
pub fn mode_agreement(
    a: &Predictor<'_>,
    b: &Predictor<'_>,
    tokens: &[u32],
    config: &EvalConfig,
) -> Result<f64> {
    if !std::ptr::eq(a.lm, b.lm) {
        return Err(Error::Config(
            "agreement compares two systems over the same decoder".into(),
        ));
    }
    if a.query_layer != b.query_layer {
        return Err(Error::Incompatible(format!(
            "query layers differ: {:?} vs {:?}",
            a.query_layer, b.query_layer
        )));
    }
    let lambda = config.lambda;
    let mut agreements = 0usize;
    let (scored, _) = walk_windows(a.lm, tokens, config, a.query_layer, |slice| {
        let pa = argmax_tokens(a, &slice, lambda)?;
        let pb = argmax_tokens(b, &slice, lambda)?;
        agreements += pa.iter().zip(&pb).filter(|(x, y)| x == y).count();
        Ok(())
    })?;
    Ok(agreements as f64 / scored as f64)
}

/// Interpolated argmax token at each scored row of a window.
fn argmax_tokens(
    predictor: &Predictor<'_>,
    slice: &WindowSlice<'_>,
    lambda: f64,
) -> Result<Vec<u32>> {
    let n_vocab = predictor.lm.config.n_vocab;
    // Dense auxiliary rows, aligned with scored rows.
    let dense_aux: Option<Vec<Vec<f64>>> = match &predictor.aux {
        Aux::None => None,
        Aux::Knn { index, k, .. } => {
            let queries = gather_rows(slice);
            let results = index.search_batch(&queries, *k, None);
            Some(
                results
                    .iter()
                    .map(|ns| {
                        let sparse = SparseDistribution::from_neighbors(ns);
                        let mut dense = vec![0.0; n_vocab];
                        for (&t, &p) in sparse.tokens.iter().zip(&sparse.probs) {
                            dense[t as usize] = p;
                        }
                        dense
                    })
                    .collect(),
            )
        }
        Aux::Memory { memory, .. } => {
            let queries = gather_rows(slice);
            let (z, _) = memory.forward(&queries, false);
            Some(
                (0..z.rows)
                    .map(|i| {
                        let row = z.row(i);
                        let lse = logsumexp(row);
                        row.iter().map(|&v| (v as f64 - lse).exp()).collect()
                    })
                    .collect(),
            )
        }
    };
    let mut out = Vec::with_capacity(slice.rows.len());
    for (i, row) in slice.rows.clone().enumerate() {
        let logits = slice.logits.row(row);
        let lse = logsumexp(logits);
        let mut best = 0usize;
        let mut best_p = f64::NEG_INFINITY;
        for v in 0..n_vocab {
            let p_lm = (logits[v] as f64 - lse).exp();
            let p = match &dense_aux {
                Some(aux) => (1.0 - lambda) * p_lm + lambda * aux[i][v],
                None => p_lm,
            };
            if p > best_p {
                best_p = p;
                best = v;
            }
        }
        out.push(best as u32);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Latency
// ---------------------------------------------------------------------------

/// Wall-clock cost of one next-token prediction for a given mode, context
/// length, and datastore size.
#[derive(Debug, Clone, Copy)]
pub struct LatencyRow {
    pub mode: Mode,
    pub n_ctx: usize,
    /// Datastore entry count for retrieval mode, 0 otherwise.
    pub datastore_size: usize,
    pub ms_per_token_mean: f64,
    pub ms_per_token_stdev: f64,
    /// Mean milliseconds spent in the auxiliary model alone.
    pub aux_ms_mean: f64,
}

/// CSV header matching [`LatencyRow::csv_row`].
pub const LATENCY_CSV_HEADER: &str = "mode,n_ctx,datastore_size,ms_per_token_mean,ms_per_token_stdev";

impl LatencyRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.mode, self.n_ctx, self.datastore_size, self.ms_per_token_mean, self.ms_per_token_stdev
        )
    }
}

/// Benchmark protocol.
#[derive(Debug, Clone, Copy)]
pub struct LatencySettings {
    /// Unmeasured predictions before timing starts.
    pub warmup: usize,
    /// Measured predictions.
    pub reps: usize,
    pub lambda: f64,
}

impl Default for LatencySettings {
    fn default() -> Self {
        LatencySettings {
            warmup: 10,
            reps: 30,
            lambda: 0.25,
        }
    }
}

/// Time one next-token prediction at each context length. Strictly
/// single-threaded; the context is the last `n_ctx` tokens of `tokens`.
pub fn bench_latency(
    predictor: &Predictor<'_>,
    tokens: &[u32],
    ctx_lengths: &[usize],
    settings: &LatencySettings,
) -> Result<Vec<LatencyRow>> {
    let datastore_size = match &predictor.aux {
        Aux::Knn { datastore, .. } => datastore.count(),
        _ => 0,
    };
    let mut rows = Vec::with_capacity(ctx_lengths.len());
    for &n_ctx in ctx_lengths {
        if n_ctx == 0 || n_ctx > tokens.len() {
            return Err(Error::Config(format!(
                "context length {n_ctx} not available from {} tokens",
                tokens.len()
            )));
        }
        let context = &tokens[tokens.len() - n_ctx..];
        for _ in 0..settings.warmup {
            predictor.predict_timed(context, settings.lambda)?;
        }
        let mut totals = Vec::with_capacity(settings.reps);
        let mut aux_total = 0.0;
        for _ in 0..settings.reps.max(1) {
            let (_, lm_s, aux_s) = predictor.predict_timed(context, settings.lambda)?;
            totals.push((lm_s + aux_s) * 1e3);
            aux_total += aux_s * 1e3;
        }
        let n = totals.len() as f64;
        let mean = totals.iter().sum::<f64>() / n;
        let var = totals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        rows.push(LatencyRow {
            mode: predictor.mode(),
            n_ctx,
            datastore_size,
            ms_per_token_mean: mean,
            ms_per_token_stdev: var.sqrt(),
            aux_ms_mean: aux_total / n,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{build_datastore, DatastoreBuildSettings};
    use crate::lm::LmConfig;
    use crate::memory::{MlpConfig, MlpMemory};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn tiny_lm_config() -> LmConfig {
        LmConfig {
            n_layer: 2,
            d_model: 16,
            n_heads: 2,
            d_attn: 16,
            d_ff: 32,
            n_ctx: 32,
            n_vocab: 11,
        }
    }

    fn tiny_setup() -> (DecoderLm<f32>, Vec<u32>, Datastore) {
        let lm = DecoderLm::<f32>::init(tiny_lm_config(), 7).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let tokens: Vec<u32> = (0..600).map(|_| rng.gen_range(0..11)).collect();
        let ds = build_datastore(
            &lm,
            &tokens[..400],
            [3u8; 32],
            &DatastoreBuildSettings::default(),
        )
        .unwrap();
        (lm, tokens, ds)
    }

    fn eval_config(window: usize, stride: usize, lambda: f64) -> EvalConfig {
        EvalConfig {
            window_len: window,
            stride,
            lambda,
            max_scored: None,
        }
    }

    #[test]
    fn streamed_distributions_are_normalized_and_counted() {
        let (lm, tokens, ds) = tiny_setup();
        let config = eval_config(16, 8, 0.4);
        let test = &tokens[400..];
        let mem_config = MlpConfig {
            n_layer_mlp: 1,
            d_model: 16,
            d_ff: 24,
            n_vocab: 11,
            activation: "silu".into(),
        };
        let memory = MlpMemory::<f32>::init(mem_config, 5).unwrap();

        // Every streamed vector is a probability distribution, and the
        // stream length matches the scored-token count of the same protocol.
        for predictor in [
            Predictor::lm_only(&lm),
            Predictor::with_knn(&lm, Some([3u8; 32]), &ds, 4).unwrap(),
            Predictor::with_memory(&lm, &memory, 0.7).unwrap(),
        ] {
            let report = evaluate_ppl(&predictor, test, &config).unwrap();
            let mut count = 0usize;
            let streamed = stream_distributions(&predictor, test, &config, |p| {
                count += 1;
                assert_eq!(p.len(), 11);
                let sum: f64 = p.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
                assert!(p.iter().all(|&v| v >= 0.0));
                Ok(())
            })
            .unwrap();
            assert_eq!(streamed, report.token_count);
            assert_eq!(count, streamed);
        }

        // At λ = 0 every mode streams exactly the decoder's distributions.
        let zero = eval_config(16, 8, 0.0);
        let mut lm_stream: Vec<Vec<f64>> = Vec::new();
        stream_distributions(&Predictor::lm_only(&lm), test, &zero, |p| {
            lm_stream.push(p.to_vec());
            Ok(())
        })
        .unwrap();
        for predictor in [
            Predictor::with_knn(&lm, Some([3u8; 32]), &ds, 4).unwrap(),
            Predictor::with_memory(&lm, &memory, 0.7).unwrap(),
        ] {
            let mut i = 0usize;
            stream_distributions(&predictor, test, &zero, |p| {
                assert_eq!(p, &lm_stream[i][..], "position {i}");
                i += 1;
                Ok(())
            })
            .unwrap();
            assert_eq!(i, lm_stream.len());
        }

        // The scored-token budget caps the stream.
        let mut capped = eval_config(16, 8, 0.4);
        capped.max_scored = Some(20);
        let knn = Predictor::with_knn(&lm, Some([3u8; 32]), &ds, 4).unwrap();
        let n = stream_distributions(&knn, test, &capped, |_| Ok(())).unwrap();
        assert_eq!(n, 20);
    }

    #[test]
    fn mode_names_round_trip() {
        for (s, m) in [
            ("lm", Mode::LmOnly),
            ("lm-only", Mode::LmOnly),
            ("knn", Mode::KnnLm),
            ("knn-lm", Mode::KnnLm),
            ("mlp", Mode::MlpMem),
            ("mlp-mem", Mode::MlpMem),
        ] {
            assert_eq!(s.parse::<Mode>().unwrap(), m);
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("gpu".parse::<Mode>().is_err());
    }

    #[test]
    fn lm_only_prediction_matches_encoder_softmax() {
        let (lm, tokens, _) = tiny_setup();
        let predictor = Predictor::lm_only(&lm);
        let context = &tokens[..20];
        let p = predictor.predict(context, 0.7).unwrap();
        let enc = lm.encode_context(context).unwrap();
        let lse = logsumexp(&enc.logits);
        for (v, &z) in p.iter().zip(&enc.logits) {
            assert!((v - (z as f64 - lse).exp()).abs() < 1e-15);
        }
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn interpolation_is_valid_and_lambda_zero_matches_lm() {
        let (lm, tokens, ds) = tiny_setup();
        let memory = MlpMemory::<f32>::init(
            MlpConfig {
                n_layer_mlp: 1,
                d_model: 16,
                d_ff: 24,
                n_vocab: 11,
                activation: "silu".into(),
            },
            9,
        )
        .unwrap();
        let knn = Predictor::with_knn(&lm, Some([3u8; 32]), &ds, 8).unwrap();
        let mlp = Predictor::with_memory(&lm, &memory, 0.7).unwrap();
        let lm_only = Predictor::lm_only(&lm);
        let context = &tokens[100..130];

        let base = lm_only.predict(context, 0.0).unwrap();
        for predictor in [&knn, &mlp] {
            let p0 = predictor.predict(context, 0.0).unwrap();
            for (a, b) in p0.iter().zip(&base) {
                assert!((a - b).abs() < 1e-15, "λ=0 must reduce to the LM");
            }
            for lambda in [0.25, 0.5, 1.0] {
                let p = predictor.predict(context, lambda).unwrap();
                let sum: f64 = p.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "mode {} λ {lambda}", predictor.mode());
                assert!(p.iter().all(|&v| v >= 0.0));
            }
        }
        assert!(knn.predict(context, 1.3).is_err());
    }

    #[test]
    fn provenance_and_shape_mismatches_are_refused() {
        let (lm, _, ds) = tiny_setup();
        assert!(matches!(
            Predictor::with_knn(&lm, Some([4u8; 32]), &ds, 8),
            Err(Error::Incompatible(_))
        ));
        assert!(Predictor::with_knn(&lm, Some([3u8; 32]), &ds, 8).is_ok());
        assert!(Predictor::with_knn(&lm, None, &ds, 0).is_err());

        let narrow = MlpMemory::<f32>::init(
            MlpConfig {
                n_layer_mlp: 1,
                d_model: 8,
                d_ff: 16,
                n_vocab: 11,
                activation: "silu".into(),
            },
            0,
        )
        .unwrap();
        assert!(matches!(
            Predictor::with_memory(&lm, &narrow, 0.7),
            Err(Error::Incompatible(_))
        ));
        let wrong_vocab = MlpMemory::<f32>::init(
            MlpConfig {
                n_layer_mlp: 1,
                d_model: 16,
                d_ff: 16,
                n_vocab: 13,
                activation: "silu".into(),
            },
            0,
        )
        .unwrap();
        assert!(matches!(
            Predictor::with_memory(&lm, &wrong_vocab, 0.7),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn uniform_model_perplexity_equals_vocabulary_size() {
        let config = tiny_lm_config();
        let mut lm = DecoderLm::<f32>::init(config, 0).unwrap();
        for t in lm.tensors_mut() {
            t.data.fill(0.0);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let tokens: Vec<u32> = (0..300).map(|_| rng.gen_range(0..11)).collect();
        let predictor = Predictor::lm_only(&lm);
        let report = evaluate_ppl(&predictor, &tokens, &eval_config(16, 8, 0.25)).unwrap();
        assert!((report.ppl() - 11.0).abs() / 11.0 < 0.05, "ppl {}", report.ppl());
        assert_eq!(report.token_count, 299);
        assert!(!report.truncated);
        assert!(report.ppl() >= 1.0);
    }

    #[test]
    fn window_accounting_covers_budget_and_truncation() {
        let (lm, tokens, _) = tiny_setup();
        let predictor = Predictor::lm_only(&lm);

        // Split shorter than the window: one truncated pass, all but the
        // first token scored.
        let short = &tokens[..12];
        let report = evaluate_ppl(&predictor, short, &eval_config(16, 8, 0.25)).unwrap();
        assert!(report.truncated);
        assert_eq!(report.token_count, 11);

        // Budget caps scored tokens.
        let capped = EvalConfig {
            max_scored: Some(40),
            ..eval_config(16, 8, 0.25)
        };
        let report = evaluate_ppl(&predictor, &tokens, &capped).unwrap();
        assert_eq!(report.token_count, 40);

        // Full run scores every token but the first, deterministically.
        let full = evaluate_ppl(&predictor, &tokens, &eval_config(16, 8, 0.25)).unwrap();
        assert_eq!(full.token_count, tokens.len() - 1);
        let again = evaluate_ppl(&predictor, &tokens, &eval_config(16, 8, 0.25)).unwrap();
        assert_eq!(full.nll.to_bits(), again.nll.to_bits());

        // Stride that collides with the window length is rejected.
        assert!(evaluate_ppl(&predictor, &tokens, &eval_config(16, 16, 0.25)).is_err());
        assert!(evaluate_ppl(&predictor, &tokens[..1], &eval_config(16, 8, 0.25)).is_err());
    }

    #[test]
    fn stride_partitions_do_not_change_scored_set() {
        // NLL totals differ across strides only through context lengths, but
        // the SCORED TOKEN SET is identical: token_count must match, and with
        // stride == window−1 every window is independent, which must still
        // cover each target exactly once.
        let (lm, tokens, _) = tiny_setup();
        let predictor = Predictor::lm_only(&lm);
        for stride in [3, 8, 15] {
            let report =
                evaluate_ppl(&predictor, &tokens[..200], &eval_config(16, stride, 0.25)).unwrap();
            assert_eq!(report.token_count, 199, "stride {stride}");
        }
    }

    #[test]
    fn lambda_zero_evaluation_matches_lm_only_bit_for_bit() {
        let (lm, tokens, ds) = tiny_setup();
        let eval = &tokens[400..];
        let config = eval_config(16, 8, 0.0);
        let lm_report = evaluate_ppl(&Predictor::lm_only(&lm), eval, &config).unwrap();
        let knn = Predictor::with_knn(&lm, None, &ds, 8).unwrap();
        let knn_report = evaluate_ppl(&knn, eval, &config).unwrap();
        assert_eq!(lm_report.nll.to_bits(), knn_report.nll.to_bits());
        assert_eq!(lm_report.token_count, knn_report.token_count);
    }

    #[test]
    fn sweeps_share_passes_without_changing_results() {
        let (lm, tokens, ds) = tiny_setup();
        let eval = &tokens[400..520];
        let knn = Predictor::with_knn(&lm, None, &ds, 8).unwrap();

        // λ sweep equals independent evaluations exactly.
        let config = eval_config(16, 8, 0.25);
        let sweep = sweep_lambda(&knn, eval, &config, &[0.0, 0.25, 0.6]).unwrap();
        for report in &sweep {
            let one = evaluate_ppl(
                &knn,
                eval,
                &EvalConfig {
                    lambda: report.lambda,
                    ..config
                },
            )
            .unwrap();
            assert_eq!(report.nll.to_bits(), one.nll.to_bits(), "λ {}", report.lambda);
        }

        // k sweep equals independent k-sized predictors exactly.
        let reports = sweep_k(&knn, eval, &config, &[1, 3, 8]).unwrap();
        for report in &reports {
            let pred = Predictor::with_knn(&lm, None, &ds, report.k.unwrap()).unwrap();
            let one = evaluate_ppl(&pred, eval, &config).unwrap();
            assert_eq!(report.nll.to_bits(), one.nll.to_bits(), "k {:?}", report.k);
        }

        assert!(sweep_lambda(&Predictor::lm_only(&lm), eval, &config, &[0.1]).is_err());
        assert!(sweep_k(&knn, eval, &config, &[]).is_err());
        assert!(sweep_k(&knn, eval, &config, &[0]).is_err());
    }

    #[test]
    fn agreement_is_total_for_identical_predictors() {
        let (lm, tokens, ds) = tiny_setup();
        let a = Predictor::with_knn(&lm, None, &ds, 4).unwrap();
        let b = Predictor::with_knn(&lm, None, &ds, 4).unwrap();
        let config = EvalConfig {
            max_scored: Some(60),
            ..eval_config(16, 8, 0.25)
        };
        let rate = mode_agreement(&a, &b, &tokens[400..], &config).unwrap();
        assert_eq!(rate, 1.0);

        // Against the plain LM the rate stays a valid fraction.
        let lm_only = Predictor::lm_only(&lm);
        let rate = mode_agreement(&a, &lm_only, &tokens[400..], &config);
        // Different query layers (Some vs None) are refused.
        assert!(rate.is_err());
    }

    #[test]
    fn latency_rows_are_structured_and_positive() {
        let (lm, tokens, ds) = tiny_setup();
        let settings = LatencySettings {
            warmup: 2,
            reps: 5,
            lambda: 0.25,
        };
        let knn = Predictor::with_knn(&lm, None, &ds, 8).unwrap();
        let rows = bench_latency(&knn, &tokens, &[8, 24], &settings).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert_eq!(row.mode, Mode::KnnLm);
            assert_eq!(row.datastore_size, ds.count());
            assert!(row.ms_per_token_mean > 0.0);
            assert!(row.ms_per_token_mean >= row.aux_ms_mean);
            assert!(row.ms_per_token_stdev.is_finite());
            assert!(row.csv_row().split(',').count() == 5);
        }
        assert!(bench_latency(&knn, &tokens, &[0], &settings).is_err());
        assert!(bench_latency(&knn, &tokens, &[tokens.len() + 1], &settings).is_err());
    }

    #[test]
    fn reports_render_csv_rows() {
        let report = PerplexityReport {
            mode: Mode::KnnLm,
            lambda: 0.25,
            k: Some(16),
            window_len: 1024,
            token_count: 512,
            nll: 512.0 * 2.0,
            truncated: false,
        };
        let row = report.csv_row("test");
        assert_eq!(row.split(',').count(), EVAL_CSV_HEADER.split(',').count());
        assert!(row.starts_with("knn-lm,0.25,16,1024,test,"));
        assert!((report.ppl() - 2f64.exp()).abs() < 1e-12);
    }
}
