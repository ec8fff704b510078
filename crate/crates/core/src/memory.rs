//! The parametric memory: an all-MLP network trained to imitate retrieval.
//!
//! The memory maps a decoder hidden state `f(c)` — the same vector that keys
//! the datastore — to a dense next-token distribution. Training minimises a
//! weighted sum of two losses against precomputed retrieval targets: a KL
//! term toward the neighbour distribution and a cross-entropy term toward the
//! token that actually followed. Once trained, the memory replaces the
//! nearest-neighbour search at inference: one fixed-cost forward pass instead
//! of a datastore scan.
//!
//! Each block is a gated feed-forward with three `d_model × d_ff`-sized
//! projections (gate, up, down), pre-normalised and residual. A final layer
//! norm and an untied linear head produce the vocabulary logits.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datastore::Datastore;
use crate::error::{Error, Result};
use crate::io::hex;
use crate::knn::{KnnTargets, SparseDistribution, TargetRecord};
use crate::linalg::{gelu, gelu_grad, logsumexp, silu, silu_grad, Matrix, Scalar};
use crate::lm::{CostConfig, CostModel};
use crate::nn::{LayerNorm, Linear, LnCache, TensorView, TensorViewMut};
use crate::optim::{AdamW, OptimizerSettings};

/// Checkpoint kind tag for the memory.
pub const MEMORY_CKPT_KIND: &str = "mlp-memory";

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Block nonlinearity applied to the gate projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Gelu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Activation> {
        match s {
            "silu" => Ok(Activation::Silu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!(
                "unknown activation {other:?} (expected \"silu\" or \"gelu\")"
            ))),
        }
    }
}

impl Activation {
    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Silu => silu(x),
            Activation::Gelu => gelu(x),
        }
    }

    fn grad<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Silu => silu_grad(x),
            Activation::Gelu => gelu_grad(x),
        }
    }
}

/// Memory shape. `d_model` must equal the decoder width the datastore keys
/// were extracted at; `n_vocab` must match the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Gated feed-forward block count.
    pub n_layer_mlp: usize,
    /// Input width.
    pub d_model: usize,
    /// Hidden width of each block.
    pub d_ff: usize,
    /// Output width.
    pub n_vocab: usize,
    /// Gate nonlinearity: `"silu"` or `"gelu"`.
    pub activation: String,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("n_layer_mlp", self.n_layer_mlp),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.n_vocab < 2 {
            problems.push("n_vocab must be at least 2".into());
        }
        if let Err(e) = self.activation() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn activation(&self) -> Result<Activation> {
        self.activation.parse()
    }

    /// Total learned parameters.
    pub fn param_count(&self) -> usize {
        let per_block = 2 * self.d_model                     // ln
            + 2 * (self.d_model * self.d_ff + self.d_ff)     // gate, up
            + self.d_ff * self.d_model + self.d_model; // down
        self.n_layer_mlp * per_block
            + 2 * self.d_model
            + self.d_model * self.n_vocab
            + self.n_vocab
    }

    /// Shape inputs for the analytic cost model.
    pub fn cost_config(&self) -> CostConfig {
        CostConfig {
            n_layer: self.n_layer_mlp as u64,
            d_model: self.d_model as u64,
            d_attn: 0,
            d_ff: self.d_ff as u64,
            n_ctx: 0,
            n_vocab: self.n_vocab as u64,
        }
    }

    /// Per-token forward cost, excluding the output head.
    pub fn flops_per_token(&self) -> u64 {
        crate::lm::flops_per_token(&self.cost_config(), CostModel::MlpMemory).non_embedding
    }
}

/// Mixing weight between the two training losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight on the KL term; `1 − alpha` goes to cross-entropy.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.alpha) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )))
        }
    }
}

// ---------------------------------------------------------------------------
// Loss definitions
// ---------------------------------------------------------------------------

/// `Σ_w y(w)·ln(y(w)/p(w))` over the sparse target's support. Zero-probability
/// target entries contribute nothing (`0·ln 0 := 0`); `p` must be a dense,
/// strictly positive distribution, so no division by zero can occur.
pub fn kl_loss(target: &SparseDistribution, p: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&t, &y) in target.tokens.iter().zip(&target.probs) {
        if y > 0.0 {
            kl += y * (y.ln() - p[t as usize].ln());
        }
    }
    kl
}

/// `−ln p(ground_truth)`.
pub fn ce_loss(ground_truth: u32, p: &[f64]) -> f64 {
    -p[ground_truth as usize].ln()
}

/// `α·kl + (1−α)·ce`.
pub fn combined_loss(kl: f64, ce: f64, weights: LossWeights) -> f64 {
    weights.alpha * kl + (1.0 - weights.alpha) * ce
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// One gated feed-forward block: `x += down(act(gate(ln(x))) ⊙ up(ln(x)))`.
#[derive(Debug, Clone)]
pub struct MemoryBlock<S> {
    pub ln: LayerNorm<S>,
    pub gate: Linear<S>,
    pub up: Linear<S>,
    pub down: Linear<S>,
}

/// The memory network (or, via `zeros_like`, its gradient container).
#[derive(Debug, Clone)]
pub struct MlpMemory<S> {
    pub config: MlpConfig,
    pub blocks: Vec<MemoryBlock<S>>,
    pub ln_f: LayerNorm<S>,
    pub head: Linear<S>,
}

impl<S: Scalar> MlpMemory<S> {
    /// Seeded random initialisation; the draw order (per block gate, up,
    /// down, then the head) is fixed so a seed pins every parameter.
    pub fn init(config: MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = config.d_model;
        let residual_std = 0.02 / ((2 * config.n_layer_mlp) as f64).sqrt();
        let blocks = (0..config.n_layer_mlp)
            .map(|_| MemoryBlock {
                ln: LayerNorm::new(d),
                gate: Linear::init(&mut rng, d, config.d_ff, true, 0.02),
                up: Linear::init(&mut rng, d, config.d_ff, true, 0.02),
                down: Linear::init(&mut rng, config.d_ff, d, true, residual_std),
            })
            .collect();
        Ok(MlpMemory {
            ln_f: LayerNorm::new(d),
            head: Linear::init(&mut rng, d, config.n_vocab, true, 0.02),
            config,
            blocks,
        })
    }

    pub fn zeros_like(&self) -> Self {
        MlpMemory {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| MemoryBlock {
                    ln: b.ln.zeros_like(),
                    gate: b.gate.zeros_like(),
                    up: b.up.zeros_like(),
                    down: b.down.zeros_like(),
                })
                .collect(),
            ln_f: self.ln_f.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// Parameter tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<TensorView<'_, S>> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(b.ln.tensors(&format!("block{i}.ln")));
            v.extend(b.gate.tensors(&format!("block{i}.gate")));
            v.extend(b.up.tensors(&format!("block{i}.up")));
            v.extend(b.down.tensors(&format!("block{i}.down")));
        }
        v.extend(self.ln_f.tensors("ln_f"));
        v.extend(self.head.tensors("head"));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_, S>> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(b.ln.tensors_mut(&format!("block{i}.ln")));
            v.extend(b.gate.tensors_mut(&format!("block{i}.gate")));
            v.extend(b.up.tensors_mut(&format!("block{i}.up")));
            v.extend(b.down.tensors_mut(&format!("block{i}.down")));
        }
        v.extend(self.ln_f.tensors_mut("ln_f"));
        v.extend(self.head.tensors_mut("head"));
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Logits for a batch of hidden states, one row each.
    pub fn forward(&self, x: &Matrix<S>, want_cache: bool) -> (Matrix<S>, Option<MemoryCache<S>>) {
        assert_eq!(x.cols, self.config.d_model, "input width");
        let act = self
            .config
            .activation()
            .expect("validated at construction");
        let mut cur = x.clone();
        let mut caches = want_cache.then(Vec::new);
        for block in &self.blocks {
            let (u, lnc) = block.ln.forward(&cur);
            let gate_pre = block.gate.forward(&u);
            let up_out = block.up.forward(&u);
            let mut h = Matrix::zeros_like(&gate_pre);
            let mut act_gate = want_cache.then(|| Matrix::zeros_like(&gate_pre));
            for i in 0..h.data.len() {
                let a = act.apply(gate_pre.data[i]);
                h.data[i] = a * up_out.data[i];
                if let Some(ag) = &mut act_gate {
                    ag.data[i] = a;
                }
            }
            let delta = block.down.forward(&h);
            cur.add_assign(&delta);
            if let Some(cs) = &mut caches {
                cs.push(BlockCache {
                    ln: lnc,
                    u,
                    gate_pre,
                    up_out,
                    act_gate: act_gate.unwrap(),
                    h,
                });
            }
        }
        let (hf, lnf) = self.ln_f.forward(&cur);
        let logits = self.head.forward(&hf);
        let cache = caches.map(|blocks| MemoryCache {
            blocks,
            ln_f: lnf,
            hf,
        });
        (logits, cache)
    }

    /// Dense next-token distribution for one hidden state.
    ///
    /// Validates the contract at the module boundary: the input must have the
    /// configured width and be finite; the output is a strictly positive
    /// vector summing to 1.
    pub fn forward_one(&self, hidden: &[f32]) -> Result<Vec<f64>> {
        if hidden.len() != self.config.d_model {
            return Err(Error::Incompatible(format!(
                "input width {} but memory expects {}",
                hidden.len(),
                self.config.d_model
            )));
        }
        if hidden.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite component in memory input".into()));
        }
        let x = Matrix::from_vec(
            1,
            hidden.len(),
            hidden.iter().map(|&v| S::from_f64(v as f64)).collect(),
        );
        let (logits, _) = self.forward(&x, false);
        let row = logits.row(0);
        let lse = logsumexp(row);
        Ok(row.iter().map(|z| (z.as_f64() - lse).exp()).collect())
    }

    /// Combined loss over a batch, with gradients accumulated into `grads`.
    /// Returns `(mean KL, mean CE)` and the gradient w.r.t. the inputs.
    pub fn loss_and_backward(
        &self,
        x: &Matrix<S>,
        records: &[&TargetRecord],
        weights: LossWeights,
        grads: &mut MlpMemory<S>,
    ) -> (f64, f64, Matrix<S>) {
        assert_eq!(x.rows, records.len(), "one target per input row");
        let (mut z, cache) = self.forward(x, true);
        let cache = cache.expect("requested cache");
        let n = records.len() as f64;
        let alpha = weights.alpha;

        // Losses and dlogits in one pass over each row:
        // dz = (p − α·y − (1−α)·onehot) / n.
        let mut kl_sum = 0.0;
        let mut ce_sum = 0.0;
        for (i, rec) in records.iter().enumerate() {
            let row = z.row_mut(i);
            let lse = logsumexp(row);
            ce_sum += lse - row[rec.ground_truth as usize].as_f64();
            for v in row.iter_mut() {
                *v = S::from_f64((v.as_f64() - lse).exp() / n);
            }
            for (&t, &y) in rec.tokens.iter().zip(&rec.probs) {
                let y = y as f64;
                if y > 0.0 {
                    // ln p = ln(p/n · n); reuse the already-scaled row.
                    let p = row[t as usize].as_f64() * n;
                    kl_sum += y * (y.ln() - p.ln());
                    row[t as usize] -= S::from_f64(alpha * y / n);
                }
            }
            let gt = rec.ground_truth as usize;
            row[gt] -= S::from_f64((1.0 - alpha) / n);
        }

        let dhf = self.head.backward(&cache.hf, &z, &mut grads.head);
        drop(z);
        let mut d = self.ln_f.backward(&cache.ln_f, &dhf, &mut grads.ln_f);

        let act = self
            .config
            .activation()
            .expect("validated at construction");
        for (bi, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let g = &mut grads.blocks[bi];
            let dh = block.down.backward(&bc.h, &d, &mut g.down);
            let mut dgate_pre = Matrix::zeros_like(&dh);
            let mut dup = Matrix::zeros_like(&dh);
            for i in 0..dh.data.len() {
                dgate_pre.data[i] =
                    dh.data[i] * bc.up_out.data[i] * act.grad(bc.gate_pre.data[i]);
                dup.data[i] = dh.data[i] * bc.act_gate.data[i];
            }
            let mut du = block.gate.backward(&bc.u, &dgate_pre, &mut g.gate);
            du.add_assign(&block.up.backward(&bc.u, &dup, &mut g.up));
            let dres = block.ln.backward(&bc.ln, &du, &mut g.ln);
            d.add_assign(&dres);
        }
        (kl_sum / n, ce_sum / n, d)
    }
}

struct BlockCache<S> {
    ln: LnCache<S>,
    u: Matrix<S>,
    gate_pre: Matrix<S>,
    up_out: Matrix<S>,
    act_gate: Matrix<S>,
    h: Matrix<S>,
}

/// Intermediate activations kept for the backward pass.
pub struct MemoryCache<S> {
    blocks: Vec<BlockCache<S>>,
    ln_f: LnCache<S>,
    hf: Matrix<S>,
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Knobs for [`train_memory`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryTrainSettings {
    pub seed: u64,
    /// Passes over the training records.
    pub epochs: usize,
    /// Records per optimizer step.
    pub batch: usize,
    /// Loss mix; set programmatically (the pipeline copies its alpha here),
    /// not from configuration files.
    #[serde(skip)]
    pub weights: LossWeights,
    pub optimizer: OptimizerSettings,
    /// Records held out (from the end of the file) for validation KL.
    pub val_records: usize,
}

impl Default for MemoryTrainSettings {
    fn default() -> Self {
        MemoryTrainSettings {
            seed: 0,
            epochs: 4,
            batch: 64,
            weights: LossWeights::default(),
            optimizer: OptimizerSettings::default(),
            val_records: 0,
        }
    }
}

/// One row of the memory training curve. Validation fields are set on the
/// steps where they were measured (end of each epoch).
#[derive(Debug, Clone, Copy)]
pub struct MemoryCurvePoint {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub kl: f64,
    pub ce: f64,
    pub combined: f64,
    pub val_kl: Option<f64>,
    /// Value reported by the external evaluation hook, when one is wired.
    pub hook_metric: Option<f64>,
}

/// End-of-epoch evaluation hook: receives the current memory and the epoch
/// number, returns a metric to record (typically validation interpolated
/// perplexity) or `None` to record nothing.
pub type EvalHook<'h> = dyn FnMut(&MlpMemory<f32>, usize) -> Result<Option<f64>> + 'h;

/// Train a memory from scratch against precomputed retrieval targets.
///
/// The datastore supplies the input hidden states (its keys); `targets` must
/// have been computed from exactly that datastore, which is enforced by
/// comparing the recorded hash against `datastore_file_hash`. Deterministic
/// for fixed settings; aborts with [`Error::Diverged`] on non-finite loss.
pub fn train_memory(
    datastore: &Datastore,
    datastore_file_hash: [u8; 32],
    targets: &KnnTargets,
    config: &MlpConfig,
    settings: &MemoryTrainSettings,
    mut eval_hook: Option<&mut EvalHook<'_>>,
) -> Result<(MlpMemory<f32>, Vec<MemoryCurvePoint>)> {
    config.validate()?;
    settings.weights.validate()?;
    if targets.header.datastore_hash != datastore_file_hash {
        return Err(Error::Incompatible(format!(
            "targets were computed from datastore {} but training was given {}",
            hex(&targets.header.datastore_hash),
            hex(&datastore_file_hash)
        )));
    }
    if datastore.d_model() != config.d_model {
        return Err(Error::Incompatible(format!(
            "datastore keys have width {} but memory config says {}",
            datastore.d_model(),
            config.d_model
        )));
    }
    if targets.records.len() != datastore.count() {
        return Err(Error::Incompatible(format!(
            "{} targets for {} datastore entries",
            targets.records.len(),
            datastore.count()
        )));
    }

    let n_train = targets
        .records
        .len()
        .saturating_sub(settings.val_records);
    if n_train == 0 {
        return Err(Error::Config("no training records left after holdout".into()));
    }
    let batch = settings.batch.max(1).min(n_train);

    let mut memory = MlpMemory::<f32>::init(config.clone(), settings.seed)?;
    let mut grads = memory.zeros_like();
    let horizon = settings.epochs * n_train.div_ceil(batch);
    let mut opt = AdamW::new(settings.optimizer.clone().with_horizon(horizon));
    let mut rng = ChaCha20Rng::seed_from_u64(settings.seed ^ 0x9e37_79b9_7f4a_7c15);

    let d = config.d_model;
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut curve = Vec::new();
    let mut step = 0usize;

    for epoch in 1..=settings.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            step += 1;
            let mut x = Matrix::zeros(chunk.len(), d);
            let mut records: Vec<&TargetRecord> = Vec::with_capacity(chunk.len());
            for (bi, &ri) in chunk.iter().enumerate() {
                x.row_mut(bi).copy_from_slice(datastore.key(ri));
                records.push(&targets.records[ri]);
            }
            for t in grads.tensors_mut() {
                t.data.fill(0.0);
            }
            let (kl, ce, _) = memory.loss_and_backward(&x, &records, settings.weights, &mut grads);
            let combined = combined_loss(kl, ce, settings.weights);
            if !combined.is_finite() {
                return Err(Error::Diverged {
                    stage: "mlp-memory",
                    step,
                });
            }
            let stats = {
                let grad_views = grads.tensors();
                let mut param_views = memory.tensors_mut();
                opt.step(&mut param_views, &grad_views)
            };
            curve.push(MemoryCurvePoint {
                step,
                epoch,
                lr: stats.lr,
                kl,
                ce,
                combined,
                val_kl: None,
                hook_metric: None,
            });
        }

        // End of epoch: held-out KL and the caller's metric, if any.
        let last = curve.last_mut().expect("at least one step per epoch");
        if settings.val_records > 0 {
            let val = &targets.records[n_train..];
            let inputs = keys_for(datastore, n_train..targets.records.len());
            let eval = evaluate_memory(&memory, &inputs, val, settings.weights);
            last.val_kl = Some(eval.kl);
        }
        if let Some(hook) = eval_hook.as_deref_mut() {
            last.hook_metric = hook(&memory, epoch)?;
        }
    }
    Ok((memory, curve))
}

fn keys_for(datastore: &Datastore, range: std::ops::Range<usize>) -> Matrix<f32> {
    let d = datastore.d_model();
    Matrix::from_vec(
        range.len(),
        d,
        datastore.keys.data[range.start * d..range.end * d].to_vec(),
    )
}

/// Aggregate losses and agreement of a memory against target records.
#[derive(Debug, Clone, Copy)]
pub struct MemoryEval {
    pub kl: f64,
    pub ce: f64,
    pub combined: f64,
    /// Fraction of records whose memory argmax equals the target's
    /// highest-probability token.
    pub top1_agreement: f64,
    /// Mean entropy of the memory's output distributions, in nats.
    pub mean_entropy: f64,
}

/// Evaluate a memory on `(input row, target record)` pairs without training.
pub fn evaluate_memory<S: Scalar>(
    memory: &MlpMemory<S>,
    inputs: &Matrix<S>,
    records: &[TargetRecord],
    weights: LossWeights,
) -> MemoryEval {
    assert_eq!(inputs.rows, records.len(), "one record per input row");
    let mut kl = 0.0;
    let mut ce = 0.0;
    let mut agree = 0usize;
    let mut entropy = 0.0;
    // Batched forward keeps the head GEMM efficient.
    const EVAL_BATCH: usize = 256;
    let d = inputs.cols;
    for start in (0..inputs.rows).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(inputs.rows);
        let x = Matrix::from_vec(
            end - start,
            d,
            inputs.data[start * d..end * d].to_vec(),
        );
        let (z, _) = memory.forward(&x, false);
        for (bi, rec) in records[start..end].iter().enumerate() {
            let row = z.row(bi);
            let lse = logsumexp(row);
            ce += lse - row[rec.ground_truth as usize].as_f64();
            let mut row_entropy = 0.0;
            let mut best = 0usize;
            for (j, v) in row.iter().enumerate() {
                let lp = v.as_f64() - lse;
                row_entropy -= lp.exp() * lp;
                if row[j] > row[best] {
                    best = j;
                }
            }
            entropy += row_entropy;
            for (&t, &y) in rec.tokens.iter().zip(&rec.probs) {
                let y = y as f64;
                if y > 0.0 {
                    kl += y * (y.ln() - (row[t as usize].as_f64() - lse));
                }
            }
            if Some(best as u32) == rec.distribution().top_token() {
                agree += 1;
            }
        }
    }
    let n = records.len() as f64;
    MemoryEval {
        kl: kl / n,
        ce: ce / n,
        combined: combined_loss(kl / n, ce / n, weights),
        top1_agreement: agree as f64 / n,
        mean_entropy: entropy / n,
    }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

impl MlpMemory<f32> {
    /// Write a checkpoint; returns the file's SHA-256 for provenance chains.
    pub fn save(&self, path: &Path, provenance: &BTreeMap<String, String>) -> Result<[u8; 32]> {
        let flat = checkpoint::flatten_params(&self.tensors());
        checkpoint::save(path, MEMORY_CKPT_KIND, &self.config, provenance, &flat)
    }

    /// Load a checkpoint, validating kind, config, shape, and digest.
    pub fn load(path: &Path) -> Result<(Self, checkpoint::Checkpoint)> {
        let ck = checkpoint::load(path, MEMORY_CKPT_KIND)?;
        let config: MlpConfig = ck
            .config
            .clone()
            .try_into()
            .map_err(|e| Error::format("checkpoint", path, format!("config: {e}")))?;
        config.validate()?;
        let mut memory = MlpMemory::<f32> {
            blocks: (0..config.n_layer_mlp)
                .map(|_| MemoryBlock {
                    ln: LayerNorm::new(config.d_model),
                    gate: Linear::zeros(config.d_model, config.d_ff, true),
                    up: Linear::zeros(config.d_model, config.d_ff, true),
                    down: Linear::zeros(config.d_ff, config.d_model, true),
                })
                .collect(),
            ln_f: LayerNorm::new(config.d_model),
            head: Linear::zeros(config.d_model, config.n_vocab, true),
            config,
        };
        checkpoint::scatter_params(&ck.params, &mut memory.tensors_mut())?;
        Ok((memory, ck))
    }
}
