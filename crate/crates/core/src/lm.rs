//! Decoder-only transformer language model.
//!
//! A GPT-2-style stack: learned token + position embeddings, pre-norm blocks
//! of causal multi-head attention and a GELU feed-forward, a final layer norm,
//! and an output head tied to the token embedding. Besides next-token
//! probabilities, the model exposes every block's residual-stream output —
//! one of those vectors per position is the context encoding `f(c)` that the
//! datastore and the memory consume.
//!
//! The module also houses the analytic per-token FLOPs model and the
//! closed-form decoder/memory speed ratio derived from it.
//!
//! Forward and backward are handwritten over [`Matrix`] and generic in the
//! scalar, so gradient checks can run the identical code in `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::TokenizedCorpus;
use crate::error::{Error, Result};
use crate::linalg::{gelu, gelu_grad, gemm, logsumexp, softmax_in_place, Matrix, Scalar};
use crate::nn::{
    fill_normal, gather_rows, scatter_add_rows, LayerNorm, Linear, LnCache, TensorView,
    TensorViewMut,
};
use crate::optim::{AdamW, OptimizerSettings};

/// Checkpoint kind tag for this model.
pub const LM_CKPT_KIND: &str = "decoder-lm";

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Decoder shape. The "standard" proportions are `d_attn = d_model` and
/// `d_ff = 4·d_model`; the cost model's closed-form ratio assumes them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub n_layer: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_attn: usize,
    pub d_ff: usize,
    pub n_ctx: usize,
    pub n_vocab: usize,
}

impl LmConfig {
    /// The standard shape for a given width: one knob, everything else derived.
    pub fn standard(n_layer: usize, d_model: usize, n_heads: usize, n_ctx: usize, n_vocab: usize) -> Self {
        LmConfig {
            n_layer,
            d_model,
            n_heads,
            d_attn: d_model,
            d_ff: 4 * d_model,
            n_ctx,
            n_vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("n_layer", self.n_layer),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_attn", self.d_attn),
            ("d_ff", self.d_ff),
            ("n_ctx", self.n_ctx),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.n_vocab < 2 {
            problems.push("n_vocab must be at least 2".into());
        }
        if self.n_heads > 0 && self.d_attn % self.n_heads != 0 {
            problems.push(format!(
                "d_attn {} not divisible by n_heads {}",
                self.d_attn, self.n_heads
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn is_standard_shape(&self) -> bool {
        self.d_attn == self.d_model && self.d_ff == 4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_attn / self.n_heads
    }

    /// Total learned parameters, embeddings included (head weights are tied).
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_block = 2 * d                       // ln1
            + d * 3 * self.d_attn + 3 * self.d_attn // qkv
            + self.d_attn * d + d                   // attention out
            + 2 * d                                 // ln2
            + d * self.d_ff + self.d_ff             // fc
            + self.d_ff * d + d; // proj
        self.n_vocab * d + self.n_ctx * d + self.n_layer * per_block + 2 * d
    }
}

// ---------------------------------------------------------------------------
// Inference cost model
// ---------------------------------------------------------------------------

/// Which architecture the cost model prices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostModel {
    /// Decoder block: QKV, attention over `n_ctx` cached positions,
    /// projection, and a two-matrix feed-forward.
    Transformer,
    /// Memory block: a gated feed-forward with three `d_model × d_ff`
    /// projections per layer and no attention.
    MlpMemory,
}

/// Shape inputs to the cost model. Both architectures are priced from the
/// same fields; `MlpMemory` ignores `d_attn` and `n_ctx`.
#[derive(Debug, Clone, Copy)]
pub struct CostConfig {
    pub n_layer: u64,
    pub d_model: u64,
    pub d_attn: u64,
    pub d_ff: u64,
    pub n_ctx: u64,
    pub n_vocab: u64,
}

impl From<&LmConfig> for CostConfig {
    fn from(c: &LmConfig) -> Self {
        CostConfig {
            n_layer: c.n_layer as u64,
            d_model: c.d_model as u64,
            d_attn: c.d_attn as u64,
            d_ff: c.d_ff as u64,
            n_ctx: c.n_ctx as u64,
            n_vocab: c.n_vocab as u64,
        }
    }
}

/// Per-token forward FLOPs, split the way the cost table is usually quoted.
/// A multiply-accumulate counts as 2 FLOPs.
#[derive(Debug, Clone)]
pub struct FlopsBreakdown {
    /// Named operation rows summing to `non_embedding`.
    pub rows: Vec<(&'static str, u64)>,
    /// Everything except embedding lookups and the output projection.
    pub non_embedding: u64,
    /// Token + position embedding add (transformer only).
    pub embedding: u64,
    /// Output projection onto the vocabulary.
    pub de_embedding: u64,
}

impl FlopsBreakdown {
    pub fn with_embedding(&self) -> u64 {
        self.non_embedding + self.embedding + self.de_embedding
    }
}

/// Analytic forward cost per generated token.
pub fn flops_per_token(c: &CostConfig, model: CostModel) -> FlopsBreakdown {
    match model {
        CostModel::Transformer => {
            let qkv = 2 * c.n_layer * c.d_model * (3 * c.d_attn);
            let mask = 2 * c.n_layer * c.n_ctx * c.d_attn;
            let project = 2 * c.n_layer * c.d_attn * c.d_model;
            let ff = 2 * c.n_layer * 2 * c.d_model * c.d_ff;
            FlopsBreakdown {
                rows: vec![
                    ("attention_qkv", qkv),
                    ("attention_mask", mask),
                    ("attention_project", project),
                    ("feedforward", ff),
                ],
                non_embedding: qkv + mask + project + ff,
                embedding: 4 * c.d_model,
                de_embedding: 2 * c.d_model * c.n_vocab,
            }
        }
        CostModel::MlpMemory => {
            let ff = 3 * c.n_layer * 2 * c.d_model * c.d_ff;
            FlopsBreakdown {
                rows: vec![("feedforward", ff)],
                non_embedding: ff,
                embedding: 0,
                de_embedding: 2 * c.d_model * c.n_vocab,
            }
        }
    }
}

/// Decoder-to-memory speed ratio and how it was obtained.
#[derive(Debug, Clone, Copy)]
pub struct SpeedRatio {
    pub ratio: f64,
    /// True when the closed form applied; false means the shape was
    /// non-standard and the ratio came from the full cost table instead.
    pub standard_shape: bool,
}

/// Ratio of transformer to memory non-embedding FLOPs for matched shapes.
///
/// Under the standard proportions the table collapses to
/// `1 + n_ctx / (12·d_model)`, computed here as the single division
/// `(12·d_model + n_ctx) / (12·d_model)` — the same rational number as the
/// full table ratio, so the two agree to the last bit.
pub fn speed_ratio(config: &LmConfig, n_ctx: usize) -> SpeedRatio {
    let mut cost = CostConfig::from(config);
    cost.n_ctx = n_ctx as u64;
    if config.is_standard_shape() {
        let denom = 12 * cost.d_model;
        SpeedRatio {
            ratio: (denom + cost.n_ctx) as f64 / denom as f64,
            standard_shape: true,
        }
    } else {
        let t = flops_per_token(&cost, CostModel::Transformer).non_embedding;
        let m = flops_per_token(&cost, CostModel::MlpMemory).non_embedding;
        SpeedRatio {
            ratio: t as f64 / m as f64,
            standard_shape: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// One pre-norm decoder block.
#[derive(Debug, Clone)]
pub struct Block<S> {
    pub ln1: LayerNorm<S>,
    pub attn_qkv: Linear<S>,
    pub attn_out: Linear<S>,
    pub ln2: LayerNorm<S>,
    pub mlp_fc: Linear<S>,
    pub mlp_proj: Linear<S>,
}

/// The decoder model (or, with `zeros_like`, its gradient container).
#[derive(Debug, Clone)]
pub struct DecoderLm<S> {
    pub config: LmConfig,
    /// Token embedding, `(n_vocab, d_model)`; also the tied output head.
    pub wte: Matrix<S>,
    /// Position embedding, `(n_ctx, d_model)`.
    pub wpe: Matrix<S>,
    pub blocks: Vec<Block<S>>,
    pub ln_f: LayerNorm<S>,
}

impl<S: Scalar> DecoderLm<S> {
    /// Seeded random initialisation. Draw order is fixed (embeddings, then
    /// each block's qkv/out/fc/proj weights) so a seed pins every parameter.
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = config.d_model;
        let residual_std = 0.02 / ((2 * config.n_layer) as f64).sqrt();

        let mut wte = Matrix::zeros(config.n_vocab, d);
        fill_normal(&mut rng, &mut wte.data, 0.02);
        let mut wpe = Matrix::zeros(config.n_ctx, d);
        fill_normal(&mut rng, &mut wpe.data, 0.01);

        let blocks = (0..config.n_layer)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                attn_qkv: Linear::init(&mut rng, d, 3 * config.d_attn, true, 0.02),
                attn_out: Linear::init(&mut rng, config.d_attn, d, true, residual_std),
                ln2: LayerNorm::new(d),
                mlp_fc: Linear::init(&mut rng, d, config.d_ff, true, 0.02),
                mlp_proj: Linear::init(&mut rng, config.d_ff, d, true, residual_std),
            })
            .collect();

        Ok(DecoderLm {
            ln_f: LayerNorm::new(d),
            config,
            wte,
            wpe,
            blocks,
        })
    }

    /// Same shapes, all zeros — the gradient container.
    pub fn zeros_like(&self) -> Self {
        DecoderLm {
            config: self.config.clone(),
            wte: Matrix::zeros_like(&self.wte),
            wpe: Matrix::zeros_like(&self.wpe),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: b.ln1.zeros_like(),
                    attn_qkv: b.attn_qkv.zeros_like(),
                    attn_out: b.attn_out.zeros_like(),
                    ln2: b.ln2.zeros_like(),
                    mlp_fc: b.mlp_fc.zeros_like(),
                    mlp_proj: b.mlp_proj.zeros_like(),
                })
                .collect(),
            ln_f: self.ln_f.zeros_like(),
        }
    }

    /// Parameter tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<TensorView<'_, S>> {
        let mut v = vec![
            TensorView {
                name: "wte".into(),
                data: &self.wte.data,
                decay: true,
            },
            TensorView {
                name: "wpe".into(),
                data: &self.wpe.data,
                decay: true,
            },
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(b.ln1.tensors(&format!("block{i}.ln1")));
            v.extend(b.attn_qkv.tensors(&format!("block{i}.attn_qkv")));
            v.extend(b.attn_out.tensors(&format!("block{i}.attn_out")));
            v.extend(b.ln2.tensors(&format!("block{i}.ln2")));
            v.extend(b.mlp_fc.tensors(&format!("block{i}.mlp_fc")));
            v.extend(b.mlp_proj.tensors(&format!("block{i}.mlp_proj")));
        }
        v.extend(self.ln_f.tensors("ln_f"));
        v
    }

    /// Mutable tensors in the same order as [`DecoderLm::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_, S>> {
        let mut v = vec![
            TensorViewMut {
                name: "wte".into(),
                data: &mut self.wte.data,
                decay: true,
            },
            TensorViewMut {
                name: "wpe".into(),
                data: &mut self.wpe.data,
                decay: true,
            },
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(b.ln1.tensors_mut(&format!("block{i}.ln1")));
            v.extend(b.attn_qkv.tensors_mut(&format!("block{i}.attn_qkv")));
            v.extend(b.attn_out.tensors_mut(&format!("block{i}.attn_out")));
            v.extend(b.ln2.tensors_mut(&format!("block{i}.ln2")));
            v.extend(b.mlp_fc.tensors_mut(&format!("block{i}.mlp_fc")));
            v.extend(b.mlp_proj.tensors_mut(&format!("block{i}.mlp_proj")));
        }
        v.extend(self.ln_f.tensors_mut("ln_f"));
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct HeadCache<S> {
    q: Matrix<S>,
    k: Matrix<S>,
    v: Matrix<S>,
    /// Post-softmax attention weights, masked entries exactly zero.
    att: Matrix<S>,
}

struct BlockCache<S> {
    ln1: LnCache<S>,
    u1: Matrix<S>,
    heads: Vec<HeadCache<S>>,
    concat: Matrix<S>,
    ln2: LnCache<S>,
    u2: Matrix<S>,
    pre_act: Matrix<S>,
    act: Matrix<S>,
}

struct TrainCache<S> {
    blocks: Vec<BlockCache<S>>,
    ln_f: LnCache<S>,
}

/// Result of one forward pass over a `(b, t)` batch of windows.
///
/// Row `bi·t + p` of every matrix corresponds to window `bi`, position `p`.
pub struct ForwardPass<S> {
    pub b: usize,
    pub t: usize,
    /// Residual stream after each block (before the final layer norm).
    pub block_outputs: Vec<Matrix<S>>,
    /// Next-token logits per position, when requested.
    pub logits: Option<Matrix<S>>,
    /// Final-layer-norm output (head input), when a cache was requested.
    hf: Option<Matrix<S>>,
    cache: Option<TrainCache<S>>,
}

impl<S: Scalar> DecoderLm<S> {
    /// Forward a batch of `b` windows of `t` tokens each (`ids.len() == b·t`,
    /// row-major). Set `want_logits` only when the vocabulary projection is
    /// actually needed — it dominates the cost at small widths.
    pub fn forward_batch(
        &self,
        ids: &[u32],
        b: usize,
        t: usize,
        want_logits: bool,
        want_cache: bool,
    ) -> Result<ForwardPass<S>> {
        let c = &self.config;
        if t == 0 || b == 0 {
            return Err(Error::Config("empty forward batch".into()));
        }
        if t > c.n_ctx {
            return Err(Error::Config(format!(
                "window of {t} tokens exceeds n_ctx {}",
                c.n_ctx
            )));
        }
        if ids.len() != b * t {
            return Err(Error::Config(format!(
                "ids length {} != {b}×{t}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= c.n_vocab) {
            return Err(Error::Config(format!(
                "token id {bad} out of range for n_vocab {}",
                c.n_vocab
            )));
        }

        let heads = c.n_heads;
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        // Embeddings: token row + position row.
        let mut x = gather_rows(&self.wte, ids);
        for bi in 0..b {
            for p in 0..t {
                let row = x.row_mut(bi * t + p);
                for (xv, pv) in row.iter_mut().zip(self.wpe.row(p)) {
                    *xv += *pv;
                }
            }
        }

        let mut block_outputs = Vec::with_capacity(c.n_layer);
        let mut caches = want_cache.then(Vec::new);

        for block in &self.blocks {
            // Attention sub-block.
            let (u1, ln1c) = block.ln1.forward(&x);
            let qkv = block.attn_qkv.forward(&u1);
            let mut concat = Matrix::zeros(b * t, c.d_attn);
            let mut head_caches = want_cache.then(Vec::new);
            for bi in 0..b {
                for h in 0..heads {
                    let mut q = Matrix::zeros(t, hd);
                    let mut k = Matrix::zeros(t, hd);
                    let mut v = Matrix::zeros(t, hd);
                    for p in 0..t {
                        let row = qkv.row(bi * t + p);
                        q.row_mut(p).copy_from_slice(&row[h * hd..(h + 1) * hd]);
                        k.row_mut(p)
                            .copy_from_slice(&row[c.d_attn + h * hd..c.d_attn + (h + 1) * hd]);
                        v.row_mut(p).copy_from_slice(
                            &row[2 * c.d_attn + h * hd..2 * c.d_attn + (h + 1) * hd],
                        );
                    }
                    // Scores q·kᵀ scaled, causally masked, then softmax.
                    let mut att = Matrix::zeros(t, t);
                    gemm(S::one(), &q, false, &k, true, S::zero(), &mut att);
                    for i in 0..t {
                        let row = att.row_mut(i);
                        for (j, s) in row.iter_mut().enumerate() {
                            if j > i {
                                *s = S::from_f64(f64::NEG_INFINITY);
                            } else {
                                *s = S::from_f64(s.as_f64() * scale);
                            }
                        }
                        softmax_in_place(&mut row[..=i.min(t - 1)]);
                        for s in row.iter_mut().skip(i + 1) {
                            *s = S::zero();
                        }
                    }
                    // Weighted values into this head's slice of the concat.
                    let mut o = Matrix::zeros(t, hd);
                    gemm(S::one(), &att, false, &v, false, S::zero(), &mut o);
                    for p in 0..t {
                        concat.row_mut(bi * t + p)[h * hd..(h + 1) * hd]
                            .copy_from_slice(o.row(p));
                    }
                    if let Some(hc) = &mut head_caches {
                        hc.push(HeadCache { q, k, v, att });
                    }
                }
            }
            let attn = block.attn_out.forward(&concat);
            x.add_assign(&attn);

            // Feed-forward sub-block.
            let (u2, ln2c) = block.ln2.forward(&x);
            let pre_act = block.mlp_fc.forward(&u2);
            let mut act = Matrix::zeros_like(&pre_act);
            for (a, p) in act.data.iter_mut().zip(&pre_act.data) {
                *a = gelu(*p);
            }
            let proj = block.mlp_proj.forward(&act);
            x.add_assign(&proj);

            block_outputs.push(x.clone());
            if let Some(cs) = &mut caches {
                cs.push(BlockCache {
                    ln1: ln1c,
                    u1,
                    heads: head_caches.unwrap(),
                    concat,
                    ln2: ln2c,
                    u2,
                    pre_act,
                    act,
                });
            }
        }

        let (hf, lnf_cache) = self.ln_f.forward(&x);
        let logits = want_logits.then(|| {
            let mut z = Matrix::zeros(b * t, c.n_vocab);
            gemm(S::one(), &hf, false, &self.wte, true, S::zero(), &mut z);
            z
        });

        Ok(ForwardPass {
            b,
            t,
            block_outputs,
            logits,
            hf: want_cache.then_some(hf),
            cache: caches.map(|blocks| TrainCache {
                blocks,
                ln_f: lnf_cache,
            }),
        })
    }

    /// Encode a single context: next-token distribution plus each block's
    /// output at the final position.
    pub fn encode_context(&self, context: &[u32]) -> Result<ContextEncoding<S>> {
        if context.is_empty() {
            return Err(Error::Config("context must contain at least one token".into()));
        }
        let t = context.len();
        let fwd = self.forward_batch(context, 1, t, true, false)?;
        let logits_m = fwd.logits.expect("requested logits");
        let logits = logits_m.row(t - 1).to_vec();
        let mut p_lm = logits.clone();
        softmax_in_place(&mut p_lm);
        let hidden = fwd
            .block_outputs
            .iter()
            .map(|m| m.row(t - 1).to_vec())
            .collect();
        Ok(ContextEncoding { logits, p_lm, hidden })
    }

    /// Mean next-token NLL (nats) of the batch, with gradients accumulated
    /// into `grads`. `targets` aligns with `ids` row-major.
    pub fn loss_and_backward(
        &self,
        ids: &[u32],
        targets: &[u32],
        b: usize,
        t: usize,
        grads: &mut DecoderLm<S>,
    ) -> Result<f64> {
        assert_eq!(targets.len(), b * t, "target length");
        let fwd = self.forward_batch(ids, b, t, true, true)?;
        let mut z = fwd.logits.expect("requested logits");
        let hf = fwd.hf.expect("requested cache");
        let cache = fwd.cache.expect("requested cache");
        let c = &self.config;
        let n = (b * t) as f64;

        // NLL and dlogits in one pass: dz = (softmax(z) − onehot) / n.
        let mut nll = 0.0f64;
        for (i, &target) in targets.iter().enumerate() {
            assert!((target as usize) < c.n_vocab, "target id in range");
            let row = z.row_mut(i);
            let lse = logsumexp(row);
            nll += lse - row[target as usize].as_f64();
            for v in row.iter_mut() {
                *v = S::from_f64(((v.as_f64() - lse).exp()) / n);
            }
            row[target as usize] -= S::from_f64(1.0 / n);
        }
        nll /= n;

        // Tied head: dwte += dzᵀ·hf, dhf = dz·wte.
        gemm(S::one(), &z, true, &hf, false, S::one(), &mut grads.wte);
        let mut dx = Matrix::zeros(b * t, c.d_model);
        gemm(S::one(), &z, false, &self.wte, false, S::zero(), &mut dx);
        drop(z);

        let mut d = self.ln_f.backward(&cache.ln_f, &dx, &mut grads.ln_f);

        let heads = c.n_heads;
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        for (bi_block, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let g = &mut grads.blocks[bi_block];

            // Feed-forward path.
            let dact = block.mlp_proj.backward(&bc.act, &d, &mut g.mlp_proj);
            let mut dpre = dact;
            for (dv, pv) in dpre.data.iter_mut().zip(&bc.pre_act.data) {
                *dv *= gelu_grad(*pv);
            }
            let du2 = block.mlp_fc.backward(&bc.u2, &dpre, &mut g.mlp_fc);
            let dres = block.ln2.backward(&bc.ln2, &du2, &mut g.ln2);
            d.add_assign(&dres);

            // Attention path.
            let dconcat = block.attn_out.backward(&bc.concat, &d, &mut g.attn_out);
            let mut dqkv = Matrix::zeros(b * t, 3 * c.d_attn);
            for bi in 0..b {
                for h in 0..heads {
                    let hc = &bc.heads[bi * heads + h];
                    let mut dout = Matrix::zeros(t, hd);
                    for p in 0..t {
                        dout.row_mut(p)
                            .copy_from_slice(&dconcat.row(bi * t + p)[h * hd..(h + 1) * hd]);
                    }
                    // datt = dout·vᵀ ; dv = attᵀ·dout
                    let mut datt = Matrix::zeros(t, t);
                    gemm(S::one(), &dout, false, &hc.v, true, S::zero(), &mut datt);
                    let mut dv = Matrix::zeros(t, hd);
                    gemm(S::one(), &hc.att, true, &dout, false, S::zero(), &mut dv);
                    // Softmax backward rowwise; masked entries have att = 0,
                    // which zeroes their gradient automatically.
                    for i in 0..t {
                        let att_row = hc.att.row(i);
                        let datt_row = datt.row_mut(i);
                        let mut dot = 0.0f64;
                        for (a, da) in att_row.iter().zip(datt_row.iter()) {
                            dot += a.as_f64() * da.as_f64();
                        }
                        for (da, a) in datt_row.iter_mut().zip(att_row) {
                            *da = S::from_f64(a.as_f64() * (da.as_f64() - dot) * scale);
                        }
                    }
                    // dq = dscore·k ; dk = dscoreᵀ·q
                    let mut dq = Matrix::zeros(t, hd);
                    gemm(S::one(), &datt, false, &hc.k, false, S::zero(), &mut dq);
                    let mut dk = Matrix::zeros(t, hd);
                    gemm(S::one(), &datt, true, &hc.q, false, S::zero(), &mut dk);
                    for p in 0..t {
                        let row = dqkv.row_mut(bi * t + p);
                        row[h * hd..(h + 1) * hd].copy_from_slice(dq.row(p));
                        row[c.d_attn + h * hd..c.d_attn + (h + 1) * hd]
                            .copy_from_slice(dk.row(p));
                        row[2 * c.d_attn + h * hd..2 * c.d_attn + (h + 1) * hd]
                            .copy_from_slice(dv.row(p));
                    }
                }
            }
            let du1 = block.attn_qkv.backward(&bc.u1, &dqkv, &mut g.attn_qkv);
            let dres = block.ln1.backward(&bc.ln1, &du1, &mut g.ln1);
            d.add_assign(&dres);
        }

        // Embedding backward.
        scatter_add_rows(&mut grads.wte, ids, &d);
        for bi in 0..b {
            for p in 0..t {
                for (g, dv) in grads.wpe.row_mut(p).iter_mut().zip(d.row(bi * t + p)) {
                    *g += *dv;
                }
            }
        }
        Ok(nll)
    }
}

/// Output of [`DecoderLm::encode_context`]: the final position's view.
pub struct ContextEncoding<S> {
    pub logits: Vec<S>,
    pub p_lm: Vec<S>,
    /// One `d_model` vector per block, deepest last.
    pub hidden: Vec<Vec<S>>,
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Knobs for [`train_lm`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LmTrainSettings {
    pub seed: u64,
    /// Optimizer steps to run.
    pub steps: usize,
    /// Windows per batch.
    pub batch: usize,
    /// Tokens per window (inputs; targets are the window shifted by one).
    pub window: usize,
    pub optimizer: OptimizerSettings,
    /// Measure validation loss every this many steps (0 = never).
    pub val_interval: usize,
    /// Budget of validation tokens per measurement.
    pub val_tokens: usize,
}

impl Default for LmTrainSettings {
    fn default() -> Self {
        LmTrainSettings {
            seed: 0,
            steps: 500,
            batch: 16,
            window: 128,
            optimizer: OptimizerSettings::default(),
            val_interval: 0,
            val_tokens: 8192,
        }
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy)]
pub struct TrainPoint {
    pub step: usize,
    pub lr: f64,
    /// Mean batch NLL in nats.
    pub loss: f64,
    /// Validation NLL, on steps where it was measured.
    pub val_loss: Option<f64>,
}

/// Mean NLL over the leading `budget` tokens of a split, in fixed windows.
pub fn mean_nll<S: Scalar>(model: &DecoderLm<S>, tokens: &[u32], budget: usize) -> Result<f64> {
    let t = model.config.n_ctx.min(tokens.len().saturating_sub(1));
    if t == 0 {
        return Err(Error::Config("split too short to evaluate".into()));
    }
    let span = tokens.len().min(budget.saturating_add(1));
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut start = 0;
    while start + 1 < span {
        let end = (start + t + 1).min(span);
        let ids = &tokens[start..end - 1];
        let targets = &tokens[start + 1..end];
        let fwd = model.forward_batch(ids, 1, ids.len(), true, false)?;
        let z = fwd.logits.expect("requested logits");
        for (i, &target) in targets.iter().enumerate() {
            total += logsumexp(z.row(i)) - z.get(i, target as usize).as_f64();
            count += 1;
        }
        start = end - 1;
    }
    Ok(total / count as f64)
}

/// Train a decoder model from scratch on the corpus's train split.
///
/// Deterministic for a fixed `(config, settings)` pair: batches come from a
/// seeded stream and every reduction is sequential. Aborts with
/// [`Error::Diverged`] if the loss stops being finite.
pub fn train_lm(
    corpus: &TokenizedCorpus,
    config: &LmConfig,
    settings: &LmTrainSettings,
) -> Result<(DecoderLm<f32>, Vec<TrainPoint>)> {
    config.validate()?;
    if corpus.n_vocab as usize != config.n_vocab {
        return Err(Error::Incompatible(format!(
            "corpus has n_vocab {} but config says {}",
            corpus.n_vocab, config.n_vocab
        )));
    }
    let train = &corpus.train;
    let window = settings.window.min(config.n_ctx);
    if train.len() < window + 2 {
        return Err(Error::Config(format!(
            "train split of {} tokens is too short for window {window}",
            train.len()
        )));
    }

    let mut model = DecoderLm::<f32>::init(config.clone(), settings.seed)?;
    let mut grads = model.zeros_like();
    let mut opt = AdamW::new(settings.optimizer.clone().with_horizon(settings.steps));
    let mut rng = ChaCha20Rng::seed_from_u64(settings.seed ^ 0x517c_c1b7_2722_0a95);
    let max_start = train.len() - window - 1;

    let mut curve = Vec::with_capacity(settings.steps);
    let mut ids = vec![0u32; settings.batch * window];
    let mut targets = vec![0u32; settings.batch * window];

    for step in 1..=settings.steps {
        for bi in 0..settings.batch {
            let start = (rng.next_u64() % (max_start as u64 + 1)) as usize;
            ids[bi * window..(bi + 1) * window]
                .copy_from_slice(&train[start..start + window]);
            targets[bi * window..(bi + 1) * window]
                .copy_from_slice(&train[start + 1..start + window + 1]);
        }
        for t in grads.tensors_mut() {
            t.data.fill(0.0);
        }
        let loss = model.loss_and_backward(&ids, &targets, settings.batch, window, &mut grads)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage: "decoder-lm",
                step,
            });
        }
        let stats = {
            let grad_views = grads.tensors();
            let mut param_views = model.tensors_mut();
            opt.step(&mut param_views, &grad_views)
        };

        let val_loss = if settings.val_interval > 0
            && (step % settings.val_interval == 0 || step == settings.steps)
            && !corpus.valid.is_empty()
        {
            Some(mean_nll(&model, &corpus.valid, settings.val_tokens)?)
        } else {
            None
        };
        curve.push(TrainPoint {
            step,
            lr: stats.lr,
            loss,
            val_loss,
        });
    }
    Ok((model, curve))
}

use rand::RngCore;

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

impl DecoderLm<f32> {
    /// Write a checkpoint; returns the file's SHA-256 for provenance chains.
    pub fn save(&self, path: &Path, provenance: &BTreeMap<String, String>) -> Result<[u8; 32]> {
        let flat = checkpoint::flatten_params(&self.tensors());
        checkpoint::save(path, LM_CKPT_KIND, &self.config, provenance, &flat)
    }

    /// Load a checkpoint, validating kind, config, shape, and digest.
    pub fn load(path: &Path) -> Result<(Self, checkpoint::Checkpoint)> {
        let ck = checkpoint::load(path, LM_CKPT_KIND)?;
        let config: LmConfig = ck
            .config
            .clone()
            .try_into()
            .map_err(|e| Error::format("checkpoint", path, format!("config: {e}")))?;
        config.validate()?;
        let mut model = DecoderLm::<f32> {
            wte: Matrix::zeros(config.n_vocab, config.d_model),
            wpe: Matrix::zeros(config.n_ctx, config.d_model),
            blocks: (0..config.n_layer)
                .map(|_| Block {
                    ln1: LayerNorm::new(config.d_model),
                    attn_qkv: Linear::zeros(config.d_model, 3 * config.d_attn, true),
                    attn_out: Linear::zeros(config.d_attn, config.d_model, true),
                    ln2: LayerNorm::new(config.d_model),
                    mlp_fc: Linear::zeros(config.d_model, config.d_ff, true),
                    mlp_proj: Linear::zeros(config.d_ff, config.d_model, true),
                })
                .collect(),
            ln_f: LayerNorm::new(config.d_model),
            config,
        };
        checkpoint::scatter_params(&ck.params, &mut model.tensors_mut())?;
        Ok((model, ck))
    }
}

/// Map a depth fraction in `(0, 1]` to a 1-based block index.
pub fn layer_for_fraction(fraction: f64, n_layer: usize) -> usize {
    ((fraction * n_layer as f64).round() as usize).clamp(1, n_layer)
}
