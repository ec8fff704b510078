//! The acceptance gate: nine checks covering exactness oracles, probability
//! invariants, gradients, the closed-form cost ratio, power-law recovery,
//! the full-scale headline result, the depth-ablation harness, latency
//! structure, and artifact persistence.
//!
//! Run with output visible (release strongly recommended — criterion 6
//! executes the full bundled-corpus pipeline):
//!
//!     cargo test --release --test acceptance -- --nocapture
//!
//! All criteria run inside one serial test so wall-clock measurements (the
//! bundled-run budget, the latency ratios) are never distorted by parallel
//! test threads. Every criterion prints one line; failures are collected so
//! all nine lines always appear before the final assert.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use mlp_memory::analysis::{exponent_improvement, fit_power_law};
use mlp_memory::corpus::TokenizedCorpus;
use mlp_memory::datastore::{build_datastore, Datastore, DatastoreBuildSettings};
use mlp_memory::inference::Predictor;
use mlp_memory::knn::{precompute_targets, KnnTargets, Neighbor, SparseDistribution, TargetRecord};
use mlp_memory::linalg::{softmax_in_place, Matrix};
use mlp_memory::lm::{flops_per_token, speed_ratio, CostConfig, CostModel, DecoderLm, LmConfig};
use mlp_memory::memory::{combined_loss, kl_loss, LossWeights, MlpConfig, MlpMemory};
use mlp_memory::pipeline::{run_alpha_sweep, run_layer_sweep, run_pipeline, RunConfig};
use mlp_memory::Error;

/// Workspace root, resolved from this crate's manifest.
fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .ancestors()
        .nth(2)
        .expect("workspace root")
        .to_path_buf()
}

/// Load a bundled config with its relative paths made absolute, so the test
/// works regardless of the directory `cargo test` runs from.
fn load_config(name: &str) -> Result<RunConfig, String> {
    let root = root();
    let mut config =
        RunConfig::load(&root.join("configs").join(name)).map_err(|e| e.to_string())?;
    if let Some(text) = &config.corpus.text {
        config.corpus.text = Some(root.join(text));
    }
    config.run.out_dir = root.join(&config.run.out_dir);
    Ok(config)
}

fn scratch_dir() -> Result<PathBuf, String> {
    let dir = std::env::temp_dir().join("mlpmem-acceptance");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    Ok(dir)
}

#[test]
fn acceptance() {
    let checks: [(&str, fn() -> Result<String, String>); 9] = [
        ("1 retrieval-target oracle", criterion_1),
        ("2 distribution validity", criterion_2),
        ("3 gradient checks", criterion_3),
        ("4 closed-form speed ratio", criterion_4),
        ("5 power-law fitter", criterion_5),
        ("6 full-scale main result", criterion_6),
        ("7 depth-ablation harness", criterion_7),
        ("8 latency structure", criterion_8),
        ("9 artifact persistence", criterion_9),
    ];
    let mut failures: Vec<String> = Vec::new();
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("criterion {name}: pass — {detail}"),
            Err(detail) => {
                println!("criterion {name}: FAIL — {detail}");
                failures.push(format!("criterion {name}: {detail}"));
            }
        }
    }
    assert!(failures.is_empty(), "\n{}", failures.join("\n"));
}

// ---------------------------------------------------------------------------
// 1. Retrieval-target precomputation matches a brute-force oracle.
// ---------------------------------------------------------------------------

/// A synthetic datastore with seeded random keys and values.
fn random_datastore(n: usize, d: usize, n_vocab: u32, seed: u64) -> Datastore {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Datastore {
        layer_fraction: 0.7,
        model_hash: [7u8; 32],
        keys: Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()),
        values: (0..n).map(|_| rng.gen_range(0..n_vocab)).collect(),
    }
}

fn criterion_1() -> Result<String, String> {
    let started = Instant::now();
    let (n, d, k) = (50usize, 8usize, 8usize);
    let datastore = random_datastore(n, d, 12, 101);

    let path = scratch_dir()?.join("oracle-targets.bin");
    let _ = fs::remove_file(&path);
    precompute_targets(&datastore, k, [1u8; 32], &path, None).map_err(|e| e.to_string())?;
    let targets = KnnTargets::load(&path).map_err(|e| e.to_string())?;
    if targets.records.len() != n {
        return Err(format!("{} records, expected {n}", targets.records.len()));
    }

    // Independent recomputation: exact f64 distances, self excluded, the k
    // nearest, then a distance-weighted vote with max-shift.
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let dist: f64 = (0..d)
                    .map(|c| {
                        let diff =
                            datastore.keys.get(i, c) as f64 - datastore.keys.get(j, c) as f64;
                        diff * diff
                    })
                    .sum();
                (dist, j)
            })
            .collect();
        cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cand.truncate(k);
        let shift = cand[0].0;
        let mut mass: BTreeMap<u32, f64> = BTreeMap::new();
        let mut total = 0.0;
        for &(dist, j) in &cand {
            let w = (-(dist - shift)).exp();
            *mass.entry(datastore.values[j]).or_insert(0.0) += w;
            total += w;
        }
        let expect: Vec<(u32, f64)> = mass.iter().map(|(&t, &w)| (t, w / total)).collect();

        let record = &targets.records[i];
        if record.ground_truth != datastore.values[i] {
            return Err(format!("record {i}: ground truth mismatch"));
        }
        if record.tokens.len() != expect.len() {
            return Err(format!(
                "record {i}: support size {} vs oracle {}",
                record.tokens.len(),
                expect.len()
            ));
        }
        for ((&tok, &prob), &(want_tok, want_prob)) in
            record.tokens.iter().zip(&record.probs).zip(&expect)
        {
            if tok != want_tok {
                return Err(format!("record {i}: token {tok} vs oracle {want_tok}"));
            }
            if (prob as f64 - want_prob).abs() > 1e-6 {
                return Err(format!(
                    "record {i} token {tok}: prob {prob} vs oracle {want_prob}"
                ));
            }
        }
    }
    let elapsed = started.elapsed();
    if elapsed.as_secs_f64() >= 1.0 {
        return Err(format!("took {:.2}s, budget 1 s", elapsed.as_secs_f64()));
    }
    Ok(format!(
        "{n} records match brute force within 1e-6 in {:.0} ms",
        elapsed.as_secs_f64() * 1e3
    ))
}

// ---------------------------------------------------------------------------
// 2. Distribution validity, shift invariance, and KL positivity over ≥1000
//    random cases.
// ---------------------------------------------------------------------------

fn valid_distribution(p: &[f64], what: &str, case: usize) -> Result<(), String> {
    if p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(format!(
            "case {case}: {what} has a negative or non-finite mass"
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(format!("case {case}: {what} sums to {sum}"));
    }
    Ok(())
}

fn criterion_2() -> Result<String, String> {
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    let cases = 1200usize;
    for case in 0..cases {
        let n_vocab = rng.gen_range(3usize..40);

        // Decoder distribution from random logits.
        let mut p_lm: Vec<f64> = (0..n_vocab).map(|_| rng.gen_range(-6.0..6.0)).collect();
        softmax_in_place(&mut p_lm);
        valid_distribution(&p_lm, "decoder softmax", case)?;

        // Retrieval distribution from random neighbours.
        let k = rng.gen_range(1usize..12);
        let neighbors: Vec<Neighbor> = (0..k)
            .map(|i| Neighbor {
                index: i as u64,
                dist: rng.gen_range(0.0..60.0),
                value: rng.gen_range(0..n_vocab as u32),
            })
            .collect();
        let knn = SparseDistribution::from_neighbors(&neighbors);
        valid_distribution(&knn.probs, "retrieval vote", case)?;

        // Shift invariance: adding a constant to every distance changes
        // nothing (the vote max-shifts internally).
        let shift = rng.gen_range(-30.0..30.0);
        let shifted: Vec<Neighbor> = neighbors
            .iter()
            .map(|n| Neighbor {
                dist: n.dist + shift,
                ..*n
            })
            .collect();
        let knn_shifted = SparseDistribution::from_neighbors(&shifted);
        if knn.tokens != knn_shifted.tokens {
            return Err(format!("case {case}: support changed under distance shift"));
        }
        for (a, b) in knn.probs.iter().zip(&knn_shifted.probs) {
            if (a - b).abs() > 1e-12 {
                return Err(format!(
                    "case {case}: shift moved a probability by {:e}",
                    (a - b).abs()
                ));
            }
        }

        // A second dense distribution standing in for the memory's softmax.
        let mut p_mem: Vec<f64> = (0..n_vocab).map(|_| rng.gen_range(-6.0..6.0)).collect();
        softmax_in_place(&mut p_mem);
        valid_distribution(&p_mem, "memory softmax", case)?;

        // Every interpolation of valid distributions is valid.
        for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let mixed: Vec<f64> = (0..n_vocab)
                .map(|t| lambda * knn.prob_of(t as u32) + (1.0 - lambda) * p_lm[t])
                .collect();
            valid_distribution(&mixed, "retrieval interpolation", case)?;
            let mixed: Vec<f64> = (0..n_vocab)
                .map(|t| lambda * p_mem[t] + (1.0 - lambda) * p_lm[t])
                .collect();
            valid_distribution(&mixed, "memory interpolation", case)?;
        }

        // KL(target ‖ p) ≥ 0, with equality when p matches the target on its
        // support.
        let kl = kl_loss(&knn, &p_lm);
        if kl < 0.0 {
            return Err(format!("case {case}: KL = {kl} < 0"));
        }
        let mut dense = vec![0.0f64; n_vocab];
        for (&t, &p) in knn.tokens.iter().zip(&knn.probs) {
            dense[t as usize] = p;
        }
        let kl_self = kl_loss(&knn, &dense);
        if kl_self.abs() > 1e-12 {
            return Err(format!("case {case}: KL to itself = {kl_self:e}"));
        }
    }
    Ok(format!(
        "{cases} random cases: distributions valid, votes shift-invariant to 1e-12, KL ≥ 0"
    ))
}

// ---------------------------------------------------------------------------
// 3. Analytic gradients match central finite differences.
// ---------------------------------------------------------------------------

const GRAD_REL_TOL: f64 = 1e-4;

/// Relative error with a small floor so vacuously tiny gradients (where
/// finite-difference roundoff dominates) don't produce spurious ratios.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn criterion_3() -> Result<String, String> {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(303);
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    let h = 1e-5;

    // Memory side: the combined imitation + classification loss at a mixed
    // weighting.
    let memory = MlpMemory::<f64>::init(
        MlpConfig {
            n_layer_mlp: 2,
            d_model: 12,
            d_ff: 16,
            n_vocab: 9,
            activation: "gelu".into(),
        },
        11,
    )
    .map_err(|e| e.to_string())?;
    let x = Matrix::from_vec(4, 12, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let records: Vec<TargetRecord> = (0..4)
        .map(|i| TargetRecord {
            index: i as u64,
            ground_truth: (i as u32 + 1) % 9,
            tokens: vec![i as u32, i as u32 + 3],
            probs: vec![0.7, 0.3],
        })
        .collect();
    let refs: Vec<&TargetRecord> = records.iter().collect();
    let weights = LossWeights { alpha: 0.6 };

    let loss_of = |m: &MlpMemory<f64>| -> f64 {
        let mut sink = m.zeros_like();
        let (kl, ce, _) = m.loss_and_backward(&x, &refs, weights, &mut sink);
        combined_loss(kl, ce, weights)
    };

    let mut grads = memory.zeros_like();
    memory.loss_and_backward(&x, &refs, weights, &mut grads);
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.to_vec()).collect();

    let mut probe = memory.clone();
    for (ti, tensor) in analytic.iter().enumerate() {
        for j in (0..tensor.len()).step_by((tensor.len() / 5).max(1)) {
            let orig = probe.tensors()[ti].data[j];
            probe.tensors_mut()[ti].data[j] = orig + h;
            let up = loss_of(&probe);
            probe.tensors_mut()[ti].data[j] = orig - h;
            let down = loss_of(&probe);
            probe.tensors_mut()[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = rel_err(tensor[j], numeric);
            worst = worst.max(rel);
            if rel > GRAD_REL_TOL {
                return Err(format!(
                    "memory tensor {ti}[{j}]: analytic {:e} vs numeric {numeric:e} (rel {rel:e})",
                    tensor[j]
                ));
            }
            checked += 1;
        }
    }

    // Decoder side: the training NLL on a toy batch.
    let lm = DecoderLm::<f64>::init(
        LmConfig {
            n_layer: 2,
            d_model: 16,
            n_heads: 2,
            d_attn: 16,
            d_ff: 24,
            n_ctx: 8,
            n_vocab: 11,
        },
        13,
    )
    .map_err(|e| e.to_string())?;
    let ids: Vec<u32> = (0..16).map(|_| rng.gen_range(0..11u32)).collect();
    let targets: Vec<u32> = (0..16).map(|_| rng.gen_range(0..11u32)).collect();

    let nll_of = |m: &DecoderLm<f64>| -> Result<f64, String> {
        let mut sink = m.zeros_like();
        m.loss_and_backward(&ids, &targets, 2, 8, &mut sink)
            .map_err(|e| e.to_string())
    };

    let mut lm_grads = lm.zeros_like();
    lm.loss_and_backward(&ids, &targets, 2, 8, &mut lm_grads)
        .map_err(|e| e.to_string())?;
    let analytic: Vec<Vec<f64>> = lm_grads.tensors().iter().map(|t| t.data.to_vec()).collect();

    let mut probe = lm.clone();
    for (ti, tensor) in analytic.iter().enumerate() {
        for j in (0..tensor.len()).step_by((tensor.len() / 3).max(1)) {
            let orig = probe.tensors()[ti].data[j];
            probe.tensors_mut()[ti].data[j] = orig + h;
            let up = nll_of(&probe)?;
            probe.tensors_mut()[ti].data[j] = orig - h;
            let down = nll_of(&probe)?;
            probe.tensors_mut()[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = rel_err(tensor[j], numeric);
            worst = worst.max(rel);
            if rel > GRAD_REL_TOL {
                return Err(format!(
                    "decoder tensor {ti}[{j}]: analytic {:e} vs numeric {numeric:e} (rel {rel:e})",
                    tensor[j]
                ));
            }
            checked += 1;
        }
    }

    let elapsed = started.elapsed().as_secs_f64();
    if elapsed >= 10.0 {
        return Err(format!("took {elapsed:.1}s, budget 10 s"));
    }
    Ok(format!(
        "{checked} sampled coordinates within {GRAD_REL_TOL:.0e} of central differences \
         (worst {worst:.1e}) in {elapsed:.1} s"
    ))
}

// ---------------------------------------------------------------------------
// 4. The closed-form decoder/memory speed ratio.
// ---------------------------------------------------------------------------

fn criterion_4() -> Result<String, String> {
    let mut rng = ChaCha20Rng::seed_from_u64(404);
    for case in 0..100 {
        let d_model = 8 * rng.gen_range(1usize..128);
        let n_layer = rng.gen_range(1usize..48);
        let n_ctx = rng.gen_range(0usize..8192);
        let config = LmConfig::standard(n_layer, d_model, 4, 1024, 50_000);

        let closed = speed_ratio(&config, n_ctx);
        if !closed.standard_shape {
            return Err(format!("case {case}: standard shape not recognised"));
        }
        let mut cost = CostConfig::from(&config);
        cost.n_ctx = n_ctx as u64;
        let table = flops_per_token(&cost, CostModel::Transformer).non_embedding as f64
            / flops_per_token(&cost, CostModel::MlpMemory).non_embedding as f64;
        if closed.ratio != table {
            return Err(format!(
                "case {case} (d={d_model}, L={n_layer}, ctx={n_ctx}): closed {} vs table {}",
                closed.ratio, table
            ));
        }
    }

    let config = LmConfig::standard(12, 768, 12, 1024, 50_000);
    let at_zero = speed_ratio(&config, 0).ratio;
    if at_zero != 1.0 {
        return Err(format!("ratio at n_ctx=0 is {at_zero}, want exactly 1"));
    }
    let at_512 = speed_ratio(&config, 512).ratio;
    if (at_512 - 1.0556).abs() > 1e-4 {
        return Err(format!("ratio at (768, 512) is {at_512}, want 1.0556 ± 1e-4"));
    }
    Ok(format!(
        "closed form equals the cost table exactly on 100 random shapes; 1 at n_ctx=0; \
         {at_512:.6} at (768, 512)"
    ))
}

// ---------------------------------------------------------------------------
// 5. Power-law recovery and exponent-improvement reproduction.
// ---------------------------------------------------------------------------

fn criterion_5() -> Result<String, String> {
    let mut rng = ChaCha20Rng::seed_from_u64(505);
    for case in 0..25 {
        let beta = 10f64.powf(rng.gen_range(-3.0..0.0));
        let gamma = rng.gen_range(-0.5..-0.02);
        let points: Vec<(f64, f64)> = (0..10)
            .map(|i| {
                let n = 1e5 * 3f64.powi(i);
                (n, (beta * n).powf(gamma))
            })
            .collect();
        let fit = fit_power_law(&points).map_err(|e| e.to_string())?;
        if (fit.gamma - gamma).abs() > 1e-9 || (fit.beta - beta).abs() / beta > 1e-9 {
            return Err(format!(
                "case {case}: planted (β={beta:e}, γ={gamma}) recovered (β={:e}, γ={})",
                fit.beta, fit.gamma
            ));
        }
        if (fit.r_squared - 1.0).abs() > 1e-9 {
            return Err(format!(
                "case {case}: r² = {} on noiseless data",
                fit.r_squared
            ));
        }
    }

    for (g_base, g_mixed, want_pct) in [(-0.143, -0.168, 17.5), (-0.216, -0.268, 24.1)] {
        let got = exponent_improvement(g_base, g_mixed).map_err(|e| e.to_string())? * 100.0;
        if (got - want_pct).abs() > 0.3 {
            return Err(format!(
                "({g_base}, {g_mixed}): improvement {got:.2}% vs published {want_pct}% (±0.3 pp)"
            ));
        }
    }
    Ok(
        "25 noiseless fits recover (β, γ) to 1e-9; exponent pairs reproduce 17.5% and 24.1%"
            .to_string(),
    )
}

// ---------------------------------------------------------------------------
// 6. Full-scale main result on the bundled megaword corpus.
// ---------------------------------------------------------------------------

fn criterion_6() -> Result<String, String> {
    let started = Instant::now();
    let config = load_config("desk.toml")?;

    let report = run_pipeline(&config).map_err(|e| e.to_string())?;
    let cached = report.stages.iter().filter(|s| s.skipped).count();

    // (a) The memory-interpolated model beats the bare decoder on test.
    let ppl_of = |mode: &str| -> Result<f64, String> {
        report
            .eval
            .iter()
            .find(|r| r.mode.to_string() == mode)
            .map(|r| r.ppl())
            .ok_or_else(|| format!("no {mode} row in the evaluation report"))
    };
    let ppl_lm = ppl_of("lm-only")?;
    let ppl_mem = ppl_of("mlp-mem")?;
    if !(ppl_mem < ppl_lm) {
        return Err(format!(
            "(a) mlp-mem {ppl_mem:.3} is not below lm-only {ppl_lm:.3} at λ = {}",
            config.run.lambda
        ));
    }

    // (b) Retrieval perplexity is non-increasing in k over a doubling ladder.
    let k_csv = config.run.out_dir.join("eval/k_sweep.csv");
    let text = fs::read_to_string(&k_csv).map_err(|e| e.to_string())?;
    let mut ks: Vec<usize> = Vec::new();
    let mut ppls: Vec<f64> = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(format!("(b) malformed k-sweep row {line:?}"));
        }
        ks.push(fields[2].parse().map_err(|_| "bad k field")?);
        ppls.push(fields[5].parse().map_err(|_| "bad ppl field")?);
    }
    if ks.len() < 4 {
        return Err(format!("(b) k sweep has only {} rungs", ks.len()));
    }
    for i in 1..ks.len() {
        if ppls[i] > ppls[i - 1] {
            return Err(format!(
                "(b) PPL rose from {:.3} at k={} to {:.3} at k={}",
                ppls[i - 1],
                ks[i - 1],
                ppls[i],
                ks[i]
            ));
        }
    }

    // (c) Neither pure imitation (α=1) nor pure classification (α=0) wins.
    let alpha_csv = run_alpha_sweep(&config, &[0.0, 0.5, 1.0]).map_err(|e| e.to_string())?;
    let text = fs::read_to_string(&alpha_csv).map_err(|e| e.to_string())?;
    let mut rows: Vec<(f64, f64)> = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(format!("(c) malformed alpha-sweep row {line:?}"));
        }
        rows.push((
            fields[0].parse().map_err(|_| "bad alpha field")?,
            fields[3].parse().map_err(|_| "bad ppl field")?,
        ));
    }
    let ppl_at = |a: f64| -> Result<f64, String> {
        rows.iter()
            .find(|(x, _)| (x - a).abs() < 1e-9)
            .map(|&(_, p)| p)
            .ok_or_else(|| format!("alpha {a} missing from the sweep"))
    };
    let (p0, p_mid, p1) = (ppl_at(0.0)?, ppl_at(0.5)?, ppl_at(1.0)?);
    if !(p_mid < p0 && p_mid < p1) {
        return Err(format!(
            "(c) interior α=0.5 ({p_mid:.3}) does not beat both endpoints \
             (α=0: {p0:.3}, α=1: {p1:.3})"
        ));
    }

    let minutes = started.elapsed().as_secs_f64() / 60.0;
    if minutes >= 30.0 {
        return Err(format!("took {minutes:.1} min, budget 30 min"));
    }
    Ok(format!(
        "(a) mlp-mem {ppl_mem:.2} < lm-only {ppl_lm:.2} at λ={}; (b) k-sweep non-increasing \
         over {ks:?}; (c) α=0.5 ({p_mid:.2}) beats α=0 ({p0:.2}) and α=1 ({p1:.2}); \
         {minutes:.1} min, {cached}/6 stages cached",
        config.run.lambda
    ))
}

// ---------------------------------------------------------------------------
// 7. The depth-ablation harness completes and reports its optimum.
// ---------------------------------------------------------------------------

fn criterion_7() -> Result<String, String> {
    let config = load_config("sample.toml")?;
    let fractions = [0.2, 0.4, 0.6, 0.7, 0.8, 1.0];
    let csv = run_layer_sweep(&config, &fractions).map_err(|e| e.to_string())?;
    let text = fs::read_to_string(&csv).map_err(|e| e.to_string())?;

    let mut rows: Vec<(f64, usize, f64)> = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(format!("malformed sweep row {line:?}"));
        }
        rows.push((
            fields[0].parse().map_err(|_| "bad fraction field")?,
            fields[1].parse().map_err(|_| "bad layer field")?,
            fields[3].parse().map_err(|_| "bad ppl field")?,
        ));
    }
    if rows.len() != fractions.len() {
        return Err(format!(
            "expected {} rows, found {}",
            fractions.len(),
            rows.len()
        ));
    }
    let best = rows
        .iter()
        .min_by(|a, b| a.2.partial_cmp(&b.2).unwrap())
        .unwrap();
    // The published optimum sits around 70% depth; at this scale the sweep
    // only has to complete and report where its own optimum landed.
    let verdict = if (best.0 - 0.7).abs() < 0.15 {
        "the ~70% optimum appears"
    } else {
        "the ~70% optimum does not appear"
    };
    Ok(format!(
        "sweep over {fractions:?} completed; best fraction {:.1} (block {}, ppl {:.2}) — \
         {verdict} at this scale",
        best.0, best.1, best.2
    ))
}

// ---------------------------------------------------------------------------
// 8. Latency structure: flat memory add-on, linear retrieval scan.
// ---------------------------------------------------------------------------

fn criterion_8() -> Result<String, String> {
    // Reuse the full-scale run's decoder and memory (criterion 6 built them;
    // its train split is large enough for a 100k-entry datastore).
    let config = load_config("desk.toml")?;
    let out = &config.run.out_dir;
    let corpus =
        TokenizedCorpus::load(&out.join("corpus/corpus.bin")).map_err(|e| e.to_string())?;
    let (lm, lm_ck) = DecoderLm::load(&out.join("lm/lm.ckpt")).map_err(|e| e.to_string())?;
    let (memory, _) =
        MlpMemory::load(&out.join("memory/memory.ckpt")).map_err(|e| e.to_string())?;

    // Median over several rounds of aggregated auxiliary seconds, to survive
    // scheduler noise; each aggregate sums the predictor's own aux timings.
    let aux_seconds = |predictor: &Predictor, ctx: &[u32], reps: usize| -> Result<f64, String> {
        let mut rounds: Vec<f64> = (0..5)
            .map(|_| {
                let mut total = 0.0;
                for _ in 0..reps {
                    let (_, _, aux) =
                        predictor.predict_timed(ctx, 0.25).map_err(|e| e.to_string())?;
                    total += aux;
                }
                Ok(total)
            })
            .collect::<Result<_, String>>()?;
        rounds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(rounds[2])
    };

    // Memory add-on across context lengths: same hidden-state width in, same
    // network, so the cost must not scale with how much context produced it.
    let predictor = Predictor::with_memory(&lm, &memory, config.run.layer_fraction)
        .map_err(|e| e.to_string())?;
    let short = &corpus.test[..32];
    let long = &corpus.test[..config.lm.n_ctx];
    let _ = predictor.predict(long, 0.25).map_err(|e| e.to_string())?; // warm-up
    let mem_short = aux_seconds(&predictor, short, 40)?;
    let mem_long = aux_seconds(&predictor, long, 40)?;
    let mem_ratio = mem_long / mem_short;
    if !(0.9..=1.1).contains(&mem_ratio) {
        return Err(format!(
            "memory add-on changed ×{mem_ratio:.3} from context 32 to {} (want 1 ± 0.1)",
            config.lm.n_ctx
        ));
    }

    // Retrieval scan across a tenfold datastore growth: 10k → 100k entries.
    let settings = DatastoreBuildSettings {
        layer_fraction: config.run.layer_fraction,
        ..DatastoreBuildSettings::default()
    };
    let small = build_datastore(&lm, &corpus.train[..10_001], lm_ck.file_sha256, &settings)
        .map_err(|e| e.to_string())?;
    let big = build_datastore(&lm, &corpus.train[..100_001], lm_ck.file_sha256, &settings)
        .map_err(|e| e.to_string())?;
    let grew = big.count() as f64 / small.count() as f64;

    let p_small = Predictor::with_knn(&lm, Some(lm_ck.file_sha256), &small, config.run.k)
        .map_err(|e| e.to_string())?;
    let p_big = Predictor::with_knn(&lm, Some(lm_ck.file_sha256), &big, config.run.k)
        .map_err(|e| e.to_string())?;
    let _ = p_big.predict(long, 0.25).map_err(|e| e.to_string())?; // warm-up
    let knn_small = aux_seconds(&p_small, long, 25)?;
    let knn_big = aux_seconds(&p_big, long, 25)?;
    let knn_ratio = knn_big / knn_small;
    if !(grew * 0.7..=grew * 1.3).contains(&knn_ratio) {
        return Err(format!(
            "retrieval cost scaled ×{knn_ratio:.2} across a ×{grew:.1} datastore \
             (want ×{grew:.1} ± 30%)"
        ));
    }

    Ok(format!(
        "memory add-on flat in context (×{mem_ratio:.3}); retrieval scan scaled \
         ×{knn_ratio:.1} across {} → {} entries (linear ± 30%)",
        small.count(),
        big.count()
    ))
}

// ---------------------------------------------------------------------------
// 9. Artifacts round-trip bit-exactly; corrupted files are rejected with
//    typed errors.
// ---------------------------------------------------------------------------

fn criterion_9() -> Result<String, String> {
    let dir = scratch_dir()?;
    let read = |p: &Path| fs::read(p).map_err(|e| e.to_string());

    // Datastore: load(save(x)) re-saves to identical bytes.
    let datastore = random_datastore(40, 6, 9, 909);
    let a = dir.join("ds-a.bin");
    let b = dir.join("ds-b.bin");
    datastore.save(&a).map_err(|e| e.to_string())?;
    Datastore::load(&a)
        .map_err(|e| e.to_string())?
        .save(&b)
        .map_err(|e| e.to_string())?;
    if read(&a)? != read(&b)? {
        return Err("datastore bytes changed across a load/save cycle".into());
    }

    // Retrieval targets: the writer is deterministic, so recomputing from the
    // same datastore reproduces the file byte for byte, and a load validates
    // every record.
    let ta = dir.join("targets-a.bin");
    let tb = dir.join("targets-b.bin");
    let _ = fs::remove_file(&ta);
    let _ = fs::remove_file(&tb);
    precompute_targets(&datastore, 4, [5u8; 32], &ta, None).map_err(|e| e.to_string())?;
    precompute_targets(&datastore, 4, [5u8; 32], &tb, None).map_err(|e| e.to_string())?;
    if read(&ta)? != read(&tb)? {
        return Err("targets bytes differ across identical precomputations".into());
    }
    let loaded = KnnTargets::load(&ta).map_err(|e| e.to_string())?;
    if loaded.records.len() != datastore.count() {
        return Err("targets load dropped records".into());
    }

    // Decoder and memory checkpoints.
    let lm = DecoderLm::<f32>::init(
        LmConfig {
            n_layer: 1,
            d_model: 8,
            n_heads: 2,
            d_attn: 8,
            d_ff: 16,
            n_ctx: 8,
            n_vocab: 7,
        },
        21,
    )
    .map_err(|e| e.to_string())?;
    let ca = dir.join("lm-a.ckpt");
    let cb = dir.join("lm-b.ckpt");
    let mut provenance = BTreeMap::new();
    provenance.insert("corpus".to_string(), "0123abcd".to_string());
    lm.save(&ca, &provenance).map_err(|e| e.to_string())?;
    let (lm2, ck) = DecoderLm::load(&ca).map_err(|e| e.to_string())?;
    lm2.save(&cb, &ck.provenance).map_err(|e| e.to_string())?;
    if read(&ca)? != read(&cb)? {
        return Err("decoder checkpoint bytes changed across a load/save cycle".into());
    }

    let memory = MlpMemory::<f32>::init(
        MlpConfig {
            n_layer_mlp: 1,
            d_model: 8,
            d_ff: 16,
            n_vocab: 7,
            activation: "silu".into(),
        },
        22,
    )
    .map_err(|e| e.to_string())?;
    let ma = dir.join("mem-a.ckpt");
    let mb = dir.join("mem-b.ckpt");
    memory.save(&ma, &provenance).map_err(|e| e.to_string())?;
    let (mem2, ck) = MlpMemory::load(&ma).map_err(|e| e.to_string())?;
    mem2.save(&mb, &ck.provenance).map_err(|e| e.to_string())?;
    if read(&ma)? != read(&mb)? {
        return Err("memory checkpoint bytes changed across a load/save cycle".into());
    }

    // Corruption: magic flips, header truncation, version damage, and payload
    // bit-flips must come back as typed errors, not panics or silent loads.
    let corrupt = |path: &Path, mutate: &dyn Fn(&mut Vec<u8>)| -> Result<PathBuf, String> {
        let mut bytes = fs::read(path).map_err(|e| e.to_string())?;
        mutate(&mut bytes);
        let out = dir.join(format!(
            "corrupt-{}",
            path.file_name().unwrap().to_string_lossy()
        ));
        fs::write(&out, &bytes).map_err(|e| e.to_string())?;
        Ok(out)
    };

    let bad = corrupt(&a, &|b| b[0] ^= 0xff)?;
    match Datastore::load(&bad) {
        Err(Error::Format { .. }) => {}
        Err(e) => return Err(format!("datastore bad magic: wrong error kind: {e}")),
        Ok(_) => return Err("datastore with corrupted magic loaded".into()),
    }
    let bad = corrupt(&ta, &|b| b.truncate(9))?;
    match KnnTargets::load(&bad) {
        Err(Error::Format { .. }) | Err(Error::Io { .. }) => {}
        Err(e) => return Err(format!("targets truncation: wrong error kind: {e}")),
        Ok(_) => return Err("truncated targets file loaded".into()),
    }
    let bad = corrupt(&ca, &|b| b[4] = 0xee)?;
    match DecoderLm::load(&bad) {
        Err(Error::Format { .. }) => {}
        Err(e) => return Err(format!("checkpoint bad version: wrong error kind: {e}")),
        Ok(_) => return Err("checkpoint with corrupted version loaded".into()),
    }
    let bad = corrupt(&ma, &|b| {
        let n = b.len();
        b[n - 3] ^= 0x01;
    })?;
    match MlpMemory::load(&bad) {
        Err(Error::Checksum { .. }) => {}
        Err(e) => return Err(format!("payload corruption: wrong error kind: {e}")),
        Ok(_) => return Err("checkpoint with corrupted payload loaded".into()),
    }

    Ok("datastore, targets, and both checkpoints round-trip bit-exactly; corrupted \
        files rejected with typed errors"
        .into())
}
