//! Where inference time goes: the decoder's per-token cost grows with
//! context, a brute-force retriever's with datastore size, and the MLP
//! memory's with neither. This example times single-token prediction for
//! each mode across context lengths, then scales the datastore tenfold to
//! show the retrieval scan growing while the memory's add-on cost stands
//! still.
//!
//!     cargo run --release --example latency_structure

use std::fs;

use mlp_memory::corpus::TokenizedCorpus;
use mlp_memory::datastore::{build_datastore, Datastore, DatastoreBuildSettings};
use mlp_memory::error::Result;
use mlp_memory::inference::{bench_latency, LatencySettings, Predictor};
use mlp_memory::lm::DecoderLm;
use mlp_memory::memory::MlpMemory;
use mlp_memory::pipeline::{
    run_until, CorpusSource, EvalParams, RunConfig, RunParams, Stage,
};
use mlp_memory::lm::LmConfig;
use mlp_memory::memory::MlpConfig;
use mlp_memory::textgen::{generate, TextGenConfig};

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("mlpmem-latency");
    fs::create_dir_all(&dir).expect("create scratch directory");
    let corpus_path = dir.join("corpus.txt");
    // Enough text for a six-figure datastore: ~275k train tokens.
    let text = generate(&TextGenConfig {
        n_tokens: 250_000,
        vocab_words: 1_000,
        seed: 9,
        ..TextGenConfig::default()
    });
    fs::write(&corpus_path, &text).expect("write corpus");

    let config = RunConfig {
        corpus: CorpusSource {
            text: Some(corpus_path),
            train_fraction: 0.5,
            valid_fraction: 0.25,
            ..CorpusSource::default()
        },
        lm: LmConfig {
            n_layer: 2,
            d_model: 32,
            n_heads: 2,
            d_attn: 32,
            d_ff: 128,
            n_ctx: 256,
            n_vocab: 0,
        },
        memory: MlpConfig {
            n_layer_mlp: 2,
            d_model: 32,
            d_ff: 128,
            n_vocab: 0,
            activation: "silu".into(),
        },
        lm_train: Default::default(),
        memory_train: Default::default(),
        run: RunParams {
            out_dir: dir.join("run"),
            k: 16,
            alpha: 0.5,
            lambda: 0.25,
            layer_fraction: 0.7,
        },
        eval: EvalParams {
            window_len: 128,
            stride: 64,
            max_scored: Some(1024),
            lambda_sweep: vec![],
            k_sweep: vec![],
        },
    };

    let report = run_until(&config, Stage::TrainMemory)?;
    let out = &report.out_dir;
    let corpus = TokenizedCorpus::load(&out.join("corpus/corpus.bin"))?;
    let (lm, lm_ck) = DecoderLm::load(&out.join("lm/lm.ckpt"))?;
    let full = Datastore::load(&out.join("datastore/datastore.bin"))?;
    let (memory, _) = MlpMemory::load(&out.join("memory/memory.ckpt"))?;

    // A 10k-entry datastore alongside the full one, built from a prefix of
    // the train split.
    let small_tokens = &corpus.train[..10_800];
    let small = build_datastore(
        &lm,
        small_tokens,
        lm_ck.file_sha256,
        &DatastoreBuildSettings {
            layer_fraction: 0.7,
            ..DatastoreBuildSettings::default()
        },
    )?;
    println!(
        "datastores: small {} entries, full {} entries\n",
        small.count(),
        full.count()
    );

    let settings = LatencySettings {
        warmup: 5,
        reps: 20,
        lambda: 0.25,
    };
    let ctx_lengths = [64usize, 128, 256];

    // Per-token cost by context length: the decoder's cost grows with
    // context in every mode; only retrieval adds a size-dependent term.
    println!("{:<22} {:>8} {:>12} {:>14}", "mode", "n_ctx", "entries", "ms/token");
    for (name, predictor) in [
        ("lm-only", Predictor::lm_only(&lm)),
        (
            "knn-lm (10k)",
            Predictor::with_knn(&lm, Some(lm_ck.file_sha256), &small, 16)?,
        ),
        (
            "knn-lm (full)",
            Predictor::with_knn(&lm, Some(lm_ck.file_sha256), &full, 16)?,
        ),
        ("mlp-mem", Predictor::with_memory(&lm, &memory, 0.7)?),
    ] {
        for row in bench_latency(&predictor, &corpus.test, &ctx_lengths, &settings)? {
            println!(
                "{:<22} {:>8} {:>12} {:>11.4} ms",
                name, row.n_ctx, row.datastore_size, row.ms_per_token_mean
            );
        }
    }

    // The structural claim, isolated: time only the auxiliary model. The
    // memory's add-on cost is flat in both context and datastore size; the
    // scan's grows roughly linearly with entries.
    println!("\nauxiliary-only seconds per prediction (context 256):");
    let ctx = &corpus.test[..256];
    for (name, predictor) in [
        (
            "knn scan over 10k ",
            Predictor::with_knn(&lm, Some(lm_ck.file_sha256), &small, 16)?,
        ),
        (
            "knn scan over full",
            Predictor::with_knn(&lm, Some(lm_ck.file_sha256), &full, 16)?,
        ),
        ("mlp memory        ", Predictor::with_memory(&lm, &memory, 0.7)?),
    ] {
        let mut aux = 0.0;
        for _ in 0..settings.reps {
            let (_, _, aux_s) = predictor.predict_timed(ctx, 0.25)?;
            aux += aux_s;
        }
        println!("    {name}  {:.6}", aux / settings.reps as f64);
    }
    Ok(())
}
