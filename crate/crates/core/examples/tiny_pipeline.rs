//! The whole system end to end, at toy scale, through the library API: state
//! a run configuration, let the pipeline build every artifact, and read back
//! the three perplexities. Run it twice — the second pass skips every stage
//! because each artifact records what it was built from.
//!
//!     cargo run --release --example tiny_pipeline

use std::fs;

use mlp_memory::error::Result;
use mlp_memory::pipeline::{run_pipeline, CorpusSource, EvalParams, RunConfig, RunParams};
use mlp_memory::lm::LmConfig;
use mlp_memory::memory::MlpConfig;
use mlp_memory::textgen::{generate, TextGenConfig};

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("mlpmem-tiny-pipeline");
    fs::create_dir_all(&dir).expect("create scratch directory");

    // A 30k-token corpus with a heavy recurring-phrase habit, so retrieval
    // has something to find.
    let corpus_path = dir.join("corpus.txt");
    let text = generate(&TextGenConfig {
        n_tokens: 30_000,
        vocab_words: 500,
        seed: 3,
        ..TextGenConfig::default()
    });
    fs::write(&corpus_path, &text).expect("write corpus");

    let config = RunConfig {
        corpus: CorpusSource {
            text: Some(corpus_path),
            ..CorpusSource::default()
        },
        // Vocabulary size 0 defers to whatever the tokenizer finds.
        lm: LmConfig {
            n_layer: 2,
            d_model: 32,
            n_heads: 2,
            d_attn: 32,
            d_ff: 128,
            n_ctx: 64,
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
            window_len: 64,
            stride: 32,
            max_scored: Some(2048),
            lambda_sweep: vec![],
            k_sweep: vec![],
        },
    };

    for pass in ["first pass", "second pass"] {
        println!("--- {pass} ---");
        let report = run_pipeline(&config)?;
        for stage in &report.stages {
            println!(
                "{:<16} {:>6} {:>8.2}s",
                stage.stage.name(),
                if stage.skipped { "cached" } else { "ran" },
                stage.seconds
            );
        }
        println!();
        for eval in &report.eval {
            println!(
                "{:<8} λ={:<5} test perplexity {:>8.3}",
                eval.mode,
                eval.lambda,
                eval.ppl()
            );
        }
        println!();
    }
    println!("artifacts under {}", dir.join("run").display());
    Ok(())
}
