//! Command-line entry point. Every stage of the pipeline, the evaluation
//! protocols, and the analysis tools are reachable from one binary driven by
//! a TOML run configuration; stage subcommands reuse finished artifacts, so
//! running them out of order never recomputes work whose inputs are current.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mlp_memory::analysis::{
    exponent_improvement, parse_scaling_csv, scaling_fits, DistributionAccumulator,
    DEFAULT_MASS_LEVELS, DEFAULT_THRESHOLDS,
};
use mlp_memory::corpus::TokenizedCorpus;
use mlp_memory::datastore::{build_datastore, Datastore, DatastoreBuildSettings};
use mlp_memory::error::{Error, Result};
use mlp_memory::inference::{
    bench_latency, stream_distributions, EvalConfig, LatencySettings, Mode, PerplexityReport,
    Predictor, EVAL_CSV_HEADER, LATENCY_CSV_HEADER,
};
use mlp_memory::io::sha256_file;
use mlp_memory::knn::{precompute_targets, KnnTargets};
use mlp_memory::lm::DecoderLm;
use mlp_memory::memory::{train_memory, LossWeights, MlpMemory};
use mlp_memory::pipeline::{
    apply_env_overrides, resolve_vocab, run_alpha_sweep, run_layer_sweep, run_pipeline, run_until,
    RunConfig, RunReport, Stage,
};
use mlp_memory::textgen::{generate, TextGenConfig};

#[derive(Parser)]
#[command(
    name = "mlpmem",
    version,
    about = "Decoder LM with a retrieval-distilled MLP memory",
    long_about = "Train a small decoder language model, extract a (hidden state, next token)\n\
                  datastore from its train split, precompute kNN target distributions,\n\
                  distill them into an all-MLP memory, and evaluate interpolated\n\
                  perplexity — all driven by one TOML run configuration.\n\n\
                  Stage subcommands are cumulative and cached: each runs the pipeline\n\
                  through its stage, skipping any stage whose artifact already matches\n\
                  its inputs. Environment variables MLPMEM_OUT_DIR, MLPMEM_CORPUS_TEXT,\n\
                  and MLPMEM_CORPUS_TOKENS override the corresponding config paths."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the run directory from the config file.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        apply_env_overrides(&mut config);
        if let Some(dir) = &self.out_dir {
            config.run.out_dir = dir.clone();
        }
        Ok(config)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Decoder only.
    Lm,
    /// Decoder interpolated with the kNN retriever.
    Knn,
    /// Decoder interpolated with the MLP memory.
    Mlp,
}

impl ModeArg {
    fn mode(self) -> Mode {
        match self {
            ModeArg::Lm => Mode::LmOnly,
            ModeArg::Knn => Mode::KnnLm,
            ModeArg::Mlp => Mode::MlpMem,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KeysSource {
    /// Train on the keys stored in the datastore file (default).
    Datastore,
    /// Rebuild the datastore from the decoder first, then train on it.
    Recompute,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic text corpus with recurring phrases.
    GenCorpus {
        /// Number of word tokens to emit.
        #[arg(long, default_value_t = 200_000)]
        tokens: usize,
        /// Distinct word spellings available to the generator.
        #[arg(long, default_value_t = 2_000)]
        vocab_words: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output text file.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },

    /// Tokenize the corpus into the run directory.
    Ingest {
        #[command(flatten)]
        config: ConfigArgs,
    },

    /// Train the decoder language model (ingests first if needed).
    TrainLm {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus override: a pre-tokenized file, a directory holding
        /// corpus.bin, or a .txt file to tokenize.
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
        /// Training seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Also copy the finished checkpoint to this path.
        #[arg(long, value_name = "CKPT")]
        out: Option<PathBuf>,
    },

    /// Extract the (hidden state, next token) datastore from the train split.
    BuildDatastore {
        #[command(flatten)]
        config: ConfigArgs,
        /// Build directly from this checkpoint instead of the pipeline's
        /// decoder (writes to --out or the run directory slot).
        #[arg(long, value_name = "CKPT")]
        model: Option<PathBuf>,
        /// Split to extract from; keys always come from train.
        #[arg(long, default_value = "train", value_parser = ["train"])]
        split: String,
        /// Depth fraction override for key extraction, in (0, 1].
        #[arg(long, value_name = "FRAC")]
        layer_frac: Option<f64>,
        /// Also copy the finished datastore to this path.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },

    /// Precompute retrieval target distributions for every datastore entry.
    PrecomputeKnn {
        #[command(flatten)]
        config: ConfigArgs,
        /// Use this datastore file directly instead of the pipeline's.
        #[arg(long, value_name = "FILE")]
        datastore: Option<PathBuf>,
        /// With --datastore: checkpoint the datastore must belong to
        /// (provenance check only).
        #[arg(long, value_name = "CKPT")]
        model: Option<PathBuf>,
        /// Neighbour count override.
        #[arg(long)]
        k: Option<usize>,
        /// With --datastore: where to write the targets (defaults to the
        /// run directory slot).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },

    /// Train the MLP memory to imitate the retrieval distributions.
    TrainMemory {
        #[command(flatten)]
        config: ConfigArgs,
        /// Train against this targets file directly (it must have been
        /// computed from the pipeline's datastore).
        #[arg(long, value_name = "FILE")]
        targets: Option<PathBuf>,
        /// Where the training inputs come from.
        #[arg(long, value_enum, default_value_t = KeysSource::Datastore)]
        keys: KeysSource,
        /// Distillation weight override.
        #[arg(long)]
        alpha: Option<f64>,
        /// Training seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Also copy the finished checkpoint to this path.
        #[arg(long, value_name = "CKPT")]
        out: Option<PathBuf>,
    },

    /// Evaluate sliding-window perplexity on the test split.
    EvalPpl {
        #[command(flatten)]
        config: ConfigArgs,
        /// Print only this mode's row (all three are always computed and
        /// written to eval/eval.csv).
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Interpolation weight override.
        #[arg(long)]
        lambda: Option<f64>,
        /// Window length override.
        #[arg(long)]
        window: Option<usize>,
        /// Stride override.
        #[arg(long)]
        stride: Option<usize>,
    },

    /// Measure per-token prediction latency in each mode.
    BenchLatency {
        #[command(flatten)]
        config: ConfigArgs,
        /// Modes to measure: "all" or a comma list of lm,knn,mlp.
        #[arg(long, default_value = "all")]
        modes: String,
        /// Comma list of context lengths (default: n_ctx/4, n_ctx/2, n_ctx).
        #[arg(long, value_name = "LIST")]
        ctx: Option<String>,
        /// Unmeasured predictions before timing starts.
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// Measured predictions per (mode, context length).
        #[arg(long, default_value_t = 30)]
        reps: usize,
    },

    /// Fit power laws to a scaling CSV and report the exponent change.
    FitScaling {
        /// Scaling results CSV (as written by the scaling ladder).
        #[arg(long, value_name = "FILE")]
        csv: PathBuf,
    },

    /// Sharpness statistics of one mode's next-token distributions.
    Stats {
        #[command(flatten)]
        config: ConfigArgs,
        /// Which mode's distributions to sample.
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Positions to sample from the test split.
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
    },

    /// Run every stage end to end.
    RunAll {
        #[command(flatten)]
        config: ConfigArgs,
    },

    /// Sweep the key-extraction depth and compare interpolated perplexity.
    LayerSweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma list of layer fractions in (0, 1].
        #[arg(long, default_value = "0.1,0.3,0.5,0.7,0.9,1.0")]
        fractions: String,
    },

    /// Sweep the loss mix between distillation and classification.
    AlphaSweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma list of alpha values in [0, 1].
        #[arg(long, default_value = "0.0,0.2,0.4,0.6,0.8,1.0")]
        alphas: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus {
            tokens,
            vocab_words,
            seed,
            out,
        } => gen_corpus(tokens, vocab_words, seed, &out),
        Command::Ingest { config } => ingest(&config.load()?),
        Command::TrainLm {
            config,
            corpus,
            seed,
            out,
        } => {
            let mut config = config.load()?;
            if let Some(path) = corpus {
                override_corpus(&mut config, path);
            }
            if let Some(seed) = seed {
                config.lm_train.seed = seed;
            }
            train_lm_cmd(&config, out.as_deref())
        }
        Command::BuildDatastore {
            config,
            model,
            split: _,
            layer_frac,
            out,
        } => {
            let mut config = config.load()?;
            if let Some(frac) = layer_frac {
                config.run.layer_fraction = frac;
            }
            build_datastore_cmd(&config, model.as_deref(), out.as_deref())
        }
        Command::PrecomputeKnn {
            config,
            datastore,
            model,
            k,
            out,
        } => {
            let mut config = config.load()?;
            if let Some(k) = k {
                config.run.k = k;
            }
            precompute_cmd(&config, datastore.as_deref(), model.as_deref(), out.as_deref())
        }
        Command::TrainMemory {
            config,
            targets,
            keys,
            alpha,
            seed,
            out,
        } => {
            let mut config = config.load()?;
            if let Some(alpha) = alpha {
                config.run.alpha = alpha;
            }
            if let Some(seed) = seed {
                config.memory_train.seed = seed;
            }
            train_memory_cmd(&config, targets.as_deref(), keys, out.as_deref())
        }
        Command::EvalPpl {
            config,
            mode,
            lambda,
            window,
            stride,
        } => {
            let mut config = config.load()?;
            if let Some(lambda) = lambda {
                config.run.lambda = lambda;
            }
            if let Some(window) = window {
                config.eval.window_len = window;
            }
            if let Some(stride) = stride {
                config.eval.stride = stride;
            }
            eval_ppl_cmd(&config, mode.map(ModeArg::mode))
        }
        Command::BenchLatency {
            config,
            modes,
            ctx,
            warmup,
            reps,
        } => bench_latency_cmd(&config.load()?, &modes, ctx.as_deref(), warmup, reps),
        Command::FitScaling { csv } => fit_scaling_cmd(&csv),
        Command::Stats {
            config,
            mode,
            samples,
        } => stats_cmd(&config.load()?, mode, samples),
        Command::RunAll { config } => {
            let config = config.load()?;
            let report = run_pipeline(&config)?;
            print_stages(&report);
            print_eval(&report.eval, None);
            println!("run directory: {}", report.out_dir.display());
            Ok(())
        }
        Command::LayerSweep { config, fractions } => {
            let config = config.load()?;
            let fractions = parse_f64_list(&fractions)?;
            let csv = run_layer_sweep(&config, &fractions)?;
            print!("{}", fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?);
            println!("written to {}", csv.display());
            Ok(())
        }
        Command::AlphaSweep { config, alphas } => {
            let config = config.load()?;
            let alphas = parse_f64_list(&alphas)?;
            let csv = run_alpha_sweep(&config, &alphas)?;
            print!("{}", fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?);
            println!("written to {}", csv.display());
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

fn gen_corpus(tokens: usize, vocab_words: usize, seed: u64, out: &Path) -> Result<()> {
    let text = generate(&TextGenConfig {
        n_tokens: tokens,
        vocab_words,
        seed,
        ..Default::default()
    });
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(out, &text).map_err(|e| Error::io(out, e))?;
    println!(
        "wrote {} ({} word tokens, {} bytes)",
        out.display(),
        tokens,
        text.len()
    );
    Ok(())
}

fn ingest(config: &RunConfig) -> Result<()> {
    let report = run_until(config, Stage::Ingest)?;
    print_stages(&report);
    let corpus = TokenizedCorpus::load(&report.out_dir.join("corpus/corpus.bin"))?;
    println!(
        "vocab {} | train {} | valid {} | test {} tokens",
        corpus.n_vocab,
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len()
    );
    Ok(())
}

/// Point the config's corpus source at an explicit path: a directory means
/// its corpus.bin, a .txt file is raw text, anything else is pre-tokenized.
fn override_corpus(config: &mut RunConfig, path: PathBuf) {
    let path = if path.is_dir() { path.join("corpus.bin") } else { path };
    if path.extension().is_some_and(|e| e == "txt") {
        config.corpus.text = Some(path);
        config.corpus.tokens = None;
    } else {
        config.corpus.tokens = Some(path);
        config.corpus.text = None;
    }
}

fn train_lm_cmd(config: &RunConfig, out: Option<&Path>) -> Result<()> {
    let report = run_until(config, Stage::TrainLm)?;
    print_stages(&report);
    let ckpt = report.out_dir.join("lm/lm.ckpt");
    let (lm, _) = DecoderLm::load(&ckpt)?;
    println!(
        "decoder: {} parameters, {} layers, d_model {}",
        lm.config.param_count(),
        lm.config.n_layer,
        lm.config.d_model
    );
    if let Some(dst) = out {
        copy_artifact(&ckpt, dst)?;
    }
    Ok(())
}

fn build_datastore_cmd(
    config: &RunConfig,
    model: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let path = match model {
        // Direct mode: explicit checkpoint in, datastore file out. The
        // stored model hash still ties the file to that checkpoint, so the
        // pipeline will refuse to mix it with a different decoder.
        Some(ckpt) => {
            let report = run_until(config, Stage::Ingest)?;
            let corpus = TokenizedCorpus::load(&report.out_dir.join("corpus/corpus.bin"))?;
            let (lm, ck) = DecoderLm::load(ckpt)?;
            let settings = DatastoreBuildSettings {
                layer_fraction: config.run.layer_fraction,
                ..Default::default()
            };
            let datastore = build_datastore(&lm, &corpus.train, ck.file_sha256, &settings)?;
            let path = out
                .map(Path::to_path_buf)
                .unwrap_or_else(|| report.out_dir.join("datastore/datastore.bin"));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            datastore.save(&path)?;
            path
        }
        None => {
            let report = run_until(config, Stage::BuildDatastore)?;
            print_stages(&report);
            let path = report.out_dir.join("datastore/datastore.bin");
            if let Some(dst) = out {
                copy_artifact(&path, dst)?;
            }
            path
        }
    };
    let stats = Datastore::load(&path)?.stats();
    println!(
        "datastore {}: {} entries, d_model {}, layer fraction {:.2}, \
         {} distinct values, value entropy {:.3} nats",
        path.display(),
        stats.count,
        stats.d_model,
        stats.layer_fraction,
        stats.distinct_values,
        stats.value_entropy_nats
    );
    Ok(())
}

fn precompute_cmd(
    config: &RunConfig,
    datastore: Option<&Path>,
    model: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    match datastore {
        // Direct mode: explicit datastore in, targets file out.
        Some(ds_path) => {
            let ds = Datastore::load(ds_path)?;
            if let Some(ckpt) = model {
                let (_, ck) = DecoderLm::load(ckpt)?;
                if ds.model_hash != ck.file_sha256 {
                    return Err(Error::Incompatible(format!(
                        "datastore {} was not extracted from checkpoint {}",
                        ds_path.display(),
                        ckpt.display()
                    )));
                }
            }
            let ds_hash = sha256_file(ds_path)?;
            let path = out
                .map(Path::to_path_buf)
                .unwrap_or_else(|| config.run.out_dir.join("targets/targets.bin"));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let mut last_percent = 0usize;
            let mut progress = |done: usize, total: usize| {
                let percent = done * 100 / total.max(1);
                if percent >= last_percent + 5 || done == total {
                    eprintln!("  neighbours {done}/{total} ({percent}%)");
                    last_percent = percent;
                }
            };
            let header = precompute_targets(&ds, config.run.k, ds_hash, &path, Some(&mut progress))?;
            println!(
                "targets {}: {} records at k {}",
                path.display(),
                header.count,
                header.k
            );
        }
        None => {
            let report = run_until(config, Stage::PrecomputeKnn)?;
            print_stages(&report);
            let path = report.out_dir.join("targets/targets.bin");
            if let Some(dst) = out {
                copy_artifact(&path, dst)?;
            }
        }
    }
    Ok(())
}

fn train_memory_cmd(
    config: &RunConfig,
    targets: Option<&Path>,
    keys: KeysSource,
    out: Option<&Path>,
) -> Result<()> {
    if keys == KeysSource::Recompute {
        // Rebuilding the keys means a fresh datastore; its new hash then
        // invalidates the targets and the memory automatically.
        let ds_path = config.run.out_dir.join("datastore/datastore.bin");
        if ds_path.exists() {
            fs::remove_file(&ds_path).map_err(|e| Error::io(&ds_path, e))?;
            println!("removed {} (keys will be recomputed)", ds_path.display());
        }
    }

    let ckpt = match targets {
        // Direct mode: train against an explicit targets file. The recorded
        // datastore hash must match the pipeline's datastore; train_memory
        // enforces that.
        Some(targets_path) => {
            let report = run_until(config, Stage::BuildDatastore)?;
            print_stages(&report);
            let corpus = TokenizedCorpus::load(&report.out_dir.join("corpus/corpus.bin"))?;
            let config = resolve_vocab(config, &corpus)?;
            let ds_path = report.out_dir.join("datastore/datastore.bin");
            let datastore = Datastore::load(&ds_path)?;
            let ds_hash = sha256_file(&ds_path)?;
            let targets = KnnTargets::load(targets_path)?;

            let mut settings = config.memory_train.clone();
            settings.weights = LossWeights {
                alpha: config.run.alpha,
            };
            let (memory, curve) = train_memory(
                &datastore,
                ds_hash,
                &targets,
                &config.memory,
                &settings,
                None,
            )?;
            if let Some(last) = curve.last() {
                println!(
                    "final losses: kl {:.4}, ce {:.4}, combined {:.4}",
                    last.kl, last.ce, last.combined
                );
            }
            let ckpt = report.out_dir.join("memory/memory.ckpt");
            let mut provenance = std::collections::BTreeMap::new();
            provenance.insert("datastore".to_string(), mlp_memory::io::hex(&ds_hash));
            provenance.insert(
                "targets".to_string(),
                mlp_memory::io::hex(&sha256_file(targets_path)?),
            );
            memory.save(&ckpt, &provenance)?;
            ckpt
        }
        None => {
            let report = run_until(config, Stage::TrainMemory)?;
            print_stages(&report);
            report.out_dir.join("memory/memory.ckpt")
        }
    };
    let (memory, _) = MlpMemory::load(&ckpt)?;
    println!(
        "memory: {} parameters, {} blocks, d_ff {}",
        memory.config.param_count(),
        memory.config.n_layer_mlp,
        memory.config.d_ff
    );
    if let Some(dst) = out {
        copy_artifact(&ckpt, dst)?;
    }
    Ok(())
}

fn eval_ppl_cmd(config: &RunConfig, only: Option<Mode>) -> Result<()> {
    let report = run_until(config, Stage::EvalPpl)?;
    print_stages(&report);
    print_eval(&report.eval, only);
    Ok(())
}

fn bench_latency_cmd(
    config: &RunConfig,
    modes: &str,
    ctx: Option<&str>,
    warmup: usize,
    reps: usize,
) -> Result<()> {
    let modes = parse_modes(modes)?;
    let report = run_until(config, Stage::TrainMemory)?;
    let out_dir = &report.out_dir;

    let corpus = TokenizedCorpus::load(&out_dir.join("corpus/corpus.bin"))?;
    let (lm, lm_ck) = DecoderLm::load(&out_dir.join("lm/lm.ckpt"))?;
    let datastore = Datastore::load(&out_dir.join("datastore/datastore.bin"))?;
    let (memory, _) = MlpMemory::load(&out_dir.join("memory/memory.ckpt"))?;

    let ctx_lengths = match ctx {
        Some(list) => parse_usize_list(list)?,
        None => {
            let n = config.lm.n_ctx;
            let mut v = vec![(n / 4).max(1), (n / 2).max(1), n];
            v.dedup();
            v
        }
    };
    for &n in &ctx_lengths {
        if n > config.lm.n_ctx {
            return Err(Error::Config(format!(
                "context length {n} exceeds the model's n_ctx {}",
                config.lm.n_ctx
            )));
        }
    }

    let settings = LatencySettings {
        warmup,
        reps,
        lambda: config.run.lambda,
    };
    let mut lines = vec![LATENCY_CSV_HEADER.to_string()];
    for mode in modes {
        let predictor = match mode {
            Mode::LmOnly => Predictor::lm_only(&lm),
            Mode::KnnLm => {
                Predictor::with_knn(&lm, Some(lm_ck.file_sha256), &datastore, config.run.k)?
            }
            Mode::MlpMem => Predictor::with_memory(&lm, &memory, config.run.layer_fraction)?,
        };
        for row in bench_latency(&predictor, &corpus.test, &ctx_lengths, &settings)? {
            lines.push(row.csv_row());
        }
    }
    let text = lines.join("\n") + "\n";
    let csv_path = out_dir.join("eval/latency.csv");
    fs::write(&csv_path, &text).map_err(|e| Error::io(&csv_path, e))?;
    print!("{text}");
    println!("written to {}", csv_path.display());
    Ok(())
}

fn fit_scaling_cmd(csv: &Path) -> Result<()> {
    let points = parse_scaling_csv(csv)?;
    let (lm_fit, mix_fit) = scaling_fits(&points)?;
    let improvement = match exponent_improvement(lm_fit.gamma, mix_fit.gamma) {
        Ok(v) => format!("{:.2}", v * 100.0),
        Err(e) => {
            eprintln!("note: exponent change undefined: {e}");
            String::new()
        }
    };
    println!("curve,beta,gamma,r_squared,exponent_improvement_pct");
    println!(
        "lm,{:.6e},{:.6},{:.6},",
        lm_fit.beta, lm_fit.gamma, lm_fit.r_squared
    );
    println!(
        "interpolated,{:.6e},{:.6},{:.6},{}",
        mix_fit.beta, mix_fit.gamma, mix_fit.r_squared, improvement
    );
    Ok(())
}

fn stats_cmd(config: &RunConfig, mode: ModeArg, samples: usize) -> Result<()> {
    if samples == 0 {
        return Err(Error::Config("stats need at least one sample".into()));
    }
    // Only build what the mode needs.
    let last_stage = match mode {
        ModeArg::Lm => Stage::TrainLm,
        ModeArg::Knn => Stage::BuildDatastore,
        ModeArg::Mlp => Stage::TrainMemory,
    };
    let report = run_until(config, last_stage)?;
    let out_dir = &report.out_dir;

    let corpus = TokenizedCorpus::load(&out_dir.join("corpus/corpus.bin"))?;
    let (lm, lm_ck) = DecoderLm::load(&out_dir.join("lm/lm.ckpt"))?;
    let datastore;
    let memory;
    let predictor = match mode {
        ModeArg::Lm => Predictor::lm_only(&lm),
        ModeArg::Knn => {
            datastore = Datastore::load(&out_dir.join("datastore/datastore.bin"))?;
            Predictor::with_knn(&lm, Some(lm_ck.file_sha256), &datastore, config.run.k)?
        }
        ModeArg::Mlp => {
            memory = MlpMemory::load(&out_dir.join("memory/memory.ckpt"))?.0;
            Predictor::with_memory(&lm, &memory, config.run.layer_fraction)?
        }
    };

    let eval = EvalConfig {
        window_len: config.eval.window_len,
        stride: config.eval.stride,
        lambda: config.run.lambda,
        max_scored: Some(samples),
    };
    let mut acc = DistributionAccumulator::new(&DEFAULT_THRESHOLDS, &DEFAULT_MASS_LEVELS)?;
    let visited = stream_distributions(&predictor, &corpus.test, &eval, |p| acc.add(p))?;
    let stats = acc.finish()?;

    let name = match mode {
        ModeArg::Lm => "lm",
        ModeArg::Knn => "knn",
        ModeArg::Mlp => "mlp",
    };
    let nonzero_path = out_dir.join(format!("analysis/stats-{name}-nonzero.csv"));
    let cumulative_path = out_dir.join(format!("analysis/stats-{name}-cumulative.csv"));
    fs::write(&nonzero_path, stats.nonzero_csv()).map_err(|e| Error::io(&nonzero_path, e))?;
    fs::write(&cumulative_path, stats.cumulative_csv())
        .map_err(|e| Error::io(&cumulative_path, e))?;

    println!("{} positions sampled from the test split\n", visited);
    println!("mean tokens above probability threshold:");
    print!("{}", stats.nonzero_csv());
    println!("\nmean top tokens needed to reach probability mass:");
    print!("{}", stats.cumulative_csv());
    println!(
        "\nwritten to {} and {}",
        nonzero_path.display(),
        cumulative_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

fn print_stages(report: &RunReport) {
    for o in &report.stages {
        println!(
            "{:<16} {:>6} {:>9.2}s  {}",
            o.stage.name(),
            if o.skipped { "cached" } else { "ran" },
            o.seconds,
            o.artifact.display()
        );
    }
}

fn print_eval(reports: &[PerplexityReport], only: Option<Mode>) {
    println!("{EVAL_CSV_HEADER}");
    for r in reports {
        if only.is_none_or(|m| m == r.mode) {
            println!("{}", r.csv_row("test"));
        }
    }
}

fn copy_artifact(src: &Path, dst: &Path) -> Result<()> {
    if let Some(parent) = dst.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::copy(src, dst).map_err(|e| Error::io(dst, e))?;
    println!("copied {} -> {}", src.display(), dst.display());
    Ok(())
}

fn parse_f64_list(list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number {s:?} in list {list:?}")))
        })
        .collect()
}

fn parse_usize_list(list: &str) -> Result<Vec<usize>> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad number {s:?} in list {list:?}")))
        })
        .collect()
}

fn parse_modes(list: &str) -> Result<Vec<Mode>> {
    if list == "all" {
        return Ok(vec![Mode::LmOnly, Mode::KnnLm, Mode::MlpMem]);
    }
    list.split(',').map(|s| s.trim().parse()).collect()
}
