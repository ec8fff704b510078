//! End-to-end orchestration: one configuration file drives corpus ingestion,
//! decoder training, datastore construction, retrieval-target precomputation,
//! memory training, and evaluation, with each stage writing its artifact (and
//! a fingerprint of its inputs) under a run directory.
//!
//! Re-running is cheap: a stage is skipped when its artifact already matches
//! the fingerprint of everything it depends on, so changing one knob only
//! redoes the stages downstream of it. On failure the error names the stage,
//! completed artifacts stay on disk, and the next run resumes from the break.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::CsvSink;
use crate::corpus::{TokenScheme, TokenizedCorpus, Vocabulary};
use crate::datastore::{build_datastore, Datastore, DatastoreBuildSettings};
use crate::error::{Error, Result};
use crate::inference::{
    evaluate_ppl, sweep_k, sweep_lambda, EvalConfig, Mode, PerplexityReport, Predictor,
    EVAL_CSV_HEADER,
};
use crate::io::{hex, sha256_bytes, sha256_file};
use crate::knn::{precompute_targets, read_targets_header, KnnTargets};
use crate::lm::{layer_for_fraction, train_lm, DecoderLm, LmConfig, LmTrainSettings};
use crate::linalg::Matrix;
use crate::memory::{
    evaluate_memory, train_memory, LossWeights, MemoryTrainSettings, MlpConfig, MlpMemory,
};

/// Where the token stream comes from: exactly one of `text` (raw text to
/// tokenize and split) or `tokens` (an already-tokenized corpus file).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSource {
    /// Plain-text file to build a vocabulary from and tokenize.
    pub text: Option<PathBuf>,
    /// Pre-tokenized corpus file, used as-is (splits included).
    pub tokens: Option<PathBuf>,
    /// Tokenization scheme for `text`: `"word"` or `"char"`.
    pub scheme: String,
    /// Words seen fewer times than this map to `<unk>` (word scheme only).
    pub min_count: usize,
    /// Leading fraction of tokens that becomes the train split.
    pub train_fraction: f64,
    /// Next fraction that becomes the validation split; the rest is test.
    pub valid_fraction: f64,
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource {
            text: None,
            tokens: None,
            scheme: "word".into(),
            min_count: 1,
            train_fraction: 0.4,
            valid_fraction: 0.3,
        }
    }
}

impl CorpusSource {
    pub fn token_scheme(&self) -> Result<TokenScheme> {
        match self.scheme.as_str() {
            "word" => Ok(TokenScheme::Word {
                min_count: self.min_count,
            }),
            "char" => Ok(TokenScheme::Char),
            other => Err(Error::Config(format!(
                "unknown token scheme {other:?} (expected \"word\" or \"char\")"
            ))),
        }
    }
}

/// Knobs that cut across stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunParams {
    /// Directory all artifacts are written under.
    pub out_dir: PathBuf,
    /// Neighbours retrieved per query when precomputing targets and when
    /// evaluating retrieval mode.
    pub k: usize,
    /// Weight of the distillation term in the memory training loss.
    pub alpha: f64,
    /// Weight on the auxiliary distribution when interpolating at inference.
    pub lambda: f64,
    /// Fraction of the block stack that keys and queries are read from.
    pub layer_fraction: f64,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            out_dir: PathBuf::from("runs/default"),
            k: 1024,
            alpha: 0.4,
            lambda: 0.25,
            layer_fraction: 0.7,
        }
    }
}

/// Evaluation protocol plus optional sweeps.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    /// Sliding-window length in tokens; each window scores its tail.
    pub window_len: usize,
    /// Tokens scored per window after the first.
    pub stride: usize,
    /// Budget of scored tokens per evaluation (`None` scores the full split).
    pub max_scored: Option<usize>,
    /// Extra interpolation weights to evaluate on the test split.
    pub lambda_sweep: Vec<f64>,
    /// Extra neighbour counts to evaluate in retrieval mode.
    pub k_sweep: Vec<usize>,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            window_len: 1024,
            stride: 512,
            max_scored: None,
            lambda_sweep: Vec::new(),
            k_sweep: Vec::new(),
        }
    }
}

impl EvalParams {
    /// The protocol with a concrete interpolation weight filled in.
    pub fn eval_config(&self, lambda: f64) -> EvalConfig {
        EvalConfig {
            window_len: self.window_len,
            stride: self.stride,
            lambda,
            max_scored: self.max_scored,
        }
    }
}

/// Everything a run needs, loadable from one TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: CorpusSource,
    pub lm: LmConfig,
    pub memory: MlpConfig,
    #[serde(default)]
    pub lm_train: LmTrainSettings,
    #[serde(default)]
    pub memory_train: MemoryTrainSettings,
    pub run: RunParams,
    #[serde(default)]
    pub eval: EvalParams,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format("run config", path, e.to_string()))
    }

    /// All validation problems at once, or `Ok` if the config is runnable.
    pub fn ensure_valid(&self) -> Result<()> {
        let problems = validate_config(self);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Collect every problem with a run configuration (empty = valid).
pub fn validate_config(config: &RunConfig) -> Vec<String> {
    let mut problems = Vec::new();

    match (&config.corpus.text, &config.corpus.tokens) {
        (Some(_), Some(_)) => {
            problems.push("corpus sets both text and tokens; pick one source".into())
        }
        (None, None) => problems.push("corpus sets neither text nor tokens".into()),
        (Some(p), None) | (None, Some(p)) => {
            if !p.exists() {
                problems.push(format!("corpus source {} does not exist", p.display()));
            }
        }
    }
    if let Err(e) = config.corpus.token_scheme() {
        problems.push(e.to_string());
    }
    let (ft, fv) = (config.corpus.train_fraction, config.corpus.valid_fraction);
    if !(ft > 0.0 && fv > 0.0 && ft + fv < 1.0) {
        problems.push(format!(
            "split fractions ({ft}, {fv}) must be positive and leave room for a test split"
        ));
    }

    // A vocabulary of zero defers sizing to the ingested corpus; validate the
    // rest of the model shape with a placeholder so other problems still
    // surface. The deferred size is checked again once the corpus is known.
    let deferred_vocab = config.lm.n_vocab == 0 && config.memory.n_vocab == 0;
    let mut lm_cfg = config.lm.clone();
    let mut memory_cfg = config.memory.clone();
    if deferred_vocab {
        lm_cfg.n_vocab = 2;
        memory_cfg.n_vocab = 2;
    }
    if let Err(e) = lm_cfg.validate() {
        problems.push(format!("lm: {e}"));
    }
    if let Err(e) = memory_cfg.validate() {
        problems.push(format!("memory: {e}"));
    }
    if config.memory.d_model != config.lm.d_model {
        problems.push(format!(
            "memory d_model {} must match lm d_model {} (memory inputs are decoder states)",
            config.memory.d_model, config.lm.d_model
        ));
    }
    if config.memory.n_vocab != config.lm.n_vocab {
        problems.push(format!(
            "memory n_vocab {} must match lm n_vocab {}",
            config.memory.n_vocab, config.lm.n_vocab
        ));
    }

    if config.run.k == 0 {
        problems.push("run.k must be at least 1".into());
    }
    if !(0.0..=1.0).contains(&config.run.alpha) {
        problems.push(format!("run.alpha {} outside [0, 1]", config.run.alpha));
    }
    if !(0.0..=1.0).contains(&config.run.lambda) {
        problems.push(format!("run.lambda {} outside [0, 1]", config.run.lambda));
    }
    if !(config.run.layer_fraction > 0.0 && config.run.layer_fraction <= 1.0) {
        problems.push(format!(
            "run.layer_fraction {} outside (0, 1]",
            config.run.layer_fraction
        ));
    }

    if let Err(e) = config.eval.eval_config(config.run.lambda).validate() {
        problems.push(format!("eval: {e}"));
    }
    if config.eval.window_len > config.lm.n_ctx + 1 {
        problems.push(format!(
            "eval window {} needs {} context tokens but the model has n_ctx {}",
            config.eval.window_len,
            config.eval.window_len - 1,
            config.lm.n_ctx
        ));
    }
    if let Some(&l) = config
        .eval
        .lambda_sweep
        .iter()
        .find(|l| !(0.0..=1.0).contains(*l))
    {
        problems.push(format!("eval.lambda_sweep value {l} outside [0, 1]"));
    }
    if config.eval.k_sweep.contains(&0) {
        problems.push("eval.k_sweep contains 0".into());
    }

    problems
}

/// Replace paths from the environment: `MLPMEM_OUT_DIR` moves the run
/// directory, `MLPMEM_CORPUS_TEXT` / `MLPMEM_CORPUS_TOKENS` swap the corpus
/// source (each clears the other source so the override always wins).
pub fn apply_env_overrides(config: &mut RunConfig) {
    if let Ok(dir) = std::env::var("MLPMEM_OUT_DIR") {
        if !dir.is_empty() {
            config.run.out_dir = PathBuf::from(dir);
        }
    }
    if let Ok(path) = std::env::var("MLPMEM_CORPUS_TEXT") {
        if !path.is_empty() {
            config.corpus.text = Some(PathBuf::from(path));
            config.corpus.tokens = None;
        }
    }
    if let Ok(path) = std::env::var("MLPMEM_CORPUS_TOKENS") {
        if !path.is_empty() {
            config.corpus.tokens = Some(PathBuf::from(path));
            config.corpus.text = None;
        }
    }
}

/// The six stages, in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    TrainLm,
    BuildDatastore,
    PrecomputeKnn,
    TrainMemory,
    EvalPpl,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::TrainLm,
        Stage::BuildDatastore,
        Stage::PrecomputeKnn,
        Stage::TrainMemory,
        Stage::EvalPpl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::TrainLm => "train-lm",
            Stage::BuildDatastore => "build-datastore",
            Stage::PrecomputeKnn => "precompute-knn",
            Stage::TrainMemory => "train-memory",
            Stage::EvalPpl => "eval-ppl",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What happened to one stage during a run.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    /// The artifact on disk already matched its inputs; nothing was redone.
    pub skipped: bool,
    pub seconds: f64,
    /// The stage's main artifact (produced or reused).
    pub artifact: PathBuf,
}

/// Result of a full pipeline run.
#[derive(Debug)]
pub struct RunReport {
    pub stages: Vec<StageOutcome>,
    /// Test-split perplexities: decoder-only, retrieval, memory.
    pub eval: Vec<PerplexityReport>,
    pub out_dir: PathBuf,
}

impl RunReport {
    pub fn outcome(&self, stage: Stage) -> Option<&StageOutcome> {
        self.stages.iter().find(|o| o.stage == stage)
    }
}

fn wrap(stage: Stage) -> impl FnOnce(Error) -> Error {
    move |e| Error::Stage {
        stage: stage.name(),
        source: Box::new(e),
    }
}

/// Fingerprint a serializable value (stable across runs, sensitive to every
/// field that serializes).
fn digest_of<T: Serialize>(value: &T) -> Result<String> {
    let text = toml::to_string(value)
        .map_err(|e| Error::Config(format!("cannot serialize value for fingerprint: {e}")))?;
    Ok(hex(&sha256_bytes(text.as_bytes())))
}

fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".prov");
    artifact.with_file_name(name)
}

fn write_sidecar(artifact: &Path, identity: &BTreeMap<String, String>) -> Result<()> {
    let path = sidecar_path(artifact);
    let text = toml::to_string(identity)
        .map_err(|e| Error::Config(format!("cannot serialize provenance: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// The stored identity, or `None` when missing/unreadable (treated as stale).
fn read_sidecar(artifact: &Path) -> Option<BTreeMap<String, String>> {
    let text = fs::read_to_string(sidecar_path(artifact)).ok()?;
    toml::from_str(&text).ok()
}

fn ensure_run_dirs(out_dir: &Path) -> Result<()> {
    for sub in [
        "corpus",
        "lm",
        "datastore",
        "targets",
        "memory",
        "eval",
        "analysis",
    ] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    Ok(())
}

/// Run every stage, skipping the ones whose artifacts are already current.
pub fn run_pipeline(config: &RunConfig) -> Result<RunReport> {
    run_until(config, Stage::EvalPpl)
}

/// Run the pipeline through `last` (inclusive), skipping current stages.
/// Stages after `last` are not touched; `eval` in the report is empty unless
/// the evaluation stage ran.
pub fn run_until(config: &RunConfig, last: Stage) -> Result<RunReport> {
    config.ensure_valid()?;
    let out_dir = config.run.out_dir.clone();
    ensure_run_dirs(&out_dir)?;
    let mut stages = Vec::with_capacity(Stage::ALL.len());

    macro_rules! stop_if_last {
        ($stage:expr) => {
            if last == $stage {
                return Ok(RunReport {
                    stages,
                    eval: Vec::new(),
                    out_dir,
                });
            }
        };
    }

    let started = Instant::now();
    let (corpus, corpus_hash, skipped) = stage_ingest(config).map_err(wrap(Stage::Ingest))?;
    stages.push(StageOutcome {
        stage: Stage::Ingest,
        skipped,
        seconds: started.elapsed().as_secs_f64(),
        artifact: out_dir.join("corpus/corpus.bin"),
    });
    stop_if_last!(Stage::Ingest);

    let resolved = resolve_vocab(config, &corpus)?;
    let config = resolved.as_ref();

    let started = Instant::now();
    let (lm, lm_hash, skipped) =
        stage_train_lm(config, &corpus, corpus_hash).map_err(wrap(Stage::TrainLm))?;
    stages.push(StageOutcome {
        stage: Stage::TrainLm,
        skipped,
        seconds: started.elapsed().as_secs_f64(),
        artifact: out_dir.join("lm/lm.ckpt"),
    });
    stop_if_last!(Stage::TrainLm);

    let started = Instant::now();
    let (datastore, ds_hash, skipped) =
        stage_build_datastore(config, &lm, lm_hash, &corpus).map_err(wrap(Stage::BuildDatastore))?;
    stages.push(StageOutcome {
        stage: Stage::BuildDatastore,
        skipped,
        seconds: started.elapsed().as_secs_f64(),
        artifact: out_dir.join("datastore/datastore.bin"),
    });
    stop_if_last!(Stage::BuildDatastore);

    let started = Instant::now();
    let (targets, targets_hash, skipped) =
        stage_precompute(config, &datastore, ds_hash).map_err(wrap(Stage::PrecomputeKnn))?;
    stages.push(StageOutcome {
        stage: Stage::PrecomputeKnn,
        skipped,
        seconds: started.elapsed().as_secs_f64(),
        artifact: out_dir.join("targets/targets.bin"),
    });
    stop_if_last!(Stage::PrecomputeKnn);

    let started = Instant::now();
    let (memory, memory_hash, skipped) =
        stage_train_memory(config, &lm, &corpus, &datastore, ds_hash, &targets, targets_hash)
            .map_err(wrap(Stage::TrainMemory))?;
    stages.push(StageOutcome {
        stage: Stage::TrainMemory,
        skipped,
        seconds: started.elapsed().as_secs_f64(),
        artifact: out_dir.join("memory/memory.ckpt"),
    });
    stop_if_last!(Stage::TrainMemory);

    let started = Instant::now();
    let (eval, skipped) = stage_eval(
        config, &lm, lm_hash, &corpus, &datastore, ds_hash, &memory, memory_hash,
    )
    .map_err(wrap(Stage::EvalPpl))?;
    stages.push(StageOutcome {
        stage: Stage::EvalPpl,
        skipped,
        seconds: started.elapsed().as_secs_f64(),
        artifact: out_dir.join("eval/eval.csv"),
    });

    Ok(RunReport {
        stages,
        eval,
        out_dir,
    })
}

/// Resolve a deferred (zero) vocabulary against the ingested corpus and
/// re-validate, so later stages always see concrete model shapes.
pub fn resolve_vocab<'a>(
    config: &'a RunConfig,
    corpus: &TokenizedCorpus,
) -> Result<std::borrow::Cow<'a, RunConfig>> {
    if config.lm.n_vocab != 0 && config.memory.n_vocab != 0 {
        return Ok(std::borrow::Cow::Borrowed(config));
    }
    let mut patched = config.clone();
    if patched.lm.n_vocab == 0 {
        patched.lm.n_vocab = corpus.n_vocab as usize;
    }
    if patched.memory.n_vocab == 0 {
        patched.memory.n_vocab = corpus.n_vocab as usize;
    }
    patched.ensure_valid()?;
    Ok(std::borrow::Cow::Owned(patched))
}

/// Tokenize (or copy) the corpus into the run directory.
fn stage_ingest(config: &RunConfig) -> Result<(TokenizedCorpus, [u8; 32], bool)> {
    let dir = config.run.out_dir.join("corpus");
    let corpus_path = dir.join("corpus.bin");
    let scheme = config.corpus.token_scheme()?;

    let mut identity = BTreeMap::new();
    match (&config.corpus.text, &config.corpus.tokens) {
        (Some(p), None) => {
            identity.insert("source".into(), p.display().to_string());
            identity.insert("source_sha256".into(), hex(&sha256_file(p)?));
            identity.insert("scheme".into(), config.corpus.scheme.clone());
            identity.insert("min_count".into(), config.corpus.min_count.to_string());
            identity.insert(
                "train_fraction".into(),
                config.corpus.train_fraction.to_string(),
            );
            identity.insert(
                "valid_fraction".into(),
                config.corpus.valid_fraction.to_string(),
            );
        }
        (None, Some(p)) => {
            identity.insert("source".into(), p.display().to_string());
            identity.insert("source_sha256".into(), hex(&sha256_file(p)?));
        }
        _ => {
            return Err(Error::Config(
                "corpus must set exactly one of text/tokens".into(),
            ))
        }
    }

    if corpus_path.exists() && read_sidecar(&corpus_path).as_ref() == Some(&identity) {
        if let Ok(corpus) = TokenizedCorpus::load(&corpus_path) {
            let hash = sha256_file(&corpus_path)?;
            return Ok((corpus, hash, true));
        }
    }

    let corpus = match (&config.corpus.text, &config.corpus.tokens) {
        (Some(p), None) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let vocab = Vocabulary::build(&text, scheme)?;
            vocab.save(&dir.join("vocab.txt"))?;
            TokenizedCorpus::from_text(
                &text,
                &vocab,
                scheme,
                (config.corpus.train_fraction, config.corpus.valid_fraction),
            )?
        }
        (None, Some(p)) => TokenizedCorpus::load(p)?,
        _ => unreachable!("checked above"),
    };
    corpus.save(&corpus_path)?;
    write_sidecar(&corpus_path, &identity)?;
    let hash = sha256_file(&corpus_path)?;
    Ok((corpus, hash, false))
}

/// Train the decoder (or reuse a checkpoint trained on the same inputs).
fn stage_train_lm(
    config: &RunConfig,
    corpus: &TokenizedCorpus,
    corpus_hash: [u8; 32],
) -> Result<(DecoderLm<f32>, [u8; 32], bool)> {
    let dir = config.run.out_dir.join("lm");
    let ckpt_path = dir.join("lm.ckpt");

    let mut provenance = BTreeMap::new();
    provenance.insert("corpus".to_string(), hex(&corpus_hash));
    provenance.insert("settings".to_string(), digest_of(&config.lm_train)?);

    if let Ok((lm, ck)) = DecoderLm::load(&ckpt_path) {
        let config_matches = toml::Value::try_from(&config.lm)
            .map(|v| v == ck.config)
            .unwrap_or(false);
        let provenance_matches = provenance
            .iter()
            .all(|(key, value)| ck.provenance.get(key) == Some(value));
        if config_matches && provenance_matches {
            return Ok((lm, ck.file_sha256, true));
        }
    }

    let (lm, curve) = train_lm(corpus, &config.lm, &config.lm_train)?;
    let mut sink = CsvSink::create(&dir.join("train_curve.csv"), "step,lr,loss,val_loss")?;
    for point in &curve {
        let val = point
            .val_loss
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        sink.line(&format!(
            "{},{:.8},{:.6},{}",
            point.step, point.lr, point.loss, val
        ))?;
    }
    let hash = lm.save(&ckpt_path, &provenance)?;
    Ok((lm, hash, false))
}

/// Extract (hidden state, next token) pairs from the train split.
fn stage_build_datastore(
    config: &RunConfig,
    lm: &DecoderLm<f32>,
    lm_hash: [u8; 32],
    corpus: &TokenizedCorpus,
) -> Result<(Datastore, [u8; 32], bool)> {
    let path = config.run.out_dir.join("datastore/datastore.bin");

    if let Ok(datastore) = Datastore::load(&path) {
        if datastore.model_hash == lm_hash
            && (datastore.layer_fraction as f64 - config.run.layer_fraction).abs() < 1e-6
            && datastore.d_model() == config.lm.d_model
        {
            let hash = sha256_file(&path)?;
            return Ok((datastore, hash, true));
        }
    }

    let settings = DatastoreBuildSettings {
        layer_fraction: config.run.layer_fraction,
        ..Default::default()
    };
    let datastore = build_datastore(lm, &corpus.train, lm_hash, &settings)?;
    datastore.save(&path)?;
    let hash = sha256_file(&path)?;
    Ok((datastore, hash, false))
}

/// The neighbour count actually stored for a datastore of `count` entries
/// (self-matches are excluded, so at most `count - 1` neighbours exist).
fn effective_k(k: usize, count: usize) -> usize {
    k.min(count.saturating_sub(1)).max(1)
}

/// Retrieve neighbours for every datastore entry (resumable; a complete
/// up-to-date file is a no-op).
fn stage_precompute(
    config: &RunConfig,
    datastore: &Datastore,
    ds_hash: [u8; 32],
) -> Result<(KnnTargets, [u8; 32], bool)> {
    let path = config.run.out_dir.join("targets/targets.bin");

    // A file computed with a different k or datastore is useless: remove it
    // rather than let the resume logic reject it.
    if path.exists() {
        let current = match read_targets_header(&path) {
            Ok(header) => {
                header.k as usize == effective_k(config.run.k, datastore.count())
                    && header.datastore_hash == ds_hash
            }
            Err(_) => false,
        };
        if !current {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }

    let mut worked = false;
    let mut progress = |_done: usize, _total: usize| {
        worked = true;
    };
    precompute_targets(
        datastore,
        config.run.k,
        ds_hash,
        &path,
        Some(&mut progress),
    )?;
    let targets = KnnTargets::load(&path)?;
    let hash = sha256_file(&path)?;
    Ok((targets, hash, !worked))
}

/// Inputs that (besides the artifact hashes) identify a memory checkpoint.
#[derive(Serialize)]
struct MemoryFingerprint<'a> {
    alpha: f64,
    train: &'a MemoryTrainSettings,
}

/// Train the memory to imitate the retrieval distributions (or reuse it).
fn stage_train_memory(
    config: &RunConfig,
    lm: &DecoderLm<f32>,
    corpus: &TokenizedCorpus,
    datastore: &Datastore,
    ds_hash: [u8; 32],
    targets: &KnnTargets,
    targets_hash: [u8; 32],
) -> Result<(MlpMemory<f32>, [u8; 32], bool)> {
    let dir = config.run.out_dir.join("memory");
    let ckpt_path = dir.join("memory.ckpt");

    let mut settings = config.memory_train.clone();
    settings.weights = LossWeights {
        alpha: config.run.alpha,
    };

    let mut provenance = BTreeMap::new();
    provenance.insert("datastore".to_string(), hex(&ds_hash));
    provenance.insert("targets".to_string(), hex(&targets_hash));
    provenance.insert(
        "settings".to_string(),
        digest_of(&MemoryFingerprint {
            alpha: config.run.alpha,
            train: &settings,
        })?,
    );

    if let Ok((memory, ck)) = MlpMemory::load(&ckpt_path) {
        let config_matches = toml::Value::try_from(&config.memory)
            .map(|v| v == ck.config)
            .unwrap_or(false);
        let provenance_matches = provenance
            .iter()
            .all(|(key, value)| ck.provenance.get(key) == Some(value));
        if config_matches && provenance_matches {
            return Ok((memory, ck.file_sha256, true));
        }
    }

    // Per-epoch metric: interpolated perplexity on the validation split,
    // capped so the hook stays a small fraction of the epoch's cost.
    let hook_eval = EvalConfig {
        window_len: config.eval.window_len,
        stride: config.eval.stride,
        lambda: config.run.lambda,
        max_scored: Some(config.eval.max_scored.map_or(2048, |m| m.min(2048))),
    };
    let valid = &corpus.valid;
    let layer_fraction = config.run.layer_fraction;
    let mut hook = |memory: &MlpMemory<f32>, _epoch: usize| -> Result<Option<f64>> {
        let predictor = Predictor::with_memory(lm, memory, layer_fraction)?;
        let report = evaluate_ppl(&predictor, valid, &hook_eval)?;
        Ok(Some(report.ppl()))
    };

    let (memory, curve) = train_memory(
        datastore,
        ds_hash,
        targets,
        &config.memory,
        &settings,
        Some(&mut hook),
    )?;

    let mut sink = CsvSink::create(
        &dir.join("train_curve.csv"),
        "step,epoch,lr,kl,ce,combined,val_kl,val_ppl",
    )?;
    for point in &curve {
        let val_kl = point
            .val_kl
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        let val_ppl = point
            .hook_metric
            .map(|v| format!("{v:.4}"))
            .unwrap_or_default();
        sink.line(&format!(
            "{},{},{:.8},{:.6},{:.6},{:.6},{},{}",
            point.step, point.epoch, point.lr, point.kl, point.ce, point.combined, val_kl, val_ppl
        ))?;
    }
    let hash = memory.save(&ckpt_path, &provenance)?;
    Ok((memory, hash, false))
}

/// What the evaluation outputs depend on.
#[derive(Serialize)]
struct EvalFingerprint<'a> {
    lambda: f64,
    k: usize,
    layer_fraction: f64,
    eval: &'a EvalParams,
}

/// Evaluate test perplexity in all three modes (or reuse current results).
#[allow(clippy::too_many_arguments)]
fn stage_eval(
    config: &RunConfig,
    lm: &DecoderLm<f32>,
    lm_hash: [u8; 32],
    corpus: &TokenizedCorpus,
    datastore: &Datastore,
    ds_hash: [u8; 32],
    memory: &MlpMemory<f32>,
    memory_hash: [u8; 32],
) -> Result<(Vec<PerplexityReport>, bool)> {
    let dir = config.run.out_dir.join("eval");
    let csv_path = dir.join("eval.csv");

    let mut identity = BTreeMap::new();
    identity.insert("lm".to_string(), hex(&lm_hash));
    identity.insert("datastore".to_string(), hex(&ds_hash));
    identity.insert("memory".to_string(), hex(&memory_hash));
    identity.insert(
        "params".to_string(),
        digest_of(&EvalFingerprint {
            lambda: config.run.lambda,
            k: config.run.k,
            layer_fraction: config.run.layer_fraction,
            eval: &config.eval,
        })?,
    );

    if csv_path.exists() && read_sidecar(&csv_path).as_ref() == Some(&identity) {
        if let Ok(reports) = parse_eval_csv(&csv_path) {
            if reports.len() >= 3 {
                return Ok((reports, true));
            }
        }
    }

    let eval = config.eval.eval_config(config.run.lambda);
    let test = &corpus.test;

    let lm_only = Predictor::lm_only(lm);
    let knn = Predictor::with_knn(lm, Some(lm_hash), datastore, config.run.k)?;
    let mem = Predictor::with_memory(lm, memory, config.run.layer_fraction)?;

    let mut reports = Vec::with_capacity(3);
    let mut sink = CsvSink::create(&csv_path, EVAL_CSV_HEADER)?;
    for predictor in [&lm_only, &knn, &mem] {
        let report = evaluate_ppl(predictor, test, &eval)?;
        sink.line(&report.csv_row("test"))?;
        reports.push(report);
    }

    if !config.eval.lambda_sweep.is_empty() {
        let mut sweep_sink = CsvSink::create(&dir.join("lambda_sweep.csv"), EVAL_CSV_HEADER)?;
        for predictor in [&knn, &mem] {
            for report in sweep_lambda(predictor, test, &eval, &config.eval.lambda_sweep)? {
                sweep_sink.line(&report.csv_row("test"))?;
            }
        }
    }
    if !config.eval.k_sweep.is_empty() {
        let mut sweep_sink = CsvSink::create(&dir.join("k_sweep.csv"), EVAL_CSV_HEADER)?;
        for report in sweep_k(&knn, test, &eval, &config.eval.k_sweep)? {
            sweep_sink.line(&report.csv_row("test"))?;
        }
    }

    // The sidecar is written last so an interrupted evaluation re-runs.
    write_sidecar(&csv_path, &identity)?;
    Ok((reports, false))
}

/// Read perplexity reports back from an `eval.csv` written by [`stage_eval`].
///
/// The `truncated` flag is not stored in the CSV and comes back as `false`.
fn parse_eval_csv(path: &Path) -> Result<Vec<PerplexityReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != EVAL_CSV_HEADER {
        return Err(Error::format(
            "evaluation results",
            path,
            format!("unexpected header {header:?}"),
        ));
    }
    let mut reports = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::format(
                "evaluation results",
                path,
                format!("line {}: expected 8 fields, found {}", i + 2, fields.len()),
            ));
        }
        let bad = |what: &str| {
            Error::format(
                "evaluation results",
                path,
                format!("line {}: bad {what} field", i + 2),
            )
        };
        let mode: Mode = fields[0].parse()?;
        let lambda: f64 = fields[1].parse().map_err(|_| bad("lambda"))?;
        let k = if fields[2].is_empty() {
            None
        } else {
            Some(fields[2].parse::<usize>().map_err(|_| bad("k"))?)
        };
        let window_len: usize = fields[3].parse().map_err(|_| bad("window"))?;
        let nll: f64 = fields[6].parse().map_err(|_| bad("nll"))?;
        let token_count: usize = fields[7].parse().map_err(|_| bad("tokens"))?;
        reports.push(PerplexityReport {
            mode,
            lambda,
            k,
            window_len,
            token_count,
            nll,
            truncated: false,
        });
    }
    Ok(reports)
}

/// Header of the CSV written by [`run_layer_sweep`].
pub const LAYER_SWEEP_CSV_HEADER: &str =
    "layer_fraction,layer,ppl_lm,ppl_interpolated,final_val_kl";

/// Build a datastore, targets, and memory at each extraction depth, then
/// compare interpolated test perplexity. Shares the corpus and decoder with
/// the main pipeline; per-fraction artifacts live under `analysis/layers/`.
///
/// Returns the path of the summary CSV.
pub fn run_layer_sweep(config: &RunConfig, fractions: &[f64]) -> Result<PathBuf> {
    config.ensure_valid()?;
    if fractions.is_empty() {
        return Err(Error::Config("layer sweep needs at least one fraction".into()));
    }
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("layer fraction {f} outside (0, 1]")));
        }
    }
    ensure_run_dirs(&config.run.out_dir)?;

    let (corpus, corpus_hash, _) = stage_ingest(config).map_err(wrap(Stage::Ingest))?;
    let resolved = resolve_vocab(config, &corpus)?;
    let config = resolved.as_ref();
    let (lm, lm_hash, _) =
        stage_train_lm(config, &corpus, corpus_hash).map_err(wrap(Stage::TrainLm))?;

    let dir = config.run.out_dir.join("analysis");
    let csv_path = dir.join("layer_sweep.csv");
    let mut sink = CsvSink::create(&csv_path, LAYER_SWEEP_CSV_HEADER)?;

    let eval = config.eval.eval_config(config.run.lambda);
    let baseline = evaluate_ppl(&Predictor::lm_only(&lm), &corpus.test, &eval)?;

    for &fraction in fractions {
        let run_one = || -> Result<(f64, Option<f64>)> {
            let label = format!("{fraction:.4}");
            let layer_dir = dir.join("layers").join(&label);
            fs::create_dir_all(&layer_dir).map_err(|e| Error::io(&layer_dir, e))?;

            let ds_path = layer_dir.join("datastore.bin");
            let datastore = match Datastore::load(&ds_path) {
                Ok(ds)
                    if ds.model_hash == lm_hash
                        && (ds.layer_fraction as f64 - fraction).abs() < 1e-6 =>
                {
                    ds
                }
                _ => {
                    let settings = DatastoreBuildSettings {
                        layer_fraction: fraction,
                        ..Default::default()
                    };
                    let ds = build_datastore(&lm, &corpus.train, lm_hash, &settings)?;
                    ds.save(&ds_path)?;
                    ds
                }
            };
            let ds_hash = sha256_file(&ds_path)?;

            let targets_path = layer_dir.join("targets.bin");
            if targets_path.exists() {
                let current = match read_targets_header(&targets_path) {
                    Ok(h) => {
                        h.k as usize == effective_k(config.run.k, datastore.count())
                            && h.datastore_hash == ds_hash
                    }
                    Err(_) => false,
                };
                if !current {
                    fs::remove_file(&targets_path).map_err(|e| Error::io(&targets_path, e))?;
                }
            }
            precompute_targets(&datastore, config.run.k, ds_hash, &targets_path, None)?;
            let targets = KnnTargets::load(&targets_path)?;

            let mut settings = config.memory_train.clone();
            settings.weights = LossWeights {
                alpha: config.run.alpha,
            };
            let (memory, curve) =
                train_memory(&datastore, ds_hash, &targets, &config.memory, &settings, None)?;
            let final_val_kl = curve.last().and_then(|p| p.val_kl);

            let predictor = Predictor::with_memory(&lm, &memory, fraction)?;
            let report = evaluate_ppl(&predictor, &corpus.test, &eval)?;
            Ok((report.ppl(), final_val_kl))
        };
        let (ppl, final_val_kl) = run_one()
            .map_err(|e| Error::Config(format!("layer sweep at fraction {fraction}: {e}")))?;

        let layer = layer_for_fraction(fraction, config.lm.n_layer);
        sink.line(&format!(
            "{:.4},{},{},{},{}",
            fraction,
            layer,
            baseline.ppl(),
            ppl,
            final_val_kl.map(|v| format!("{v:.6}")).unwrap_or_default()
        ))?;
    }
    Ok(csv_path)
}

/// Header of the CSV written by [`run_alpha_sweep`].
pub const ALPHA_SWEEP_CSV_HEADER: &str = "alpha,val_kl,val_ce,ppl_interpolated";

/// Train the memory at several loss mixes on the same targets and compare
/// held-out distillation/classification losses plus interpolated test
/// perplexity. Memories are kept in memory; only the CSV is written.
///
/// Returns the path of the summary CSV.
pub fn run_alpha_sweep(config: &RunConfig, alphas: &[f64]) -> Result<PathBuf> {
    config.ensure_valid()?;
    if alphas.is_empty() {
        return Err(Error::Config("alpha sweep needs at least one alpha".into()));
    }
    for &a in alphas {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
        }
    }
    ensure_run_dirs(&config.run.out_dir)?;

    let (corpus, corpus_hash, _) = stage_ingest(config).map_err(wrap(Stage::Ingest))?;
    let resolved = resolve_vocab(config, &corpus)?;
    let config = resolved.as_ref();
    let (lm, lm_hash, _) =
        stage_train_lm(config, &corpus, corpus_hash).map_err(wrap(Stage::TrainLm))?;
    let (datastore, ds_hash, _) =
        stage_build_datastore(config, &lm, lm_hash, &corpus).map_err(wrap(Stage::BuildDatastore))?;
    let (targets, _targets_hash, _) =
        stage_precompute(config, &datastore, ds_hash).map_err(wrap(Stage::PrecomputeKnn))?;

    let csv_path = config.run.out_dir.join("analysis/alpha_sweep.csv");
    let mut sink = CsvSink::create(&csv_path, ALPHA_SWEEP_CSV_HEADER)?;

    // Hold out a fixed tail so every alpha trains on the same records and is
    // judged on the same held-out slice.
    let n = targets.records.len();
    let n_val = if config.memory_train.val_records > 0 {
        config.memory_train.val_records.min(n - 1)
    } else {
        (n / 5).clamp(1, 512)
    };
    let n_train = n - n_val;
    let d = datastore.d_model();
    let val_inputs = Matrix::from_vec(
        n_val,
        d,
        datastore.keys.data[n_train * d..n * d].to_vec(),
    );
    let val_records = &targets.records[n_train..];

    let eval = config.eval.eval_config(config.run.lambda);

    for &alpha in alphas {
        let mut settings = config.memory_train.clone();
        settings.weights = LossWeights { alpha };
        settings.val_records = n_val;
        let (memory, _curve) = train_memory(
            &datastore,
            ds_hash,
            &targets,
            &config.memory,
            &settings,
            None,
        )
        .map_err(|e| Error::Config(format!("alpha sweep at alpha {alpha}: {e}")))?;

        let held_out = evaluate_memory(&memory, &val_inputs, val_records, settings.weights);
        let predictor = Predictor::with_memory(&lm, &memory, config.run.layer_fraction)?;
        let report = evaluate_ppl(&predictor, &corpus.test, &eval)?;
        sink.line(&format!(
            "{:.4},{:.6},{:.6},{}",
            alpha,
            held_out.kl,
            held_out.ce,
            report.ppl()
        ))?;
    }
    Ok(csv_path)
}
