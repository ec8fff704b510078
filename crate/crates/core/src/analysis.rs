//! Scaling-law fits, output-distribution statistics, and the scaling ladder.
//!
//! Perplexity is modelled as `PPL = (β·x)^γ` — a line in log-log space — so
//! fitting is ordinary least squares on `(ln x, ln PPL)`. The distribution
//! statistics summarise how sharp or sparse a next-token distribution is:
//! how many tokens carry more than a threshold of mass, and how many top
//! tokens are needed to accumulate a target mass. The scaling ladder trains
//! a small family of (decoder, memory) pairs of increasing size and emits
//! plot-ready CSV for both the size-scaling and compute-scaling views.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::corpus::TokenizedCorpus;
use crate::datastore::{build_datastore, DatastoreBuildSettings};
use crate::error::{Error, Result};
use crate::inference::{evaluate_ppl, EvalConfig, Predictor};
use crate::knn::{precompute_targets, KnnTargets};
use crate::lm::{flops_per_token, train_lm, CostModel, LmConfig, LmTrainSettings};
use crate::memory::{train_memory, MemoryTrainSettings, MlpConfig, MlpMemory};

// ---------------------------------------------------------------------------
// Power-law fitting
// ---------------------------------------------------------------------------

/// A fitted `PPL = (β·x)^γ` curve.
#[derive(Debug, Clone)]
pub struct PowerLawFit {
    /// Scale coefficient inside the power.
    pub beta: f64,
    /// Exponent (the slope on log-log axes).
    pub gamma: f64,
    /// Coefficient of determination of the log-log line.
    pub r_squared: f64,
    /// The `(x, PPL)` points the fit used.
    pub points: Vec<(f64, f64)>,
}

impl PowerLawFit {
    /// The fitted curve's prediction at `x`.
    pub fn ppl_at(&self, x: f64) -> f64 {
        (self.beta * x).powf(self.gamma)
    }

    /// Largest absolute log-space residual over the fitted points.
    pub fn max_log_residual(&self) -> f64 {
        self.points
            .iter()
            .map(|&(x, y)| (y.ln() - self.ppl_at(x).ln()).abs())
            .fold(0.0, f64::max)
    }
}

/// Least-squares fit of `PPL = (β·x)^γ` on log-log axes. Needs at least two
/// points with distinct `x`; all coordinates must be strictly positive.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(Error::Config(format!(
            "power-law fit needs at least 2 points, got {}",
            points.len()
        )));
    }
    for &(x, y) in points {
        if !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite()) {
            return Err(Error::Config(format!(
                "power-law fit needs strictly positive finite points, got ({x}, {y})"
            )));
        }
    }
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mean_x = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    if sxx == 0.0 {
        return Err(Error::Config(
            "power-law fit needs at least two distinct x values".into(),
        ));
    }
    let gamma = sxy / sxx;
    if gamma == 0.0 {
        return Err(Error::Config(
            "fitted exponent is exactly 0; the power-law form (β·x)^γ is degenerate".into(),
        ));
    }
    let intercept = mean_y - gamma * mean_x;
    // ln PPL = γ·ln x + c  ⇒  PPL = (e^{c/γ}·x)^γ.
    let beta = (intercept / gamma).exp();
    let ss_res: f64 = logs
        .iter()
        .map(|&(lx, ly)| (ly - (gamma * lx + intercept)).powi(2))
        .sum();
    let ss_tot: f64 = logs.iter().map(|&(_, ly)| (ly - mean_y).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(PowerLawFit {
        beta,
        gamma,
        r_squared,
        points: points.to_vec(),
    })
}

/// Relative exponent improvement `|γ₂/γ₁| − 1` between two fits of the same
/// sign. For decaying perplexity curves (negative exponents), a more
/// negative `γ₂` means faster decay and a positive improvement.
pub fn exponent_improvement(gamma1: f64, gamma2: f64) -> Result<f64> {
    if gamma1 == 0.0 || gamma2 == 0.0 || (gamma1 > 0.0) != (gamma2 > 0.0) {
        return Err(Error::Config(format!(
            "exponent improvement is defined only for same-sign nonzero exponents, got {gamma1} and {gamma2}"
        )));
    }
    Ok((gamma2 / gamma1).abs() - 1.0)
}

// ---------------------------------------------------------------------------
// Distribution statistics
// ---------------------------------------------------------------------------

/// Default probability thresholds for support counting.
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.0, 1e-4, 1e-3, 1e-2, 0.1];
/// Default cumulative-mass levels.
pub const DEFAULT_MASS_LEVELS: [f64; 4] = [0.5, 0.8, 0.9, 0.99];

/// Sharpness/sparsity summary of a stream of next-token distributions.
#[derive(Debug, Clone)]
pub struct DistributionStats {
    /// Ascending thresholds paired with `nonzero_counts`.
    pub thresholds: Vec<f64>,
    /// Mean number of tokens with probability strictly above each threshold.
    pub nonzero_counts: Vec<f64>,
    /// Ascending mass levels paired with `cumulative_counts`.
    pub mass_levels: Vec<f64>,
    /// Mean minimal number of top tokens whose mass reaches each level.
    pub cumulative_counts: Vec<f64>,
    pub sample_count: usize,
}

impl DistributionStats {
    /// CSV of the support-count table: `threshold,mean_tokens`.
    pub fn nonzero_csv(&self) -> String {
        let mut out = String::from("threshold,mean_tokens\n");
        for (t, c) in self.thresholds.iter().zip(&self.nonzero_counts) {
            out.push_str(&format!("{t},{c}\n"));
        }
        out
    }

    /// CSV of the cumulative-mass table: `mass,mean_tokens`.
    pub fn cumulative_csv(&self) -> String {
        let mut out = String::from("mass,mean_tokens\n");
        for (m, c) in self.mass_levels.iter().zip(&self.cumulative_counts) {
            out.push_str(&format!("{m},{c}\n"));
        }
        out
    }
}

/// Aggregate sharpness statistics over a stream of distributions. Each item
/// is the distribution's probability values; tokens omitted by a sparse
/// representation are exactly zero and may simply be left out. Values must
/// be non-negative and sum to 1 within 1e-6.
pub fn distribution_stats<I>(
    distributions: I,
    thresholds: &[f64],
    mass_levels: &[f64],
) -> Result<DistributionStats>
where
    I: IntoIterator,
    I::Item: AsRef<[f64]>,
{
    let mut acc = DistributionAccumulator::new(thresholds, mass_levels)?;
    for dist in distributions {
        acc.add(dist.as_ref())?;
    }
    acc.finish()
}

/// Streaming form of [`distribution_stats`]: feed distributions one at a
/// time with [`add`](Self::add), then [`finish`](Self::finish). Holds only
/// the running totals, so arbitrarily long streams cost constant memory.
#[derive(Debug, Clone)]
pub struct DistributionAccumulator {
    thresholds: Vec<f64>,
    mass_levels: Vec<f64>,
    nonzero_totals: Vec<u64>,
    cumulative_totals: Vec<u64>,
    samples: usize,
    sorted: Vec<f64>,
}

impl DistributionAccumulator {
    pub fn new(thresholds: &[f64], mass_levels: &[f64]) -> Result<DistributionAccumulator> {
        let mut thresholds = thresholds.to_vec();
        let mut mass_levels = mass_levels.to_vec();
        thresholds.sort_by(f64::total_cmp);
        mass_levels.sort_by(f64::total_cmp);
        if thresholds.is_empty() || mass_levels.is_empty() {
            return Err(Error::Config(
                "distribution stats need at least one threshold and one mass level".into(),
            ));
        }
        if mass_levels.iter().any(|&m| !(0.0..=1.0).contains(&m)) {
            return Err(Error::Config("mass levels must lie in [0, 1]".into()));
        }
        Ok(DistributionAccumulator {
            nonzero_totals: vec![0u64; thresholds.len()],
            cumulative_totals: vec![0u64; mass_levels.len()],
            thresholds,
            mass_levels,
            samples: 0,
            sorted: Vec::new(),
        })
    }

    pub fn add(&mut self, probs: &[f64]) -> Result<()> {
        let samples = self.samples;
        let mut sum = 0.0;
        for &p in probs {
            if !(p >= 0.0) {
                return Err(Error::Config(format!(
                    "distribution sample {samples} has negative or NaN probability {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "distribution sample {samples} sums to {sum}, not 1"
            )));
        }
        for (ti, &t) in self.thresholds.iter().enumerate() {
            self.nonzero_totals[ti] += probs.iter().filter(|&&p| p > t).count() as u64;
        }
        self.sorted.clear();
        self.sorted.extend_from_slice(probs);
        self.sorted.sort_by(|a, b| b.total_cmp(a));
        let mut mass = 0.0;
        let mut count = 0u64;
        let mut level = 0usize;
        for &p in &self.sorted {
            // Record levels already reached before adding more tokens.
            while level < self.mass_levels.len() && mass >= self.mass_levels[level] - 1e-9 {
                self.cumulative_totals[level] += count;
                level += 1;
            }
            if level == self.mass_levels.len() {
                break;
            }
            mass += p;
            count += 1;
        }
        while level < self.mass_levels.len() {
            self.cumulative_totals[level] += count;
            level += 1;
        }
        self.samples += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<DistributionStats> {
        if self.samples == 0 {
            return Err(Error::Config("distribution stats need at least one sample".into()));
        }
        let n = self.samples as f64;
        Ok(DistributionStats {
            nonzero_counts: self.nonzero_totals.iter().map(|&c| c as f64 / n).collect(),
            cumulative_counts: self
                .cumulative_totals
                .iter()
                .map(|&c| c as f64 / n)
                .collect(),
            thresholds: self.thresholds,
            mass_levels: self.mass_levels,
            sample_count: self.samples,
        })
    }
}

// ---------------------------------------------------------------------------
// Scaling ladder
// ---------------------------------------------------------------------------

/// One rung of the scaling ladder: a decoder and its size-matched memory,
/// with their training budgets.
#[derive(Debug, Clone)]
pub struct ScalingRunSpec {
    pub label: String,
    pub lm: LmConfig,
    pub memory: MlpConfig,
    pub lm_train: LmTrainSettings,
    pub memory_train: MemoryTrainSettings,
}

/// Shared knobs for every rung.
#[derive(Debug, Clone)]
pub struct ScalingSettings {
    /// Neighbours per retrieval target.
    pub k: usize,
    /// Depth fraction feeding the datastore and memory.
    pub layer_fraction: f64,
    /// Interpolation weight for the memory mode's perplexity.
    pub lambda: f64,
    /// Evaluation protocol (window, stride, scored-token budget).
    pub eval: EvalConfig,
}

impl Default for ScalingSettings {
    fn default() -> Self {
        ScalingSettings {
            k: 64,
            layer_fraction: 0.7,
            lambda: 0.25,
            eval: EvalConfig::default(),
        }
    }
}

/// Measured outcome of one ladder rung.
#[derive(Debug, Clone)]
pub struct ScalingPoint {
    pub label: String,
    pub lm_params: u64,
    pub memory_params: u64,
    /// Estimated decoder pretraining compute: `3 × forward FLOPs × tokens`.
    pub lm_train_flops: f64,
    /// Estimated memory training compute under the narrow accounting
    /// (memory gradient steps only).
    pub memory_train_flops: f64,
    /// Memory compute under the broad accounting that also charges the
    /// datastore extraction forwards and the neighbour precomputation.
    pub memory_train_flops_with_retrieval: f64,
    pub ppl_lm: f64,
    pub ppl_interpolated: f64,
}

/// Header of the per-rung scaling CSV.
pub const SCALING_CSV_HEADER: &str = "label,lm_params,memory_params,lm_train_flops,\
memory_train_flops,memory_train_flops_with_retrieval,ppl_lm,ppl_interpolated";

impl ScalingPoint {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.label,
            self.lm_params,
            self.memory_params,
            self.lm_train_flops,
            self.memory_train_flops,
            self.memory_train_flops_with_retrieval,
            self.ppl_lm,
            self.ppl_interpolated
        )
    }
}

/// Read scaling points back from a CSV written with [`SCALING_CSV_HEADER`]
/// rows (the inverse of [`ScalingPoint::csv_row`]).
pub fn parse_scaling_csv(path: &Path) -> Result<Vec<ScalingPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != SCALING_CSV_HEADER {
        return Err(Error::format(
            "scaling results",
            path,
            format!("unexpected header {header:?}"),
        ));
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::format(
                "scaling results",
                path,
                format!("line {}: expected 8 fields, found {}", i + 2, fields.len()),
            ));
        }
        let bad = |what: &str| {
            Error::format(
                "scaling results",
                path,
                format!("line {}: bad {what} field", i + 2),
            )
        };
        points.push(ScalingPoint {
            label: fields[0].to_string(),
            lm_params: fields[1].parse().map_err(|_| bad("lm_params"))?,
            memory_params: fields[2].parse().map_err(|_| bad("memory_params"))?,
            lm_train_flops: fields[3].parse().map_err(|_| bad("lm_train_flops"))?,
            memory_train_flops: fields[4]
                .parse()
                .map_err(|_| bad("memory_train_flops"))?,
            memory_train_flops_with_retrieval: fields[5]
                .parse()
                .map_err(|_| bad("memory_train_flops_with_retrieval"))?,
            ppl_lm: fields[6].parse().map_err(|_| bad("ppl_lm"))?,
            ppl_interpolated: fields[7].parse().map_err(|_| bad("ppl_interpolated"))?,
        });
    }
    Ok(points)
}

/// Header of the per-epoch compute-series CSV (fixed size, growing compute).
pub const COMPUTE_SERIES_CSV_HEADER: &str = "label,epoch,cumulative_flops,ppl_interpolated";

/// A CSV file that flushes after every line, so partial output survives a
/// later failure.
pub struct CsvSink {
    path: std::path::PathBuf,
    writer: BufWriter<File>,
}

impl CsvSink {
    /// Create the file and write its header line.
    pub fn create(path: impl Into<std::path::PathBuf>, header: &str) -> Result<Self> {
        let path = path.into();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut sink = CsvSink {
            writer: BufWriter::new(file),
            path,
        };
        sink.line(header)?;
        Ok(sink)
    }

    /// Append one row and flush it to disk.
    pub fn line(&mut self, row: &str) -> Result<()> {
        writeln!(self.writer, "{row}")
            .and_then(|()| self.writer.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Train and evaluate every rung, writing `scaling.csv` (one row per rung)
/// and `compute_series.csv` (per-epoch interpolated perplexity at fixed
/// size) under `out_dir`. Rows are flushed as they are produced, so a
/// failing rung aborts the ladder but preserves the rows already written.
pub fn emit_scaling_run(
    corpus: &TokenizedCorpus,
    specs: &[ScalingRunSpec],
    settings: &ScalingSettings,
    out_dir: &Path,
) -> Result<Vec<ScalingPoint>> {
    if specs.is_empty() {
        return Err(Error::Config("scaling ladder needs at least one rung".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut scaling = CsvSink::create(out_dir.join("scaling.csv"), SCALING_CSV_HEADER)?;
    let mut series = CsvSink::create(
        out_dir.join("compute_series.csv"),
        COMPUTE_SERIES_CSV_HEADER,
    )?;

    let mut points = Vec::with_capacity(specs.len());
    for spec in specs {
        let point = run_rung(corpus, spec, settings, out_dir, &mut series)?;
        scaling.line(&point.csv_row())?;
        points.push(point);
    }
    Ok(points)
}

fn run_rung(
    corpus: &TokenizedCorpus,
    spec: &ScalingRunSpec,
    settings: &ScalingSettings,
    out_dir: &Path,
    series: &mut CsvSink,
) -> Result<ScalingPoint> {
    let stage = |what: &str, e: Error| {
        Error::Config(format!("rung {} failed at {what}: {e}", spec.label))
    };

    let (lm, _) = train_lm(corpus, &spec.lm, &spec.lm_train).map_err(|e| stage("train-lm", e))?;
    let ds = build_datastore(
        &lm,
        &corpus.train,
        [0u8; 32],
        &DatastoreBuildSettings {
            layer_fraction: settings.layer_fraction,
            ..DatastoreBuildSettings::default()
        },
    )
    .map_err(|e| stage("build-datastore", e))?;

    let targets_path = out_dir.join(format!("targets-{}.bin", spec.label));
    let ds_hash = [0u8; 32];
    precompute_targets(&ds, settings.k, ds_hash, &targets_path, None)
        .map_err(|e| stage("precompute-knn", e))?;
    let targets = KnnTargets::load(&targets_path).map_err(|e| stage("precompute-knn", e))?;

    // Compute estimates. Decoder training does a forward and backward pass,
    // costed as 3× the analytic forward; datastore extraction re-scores the
    // corpus with ~2× coverage (windows overlap by half); the neighbour
    // precomputation is dominated by the n² pairwise-distance GEMM.
    let lm_fwd = flops_per_token(&(&spec.lm).into(), CostModel::Transformer).with_embedding() as f64;
    let lm_tokens =
        (spec.lm_train.steps * spec.lm_train.batch * spec.lm_train.window) as f64;
    let lm_train_flops = 3.0 * lm_fwd * lm_tokens;
    let datastore_flops = 2.0 * lm_fwd * corpus.train.len() as f64;
    let n = ds.count() as f64;
    let precompute_flops = n * n * 2.0 * ds.d_model() as f64;
    let mem_fwd = spec.memory.flops_per_token() as f64
        + 2.0 * (spec.memory.d_model * spec.memory.n_vocab) as f64;
    let mem_records_per_epoch = targets
        .records
        .len()
        .saturating_sub(spec.memory_train.val_records) as f64;
    let mem_flops_per_epoch = 3.0 * mem_fwd * mem_records_per_epoch;

    // Per-epoch interpolated perplexity on the validation split feeds the
    // compute-series CSV through the training hook.
    let mut hook_rows: Vec<(usize, f64)> = Vec::new();
    let val_eval = EvalConfig {
        max_scored: Some(settings.eval.max_scored.unwrap_or(4096).min(4096)),
        ..settings.eval
    };
    let mut hook = |memory: &MlpMemory<f32>, epoch: usize| -> Result<Option<f64>> {
        let predictor = Predictor::with_memory(&lm, memory, settings.layer_fraction)?;
        let report = evaluate_ppl(&predictor, &corpus.valid, &val_eval)?;
        hook_rows.push((epoch, report.ppl()));
        Ok(Some(report.ppl()))
    };
    let (memory, _) = train_memory(
        &ds,
        ds_hash,
        &targets,
        &spec.memory,
        &spec.memory_train,
        Some(&mut hook),
    )
    .map_err(|e| stage("train-memory", e))?;
    for &(epoch, ppl) in &hook_rows {
        series.line(&format!(
            "{},{epoch},{},{ppl}",
            spec.label,
            mem_flops_per_epoch * epoch as f64
        ))?;
    }

    let lm_report = evaluate_ppl(&Predictor::lm_only(&lm), &corpus.test, &settings.eval)
        .map_err(|e| stage("eval-ppl", e))?;
    let mem_predictor = Predictor::with_memory(&lm, &memory, settings.layer_fraction)
        .map_err(|e| stage("eval-ppl", e))?;
    let mem_report = evaluate_ppl(
        &mem_predictor,
        &corpus.test,
        &EvalConfig {
            lambda: settings.lambda,
            ..settings.eval
        },
    )
    .map_err(|e| stage("eval-ppl", e))?;

    let memory_train_flops = mem_flops_per_epoch * spec.memory_train.epochs as f64;
    Ok(ScalingPoint {
        label: spec.label.clone(),
        lm_params: spec.lm.param_count() as u64,
        memory_params: spec.memory.param_count() as u64,
        lm_train_flops,
        memory_train_flops,
        memory_train_flops_with_retrieval: memory_train_flops + datastore_flops + precompute_flops,
        ppl_lm: lm_report.ppl(),
        ppl_interpolated: mem_report.ppl(),
    })
}

/// Fit both modes' size-scaling curves from ladder points, pairing each
/// rung's perplexities with its decoder parameter count (memories are
/// size-matched to their decoders). Returns `(lm_fit, interpolated_fit)`.
pub fn scaling_fits(points: &[ScalingPoint]) -> Result<(PowerLawFit, PowerLawFit)> {
    let lm: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.lm_params as f64, p.ppl_lm))
        .collect();
    let mem: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.lm_params as f64, p.ppl_interpolated))
        .collect();
    Ok((fit_power_law(&lm)?, fit_power_law(&mem)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerSettings;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn fit_recovers_noiseless_synthetic_curves() {
        let beta = 1e-6;
        let gamma = -0.2;
        let points: Vec<(f64, f64)> = [1e8f64, 3e8, 1e9]
            .iter()
            .map(|&n| (n, (beta * n).powf(gamma)))
            .collect();
        let fit = fit_power_law(&points).unwrap();
        assert!((fit.gamma - gamma).abs() < 1e-9, "gamma {}", fit.gamma);
        assert!((fit.beta - beta).abs() / beta < 1e-9, "beta {}", fit.beta);
        assert!(fit.max_log_residual() < 1e-9);
        assert!(fit.r_squared > 1.0 - 1e-12);
        for &(x, y) in &points {
            assert!((fit.ppl_at(x) - y).abs() / y < 1e-9);
        }
    }

    #[test]
    fn fit_rejects_degenerate_inputs() {
        assert!(fit_power_law(&[(1.0, 2.0)]).is_err());
        assert!(fit_power_law(&[(1.0, 2.0), (-1.0, 3.0)]).is_err());
        assert!(fit_power_law(&[(1.0, 0.0), (2.0, 3.0)]).is_err());
        assert!(fit_power_law(&[(1.0, 2.0), (1.0, 3.0)]).is_err());
        // Flat y: slope 0, degenerate power form.
        assert!(fit_power_law(&[(1.0, 2.0), (4.0, 2.0)]).is_err());
    }

    #[test]
    fn exponent_improvements_match_published_pairs() {
        let wiki = exponent_improvement(-0.143, -0.168).unwrap();
        assert!((wiki - 0.175).abs() < 0.003, "wiki {wiki}");
        let lambada = exponent_improvement(-0.216, -0.268).unwrap();
        assert!((lambada - 0.241).abs() < 0.003, "lambada {lambada}");

        assert!(exponent_improvement(-0.2, 0.2).is_err());
        assert!(exponent_improvement(0.0, -0.2).is_err());
        // Same-sign positive exponents are fine.
        assert!((exponent_improvement(0.2, 0.3).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn one_hot_and_uniform_stats_match_symmetry() {
        let one_hot = vec![0.0, 1.0, 0.0, 0.0];
        let stats = distribution_stats(
            [one_hot],
            &[0.0, 1e-4, 1e-2, 0.5],
            &DEFAULT_MASS_LEVELS,
        )
        .unwrap();
        assert_eq!(stats.sample_count, 1);
        assert!(stats.nonzero_counts.iter().all(|&c| c == 1.0));
        assert!(stats.cumulative_counts.iter().all(|&c| c == 1.0));

        let uniform = vec![0.01; 100];
        let stats =
            distribution_stats([uniform], &[0.0, 0.005, 0.01, 0.02], &[0.5, 0.8]).unwrap();
        assert_eq!(stats.nonzero_counts, vec![100.0, 100.0, 0.0, 0.0]);
        assert_eq!(stats.cumulative_counts, vec![50.0, 80.0]);
    }

    #[test]
    fn scaling_csv_round_trips() {
        let points = vec![
            ScalingPoint {
                label: "d48".into(),
                lm_params: 1_234_567,
                memory_params: 654_321,
                lm_train_flops: 3.5e12,
                memory_train_flops: 1.25e11,
                memory_train_flops_with_retrieval: 2.5e11,
                ppl_lm: 42.5,
                ppl_interpolated: 38.25,
            },
            ScalingPoint {
                label: "d96".into(),
                lm_params: 9_876_543,
                memory_params: 2_222_222,
                lm_train_flops: 2.8e13,
                memory_train_flops: 5e11,
                memory_train_flops_with_retrieval: 9e11,
                ppl_lm: 31.0,
                ppl_interpolated: 28.5,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scaling.csv");
        let mut text = String::from(SCALING_CSV_HEADER);
        text.push('\n');
        for p in &points {
            text.push_str(&p.csv_row());
            text.push('\n');
        }
        std::fs::write(&path, &text).unwrap();

        let parsed = parse_scaling_csv(&path).unwrap();
        assert_eq!(parsed.len(), 2);
        for (a, b) in parsed.iter().zip(&points) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.lm_params, b.lm_params);
            assert_eq!(a.memory_params, b.memory_params);
            assert_eq!(a.lm_train_flops.to_bits(), b.lm_train_flops.to_bits());
            assert_eq!(a.ppl_lm.to_bits(), b.ppl_lm.to_bits());
            assert_eq!(
                a.ppl_interpolated.to_bits(),
                b.ppl_interpolated.to_bits()
            );
        }

        std::fs::write(&path, "wrong,header\n1,2\n").unwrap();
        assert!(parse_scaling_csv(&path).is_err());
    }

    #[test]
    fn stats_are_monotone_on_random_distributions() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let dists: Vec<Vec<f64>> = (0..300)
            .map(|i| {
                let v = 2 + (i % 40);
                let mut raw: Vec<f64> = (0..v)
                    .map(|j| {
                        // Mix of sparse (exact zeros) and dense samples.
                        if i % 3 == 0 && j % 2 == 0 {
                            0.0
                        } else {
                            rng.gen_range(0.01..1.0f64)
                        }
                    })
                    .collect();
                if raw.iter().all(|&p| p == 0.0) {
                    raw[0] = 1.0;
                }
                let sum: f64 = raw.iter().sum();
                raw.iter_mut().for_each(|p| *p /= sum);
                raw
            })
            .collect();
        let stats = distribution_stats(&dists, &DEFAULT_THRESHOLDS, &DEFAULT_MASS_LEVELS).unwrap();
        assert_eq!(stats.sample_count, 300);
        for w in stats.nonzero_counts.windows(2) {
            assert!(w[0] >= w[1], "support counts must not increase with threshold");
        }
        for w in stats.cumulative_counts.windows(2) {
            assert!(w[0] <= w[1], "top-token counts must not decrease with mass");
        }
        // Sparse support bound: counts above 0.0 never exceed the vector's
        // nonzero entries.
        let max_support = dists
            .iter()
            .map(|d| d.iter().filter(|&&p| p > 0.0).count())
            .max()
            .unwrap() as f64;
        assert!(stats.nonzero_counts[0] <= max_support);

        assert!(distribution_stats(&dists, &[], &[0.5]).is_err());
        assert!(distribution_stats(&dists, &[0.0], &[1.5]).is_err());
        assert!(distribution_stats([vec![0.7, 0.7]], &[0.0], &[0.5]).is_err());
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(distribution_stats(empty, &[0.0], &[0.5]).is_err());
    }

    fn micro_corpus(seed: u64) -> TokenizedCorpus {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // Deterministic cyclic structure with noise keeps the micro models
        // learnable and the perplexities finite.
        let gen = |n: usize, rng: &mut ChaCha20Rng| -> Vec<u32> {
            (0..n)
                .map(|i| {
                    if rng.gen_bool(0.2) {
                        rng.gen_range(0..13)
                    } else {
                        (i % 13) as u32
                    }
                })
                .collect()
        };
        TokenizedCorpus {
            n_vocab: 13,
            train: gen(2400, &mut rng),
            valid: gen(400, &mut rng),
            test: gen(400, &mut rng),
        }
    }

    fn micro_spec(label: &str, d_model: usize) -> ScalingRunSpec {
        ScalingRunSpec {
            label: label.into(),
            lm: LmConfig {
                n_layer: 1,
                d_model,
                n_heads: 1,
                d_attn: d_model,
                d_ff: 2 * d_model,
                n_ctx: 16,
                n_vocab: 13,
            },
            memory: MlpConfig {
                n_layer_mlp: 1,
                d_model,
                d_ff: 2 * d_model,
                n_vocab: 13,
                activation: "silu".into(),
            },
            lm_train: LmTrainSettings {
                seed: 1,
                steps: 25,
                batch: 8,
                window: 16,
                optimizer: OptimizerSettings {
                    total_steps: 25,
                    ..OptimizerSettings::default()
                },
                val_interval: 0,
                val_tokens: 0,
            },
            memory_train: MemoryTrainSettings {
                epochs: 2,
                batch: 64,
                val_records: 0,
                ..MemoryTrainSettings::default()
            },
        }
    }

    #[test]
    fn micro_ladder_emits_rows_and_preserves_partials_on_abort() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = micro_corpus(15);
        let settings = ScalingSettings {
            k: 4,
            layer_fraction: 0.7,
            lambda: 0.25,
            eval: EvalConfig {
                window_len: 16,
                stride: 8,
                lambda: 0.25,
                max_scored: Some(200),
            },
        };
        let specs = vec![micro_spec("s", 8), micro_spec("m", 12)];
        let points = emit_scaling_run(&corpus, &specs, &settings, dir.path()).unwrap();
        assert_eq!(points.len(), 2);
        assert!(points[0].lm_params < points[1].lm_params);
        for p in &points {
            assert!(p.ppl_lm.is_finite() && p.ppl_lm > 1.0);
            assert!(p.ppl_interpolated.is_finite() && p.ppl_interpolated > 1.0);
            assert!(p.memory_train_flops < p.memory_train_flops_with_retrieval);
        }
        let scaling = std::fs::read_to_string(dir.path().join("scaling.csv")).unwrap();
        let lines: Vec<&str> = scaling.trim().lines().collect();
        assert_eq!(lines[0], SCALING_CSV_HEADER);
        assert_eq!(lines.len(), 3);
        let series = std::fs::read_to_string(dir.path().join("compute_series.csv")).unwrap();
        assert_eq!(series.trim().lines().count(), 1 + 2 * 2);

        // Fits come straight off the points (direction unchecked at micro
        // scale, shape only).
        let (lm_fit, mem_fit) = scaling_fits(&points).unwrap();
        assert_eq!(lm_fit.points.len(), 2);
        assert_eq!(mem_fit.points.len(), 2);

        // A rung whose memory width disagrees with its decoder fails after
        // the first rung's row is already on disk.
        let dir2 = tempfile::tempdir().unwrap();
        let mut bad = micro_spec("bad", 8);
        bad.memory.d_model = 12;
        let err = emit_scaling_run(
            &corpus,
            &[micro_spec("ok", 8), bad],
            &settings,
            dir2.path(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("bad"), "{err}");
        let partial = std::fs::read_to_string(dir2.path().join("scaling.csv")).unwrap();
        assert_eq!(partial.trim().lines().count(), 2, "header plus the completed rung");
    }
}
