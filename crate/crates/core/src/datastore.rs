//! The retrieval datastore: one `(key, value)` pair per corpus position.
//!
//! The key for position `p` is the decoder's residual-stream output at a
//! chosen block depth after reading tokens `0..=p` (within its window); the
//! value is the observed next token `p+1`. Keys are extracted with a sliding
//! window of the model's full context length and a half-window stride, so
//! every position is scored exactly once and — apart from the first window —
//! always with at least half a window of context.
//!
//! Because positions are scored in order and exactly once, entry `i`
//! corresponds to split position `i`. Nearest-neighbour target precomputation
//! relies on that alignment to drop a query's own entry.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{
    self, read_f32, read_f32_vec, read_u32, read_u32_vec, read_u64, write_f32, write_u32,
    write_u32_slice, write_u64,
};
use crate::linalg::Matrix;
use crate::lm::{layer_for_fraction, DecoderLm};

pub const DATASTORE_MAGIC: &[u8; 4] = b"DSTR";
pub const DATASTORE_VERSION: u32 = 1;

/// Keys and values, fully resident. At `f32` a million entries of width 64
/// cost ~256 MB; the scales this crate targets stay well under that.
#[derive(Debug, Clone)]
pub struct Datastore {
    /// Depth fraction the keys were read from (see [`layer_for_fraction`]).
    pub layer_fraction: f32,
    /// SHA-256 of the decoder checkpoint that produced the keys.
    pub model_hash: [u8; 32],
    /// `(count, d_model)` key matrix.
    pub keys: Matrix<f32>,
    /// `values[i]` is the token that followed entry `i`'s context.
    pub values: Vec<u32>,
}

/// Extraction knobs for [`build_datastore`].
#[derive(Debug, Clone)]
pub struct DatastoreBuildSettings {
    /// Fraction of the block stack to read keys from, in `(0, 1]`.
    pub layer_fraction: f64,
    /// Full-length windows to forward per batch.
    pub batch_windows: usize,
}

impl Default for DatastoreBuildSettings {
    fn default() -> Self {
        DatastoreBuildSettings {
            layer_fraction: 0.7,
            batch_windows: 8,
        }
    }
}

/// Extract a datastore from every position of `tokens`.
///
/// Entry `i` keys the context ending at position `i` and stores value
/// `tokens[i+1]`; the result has `tokens.len() - 1` entries in position
/// order. `model_hash` is recorded for provenance checks downstream.
pub fn build_datastore(
    model: &DecoderLm<f32>,
    tokens: &[u32],
    model_hash: [u8; 32],
    settings: &DatastoreBuildSettings,
) -> Result<Datastore> {
    if tokens.len() < 2 {
        return Err(Error::Config(
            "datastore split needs at least two tokens".into(),
        ));
    }
    if !(settings.layer_fraction > 0.0 && settings.layer_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "layer_fraction {} outside (0, 1]",
            settings.layer_fraction
        )));
    }
    let config = &model.config;
    let d = config.d_model;
    let w = config.n_ctx;
    let stride = (w / 2).max(1);
    let layer = layer_for_fraction(settings.layer_fraction, config.n_layer);
    let count = tokens.len() - 1;

    let mut keys = Matrix::zeros(count, d);
    let copy_rows = |out: &mut Matrix<f32>,
                     hidden: &Matrix<f32>,
                     window_row0: usize,
                     local: std::ops::Range<usize>,
                     dest: usize|
     -> Result<()> {
        for (offset, li) in local.enumerate() {
            let src = hidden.row(window_row0 + li);
            if src.iter().any(|v| !v.is_finite()) {
                return Err(Error::Incompatible(format!(
                    "non-finite hidden state while extracting entry {}",
                    dest + offset
                )));
            }
            out.row_mut(dest + offset).copy_from_slice(src);
        }
        Ok(())
    };

    // First window: positions 0..min(w, count), possibly shorter than w.
    let first_end = w.min(count);
    {
        let fwd = model.forward_batch(&tokens[..first_end], 1, first_end, false, false)?;
        let hidden = &fwd.block_outputs[layer - 1];
        copy_rows(&mut keys, hidden, 0, 0..first_end, 0)?;
    }

    // Remaining positions arrive in stride-sized chunks, each scored at the
    // tail of the full-length window ending at its chunk boundary. Chunks of
    // identical window shape are batched together.
    let mut spans = Vec::new();
    let mut prev = first_end;
    while prev < count {
        let end = (prev + stride).min(count);
        spans.push((prev, end));
        prev = end;
    }
    let mut ids = Vec::with_capacity(settings.batch_windows.max(1) * w);
    for batch in spans.chunks(settings.batch_windows.max(1)) {
        ids.clear();
        for &(_, end) in batch {
            ids.extend_from_slice(&tokens[end - w..end]);
        }
        let fwd = model.forward_batch(&ids, batch.len(), w, false, false)?;
        let hidden = &fwd.block_outputs[layer - 1];
        for (bi, &(start, end)) in batch.iter().enumerate() {
            copy_rows(&mut keys, hidden, bi * w, w - (end - start)..w, start)?;
        }
    }

    Ok(Datastore {
        layer_fraction: settings.layer_fraction as f32,
        model_hash,
        keys,
        values: tokens[1..].to_vec(),
    })
}

impl Datastore {
    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn d_model(&self) -> usize {
        self.keys.cols
    }

    pub fn key(&self, i: usize) -> &[f32] {
        self.keys.row(i)
    }

    /// Serialise: magic, version, count `u64`, d_model `u32`, layer fraction
    /// `f32`, model hash, then all keys and all values little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        w.write_all(DATASTORE_MAGIC).map_err(io_err)?;
        write_u32(&mut w, DATASTORE_VERSION).map_err(io_err)?;
        write_u64(&mut w, self.count() as u64).map_err(io_err)?;
        write_u32(&mut w, self.d_model() as u32).map_err(io_err)?;
        write_f32(&mut w, self.layer_fraction).map_err(io_err)?;
        w.write_all(&self.model_hash).map_err(io_err)?;
        io::write_f32_slice(&mut w, &self.keys.data).map_err(io_err)?;
        write_u32_slice(&mut w, &self.values).map_err(io_err)?;
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Datastore> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io_err = |e| Error::io(path, e);
        let fmt = |detail: String| Error::format("datastore", path, detail);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != DATASTORE_MAGIC {
            return Err(fmt(format!("bad magic {magic:02x?}")));
        }
        let version = read_u32(&mut r).map_err(io_err)?;
        if version != DATASTORE_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let count = read_u64(&mut r).map_err(io_err)? as usize;
        let d_model = read_u32(&mut r).map_err(io_err)? as usize;
        if count == 0 || d_model == 0 {
            return Err(fmt(format!("empty datastore ({count} × {d_model})")));
        }
        let layer_fraction = read_f32(&mut r).map_err(io_err)?;
        if !(layer_fraction > 0.0 && layer_fraction <= 1.0) {
            return Err(fmt(format!("layer fraction {layer_fraction} outside (0, 1]")));
        }
        let mut model_hash = [0u8; 32];
        r.read_exact(&mut model_hash).map_err(io_err)?;

        let key_data = read_f32_vec(&mut r, count * d_model).map_err(|e| {
            Error::format("datastore", path, format!("keys truncated: {e}"))
        })?;
        let values = read_u32_vec(&mut r, count).map_err(|e| {
            Error::format("datastore", path, format!("values truncated: {e}"))
        })?;
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing).map_err(io_err)? {
            0 => {}
            _ => return Err(fmt("trailing bytes after values".into())),
        }
        Ok(Datastore {
            layer_fraction,
            model_hash,
            keys: Matrix::from_vec(count, d_model, key_data),
            values,
        })
    }

    pub fn stats(&self) -> DatastoreStats {
        let mut min = f64::INFINITY;
        let mut max = 0.0f64;
        let mut sum = 0.0f64;
        for i in 0..self.count() {
            let norm = self
                .keys
                .row(i)
                .iter()
                .map(|v| (*v as f64) * (*v as f64))
                .sum::<f64>()
                .sqrt();
            min = min.min(norm);
            max = max.max(norm);
            sum += norm;
        }
        let n_vocab_seen = self.values.iter().copied().max().unwrap_or(0) as usize + 1;
        let mut counts = vec![0u64; n_vocab_seen];
        for &v in &self.values {
            counts[v as usize] += 1;
        }
        let total = self.values.len() as f64;
        let mut entropy = 0.0f64;
        let mut distinct = 0usize;
        for &c in &counts {
            if c > 0 {
                distinct += 1;
                let p = c as f64 / total;
                entropy -= p * p.ln();
            }
        }
        DatastoreStats {
            count: self.count(),
            d_model: self.d_model(),
            layer_fraction: self.layer_fraction,
            key_norm_min: min,
            key_norm_mean: sum / self.count() as f64,
            key_norm_max: max,
            distinct_values: distinct,
            value_entropy_nats: entropy,
        }
    }
}

/// Summary printed by the datastore inspection command.
#[derive(Debug, Clone)]
pub struct DatastoreStats {
    pub count: usize,
    pub d_model: usize,
    pub layer_fraction: f32,
    pub key_norm_min: f64,
    pub key_norm_mean: f64,
    pub key_norm_max: f64,
    pub distinct_values: usize,
    pub value_entropy_nats: f64,
}

impl fmt::Display for DatastoreStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "entries            {}", self.count)?;
        writeln!(f, "key width          {}", self.d_model)?;
        writeln!(f, "layer fraction     {:.3}", self.layer_fraction)?;
        writeln!(
            f,
            "key norm           min {:.4}  mean {:.4}  max {:.4}",
            self.key_norm_min, self.key_norm_mean, self.key_norm_max
        )?;
        writeln!(f, "distinct values    {}", self.distinct_values)?;
        write!(f, "value entropy      {:.4} nats", self.value_entropy_nats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{DecoderLm, LmConfig};

    fn test_model() -> DecoderLm<f32> {
        DecoderLm::<f32>::init(
            LmConfig {
                n_layer: 2,
                d_model: 12,
                n_heads: 2,
                d_attn: 12,
                d_ff: 24,
                n_ctx: 8,
                n_vocab: 17,
            },
            7,
        )
        .unwrap()
    }

    fn test_tokens(n: usize) -> Vec<u32> {
        (0..n).map(|i| ((i * 5 + i / 3) % 17) as u32).collect()
    }

    #[test]
    fn entry_layout_covers_every_position_once() {
        let model = test_model();
        let tokens = test_tokens(41);
        let ds = build_datastore(&model, &tokens, [0u8; 32], &Default::default()).unwrap();
        assert_eq!(ds.count(), 40);
        assert_eq!(ds.values, &tokens[1..]);
        assert_eq!(ds.d_model(), 12);
    }

    #[test]
    fn keys_match_per_position_window_contexts() {
        let model = test_model();
        let tokens = test_tokens(29);
        let settings = DatastoreBuildSettings {
            layer_fraction: 0.7,
            batch_windows: 3,
        };
        let ds = build_datastore(&model, &tokens, [0u8; 32], &settings).unwrap();
        let w = model.config.n_ctx;
        let stride = w / 2;
        let layer = layer_for_fraction(0.7, model.config.n_layer);

        for p in 0..ds.count() {
            // Reconstruct the window that scored position p: the first window
            // covers [0, w); afterwards each stride-sized chunk is scored at
            // the tail of the window ending at its chunk boundary.
            let win_start = if p < w {
                0
            } else {
                let chunk_end = w + ((p - w) / stride + 1) * stride;
                chunk_end.min(ds.count()) - w
            };
            let enc = model.encode_context(&tokens[win_start..=p]).unwrap();
            let expect = &enc.hidden[layer - 1];
            for (a, b) in ds.key(p).iter().zip(expect) {
                assert!(
                    (a - b).abs() < 1e-4,
                    "position {p} (window start {win_start}): {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn extraction_is_deterministic_and_batch_size_invariant() {
        let model = test_model();
        let tokens = test_tokens(60);
        let a = build_datastore(
            &model,
            &tokens,
            [1u8; 32],
            &DatastoreBuildSettings {
                layer_fraction: 0.7,
                batch_windows: 1,
            },
        )
        .unwrap();
        let b = build_datastore(
            &model,
            &tokens,
            [1u8; 32],
            &DatastoreBuildSettings {
                layer_fraction: 0.7,
                batch_windows: 5,
            },
        )
        .unwrap();
        assert!(a
            .keys
            .data
            .iter()
            .zip(&b.keys.data)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn short_split_still_produces_all_entries() {
        let model = test_model();
        let tokens = test_tokens(5); // shorter than one window
        let ds = build_datastore(&model, &tokens, [0u8; 32], &Default::default()).unwrap();
        assert_eq!(ds.count(), 4);
    }

    #[test]
    fn round_trips_bit_exactly_and_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.bin");
        let model = test_model();
        let tokens = test_tokens(30);
        let ds = build_datastore(&model, &tokens, [9u8; 32], &Default::default()).unwrap();
        ds.save(&p).unwrap();

        let loaded = Datastore::load(&p).unwrap();
        assert_eq!(loaded.count(), ds.count());
        assert_eq!(loaded.values, ds.values);
        assert_eq!(loaded.model_hash, [9u8; 32]);
        assert_eq!(loaded.layer_fraction, ds.layer_fraction);
        assert!(loaded
            .keys
            .data
            .iter()
            .zip(&ds.keys.data)
            .all(|(x, y)| x.to_bits() == y.to_bits()));

        let bytes = std::fs::read(&p).unwrap();
        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(Datastore::load(&p), Err(Error::Format { .. })));
        // Unsupported version.
        let mut bad = bytes.clone();
        bad[4] = 99;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(Datastore::load(&p), Err(Error::Format { .. })));
        // Truncated keys.
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Datastore::load(&p), Err(Error::Format { .. })));
        // Trailing garbage.
        let mut bad = bytes.clone();
        bad.push(0);
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(Datastore::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn stats_summarise_counts_and_norms() {
        let model = test_model();
        let tokens = test_tokens(30);
        let ds = build_datastore(&model, &tokens, [0u8; 32], &Default::default()).unwrap();
        let s = ds.stats();
        assert_eq!(s.count, 29);
        assert!(s.key_norm_min <= s.key_norm_mean && s.key_norm_mean <= s.key_norm_max);
        assert!(s.key_norm_min > 0.0);
        assert!(s.distinct_values <= 17);
        assert!(s.value_entropy_nats > 0.0);
        assert!(s.value_entropy_nats <= (s.distinct_values as f64).ln() + 1e-12);
    }
}
