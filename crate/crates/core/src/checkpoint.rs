//! Checkpoint container shared by the decoder model and the memory.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "CKPT" | version u32 | header_len u32 | header (TOML, UTF-8) | params (f32 × count)
//! ```
//!
//! The header carries the model kind, its config as a TOML table, a free-form
//! provenance map (input-file hashes, seeds), the parameter count, and a
//! SHA-256 over the parameter bytes. Loading verifies magic, version, kind,
//! count, and the digest, each failure mapping to a distinct error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{
    hex, read_f32_vec, read_u32, sha256_bytes, write_f32_slice, write_u32, HashingReader,
    HashingWriter,
};
use crate::linalg::Scalar;
use crate::nn::{TensorView, TensorViewMut};

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";
pub const CKPT_VERSION: u32 = 1;

/// Sanity bound on the TOML header; real headers are well under a kilobyte.
const MAX_HEADER_LEN: u32 = 1 << 20;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    param_count: u64,
    params_sha256: String,
    config: toml::Value,
    provenance: BTreeMap<String, String>,
}

/// A parsed checkpoint: header fields plus the flat parameter vector.
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: toml::Value,
    pub provenance: BTreeMap<String, String>,
    pub params: Vec<f32>,
    /// SHA-256 of the complete file, for downstream provenance chains.
    pub file_sha256: [u8; 32],
}

/// Concatenate tensors into the flat f32 order used on disk.
pub fn flatten_params<S: Scalar>(tensors: &[TensorView<'_, S>]) -> Vec<f32> {
    let total: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut flat = Vec::with_capacity(total);
    for t in tensors {
        flat.extend(t.data.iter().map(|v| v.as_f64() as f32));
    }
    flat
}

/// Distribute a flat parameter vector back into tensors, checking the length.
pub fn scatter_params<S: Scalar>(flat: &[f32], tensors: &mut [TensorViewMut<'_, S>]) -> Result<()> {
    let total: usize = tensors.iter().map(|t| t.data.len()).sum();
    if flat.len() != total {
        return Err(Error::Incompatible(format!(
            "checkpoint has {} parameters but the model shape needs {total}",
            flat.len()
        )));
    }
    let mut off = 0;
    for t in tensors {
        let len = t.data.len();
        for (dst, src) in t.data.iter_mut().zip(&flat[off..off + len]) {
            *dst = S::from_f64(*src as f64);
        }
        off += len;
    }
    Ok(())
}

/// Write a checkpoint; returns the SHA-256 of the finished file.
pub fn save<C: Serialize>(
    path: &Path,
    kind: &str,
    config: &C,
    provenance: &BTreeMap<String, String>,
    params: &[f32],
) -> Result<[u8; 32]> {
    let mut param_bytes = Vec::with_capacity(params.len() * 4);
    write_f32_slice(&mut param_bytes, params).expect("vec write cannot fail");

    let header = Header {
        kind: kind.to_string(),
        param_count: params.len() as u64,
        params_sha256: hex(&sha256_bytes(&param_bytes)),
        config: toml::Value::try_from(config)
            .map_err(|e| Error::Config(format!("config not serialisable: {e}")))?,
        provenance: provenance.clone(),
    };
    let header_text =
        toml::to_string(&header).map_err(|e| Error::Config(format!("header serialise: {e}")))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = HashingWriter::new(BufWriter::new(file));
    let go = |w: &mut HashingWriter<BufWriter<File>>| -> std::io::Result<()> {
        w.write_all(CKPT_MAGIC)?;
        write_u32(w, CKPT_VERSION)?;
        write_u32(w, header_text.len() as u32)?;
        w.write_all(header_text.as_bytes())?;
        w.write_all(&param_bytes)?;
        Ok(())
    };
    go(&mut w).map_err(|e| Error::io(path, e))?;
    let digest = w.digest();
    w.into_inner().flush().map_err(|e| Error::io(path, e))?;
    Ok(digest)
}

/// Read and fully validate a checkpoint of the expected kind.
pub fn load(path: &Path, expected_kind: &str) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = HashingReader::new(BufReader::new(file));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format("checkpoint", path, format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r).map_err(|e| Error::io(path, e))?;
    if version != CKPT_VERSION {
        return Err(Error::format(
            "checkpoint",
            path,
            format!("unsupported version {version} (expected {CKPT_VERSION})"),
        ));
    }
    let header_len = read_u32(&mut r).map_err(|e| Error::io(path, e))?;
    if header_len == 0 || header_len > MAX_HEADER_LEN {
        return Err(Error::format(
            "checkpoint",
            path,
            format!("implausible header length {header_len}"),
        ));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    r.read_exact(&mut header_bytes).map_err(|e| Error::io(path, e))?;
    let header_text = std::str::from_utf8(&header_bytes)
        .map_err(|e| Error::format("checkpoint", path, format!("header not UTF-8: {e}")))?;
    let header: Header = toml::from_str(header_text)
        .map_err(|e| Error::format("checkpoint", path, format!("header parse: {e}")))?;

    if header.kind != expected_kind {
        return Err(Error::Incompatible(format!(
            "{} holds a {:?} checkpoint, expected {expected_kind:?}",
            path.display(),
            header.kind
        )));
    }
    let count = usize::try_from(header.param_count)
        .map_err(|_| Error::format("checkpoint", path, "param_count overflows"))?;
    let params = read_f32_vec(&mut r, count).map_err(|e| Error::io(path, e))?;

    let mut param_bytes = Vec::with_capacity(count * 4);
    write_f32_slice(&mut param_bytes, &params).expect("vec write cannot fail");
    let computed = hex(&sha256_bytes(&param_bytes));
    if header.params_sha256 != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored: header.params_sha256,
            computed,
        });
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(Error::format("checkpoint", path, "trailing bytes")),
        Err(e) => return Err(Error::io(path, e)),
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        provenance: header.provenance,
        params,
        file_sha256: r.digest(),
    })
}
