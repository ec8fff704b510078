//! Exact k-nearest-neighbour retrieval over datastore keys, and the sparse
//! next-token distributions induced by the retrieved neighbours.
//!
//! Search is exact under squared L2: a blocked single-precision
//! `q·kᵀ` scan ranks candidates by `‖k‖² − 2·q·k` (the query norm is constant
//! per query), keeps a small margin beyond `k`, then re-scores the surviving
//! candidates with sequential double-precision arithmetic and orders them by
//! `(distance, index)`. Ties — including bit-identical duplicate keys — are
//! therefore broken toward the lower index, and results match a direct
//! double-precision scan of the whole store record for record.
//!
//! Retrieved neighbours are converted to a distribution by weighting each
//! neighbour's value with `exp(−distance)` (max-shifted before
//! exponentiation) and normalising.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::datastore::Datastore;
use crate::error::{Error, Result};
use crate::io::{read_f32, read_u32, read_u64, write_f32, write_u32, write_u64};
use crate::linalg::Matrix;

/// Neighbours retrieved per query when no override is given.
pub const DEFAULT_K: usize = 1024;

/// Extra candidates carried through the single-precision scan before exact
/// re-scoring. Rank inversions under `f32` rounding beyond this margin would
/// need this many keys packed within one part in ~10⁷ of distance; the
/// double-precision refinement then restores the true order.
const SCAN_MARGIN: usize = 16;

/// One retrieved datastore entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Position of the entry in the datastore.
    pub index: u64,
    /// Exact squared L2 distance, accumulated in `f64`.
    pub dist: f64,
    /// The entry's stored next token.
    pub value: u32,
}

// ---------------------------------------------------------------------------
// Sparse distributions
// ---------------------------------------------------------------------------

/// A next-token distribution supported on the handful of tokens that appeared
/// among a query's neighbours. Tokens are strictly ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDistribution {
    pub tokens: Vec<u32>,
    pub probs: Vec<f64>,
}

impl SparseDistribution {
    /// Aggregate neighbours into the retrieval distribution:
    /// `p(y) ∝ Σᵢ 1[vᵢ = y]·exp(−distᵢ)`, max-shifted for stability.
    pub fn from_neighbors(neighbors: &[Neighbor]) -> SparseDistribution {
        if neighbors.is_empty() {
            return SparseDistribution {
                tokens: Vec::new(),
                probs: Vec::new(),
            };
        }
        let shift = neighbors
            .iter()
            .map(|n| n.dist)
            .fold(f64::INFINITY, f64::min);
        let mut pairs: Vec<(u32, f64)> = Vec::with_capacity(neighbors.len());
        for n in neighbors {
            pairs.push((n.value, (-(n.dist - shift)).exp()));
        }
        pairs.sort_by_key(|&(t, _)| t);
        let mut tokens = Vec::new();
        let mut probs = Vec::new();
        for (t, w) in pairs {
            if tokens.last() == Some(&t) {
                *probs.last_mut().unwrap() += w;
            } else {
                tokens.push(t);
                probs.push(w);
            }
        }
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        SparseDistribution { tokens, probs }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Probability of `token`, zero when outside the support.
    pub fn prob_of(&self, token: u32) -> f64 {
        match self.tokens.binary_search(&token) {
            Ok(i) => self.probs[i],
            Err(_) => 0.0,
        }
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Highest-probability token; ties break toward the lower token id.
    pub fn top_token(&self) -> Option<u32> {
        let mut best: Option<(u32, f64)> = None;
        for (&t, &p) in self.tokens.iter().zip(&self.probs) {
            if best.map_or(true, |(_, bp)| p > bp) {
                best = Some((t, p));
            }
        }
        best.map(|(t, _)| t)
    }

    /// Check structural invariants: ascending support, positive mass, sum 1.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.probs.len() {
            return Err(Error::Incompatible(
                "distribution token/prob length mismatch".into(),
            ));
        }
        if self.tokens.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Incompatible(
                "distribution support not strictly ascending".into(),
            ));
        }
        if self.probs.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::Incompatible(
                "distribution probabilities must be positive and finite".into(),
            ));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Incompatible(format!(
                "distribution sums to {sum}, not 1"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Search
// ---------------------------------------------------------------------------

/// Scan candidate: approximate distance plus index, ordered so the heap root
/// is the worst kept candidate (largest distance, then largest index).
#[derive(PartialEq)]
struct Candidate {
    approx: f32,
    index: u64,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.approx
            .total_cmp(&other.approx)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Nearest-neighbour searcher borrowing a datastore's keys and values.
pub struct KnnIndex<'a> {
    keys: &'a Matrix<f32>,
    values: &'a [u32],
    /// Squared key norms, precomputed once in `f64` and stored as `f32`
    /// consistently with the scan's precision.
    key_norms: Vec<f32>,
}

/// Queries per GEMM block.
const QUERY_BLOCK: usize = 256;
/// Keys per GEMM block.
const KEY_BLOCK: usize = 4096;

impl<'a> KnnIndex<'a> {
    pub fn new(datastore: &'a Datastore) -> KnnIndex<'a> {
        Self::from_parts(&datastore.keys, &datastore.values)
    }

    pub fn from_parts(keys: &'a Matrix<f32>, values: &'a [u32]) -> KnnIndex<'a> {
        assert_eq!(keys.rows, values.len(), "one value per key");
        let key_norms = (0..keys.rows)
            .map(|i| {
                keys.row(i)
                    .iter()
                    .map(|v| (*v as f64) * (*v as f64))
                    .sum::<f64>() as f32
            })
            .collect();
        KnnIndex {
            keys,
            values,
            key_norms,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Retrieve the `k` nearest entries to one query, optionally excluding a
    /// single entry (a query's own datastore position). `k` larger than the
    /// eligible entry count is clamped.
    pub fn search(&self, query: &[f32], k: usize, exclude: Option<u64>) -> Vec<Neighbor> {
        let queries = Matrix::from_vec(1, query.len(), query.to_vec());
        self.search_batch(&queries, k, exclude.map(|e| vec![e]).as_deref())
            .pop()
            .expect("one result per query")
    }

    /// Batched retrieval: one result list per query row. `exclude[i]`, when
    /// given, removes that datastore index from query `i`'s candidates.
    pub fn search_batch(
        &self,
        queries: &Matrix<f32>,
        k: usize,
        exclude: Option<&[u64]>,
    ) -> Vec<Vec<Neighbor>> {
        assert_eq!(queries.cols, self.keys.cols, "query width");
        if let Some(ex) = exclude {
            assert_eq!(ex.len(), queries.rows, "one exclusion per query");
        }
        let n = self.len();
        let mut results = Vec::with_capacity(queries.rows);

        let mut gram = Matrix::<f32>::zeros(QUERY_BLOCK, KEY_BLOCK);
        for q0 in (0..queries.rows).step_by(QUERY_BLOCK) {
            let qn = QUERY_BLOCK.min(queries.rows - q0);
            let q_block = Matrix::from_vec(
                qn,
                queries.cols,
                queries.data[q0 * queries.cols..(q0 + qn) * queries.cols].to_vec(),
            );
            let keep: Vec<usize> = (0..qn)
                .map(|qi| {
                    let excluded = exclude.map_or(0, |ex| {
                        usize::from((ex[q0 + qi] as usize) < n)
                    });
                    k.min(n - excluded) + SCAN_MARGIN
                })
                .collect();
            let mut heaps: Vec<BinaryHeap<Candidate>> = keep
                .iter()
                .map(|&cap| BinaryHeap::with_capacity(cap + 1))
                .collect();

            for k0 in (0..n).step_by(KEY_BLOCK) {
                let kn = KEY_BLOCK.min(n - k0);
                let k_block = MatrixSlice {
                    rows: kn,
                    cols: self.keys.cols,
                    data: &self.keys.data[k0 * self.keys.cols..(k0 + kn) * self.keys.cols],
                };
                // The gram buffer is reused across blocks; dimensions are
                // retagged for the current block and data stays oversized.
                gram.rows = qn;
                gram.cols = kn;
                gemm_slice(&q_block, k_block, &mut gram);

                for qi in 0..qn {
                    let cap = keep[qi];
                    let heap = &mut heaps[qi];
                    let skip = exclude.map(|ex| ex[q0 + qi]);
                    let g_row = gram.row(qi);
                    for j in 0..kn {
                        let index = (k0 + j) as u64;
                        if Some(index) == skip {
                            continue;
                        }
                        let approx = self.key_norms[k0 + j] - 2.0 * g_row[j];
                        if heap.len() < cap {
                            heap.push(Candidate { approx, index });
                        } else {
                            let worst = heap.peek().expect("heap at capacity");
                            if (approx, index) < (worst.approx, worst.index) {
                                *heap.peek_mut().expect("heap at capacity") =
                                    Candidate { approx, index };
                            }
                        }
                    }
                }
            }

            for (qi, heap) in heaps.into_iter().enumerate() {
                let query = q_block.row(qi);
                let mut refined: Vec<Neighbor> = heap
                    .into_iter()
                    .map(|c| {
                        let i = c.index as usize;
                        Neighbor {
                            index: c.index,
                            dist: exact_sq_dist(query, self.keys.row(i)),
                            value: self.values[i],
                        }
                    })
                    .collect();
                refined.sort_by(|a, b| {
                    a.dist.total_cmp(&b.dist).then(a.index.cmp(&b.index))
                });
                refined.truncate(k);
                results.push(refined);
            }
        }
        results
    }
}

/// Borrowed row-major block, so key blocks avoid a copy.
#[derive(Clone, Copy)]
struct MatrixSlice<'a> {
    rows: usize,
    cols: usize,
    data: &'a [f32],
}

/// `out = q · kᵀ` for a borrowed key block.
fn gemm_slice(q: &Matrix<f32>, k: MatrixSlice<'_>, out: &mut Matrix<f32>) {
    assert_eq!(q.cols, k.cols);
    assert!(out.rows == q.rows && out.cols == k.rows);
    unsafe {
        matrixmultiply::sgemm(
            q.rows,
            q.cols,
            k.rows,
            1.0,
            q.data.as_ptr(),
            q.cols as isize,
            1,
            k.data.as_ptr(),
            1,
            k.cols as isize,
            0.0,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

/// Squared L2 distance accumulated sequentially in `f64`.
pub fn exact_sq_dist(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    acc
}

// ---------------------------------------------------------------------------
// Precomputed training targets
// ---------------------------------------------------------------------------

pub const TARGETS_MAGIC: &[u8; 4] = b"KNNT";
pub const TARGETS_VERSION: u32 = 1;

/// Fixed-size targets-file header.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetsHeader {
    /// Total records the file will contain when complete.
    pub count: u64,
    /// Neighbours retrieved per example.
    pub k: u32,
    /// SHA-256 of the datastore file the targets were computed from.
    pub datastore_hash: [u8; 32],
}

const TARGETS_HEADER_LEN: u64 = 4 + 4 + 8 + 4 + 32;

impl TargetsHeader {
    fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(TARGETS_MAGIC)?;
        write_u32(w, TARGETS_VERSION)?;
        write_u64(w, self.count)?;
        write_u32(w, self.k)?;
        w.write_all(&self.datastore_hash)
    }

    fn read<R: Read>(r: &mut R, path: &Path) -> Result<TargetsHeader> {
        let io_err = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != TARGETS_MAGIC {
            return Err(Error::format(
                "knn targets",
                path,
                format!("bad magic {magic:02x?}"),
            ));
        }
        let version = read_u32(r).map_err(io_err)?;
        if version != TARGETS_VERSION {
            return Err(Error::format(
                "knn targets",
                path,
                format!("unsupported version {version}"),
            ));
        }
        let count = read_u64(r).map_err(io_err)?;
        let k = read_u32(r).map_err(io_err)?;
        let mut datastore_hash = [0u8; 32];
        r.read_exact(&mut datastore_hash).map_err(io_err)?;
        Ok(TargetsHeader {
            count,
            k,
            datastore_hash,
        })
    }
}

/// Read only a targets file's header, without touching its records. Useful
/// for deciding whether an existing file matches the wanted parameters
/// before paying for a full load.
pub fn read_targets_header(path: &Path) -> Result<TargetsHeader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    TargetsHeader::read(&mut BufReader::new(file), path)
}

/// One precomputed training example: the retrieval distribution observed at
/// a datastore position, plus the token that actually followed there.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetRecord {
    pub index: u64,
    pub ground_truth: u32,
    pub tokens: Vec<u32>,
    pub probs: Vec<f32>,
}

impl TargetRecord {
    fn byte_len(&self) -> u64 {
        8 + 4 + 4 + 8 * self.tokens.len() as u64
    }

    fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write_u64(w, self.index)?;
        write_u32(w, self.ground_truth)?;
        write_u32(w, self.tokens.len() as u32)?;
        for (&t, &p) in self.tokens.iter().zip(&self.probs) {
            write_u32(w, t)?;
            write_f32(w, p)?;
        }
        Ok(())
    }

    fn read<R: Read>(r: &mut R, k: u32) -> std::io::Result<TargetRecord> {
        let index = read_u64(r)?;
        let ground_truth = read_u32(r)?;
        let support = read_u32(r)?;
        if support == 0 || support > k {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("support size {support} outside 1..={k}"),
            ));
        }
        let mut tokens = Vec::with_capacity(support as usize);
        let mut probs = Vec::with_capacity(support as usize);
        for _ in 0..support {
            tokens.push(read_u32(r)?);
            probs.push(read_f32(r)?);
        }
        Ok(TargetRecord {
            index,
            ground_truth,
            tokens,
            probs,
        })
    }

    /// Exact probabilities as stored on disk, as a sparse distribution.
    pub fn distribution(&self) -> SparseDistribution {
        SparseDistribution {
            tokens: self.tokens.clone(),
            probs: self.probs.iter().map(|&p| p as f64).collect(),
        }
    }
}

/// Fully loaded targets file.
#[derive(Debug, Clone)]
pub struct KnnTargets {
    pub header: TargetsHeader,
    pub records: Vec<TargetRecord>,
}

impl KnnTargets {
    /// Load and validate a complete targets file. A file whose record count
    /// falls short of the header (an interrupted precomputation) is rejected;
    /// rerunning the precomputation completes it in place.
    pub fn load(path: &Path) -> Result<KnnTargets> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let header = TargetsHeader::read(&mut r, path)?;
        let mut records = Vec::with_capacity(header.count as usize);
        for i in 0..header.count {
            let rec = TargetRecord::read(&mut r, header.k).map_err(|e| {
                Error::format(
                    "knn targets",
                    path,
                    format!("record {i} of {}: {e} (incomplete precomputation?)", header.count),
                )
            })?;
            if rec.index != i {
                return Err(Error::format(
                    "knn targets",
                    path,
                    format!("record {i} carries index {}", rec.index),
                ));
            }
            let sum: f64 = rec.probs.iter().map(|&p| p as f64).sum();
            if (sum - 1.0).abs() > 1e-3 {
                return Err(Error::format(
                    "knn targets",
                    path,
                    format!("record {i} probabilities sum to {sum}"),
                ));
            }
            records.push(rec);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::format(
                "knn targets",
                path,
                "trailing bytes after final record".to_string(),
            ));
        }
        Ok(KnnTargets { header, records })
    }
}

/// Progress callback: `(records_done, records_total)`.
pub type Progress<'p> = dyn FnMut(usize, usize) + 'p;

/// Retrieve neighbours for every datastore entry (each excluding itself) and
/// stream the resulting distributions to `path`.
///
/// The file is written in index order and flushed in batches, so an
/// interrupted run leaves a prefix of complete records; calling again with
/// the same arguments resumes after the last complete record. A finished
/// file is returned as-is.
pub fn precompute_targets(
    datastore: &Datastore,
    k: usize,
    datastore_hash: [u8; 32],
    path: &Path,
    progress: Option<&mut Progress<'_>>,
) -> Result<TargetsHeader> {
    let count = datastore.count();
    if count < 2 {
        return Err(Error::Config(
            "precomputing targets needs at least two datastore entries".into(),
        ));
    }
    let k = k.min(count - 1).max(1);
    let header = TargetsHeader {
        count: count as u64,
        k: k as u32,
        datastore_hash,
    };

    let start = match resume_point(path, &header)? {
        ResumePoint::Complete => return Ok(header),
        ResumePoint::At { records, bytes } => {
            let f = OpenOptions::new()
                .write(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            f.set_len(bytes).map_err(|e| Error::io(path, e))?;
            records
        }
        ResumePoint::Fresh => {
            let f = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(f);
            header.write(&mut w).map_err(|e| Error::io(path, e))?;
            w.flush().map_err(|e| Error::io(path, e))?;
            0
        }
    };

    let file = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let index = KnnIndex::new(datastore);
    let mut progress = progress;

    let d = datastore.d_model();
    for q0 in (start..count).step_by(QUERY_BLOCK) {
        let qn = QUERY_BLOCK.min(count - q0);
        let queries = Matrix::from_vec(
            qn,
            d,
            datastore.keys.data[q0 * d..(q0 + qn) * d].to_vec(),
        );
        let exclude: Vec<u64> = (q0..q0 + qn).map(|i| i as u64).collect();
        let batch = index.search_batch(&queries, k, Some(&exclude));
        for (qi, neighbors) in batch.iter().enumerate() {
            let dist = SparseDistribution::from_neighbors(neighbors);
            let rec = TargetRecord {
                index: (q0 + qi) as u64,
                ground_truth: datastore.values[q0 + qi],
                tokens: dist.tokens,
                probs: dist.probs.iter().map(|&p| p as f32).collect(),
            };
            rec.write(&mut w).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        if let Some(p) = progress.as_deref_mut() {
            p(q0 + qn, count);
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(header)
}

enum ResumePoint {
    Fresh,
    At { records: usize, bytes: u64 },
    Complete,
}

/// Inspect an existing targets file and decide where a rerun should pick up.
/// A header that disagrees with the requested parameters is an error — the
/// caller is asking for different targets than the file holds.
fn resume_point(path: &Path, expected: &TargetsHeader) -> Result<ResumePoint> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(ResumePoint::Fresh),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut r = BufReader::new(file);
    let header = TargetsHeader::read(&mut r, path)?;
    if header != *expected {
        return Err(Error::Incompatible(format!(
            "existing targets file {} was computed with different parameters \
             (count {}, k {}); delete it to recompute",
            path.display(),
            header.count,
            header.k
        )));
    }
    let mut records = 0usize;
    let mut bytes = TARGETS_HEADER_LEN;
    loop {
        if records as u64 == header.count {
            return Ok(ResumePoint::Complete);
        }
        match TargetRecord::read(&mut r, header.k) {
            Ok(rec) if rec.index == records as u64 => {
                bytes += rec.byte_len();
                records += 1;
            }
            // A short or malformed tail is the signature of an interrupted
            // run: truncate back to the last complete record and continue.
            Ok(_) | Err(_) => return Ok(ResumePoint::At { records, bytes }),
        }
    }
}
