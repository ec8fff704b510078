//! Text ingestion: vocabulary construction, tokenization, and deterministic
//! train/validation/test token streams.
//!
//! Tokenization is word-level over whitespace by default (char-level is
//! available for tiny experiments). The vocabulary reserves one unknown token,
//! spelled `<unk>`, which always takes the *last* id so that content-token ids
//! are stable when the cutoff changes. Splits are contiguous regions of the
//! source text, in order: train, then validation, then test.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_u32, read_u32_vec, read_u64, write_u32, write_u32_slice, write_u64};

/// Spelling of the reserved unknown token.
pub const UNK_TOKEN: &str = "<unk>";

/// Magic bytes opening a token-stream binary.
pub const CORPUS_MAGIC: &[u8; 4] = b"TOKC";

/// How raw text is cut into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenScheme {
    /// Split on Unicode whitespace; words seen fewer than `min_count` times
    /// fall out of the vocabulary and tokenize to `<unk>`.
    Word { min_count: usize },
    /// One token per non-whitespace character. Whitespace is skipped because
    /// the vocabulary file stores one token per line and could not represent
    /// a newline token.
    Char,
}

impl Default for TokenScheme {
    fn default() -> Self {
        TokenScheme::Word { min_count: 1 }
    }
}

/// Cut text into token strings under a scheme.
///
/// The literal spelling `<unk>` is dropped here so it can never collide with
/// the reserved token; it would otherwise tokenize to itself anyway.
fn split_tokens(text: &str, scheme: TokenScheme) -> Vec<&str> {
    match scheme {
        TokenScheme::Word { .. } => text
            .split_whitespace()
            .filter(|w| *w != UNK_TOKEN)
            .collect(),
        TokenScheme::Char => text
            .split_whitespace()
            .flat_map(|w| {
                w.char_indices()
                    .map(move |(i, c)| &w[i..i + c.len_utf8()])
            })
            .collect(),
    }
}

/// Bijection between token strings and dense ids `[0, n_vocab)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    unk_id: u32,
}

impl Vocabulary {
    /// Build a vocabulary from raw text.
    ///
    /// Content tokens are ordered by descending frequency, ties broken by
    /// ascending token string, so the same text always yields the same ids.
    /// `<unk>` is appended last.
    pub fn build(text: &str, scheme: TokenScheme) -> Result<Vocabulary> {
        let tokens = split_tokens(text, scheme);
        if tokens.is_empty() {
            return Err(Error::Config(
                "cannot build a vocabulary from empty input".into(),
            ));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for t in &tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
        let min_count = match scheme {
            TokenScheme::Word { min_count } => min_count.max(1) as u64,
            TokenScheme::Char => 1,
        };
        let mut kept: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token: Vec<String> = kept.into_iter().map(|(t, _)| t.to_string()).collect();
        id_to_token.push(UNK_TOKEN.to_string());
        Self::from_tokens(id_to_token)
    }

    /// Assemble from an ordered token list whose last entry must be `<unk>`.
    fn from_tokens(id_to_token: Vec<String>) -> Result<Vocabulary> {
        let unk_id = match id_to_token.last() {
            Some(t) if t == UNK_TOKEN => (id_to_token.len() - 1) as u32,
            _ => {
                return Err(Error::Config(format!(
                    "vocabulary must end with the reserved token {UNK_TOKEN}"
                )))
            }
        };
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            id_to_token,
            token_to_id,
            unk_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    /// Id for a token, falling back to `<unk>`.
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(self.unk_id)
    }

    /// Token for an id; panics on out-of-range ids (they cannot come from
    /// [`Vocabulary::id`] or a validated corpus file).
    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    /// Tokenize text; unknown tokens map to `<unk>`.
    pub fn tokenize(&self, text: &str, scheme: TokenScheme) -> Vec<u32> {
        split_tokens(text, scheme).iter().map(|t| self.id(t)).collect()
    }

    /// Inverse of [`Vocabulary::tokenize`] for display purposes.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(self.token(id));
        }
        s
    }

    /// Write one token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for t in &self.id_to_token {
            writeln!(w, "{t}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Load a vocabulary file written by [`Vocabulary::save`].
    pub fn load(path: &Path) -> Result<Vocabulary> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                return Err(Error::format("vocabulary", path, "empty line"));
            }
            tokens.push(line);
        }
        Self::from_tokens(tokens)
            .map_err(|e| Error::format("vocabulary", path, e.to_string()))
    }
}

/// Which contiguous region of the corpus to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train, valid, or test)"
            ))),
        }
    }
}

/// Tokenized text, split into three contiguous streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedCorpus {
    pub n_vocab: u32,
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
    pub test: Vec<u32>,
}

impl TokenizedCorpus {
    /// Tokenize text and split it contiguously: the first `ratios.0` of
    /// tokens becomes train, the next `ratios.1` validation, the rest test.
    pub fn from_text(
        text: &str,
        vocab: &Vocabulary,
        scheme: TokenScheme,
        ratios: (f64, f64),
    ) -> Result<TokenizedCorpus> {
        let (r_train, r_valid) = ratios;
        if !(r_train > 0.0 && r_valid >= 0.0 && r_train + r_valid < 1.0) {
            return Err(Error::Config(format!(
                "split ratios ({r_train}, {r_valid}) must be positive and leave room for test"
            )));
        }
        let mut ids = vocab.tokenize(text, scheme);
        let n = ids.len();
        if n < 3 {
            return Err(Error::Config(format!(
                "corpus has only {n} tokens; cannot form three splits"
            )));
        }
        let n_train = ((n as f64 * r_train) as usize).clamp(1, n - 2);
        let n_valid = ((n as f64 * r_valid) as usize).clamp(1, n - n_train - 1);
        let test = ids.split_off(n_train + n_valid);
        let valid = ids.split_off(n_train);
        Ok(TokenizedCorpus {
            n_vocab: vocab.len() as u32,
            train: ids,
            valid,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    /// Write the binary token stream: magic, `n_vocab` (u32), the three split
    /// lengths (u64), then every token id (u32), all little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let go = |w: &mut BufWriter<File>| -> std::io::Result<()> {
            w.write_all(CORPUS_MAGIC)?;
            write_u32(w, self.n_vocab)?;
            write_u64(w, self.train.len() as u64)?;
            write_u64(w, self.valid.len() as u64)?;
            write_u64(w, self.test.len() as u64)?;
            write_u32_slice(w, &self.train)?;
            write_u32_slice(w, &self.valid)?;
            write_u32_slice(w, &self.test)?;
            w.flush()
        };
        go(&mut w).map_err(|e| Error::io(path, e))
    }

    /// Load and validate a binary token stream.
    pub fn load(path: &Path) -> Result<TokenizedCorpus> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != CORPUS_MAGIC {
            return Err(Error::format("corpus", path, format!("bad magic {magic:?}")));
        }
        let n_vocab = read_u32(&mut r).map_err(|e| Error::io(path, e))?;
        if n_vocab == 0 {
            return Err(Error::format("corpus", path, "n_vocab is zero"));
        }
        let mut lens = [0usize; 3];
        for l in &mut lens {
            let v = read_u64(&mut r).map_err(|e| Error::io(path, e))?;
            *l = usize::try_from(v)
                .map_err(|_| Error::format("corpus", path, format!("split length {v} overflows")))?;
        }
        let mut read_split = |n: usize| -> Result<Vec<u32>> {
            let ids = read_u32_vec(&mut r, n).map_err(|e| Error::io(path, e))?;
            if let Some(&bad) = ids.iter().find(|&&id| id >= n_vocab) {
                return Err(Error::format(
                    "corpus",
                    path,
                    format!("token id {bad} out of range for n_vocab {n_vocab}"),
                ));
            }
            Ok(ids)
        };
        let train = read_split(lens[0])?;
        let valid = read_split(lens[1])?;
        let test = read_split(lens[2])?;
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => return Err(Error::format("corpus", path, "trailing bytes after splits")),
            Err(e) => return Err(Error::io(path, e)),
        }
        Ok(TokenizedCorpus {
            n_vocab,
            train,
            valid,
            test,
        })
    }
}

/// One next-token prediction example: the window of ids ending just before
/// position `target_pos`, and the token at `target_pos` as the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Example<'a> {
    /// Position of the target token within the split.
    pub target_pos: usize,
    /// Up to `n_ctx` most recent context tokens (never empty).
    pub context: &'a [u32],
    /// The token to predict.
    pub target: u32,
}

/// Iterate every prediction example of a token stream.
///
/// A stream of length `L` yields exactly `L − 1` examples: one per position
/// with at least one token of context. Contexts are truncated to the `n_ctx`
/// most recent tokens.
pub fn iter_examples(tokens: &[u32], n_ctx: usize) -> impl Iterator<Item = Example<'_>> {
    assert!(n_ctx >= 1, "n_ctx must be at least 1");
    (1..tokens.len()).map(move |t| Example {
        target_pos: t,
        context: &tokens[t.saturating_sub(n_ctx)..t],
        target: tokens[t],
    })
}
