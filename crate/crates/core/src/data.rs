//! Character/byte tokenization and batch sampling over a train/val split.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corpus {0} is empty")]
    Empty(PathBuf),
    #[error("corpus {0} is not valid UTF-8 (use the byte tokenizer)")]
    Utf8(PathBuf),
    #[error("unknown tokenizer `{0}`")]
    UnknownTokenizer(String),
    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),
    #[error("token id {0} is not in the vocabulary")]
    UnknownToken(usize),
    #[error("{split} split has {len} tokens, need at least {needed} for block size {block}")]
    SplitTooShort { split: Split, len: usize, needed: usize, block: usize },
    #[error("validation fraction {0} must lie in (0, 1)")]
    Fraction(f64),
    #[error("token cache {0} is corrupt")]
    Cache(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Byte,
    Char,
}

impl FromStr for TokenizerKind {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s.to_ascii_lowercase().as_str() {
            "byte" => Ok(TokenizerKind::Byte),
            "char" => Ok(TokenizerKind::Char),
            other => Err(DataError::UnknownTokenizer(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// Byte tokenizer (vocabulary 256) or character tokenizer whose vocabulary
/// is the sorted set of distinct characters in the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub kind: TokenizerKind,
    /// Sorted characters; empty for the byte tokenizer.
    pub chars: Vec<char>,
}

impl Tokenizer {
    pub fn byte() -> Self {
        Tokenizer { kind: TokenizerKind::Byte, chars: Vec::new() }
    }

    pub fn from_text(text: &str) -> Self {
        let set: BTreeSet<char> = text.chars().collect();
        Tokenizer { kind: TokenizerKind::Char, chars: set.into_iter().collect() }
    }

    pub fn vocab_size(&self) -> usize {
        match self.kind {
            TokenizerKind::Byte => 256,
            TokenizerKind::Char => self.chars.len(),
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, DataError> {
        match self.kind {
            TokenizerKind::Byte => Ok(text.bytes().map(usize::from).collect()),
            TokenizerKind::Char => {
                text.chars().map(|c| self.chars.binary_search(&c).map_err(|_| DataError::UnknownChar(c))).collect()
            }
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String, DataError> {
        match self.kind {
            TokenizerKind::Byte => {
                let bytes = ids
                    .iter()
                    .map(|&i| u8::try_from(i).map_err(|_| DataError::UnknownToken(i)))
                    .collect::<Result<Vec<u8>, _>>()?;
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }
            TokenizerKind::Char => {
                ids.iter().map(|&i| self.chars.get(i).copied().ok_or(DataError::UnknownToken(i))).collect()
            }
        }
    }
}

/// Token stream with a contiguous train prefix and validation suffix.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub tokenizer: Tokenizer,
    pub tokens: Vec<usize>,
    /// First validation index.
    pub boundary: usize,
}

/// Train length for a corpus of `len` tokens: `floor(len·(1−val_fraction))`.
pub fn split_boundary(len: usize, val_fraction: f64) -> usize {
    (len as f64 * (1.0 - val_fraction)).floor() as usize
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    if bytes.is_empty() {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    Ok(bytes)
}

impl Dataset {
    pub fn from_text(text: &str, kind: TokenizerKind, val_fraction: f64) -> Result<Self, DataError> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(DataError::Fraction(val_fraction));
        }
        let tokenizer = match kind {
            TokenizerKind::Byte => Tokenizer::byte(),
            TokenizerKind::Char => Tokenizer::from_text(text),
        };
        let tokens = tokenizer.encode(text)?;
        let boundary = split_boundary(tokens.len(), val_fraction);
        Ok(Dataset { tokenizer, tokens, boundary })
    }

    pub fn ingest(path: &Path, kind: TokenizerKind, val_fraction: f64) -> Result<Self, DataError> {
        let bytes = read_file(path)?;
        match kind {
            TokenizerKind::Byte => {
                if !(val_fraction > 0.0 && val_fraction < 1.0) {
                    return Err(DataError::Fraction(val_fraction));
                }
                let tokens: Vec<usize> = bytes.iter().map(|&b| usize::from(b)).collect();
                let boundary = split_boundary(tokens.len(), val_fraction);
                Ok(Dataset { tokenizer: Tokenizer::byte(), tokens, boundary })
            }
            TokenizerKind::Char => {
                let text = String::from_utf8(bytes).map_err(|_| DataError::Utf8(path.to_path_buf()))?;
                Self::from_text(&text, kind, val_fraction)
            }
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.tokens[..self.boundary],
            Split::Val => &self.tokens[self.boundary..],
        }
    }

    /// `batch` windows of `block + 1` tokens drawn uniformly from one split;
    /// returns `(inputs, targets)` each of length `batch·block`.
    pub fn sample_batch(
        &self,
        split: Split,
        batch: usize,
        block: usize,
        rng: &mut Rng,
    ) -> Result<(Vec<usize>, Vec<usize>), DataError> {
        let data = self.split(split);
        let needed = block + 1;
        if data.len() < needed {
            return Err(DataError::SplitTooShort { split, len: data.len(), needed, block });
        }
        let starts = data.len() - needed + 1;
        let mut x = Vec::with_capacity(batch * block);
        let mut y = Vec::with_capacity(batch * block);
        for _ in 0..batch {
            let s = rng.below(starts);
            x.extend_from_slice(&data[s..s + block]);
            y.extend_from_slice(&data[s + 1..s + 1 + block]);
        }
        Ok((x, y))
    }

    /// Writes the token stream as `MSTTOK1\n`, a JSON header line, then
    /// little-endian `u32` ids.
    pub fn write_cache(&self, path: &Path) -> Result<(), DataError> {
        let io = |source| DataError::Io { path: path.to_path_buf(), source };
        let header = CacheHeader { tokenizer: self.tokenizer.clone(), len: self.tokens.len(), boundary: self.boundary };
        let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
        f.write_all(CACHE_MAGIC).map_err(io)?;
        let json = serde_json::to_string(&header).expect("header serializes");
        writeln!(f, "{json}").map_err(io)?;
        for &t in &self.tokens {
            f.write_all(&(t as u32).to_le_bytes()).map_err(io)?;
        }
        f.flush().map_err(io)
    }

    pub fn read_cache(path: &Path) -> Result<Self, DataError> {
        let corrupt = || DataError::Cache(path.to_path_buf());
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
        let rest = bytes.strip_prefix(CACHE_MAGIC).ok_or_else(corrupt)?;
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(corrupt)?;
        let header: CacheHeader = serde_json::from_slice(&rest[..nl]).map_err(|_| corrupt())?;
        let body = &rest[nl + 1..];
        if body.len() != header.len * 4 || header.boundary > header.len {
            return Err(corrupt());
        }
        let tokens: Vec<usize> =
            body.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
        if tokens.iter().any(|&t| t >= header.tokenizer.vocab_size()) {
            return Err(corrupt());
        }
        Ok(Dataset { tokenizer: header.tokenizer, tokens, boundary: header.boundary })
    }
}

const CACHE_MAGIC: &[u8] = b"MSTTOK1\n";

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    tokenizer: Tokenizer,
    len: usize,
    boundary: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_vocab_is_sorted_distinct() {
        let t = Tokenizer::from_text("hello world");
        assert_eq!(t.chars, vec![' ', 'd', 'e', 'h', 'l', 'o', 'r', 'w']);
        let ids = t.encode("hold").unwrap();
        assert_eq!(ids, vec![3, 5, 4, 1]);
        assert_eq!(t.decode(&ids).unwrap(), "hold");
        assert!(matches!(t.encode("z"), Err(DataError::UnknownChar('z'))));
    }

    #[test]
    fn byte_round_trip() {
        let t = Tokenizer::byte();
        let ids = t.encode("né").unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(t.decode(&ids).unwrap(), "né");
    }

    #[test]
    fn boundary_ninety_ten() {
        assert_eq!(split_boundary(1000, 0.1), 900);
        let text: String = "ab".repeat(500);
        let d = Dataset::from_text(&text, TokenizerKind::Char, 0.1).unwrap();
        assert_eq!(d.split(Split::Train).len(), 900);
        assert_eq!(d.split(Split::Val).len(), 100);
    }

    #[test]
    fn windows_stay_inside_split() {
        // train tokens are 0, val tokens are 1: any crossing would mix them
        let text = format!("{}{}", "a".repeat(90), "b".repeat(10));
        let d = Dataset::from_text(&text, TokenizerKind::Char, 0.1).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let (x, y) = d.sample_batch(Split::Train, 2, 8, &mut rng).unwrap();
            assert!(x.iter().chain(&y).all(|&t| t == 0));
            let (x, y) = d.sample_batch(Split::Val, 2, 8, &mut rng).unwrap();
            assert!(x.iter().chain(&y).all(|&t| t == 1));
        }
        assert!(matches!(
            d.sample_batch(Split::Val, 1, 10, &mut rng),
            Err(DataError::SplitTooShort { split: Split::Val, .. })
        ));
    }

    #[test]
    fn targets_shift_inputs() {
        let d = Dataset::from_text("abcdefghijklmnopqrstuvwxyz", TokenizerKind::Char, 0.2).unwrap();
        let (x, y) = d.sample_batch(Split::Train, 1, 4, &mut Rng::new(0)).unwrap();
        assert_eq!(&x[1..], &y[..3]);
        assert_eq!(y[3], x[3] + 1);
    }

    #[test]
    fn empty_and_bad_fraction() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.txt");
        fs::write(&p, "").unwrap();
        assert!(matches!(Dataset::ingest(&p, TokenizerKind::Char, 0.1), Err(DataError::Empty(_))));
        assert!(matches!(Dataset::from_text("ab", TokenizerKind::Char, 1.0), Err(DataError::Fraction(_))));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tok.bin");
        let d = Dataset::from_text("the quick brown fox", TokenizerKind::Char, 0.25).unwrap();
        d.write_cache(&p).unwrap();
        let back = Dataset::read_cache(&p).unwrap();
        assert_eq!(back.tokens, d.tokens);
        assert_eq!(back.boundary, d.boundary);
        assert_eq!(back.tokenizer, d.tokenizer);
        fs::write(&p, b"garbage").unwrap();
        assert!(matches!(Dataset::read_cache(&p), Err(DataError::Cache(_))));
    }
}
