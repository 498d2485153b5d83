//! Causal attention connectivity shared by all heads: dense, strided and
//! fixed patterns, their attended-pair counts and the attention FLOP ratio.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PatternError {
    #[error("sequence length must be positive")]
    EmptySequence,
    #[error("stride must be positive")]
    ZeroStride,
    #[error("summary width {summary} must satisfy 1 <= c < {stride}")]
    SummaryWidth { summary: usize, stride: usize },
    #[error("unknown pattern kind `{0}`")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PatternKind {
    Dense,
    /// Local window of `stride` plus every `stride`-th earlier position.
    Strided {
        stride: usize,
    },
    /// Causal within the current block of `stride`, plus the last `summary`
    /// columns of each earlier block.
    Fixed {
        stride: usize,
        summary: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternFamily {
    Dense,
    Strided,
    Fixed,
}

impl FromStr for PatternFamily {
    type Err = PatternError;
    fn from_str(s: &str) -> Result<Self, PatternError> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Ok(PatternFamily::Dense),
            "strided" => Ok(PatternFamily::Strided),
            "fixed" => Ok(PatternFamily::Fixed),
            other => Err(PatternError::UnknownKind(other.to_string())),
        }
    }
}

impl fmt::Display for PatternFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatternFamily::Dense => "dense",
            PatternFamily::Strided => "strided",
            PatternFamily::Fixed => "fixed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionPattern {
    pub kind: PatternKind,
    pub n: usize,
}

impl AttentionPattern {
    pub fn dense(n: usize) -> Result<Self, PatternError> {
        if n == 0 {
            return Err(PatternError::EmptySequence);
        }
        Ok(AttentionPattern { kind: PatternKind::Dense, n })
    }

    pub fn strided(n: usize, stride: usize) -> Result<Self, PatternError> {
        if n == 0 {
            return Err(PatternError::EmptySequence);
        }
        if stride == 0 {
            return Err(PatternError::ZeroStride);
        }
        Ok(AttentionPattern { kind: PatternKind::Strided { stride }, n })
    }

    pub fn fixed(n: usize, stride: usize, summary: usize) -> Result<Self, PatternError> {
        if n == 0 {
            return Err(PatternError::EmptySequence);
        }
        if stride == 0 {
            return Err(PatternError::ZeroStride);
        }
        if summary == 0 || summary >= stride {
            return Err(PatternError::SummaryWidth { summary, stride });
        }
        Ok(AttentionPattern { kind: PatternKind::Fixed { stride, summary }, n })
    }

    /// Pattern used by hybrid sparse attention at a given stride: stride 1
    /// is the dense mask.
    pub fn for_stride(family: PatternFamily, n: usize, stride: usize, summary: usize) -> Result<Self, PatternError> {
        match family {
            _ if stride == 1 => Self::dense(n),
            PatternFamily::Dense => Self::dense(n),
            PatternFamily::Strided => Self::strided(n, stride),
            PatternFamily::Fixed => Self::fixed(n, stride, summary),
        }
    }

    /// Whether row `i` attends to column `j`.
    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        if j > i {
            return false;
        }
        match self.kind {
            PatternKind::Dense => true,
            PatternKind::Strided { stride: l } => i - j < l || (i - j).is_multiple_of(l),
            PatternKind::Fixed { stride: l, summary: c } => {
                let block_start = (i / l) * l;
                j >= block_start || j % l >= l - c
            }
        }
    }

    /// Number of attended columns in row `i`.
    pub fn row_count(&self, i: usize) -> usize {
        match self.kind {
            PatternKind::Dense => i + 1,
            // window ∪ stride positions; they share only `i` itself
            PatternKind::Strided { stride: l } => l.min(i + 1) + i / l,
            PatternKind::Fixed { stride: l, summary: c } => i % l + 1 + (i / l) * c,
        }
    }

    pub fn pair_count(&self) -> u64 {
        (0..self.n).map(|i| self.row_count(i) as u64).sum()
    }

    /// Attended pairs over `n²`; the dense mask is the reference and has
    /// ratio exactly one.
    pub fn q_atten(&self) -> f64 {
        match self.kind {
            PatternKind::Dense => 1.0,
            _ => self.pair_count() as f64 / (self.n as f64 * self.n as f64),
        }
    }

    /// Row-major `t×t` inclusion matrix of the top-left corner.
    pub fn to_mask(&self, t: usize) -> Vec<bool> {
        let mut out = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                out[i * t + j] = self.allows(i, j);
            }
        }
        out
    }

    /// One line per row of `'1'`/`'0'` characters.
    pub fn to_text_grid(&self) -> String {
        let mut s = String::with_capacity(self.n * (self.n + 1));
        for i in 0..self.n {
            for j in 0..self.n {
                s.push(if self.allows(i, j) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(p: &AttentionPattern, i: usize) -> Vec<usize> {
        (0..p.n).filter(|&j| p.allows(i, j)).collect()
    }

    #[test]
    fn strided_rows() {
        let p = AttentionPattern::strided(6, 3).unwrap();
        assert_eq!(row(&p, 5), vec![2, 3, 4, 5]);
        assert_eq!(row(&p, 4), vec![1, 2, 3, 4]);
    }

    #[test]
    fn fixed_rows() {
        let p = AttentionPattern::fixed(6, 3, 1).unwrap();
        assert_eq!(row(&p, 4), vec![2, 3, 4]);
        assert_eq!(row(&p, 2), vec![0, 1, 2]);
    }

    #[test]
    fn degenerate_patterns_are_full_causal() {
        let dense = AttentionPattern::dense(9).unwrap().to_mask(9);
        assert_eq!(AttentionPattern::strided(9, 1).unwrap().to_mask(9), dense);
        assert_eq!(AttentionPattern::fixed(9, 9, 1).unwrap().to_mask(9), dense);
        assert_eq!(AttentionPattern::fixed(9, 20, 3).unwrap().to_mask(9), dense);
    }

    #[test]
    fn dense_count_and_ratio() {
        let p = AttentionPattern::dense(4).unwrap();
        assert_eq!(p.pair_count(), 10);
        assert_eq!(p.q_atten(), 1.0);
    }

    #[test]
    fn invalid_parameters() {
        assert!(AttentionPattern::fixed(8, 4, 0).is_err());
        assert!(AttentionPattern::fixed(8, 4, 4).is_err());
        assert!(AttentionPattern::strided(8, 0).is_err());
        assert!(AttentionPattern::dense(0).is_err());
    }

    #[test]
    fn text_grid() {
        let p = AttentionPattern::strided(3, 2).unwrap();
        assert_eq!(p.to_text_grid(), "100\n110\n111\n");
    }

    #[test]
    fn hybrid_stride_one_is_dense() {
        let p = AttentionPattern::for_stride(PatternFamily::Strided, 16, 1, 1).unwrap();
        assert_eq!(p.kind, PatternKind::Dense);
    }
}
