//! Bi-gram tokenization of datagram bytes and fixed-length model inputs.
//!
//! Every pair of adjacent bytes `(hi, lo)` becomes one token with value
//! `hi << 8 | lo`, shifted past the four special ids. With the default
//! overlapping mode a window slides one byte at a time, so `n` bytes give
//! `n - 1` tokens and neighbouring tokens share a byte.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of reserved ids ahead of the bi-gram range.
pub const SPECIAL_COUNT: u32 = 4;
/// 4 specials + 65536 bi-grams.
pub const VOCAB_SIZE: usize = 65_540;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const PAD: TokenId = TokenId(0);
    pub const CLS: TokenId = TokenId(1);
    pub const SEP: TokenId = TokenId(2);
    pub const MASK: TokenId = TokenId(3);

    pub fn from_bigram(value: u16) -> TokenId {
        TokenId(value as u32 + SPECIAL_COUNT)
    }

    pub fn is_special(self) -> bool {
        self.0 < SPECIAL_COUNT
    }

    /// The two bytes this token encodes, if it is a bi-gram.
    pub fn bigram(self) -> Option<[u8; 2]> {
        if self.is_special() || self.0 >= VOCAB_SIZE as u32 {
            return None;
        }
        Some(((self.0 - SPECIAL_COUNT) as u16).to_be_bytes())
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TokenId::PAD => f.write_str("[PAD]"),
            TokenId::CLS => f.write_str("[CLS]"),
            TokenId::SEP => f.write_str("[SEP]"),
            TokenId::MASK => f.write_str("[MASK]"),
            TokenId(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenError {
    #[error("need at least 2 bytes to form a bi-gram, got {0}")]
    TooShort(usize),
    #[error("special token {0} inside payload at position {1}")]
    SpecialInPayload(u32, usize),
    #[error("token id {0} outside the vocabulary")]
    OutOfVocab(u32),
    #[error("tokens {0} and {1} do not share their boundary byte")]
    OverlapMismatch(usize, usize),
    #[error("segment must contain at least one token")]
    EmptySegment,
    #[error("max_len {max_len} cannot hold the required {needed} tokens")]
    MaxLenTooSmall { max_len: usize, needed: usize },
    #[error("invalid token sequence: {0}")]
    InvalidSequence(&'static str),
}

/// How bytes are grouped into bi-grams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BigramMode {
    /// Stride-1 sliding window: `n` bytes give `n - 1` tokens.
    #[default]
    Overlapping,
    /// Stride-2 chunks: `n` bytes give `n / 2` tokens; an odd tail byte is dropped.
    Disjoint,
}

pub fn encode_bytes(bytes: &[u8]) -> Result<Vec<TokenId>, TokenError> {
    encode_bytes_with(bytes, BigramMode::Overlapping)
}

pub fn encode_bytes_with(bytes: &[u8], mode: BigramMode) -> Result<Vec<TokenId>, TokenError> {
    if bytes.len() < 2 {
        return Err(TokenError::TooShort(bytes.len()));
    }
    let pair = |w: &[u8]| TokenId::from_bigram(u16::from_be_bytes([w[0], w[1]]));
    Ok(match mode {
        BigramMode::Overlapping => bytes.windows(2).map(pair).collect(),
        BigramMode::Disjoint => bytes.chunks_exact(2).map(pair).collect(),
    })
}

/// Inverse of [`encode_bytes`] for overlapping bi-grams.
pub fn decode_tokens(ids: &[TokenId]) -> Result<Vec<u8>, TokenError> {
    let pairs = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            if id.is_special() {
                Err(TokenError::SpecialInPayload(id.0, i))
            } else {
                id.bigram().ok_or(TokenError::OutOfVocab(id.0))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let Some(first) = pairs.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::with_capacity(pairs.len() + 1);
    out.push(first[0]);
    out.push(first[1]);
    for (i, w) in pairs.windows(2).enumerate() {
        if w[0][1] != w[1][0] {
            return Err(TokenError::OverlapMismatch(i, i + 1));
        }
        out.push(w[1][1]);
    }
    Ok(out)
}

/// A fixed-length encoder input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub segments: Vec<u8>,
    /// Count of non-PAD positions; PAD only ever appears as a suffix.
    pub real_len: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// True for positions holding payload tokens (not CLS/SEP/PAD).
    pub fn is_content(&self, pos: usize) -> bool {
        pos < self.real_len && !self.ids[pos].is_special()
    }

    pub fn content_positions(&self) -> Vec<usize> {
        (0..self.real_len).filter(|&p| self.is_content(p)).collect()
    }

    /// Checks CLS-first, PAD-suffix and segment monotonicity.
    pub fn validate(&self) -> Result<(), TokenError> {
        use TokenError::InvalidSequence as Bad;
        if self.ids.len() != self.segments.len() {
            return Err(Bad("ids and segments differ in length"));
        }
        if self.real_len > self.ids.len() {
            return Err(Bad("real_len exceeds length"));
        }
        if self.ids.first() != Some(&TokenId::CLS) {
            return Err(Bad("first token is not CLS"));
        }
        if self.ids[..self.real_len].contains(&TokenId::PAD) {
            return Err(Bad("PAD inside the real prefix"));
        }
        if self.ids[self.real_len..].iter().any(|&t| t != TokenId::PAD) {
            return Err(Bad("non-PAD token after padding began"));
        }
        if self.segments[self.real_len..].iter().any(|&s| s != 0) {
            return Err(Bad("PAD position with non-zero segment"));
        }
        let first_sep = self.ids[..self.real_len].iter().position(|&t| t == TokenId::SEP);
        for (pos, &seg) in self.segments[..self.real_len].iter().enumerate() {
            let expected = match first_sep {
                Some(s) if pos > s => 1,
                _ => 0,
            };
            if seg != expected {
                return Err(Bad("segments not 0 through the first SEP and 1 afterwards"));
            }
        }
        Ok(())
    }
}

/// Lays out `[CLS] a [SEP] b [SEP]`, truncating the longer segment from its
/// tail until the sequence fits, then padding to `max_len`.
pub fn build_pair_sequence(a: &[TokenId], b: &[TokenId], max_len: usize) -> Result<TokenSequence, TokenError> {
    if a.is_empty() || b.is_empty() {
        return Err(TokenError::EmptySegment);
    }
    if max_len < 5 {
        return Err(TokenError::MaxLenTooSmall { max_len, needed: 5 });
    }
    let (mut na, mut nb) = (a.len(), b.len());
    while na + nb + 3 > max_len {
        if na > nb {
            na -= 1;
        } else {
            nb -= 1;
        }
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(TokenId::CLS);
    ids.extend_from_slice(&a[..na]);
    ids.push(TokenId::SEP);
    ids.extend_from_slice(&b[..nb]);
    ids.push(TokenId::SEP);
    let real_len = ids.len();
    let mut segments = vec![0u8; max_len];
    segments[na + 2..real_len].fill(1);
    ids.resize(max_len, TokenId::PAD);
    Ok(TokenSequence { ids, segments, real_len })
}

/// Lays out `[CLS] x [SEP]` as a single segment, truncating `x` to fit.
pub fn build_single_sequence(x: &[TokenId], max_len: usize) -> Result<TokenSequence, TokenError> {
    if x.is_empty() {
        return Err(TokenError::EmptySegment);
    }
    if max_len < 3 {
        return Err(TokenError::MaxLenTooSmall { max_len, needed: 3 });
    }
    let n = x.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(TokenId::CLS);
    ids.extend_from_slice(&x[..n]);
    ids.push(TokenId::SEP);
    let real_len = ids.len();
    ids.resize(max_len, TokenId::PAD);
    Ok(TokenSequence {
        ids,
        segments: vec![0; max_len],
        real_len,
    })
}
