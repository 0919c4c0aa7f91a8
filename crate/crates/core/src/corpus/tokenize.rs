//! Deterministic hashing tokenizer.
//!
//! Text is NFKC-normalized, lowercased and split on runs of non-alphanumeric
//! characters. Each word is hashed (FNV-1a, 64 bit) into a fixed id space of
//! [`VOCAB_SIZE`] ids; the lowest [`RESERVED`] ids are set aside for marker
//! tokens and never produced by ordinary text.

use unicode_normalization::UnicodeNormalization;

use super::Passage;

pub const VOCAB_SIZE: u32 = 1 << 20;

pub const CLS: u32 = 0;
pub const QUERY_MARK: u32 = 1;
pub const DOC_MARK: u32 = 2;
pub const MASK: u32 = 3;
pub const SEP: u32 = 4;
/// Number of reserved marker ids at the bottom of the id space.
pub const RESERVED: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Query,
    Passage,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// NFKC followed by lowercasing.
pub fn normalize(text: &str) -> String {
    text.nfkc().collect::<String>().to_lowercase()
}

/// Normalized words of `text`, in order.
pub fn words(text: &str) -> Vec<String> {
    normalize(text)
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Id of an already-normalized word.
pub fn token_id(word: &str) -> u32 {
    let span = u64::from(VOCAB_SIZE - RESERVED);
    RESERVED + (fnv1a(word.as_bytes()) % span) as u32
}

pub fn tokenize(text: &str, mode: Mode) -> TokenSequence {
    let marker = match mode {
        Mode::Query => QUERY_MARK,
        Mode::Passage => DOC_MARK,
    };
    let mut ids = vec![CLS, marker];
    ids.extend(words(text).iter().map(|w| token_id(w)));
    TokenSequence { ids }
}

pub fn tokenize_passage(passage: &Passage) -> TokenSequence {
    tokenize(&passage.rendered(), Mode::Passage)
}
