//! Okapi BM25 over title + body, using the corpus tokenizer.
//!
//! `score(q, d) = Σ_t idf(t) · tf·(k1+1) / (tf + k1·(1 − b + b·len/avglen))`
//! with the non-negative `idf(t) = ln(1 + (N − df + 0.5)/(df + 0.5))`.
//! Query terms are summed per occurrence, in query order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::tokenize::{token_id, words};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::index::{Hit, RankedList};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    /// Anserini's MS MARCO passage-tuned values.
    fn default() -> Self {
        Self { k1: 0.82, b: 0.68 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub pid: u64,
    pub tf: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvertedIndex {
    pub params: Bm25Params,
    /// Term id to postings sorted by pid.
    postings: BTreeMap<u32, Vec<Posting>>,
    lengths: BTreeMap<u64, u32>,
    avg_len: f64,
    #[serde(skip)]
    slot: HashMap<u64, HashMap<u32, u32>>,
}

/// Term ids of title + body, in order.
pub fn passage_terms(title: &str, body: &str) -> Vec<u32> {
    words(title)
        .iter()
        .chain(words(body).iter())
        .map(|w| token_id(w))
        .collect()
}

pub fn query_terms(query: &str) -> Vec<u32> {
    words(query).iter().map(|w| token_id(w)).collect()
}

pub fn idf(n: usize, df: usize) -> f64 {
    let (n, df) = (n as f64, df as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

impl InvertedIndex {
    pub fn build(corpus: &Corpus, params: Bm25Params) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidParams("cannot index an empty corpus".into()));
        }
        let mut postings: BTreeMap<u32, Vec<Posting>> = BTreeMap::new();
        let mut lengths = BTreeMap::new();
        for p in corpus.iter() {
            let terms = passage_terms(&p.title, &p.body);
            lengths.insert(p.pid, terms.len() as u32);
            let mut tf: BTreeMap<u32, u32> = BTreeMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings
                    .entry(t)
                    .or_default()
                    .push(Posting { pid: p.pid, tf: n });
            }
        }
        for list in postings.values_mut() {
            list.sort_unstable_by_key(|p| p.pid);
        }
        let total: u64 = lengths.values().map(|&l| u64::from(l)).sum();
        // a corpus of title-less, word-less passages still needs a positive average
        let avg_len = (total as f64 / lengths.len() as f64).max(f64::MIN_POSITIVE);
        let mut index = Self {
            params,
            postings,
            lengths,
            avg_len,
            slot: HashMap::new(),
        };
        index.rebuild_lookup();
        Ok(index)
    }

    fn rebuild_lookup(&mut self) {
        let mut slot: HashMap<u64, HashMap<u32, u32>> = HashMap::with_capacity(self.lengths.len());
        for (&t, list) in &self.postings {
            for p in list {
                slot.entry(p.pid).or_default().insert(t, p.tf);
            }
        }
        self.slot = slot;
    }

    pub fn num_docs(&self) -> usize {
        self.lengths.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_len(&self, pid: u64) -> Option<u32> {
        self.lengths.get(&pid).copied()
    }

    pub fn df(&self, term: u32) -> usize {
        self.postings.get(&term).map_or(0, Vec::len)
    }

    pub fn postings(&self, term: u32) -> &[Posting] {
        self.postings.get(&term).map_or(&[], Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = u32> + '_ {
        self.postings.keys().copied()
    }

    fn term_weight(&self, df: usize, tf: u32, len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let norm = k1 * (1.0 - b + b * f64::from(len) / self.avg_len);
        idf(self.num_docs(), df) * (tf * (k1 + 1.0)) / (tf + norm)
    }

    /// BM25 of one passage. Terms absent from the passage contribute 0.
    pub fn score(&self, terms: &[u32], pid: u64) -> Result<f64> {
        let len = self.doc_len(pid).ok_or(Error::UnknownPid(pid))?;
        let tfs = self.slot.get(&pid);
        let mut total = 0.0;
        for t in terms {
            if let Some(&tf) = tfs.and_then(|m| m.get(t)) {
                total += self.term_weight(self.df(*t), tf, len);
            }
        }
        Ok(total)
    }

    /// Top-k passages with a positive score. Scores accumulate term by term
    /// in query order, the same order [`Self::score`] uses.
    pub fn retrieve(&self, qid: u64, query: &str, k: usize) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::InvalidParams(
                "retrieval depth k must be at least 1".into(),
            ));
        }
        let terms = query_terms(query);
        let mut acc: HashMap<u64, f64> = HashMap::new();
        for t in &terms {
            let list = self.postings(*t);
            let df = list.len();
            for p in list {
                let w = self.term_weight(df, p.tf, self.lengths[&p.pid]);
                *acc.entry(p.pid).or_insert(0.0) += w;
            }
        }
        let hits = acc
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(pid, score)| Hit { pid, score })
            .collect();
        Ok(RankedList::from_hits(qid, hits, k))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).map_err(|e| Error::json("bm25 index", e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut index: Self =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        index.rebuild_lookup();
        Ok(index)
    }
}
