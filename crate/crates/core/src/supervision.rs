//! Retrieve-and-filter weak supervision.
//!
//! A guiding ranking is filtered with the answer strings of each training
//! question: the best `t` answer-bearing passages within depth `k_pos` become
//! positives, every passage within depth `k_neg` that lacks the answer becomes
//! a negative.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerMatcher, Corpus, Dataset};
use crate::error::{Error, Result};
use crate::index::Rankings;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterParams {
    /// Maximum positives kept per question.
    pub t: usize,
    pub k_pos: usize,
    pub k_neg: usize,
    pub include_title: bool,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            t: 3,
            k_pos: 1000,
            k_neg: 1000,
            include_title: true,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.k_pos == 0 || self.k_neg == 0 {
            return Err(Error::InvalidParams(format!(
                "t, k_pos and k_neg must be at least 1 (got {}, {}, {})",
                self.t, self.k_pos, self.k_neg
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrainingTriple {
    pub qid: u64,
    pub pos_pid: u64,
    pub neg_pid: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub total: usize,
    pub with_positive: usize,
    pub coverage: f64,
}

impl CoverageReport {
    fn new(total: usize, with_positive: usize) -> Self {
        let coverage = if total == 0 {
            0.0
        } else {
            with_positive as f64 / total as f64
        };
        Self {
            total,
            with_positive,
            coverage,
        }
    }
}

/// Positive and negative pids per question, in guiding-rank order.
/// Only questions with at least one positive appear.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Labels {
    pub positives: BTreeMap<u64, Vec<u64>>,
    pub negatives: BTreeMap<u64, Vec<u64>>,
    pub report: CoverageReport,
}

impl Default for CoverageReport {
    fn default() -> Self {
        Self::new(0, 0)
    }
}

fn warn_shallow(rankings: &Rankings, depth: usize, corpus: &Corpus) {
    let shallow = rankings
        .values()
        .filter(|l| l.len() < depth && l.len() < corpus.len())
        .count();
    if shallow > 0 {
        tracing::warn!(
            shallow,
            depth,
            "guiding rankings shallower than the filter depth; using them as-is"
        );
    }
}

pub fn retrieve_and_filter(
    rankings: &Rankings,
    dataset: &Dataset,
    corpus: &Corpus,
    params: &FilterParams,
) -> Result<Labels> {
    params.validate()?;
    warn_shallow(rankings, params.k_pos.max(params.k_neg), corpus);
    let matcher = AnswerMatcher::new(params.include_title);

    let per_question: Vec<Result<Option<(u64, Vec<u64>, Vec<u64>)>>> = dataset
        .examples()
        .par_iter()
        .map(|ex| {
            let Some(list) = rankings.get(&ex.qid) else {
                return Ok(None);
            };
            let answers = AnswerMatcher::prepare(&ex.answers);
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            let depth = params.k_pos.max(params.k_neg);
            for (rank, pid) in list.pids().take(depth).enumerate() {
                let passage = corpus.require(pid)?;
                let bearing = matcher.matches_prepared(passage, &answers);
                if bearing && rank < params.k_pos && pos.len() < params.t {
                    pos.push(pid);
                } else if !bearing && rank < params.k_neg {
                    neg.push(pid);
                }
            }
            Ok((!pos.is_empty()).then_some((ex.qid, pos, neg)))
        })
        .collect();

    let mut labels = Labels::default();
    for item in per_question {
        if let Some((qid, pos, neg)) = item? {
            labels.positives.insert(qid, pos);
            labels.negatives.insert(qid, neg);
        }
    }
    labels.report = CoverageReport::new(dataset.len(), labels.positives.len());
    Ok(labels)
}

/// Gold-evidence positives with negatives filtered from a guiding ranking.
/// Questions without gold pids are skipped and show up in the coverage.
pub fn gold_positives(
    dataset: &Dataset,
    rankings: &Rankings,
    corpus: &Corpus,
    k_neg: usize,
    include_title: bool,
) -> Result<Labels> {
    if k_neg == 0 {
        return Err(Error::InvalidParams("k_neg must be at least 1".into()));
    }
    dataset.validate_gold(corpus)?;
    warn_shallow(rankings, k_neg, corpus);
    let matcher = AnswerMatcher::new(include_title);
    let mut labels = Labels::default();
    for ex in dataset.iter().filter(|ex| !ex.gold_pids.is_empty()) {
        let mut pos = Vec::new();
        for &pid in &ex.gold_pids {
            if !pos.contains(&pid) {
                pos.push(pid);
            }
        }
        let answers = AnswerMatcher::prepare(&ex.answers);
        let mut neg = Vec::new();
        if let Some(list) = rankings.get(&ex.qid) {
            for pid in list.pids().take(k_neg) {
                if pos.contains(&pid) {
                    continue;
                }
                if !matcher.matches_prepared(corpus.require(pid)?, &answers) {
                    neg.push(pid);
                }
            }
        }
        labels.positives.insert(ex.qid, pos);
        labels.negatives.insert(ex.qid, neg);
    }
    labels.report = CoverageReport::new(dataset.len(), labels.positives.len());
    Ok(labels)
}

fn pair_seed(seed: u64, qid: u64, pos_index: usize) -> u64 {
    let mut x = seed ^ qid.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = x.rotate_left(29) ^ (pos_index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x
}

/// For each (question, positive) pair, up to `n_neg_per_pos` negatives drawn
/// uniformly without replacement. Each pair has its own seeded stream, so the
/// output does not depend on iteration or thread order.
pub fn make_triples(
    labels: &Labels,
    n_neg_per_pos: usize,
    seed: u64,
) -> Result<Vec<TrainingTriple>> {
    if n_neg_per_pos == 0 {
        return Err(Error::InvalidParams(
            "negatives per positive must be at least 1".into(),
        ));
    }
    let mut triples = Vec::new();
    for (&qid, positives) in &labels.positives {
        let negatives = labels.negatives.get(&qid).map_or(&[][..], Vec::as_slice);
        if negatives.is_empty() {
            continue;
        }
        for (i, &pos_pid) in positives.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed, qid, i));
            let amount = n_neg_per_pos.min(negatives.len());
            for j in rand::seq::index::sample(&mut rng, negatives.len(), amount) {
                if negatives[j] != pos_pid {
                    triples.push(TrainingTriple {
                        qid,
                        pos_pid,
                        neg_pid: negatives[j],
                    });
                }
            }
        }
    }
    Ok(triples)
}

pub fn write_triples(path: impl AsRef<Path>, triples: &[TrainingTriple]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(triples.len() * 24);
    for t in triples {
        out.push_str(&format!("{}\t{}\t{}\n", t.qid, t.pos_pid, t.neg_pid));
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

pub fn read_triples(path: impl AsRef<Path>) -> Result<Vec<TrainingTriple>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut triples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ids: Vec<u64> = line
            .split('\t')
            .map(|f| f.trim().parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Malformed {
                path: path.to_owned(),
                line: i + 1,
                message: e.to_string(),
            })?;
        let [qid, pos_pid, neg_pid] = ids[..] else {
            return Err(Error::Malformed {
                path: path.to_owned(),
                line: i + 1,
                message: format!("expected 3 fields, found {}", ids.len()),
            });
        };
        triples.push(TrainingTriple {
            qid,
            pos_pid,
            neg_pid,
        });
    }
    Ok(triples)
}

pub fn write_coverage(path: impl AsRef<Path>, report: &CoverageReport) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::json("coverage", e))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}
