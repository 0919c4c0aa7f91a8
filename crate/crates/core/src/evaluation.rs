//! Retrieval and reading metrics: P@k (success at depth k), Exact Match and
//! ranking-file comparison.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_answer, AnswerMatcher, Corpus, Dataset};
use crate::error::{Error, Result};
use crate::index::Rankings;
use crate::reader::Prediction;

/// Rank (1-based) of the first answer-bearing passage for every question,
/// looking no deeper than `depth`. Questions absent from `rankings` map to
/// `None` and are logged.
pub fn first_hit_ranks(
    rankings: &Rankings,
    dataset: &Dataset,
    corpus: &Corpus,
    depth: usize,
    include_title: bool,
) -> Result<BTreeMap<u64, Option<usize>>> {
    let matcher = AnswerMatcher::new(include_title);
    let missing = dataset
        .iter()
        .filter(|ex| !rankings.contains_key(&ex.qid))
        .count();
    if missing > 0 {
        tracing::warn!(missing, "questions without a ranking count as misses");
    }
    let ranks: Vec<Result<(u64, Option<usize>)>> = dataset
        .examples()
        .par_iter()
        .map(|ex| {
            let Some(list) = rankings.get(&ex.qid) else {
                return Ok((ex.qid, None));
            };
            let answers = AnswerMatcher::prepare(&ex.answers);
            for (i, hit) in list.top(depth).iter().enumerate() {
                if matcher.matches_prepared(corpus.require(hit.pid)?, &answers) {
                    return Ok((ex.qid, Some(i + 1)));
                }
            }
            Ok((ex.qid, None))
        })
        .collect();
    ranks.into_iter().collect()
}

/// Fraction of questions with an answer-bearing passage in their top `k`.
pub fn precision_at_k(
    rankings: &Rankings,
    dataset: &Dataset,
    corpus: &Corpus,
    k: usize,
    include_title: bool,
) -> Result<f64> {
    Ok(precision_curve(rankings, dataset, corpus, &[k], include_title)?[&k])
}

/// P@k for each `k` in `ks`, computed from a single scan per question.
pub fn precision_curve(
    rankings: &Rankings,
    dataset: &Dataset,
    corpus: &Corpus,
    ks: &[usize],
    include_title: bool,
) -> Result<BTreeMap<usize, f64>> {
    if ks.contains(&0) {
        return Err(Error::InvalidParams("P@k needs k of at least 1".into()));
    }
    let depth = ks.iter().copied().max().unwrap_or(0);
    let ranks = first_hit_ranks(rankings, dataset, corpus, depth, include_title)?;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.values().filter(|r| r.is_some_and(|r| r <= k)).count();
            (k, fraction(hits, ranks.len()))
        })
        .collect())
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Answer normalization plus removal of the articles "a", "an" and "the".
pub fn normalize_for_em(text: &str) -> String {
    normalize_answer(text)
        .split(' ')
        .filter(|w| !w.is_empty() && !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whether `prediction` equals any gold answer after normalization. An empty
/// normalized prediction never matches.
pub fn is_exact_match(prediction: &str, answers: &[String]) -> bool {
    let p = normalize_for_em(prediction);
    !p.is_empty() && answers.iter().any(|a| normalize_for_em(a) == p)
}

/// Mean Exact Match over the dataset; questions without a prediction miss.
pub fn exact_match(predictions: &[Prediction], dataset: &Dataset) -> Result<f64> {
    let mut by_qid: HashMap<u64, &str> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_qid.insert(p.qid, &p.answer).is_some() {
            return Err(Error::DuplicateId {
                kind: "prediction",
                id: p.qid,
            });
        }
    }
    let hits = dataset
        .iter()
        .filter(|ex| {
            by_qid
                .get(&ex.qid)
                .is_some_and(|p| is_exact_match(p, &ex.answers))
        })
        .count();
    Ok(fraction(hits, dataset.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthComparison {
    pub k: usize,
    pub p_a: f64,
    pub p_b: f64,
    pub delta: f64,
    /// Mean over shared questions of |A ∩ B| / |A ∪ B| of the top-k pid sets.
    pub mean_jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub depths: Vec<DepthComparison>,
    pub shared_questions: usize,
    pub only_in_a: Vec<u64>,
    pub only_in_b: Vec<u64>,
}

fn jaccard(a: &BTreeSet<u64>, b: &BTreeSet<u64>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Per-depth P@k of both ranking sets, their difference `b - a`, and top-k
/// overlap. P@k is over the dataset; overlap only over qids in both files.
pub fn compare_rankings(
    a: &Rankings,
    b: &Rankings,
    dataset: &Dataset,
    corpus: &Corpus,
    ks: &[usize],
    include_title: bool,
) -> Result<Comparison> {
    let curve_a = precision_curve(a, dataset, corpus, ks, include_title)?;
    let curve_b = precision_curve(b, dataset, corpus, ks, include_title)?;
    let shared: Vec<u64> = a.keys().filter(|q| b.contains_key(q)).copied().collect();
    let only_in_a: Vec<u64> = a.keys().filter(|q| !b.contains_key(q)).copied().collect();
    let only_in_b: Vec<u64> = b.keys().filter(|q| !a.contains_key(q)).copied().collect();
    let depths = ks
        .iter()
        .map(|&k| {
            let total: f64 = shared
                .iter()
                .map(|q| {
                    let sa: BTreeSet<u64> = a[q].top(k).iter().map(|h| h.pid).collect();
                    let sb: BTreeSet<u64> = b[q].top(k).iter().map(|h| h.pid).collect();
                    jaccard(&sa, &sb)
                })
                .sum();
            let mean_jaccard = if shared.is_empty() {
                0.0
            } else {
                total / shared.len() as f64
            };
            DepthComparison {
                k,
                p_a: curve_a[&k],
                p_b: curve_b[&k],
                delta: curve_b[&k] - curve_a[&k],
                mean_jaccard,
            }
        })
        .collect();
    Ok(Comparison {
        depths,
        shared_questions: shared.len(),
        only_in_a,
        only_in_b,
    })
}
