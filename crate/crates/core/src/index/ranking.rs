use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub pid: u64,
    pub score: f64,
}

/// Score descending, then pid ascending.
pub fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.pid.cmp(&b.pid))
}

/// Top-k passages for one question, strictly ordered by [`hit_order`].
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub qid: u64,
    hits: Vec<Hit>,
}

/// Ranked lists keyed by qid.
pub type Rankings = BTreeMap<u64, RankedList>;

impl RankedList {
    /// Sorts `hits` and keeps the best `k`. Pids must be unique.
    pub fn from_hits(qid: u64, mut hits: Vec<Hit>, k: usize) -> Self {
        if k < hits.len() {
            hits.select_nth_unstable_by(k, hit_order);
            hits.truncate(k);
        }
        hits.sort_unstable_by(hit_order);
        debug_assert!(hits.iter().map(|h| h.pid).collect::<HashSet<_>>().len() == hits.len());
        Self { qid, hits }
    }

    pub fn empty(qid: u64) -> Self {
        Self {
            qid,
            hits: Vec::new(),
        }
    }

    pub fn hits(&self) -> &[Hit] {
        &self.hits
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn top(&self, k: usize) -> &[Hit] {
        &self.hits[..k.min(self.hits.len())]
    }

    pub fn pids(&self) -> impl Iterator<Item = u64> + '_ {
        self.hits.iter().map(|h| h.pid)
    }
}

/// Writes `qid \t pid \t rank \t score` lines, ranks starting at 1.
pub fn write_rankings(path: impl AsRef<Path>, rankings: &Rankings) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for list in rankings.values() {
        for (rank, hit) in list.hits.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\n",
                list.qid,
                hit.pid,
                rank + 1,
                hit.score
            ));
        }
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

pub fn read_rankings(path: impl AsRef<Path>) -> Result<Rankings> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, message: String| Error::Malformed {
        path: path.to_owned(),
        line,
        message,
    };
    let mut rows: BTreeMap<u64, Vec<(u64, Hit, usize)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [qid, pid, rank, score] = fields[..] else {
            return Err(malformed(
                i + 1,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        };
        let num = |s: &str, what: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| malformed(i + 1, format!("bad {what} {s:?}: {e}")))
        };
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|e| malformed(i + 1, format!("bad score {score:?}: {e}")))?;
        let (qid, pid, rank) = (num(qid, "qid")?, num(pid, "pid")?, num(rank, "rank")?);
        rows.entry(qid)
            .or_default()
            .push((rank, Hit { pid, score }, i + 1));
    }
    let mut rankings = Rankings::new();
    for (qid, mut hits) in rows {
        hits.sort_by_key(|(rank, _, _)| *rank);
        let mut seen = HashSet::new();
        for (_, hit, line) in &hits {
            if !seen.insert(hit.pid) {
                return Err(malformed(
                    *line,
                    format!("pid {} repeated for qid {qid}", hit.pid),
                ));
            }
        }
        let hits = hits.into_iter().map(|(_, h, _)| h).collect();
        rankings.insert(qid, RankedList { qid, hits });
    }
    Ok(rankings)
}
