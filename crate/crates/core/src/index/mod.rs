//! Persistent token-level vector index.
//!
//! All passage token vectors live in one contiguous `f32` array; an offset
//! table maps each passage to its row range. Retrieval comes in three forms:
//! exhaustive exact scoring, two-stage candidate generation (per-token
//! nearest neighbours, optionally restricted to probed k-means clusters)
//! followed by exact re-scoring, and re-ranking of a supplied candidate list.
//!
//! On disk an index is a directory holding `vectors.bin` (embedding-file
//! format, one entry per passage), `offsets.bin` (`u64 pid, u64 start,
//! u32 len` records, starts and lengths in rows), `meta.json`, and
//! `clusters.bin` when clustered.

pub mod kmeans;
mod ranking;

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoder::embfile::{self, EntryRef};
use crate::encoder::{encode_passage, EmbeddingMatrix, EmbeddingStore, EncoderParams};
use crate::error::{Error, Result};
use crate::scoring::{dot, QueryKernel};

pub use kmeans::KMeansParams;
pub use ranking::{hit_order, read_rankings, write_rankings, Hit, RankedList, Rankings};

/// Where passage token matrices come from when building an index.
#[derive(Debug, Clone, Copy)]
pub enum EmbeddingSource<'a> {
    Encoder(&'a EncoderParams),
    Imported(&'a EmbeddingStore),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexEntry {
    pub pid: u64,
    /// First row in the flat vector array.
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub dim: usize,
    pub count: usize,
    pub vectors: usize,
    pub seed: u64,
    pub encoder_config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clusters: Option<usize>,
}

#[derive(Debug, Clone)]
struct Clusters {
    centroids: Vec<f32>,
    members: Vec<Vec<u32>>,
}

impl Clusters {
    fn from_centroids(centroids: Vec<f32>, vectors: &[f32], dim: usize) -> Self {
        let mut members = vec![Vec::new(); centroids.len() / dim];
        for (row, (c, _)) in kmeans::assign(vectors, dim, &centroids)
            .into_iter()
            .enumerate()
        {
            members[c as usize].push(row as u32);
        }
        Self { centroids, members }
    }
}

/// Settings for two-stage candidate generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateParams {
    /// Nearest token vectors kept per query row.
    pub fanout: usize,
    /// Clusters probed per query row; ignored when the index is unclustered.
    pub probe: usize,
}

impl Default for CandidateParams {
    fn default() -> Self {
        Self {
            fanout: 64,
            probe: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TokenIndex {
    meta: IndexMeta,
    vectors: Vec<f32>,
    entries: Vec<IndexEntry>,
    slots: HashMap<u64, usize>,
    /// Entry slot owning each vector row.
    owners: Vec<u32>,
    clusters: Option<Clusters>,
}

const VECTORS_FILE: &str = "vectors.bin";
const OFFSETS_FILE: &str = "offsets.bin";
const META_FILE: &str = "meta.json";
const CLUSTERS_FILE: &str = "clusters.bin";

fn check_depth(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParams(
            "retrieval depth k must be at least 1".into(),
        ));
    }
    Ok(())
}

/// Per-row bounded selection of the best token vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    score: f64,
    row: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // higher score is better; on ties the lower row is better
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.row.cmp(&self.row))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct TopN {
    cap: usize,
    heap: BinaryHeap<Reverse<Candidate>>,
}

impl TopN {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            heap: BinaryHeap::with_capacity(cap.min(4096) + 1),
        }
    }

    #[inline]
    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.cap {
            self.heap.push(Reverse(c));
        } else if let Some(Reverse(worst)) = self.heap.peek() {
            if c > *worst {
                self.heap.pop();
                self.heap.push(Reverse(c));
            }
        }
    }
}

impl TokenIndex {
    pub fn build(corpus: &Corpus, source: EmbeddingSource<'_>) -> Result<Self> {
        Self::build_over(corpus, corpus.iter().map(|p| p.pid).collect(), source)
    }

    /// Index restricted to `pids` (deduplicated, kept in ascending order).
    pub fn build_subset(
        corpus: &Corpus,
        pids: &[u64],
        source: EmbeddingSource<'_>,
    ) -> Result<Self> {
        let mut pids = pids.to_vec();
        pids.sort_unstable();
        pids.dedup();
        Self::build_over(corpus, pids, source)
    }

    fn build_over(corpus: &Corpus, pids: Vec<u64>, source: EmbeddingSource<'_>) -> Result<Self> {
        if pids.is_empty() {
            return Err(Error::InvalidParams("cannot index an empty corpus".into()));
        }
        let (dim, seed, hash) = match source {
            EmbeddingSource::Encoder(p) => (p.out_dim(), p.config.seed, p.config_hash()),
            EmbeddingSource::Imported(s) => (s.dim(), 0, "imported".to_owned()),
        };
        let matrices: Vec<Result<(u64, EmbeddingMatrix)>> = pids
            .par_iter()
            .map(|&pid| {
                let passage = corpus.require(pid)?;
                let m = match source {
                    EmbeddingSource::Encoder(p) => encode_passage(passage, p)?,
                    EmbeddingSource::Imported(s) => {
                        s.get(pid).cloned().ok_or(Error::MissingEmbedding(pid))?
                    }
                };
                Ok((pid, m))
            })
            .collect();

        let mut vectors = Vec::new();
        let mut entries = Vec::with_capacity(pids.len());
        for item in matrices {
            let (pid, m) = item?;
            if m.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: m.dim(),
                });
            }
            if m.rows() == 0 {
                return Err(Error::EmptyPassage(pid));
            }
            entries.push(IndexEntry {
                pid,
                start: vectors.len() / dim,
                len: m.rows(),
            });
            vectors.extend_from_slice(m.data());
        }
        let meta = IndexMeta {
            dim,
            count: entries.len(),
            vectors: vectors.len() / dim,
            seed,
            encoder_config_hash: hash,
            clusters: None,
        };
        Ok(Self::assemble(meta, vectors, entries, None))
    }

    fn assemble(
        meta: IndexMeta,
        vectors: Vec<f32>,
        entries: Vec<IndexEntry>,
        clusters: Option<Clusters>,
    ) -> Self {
        let slots = entries
            .iter()
            .enumerate()
            .map(|(s, e)| (e.pid, s))
            .collect();
        let mut owners = vec![0u32; vectors.len() / meta.dim];
        for (slot, e) in entries.iter().enumerate() {
            owners[e.start..e.start + e.len].fill(slot as u32);
        }
        Self {
            meta,
            vectors,
            entries,
            slots,
            owners,
            clusters,
        }
    }

    /// Clusters all token vectors with seeded spherical k-means.
    pub fn cluster(&mut self, params: &KMeansParams) {
        let centroids = kmeans::spherical_kmeans(&self.vectors, self.meta.dim, params);
        let clusters = Clusters::from_centroids(centroids, &self.vectors, self.meta.dim);
        self.meta.clusters = Some(clusters.members.len());
        self.clusters = Some(clusters);
    }

    pub fn meta(&self) -> &IndexMeta {
        &self.meta
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_vectors(&self) -> usize {
        self.owners.len()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn entry(&self, pid: u64) -> Option<&IndexEntry> {
        self.slots.get(&pid).map(|&s| &self.entries[s])
    }

    pub fn is_clustered(&self) -> bool {
        self.clusters.is_some()
    }

    /// Row-major token vectors of one passage.
    pub fn passage_vectors(&self, pid: u64) -> Option<&[f32]> {
        self.entry(pid).map(|e| self.slot_vectors(e))
    }

    fn slot_vectors(&self, e: &IndexEntry) -> &[f32] {
        let dim = self.meta.dim;
        &self.vectors[e.start * dim..(e.start + e.len) * dim]
    }

    fn kernel(&self, query: &EmbeddingMatrix) -> Result<QueryKernel> {
        if query.dim() != self.meta.dim {
            return Err(Error::DimensionMismatch {
                expected: self.meta.dim,
                found: query.dim(),
            });
        }
        Ok(QueryKernel::new(query.view()))
    }

    fn score_slots(&self, qid: u64, kernel: &QueryKernel, slots: &[usize], k: usize) -> RankedList {
        let hits = slots
            .iter()
            .map(|&s| {
                let e = &self.entries[s];
                Hit {
                    pid: e.pid,
                    score: kernel.score(self.slot_vectors(e)),
                }
            })
            .collect();
        RankedList::from_hits(qid, hits, k)
    }

    /// Scores every passage; `k` beyond the corpus size returns everything.
    pub fn retrieve_exact(
        &self,
        qid: u64,
        query: &EmbeddingMatrix,
        k: usize,
    ) -> Result<RankedList> {
        check_depth(k)?;
        let kernel = self.kernel(query)?;
        let slots: Vec<usize> = (0..self.entries.len()).collect();
        Ok(self.score_slots(qid, &kernel, &slots, k))
    }

    /// Exact scores over exactly the given candidates.
    pub fn rerank(
        &self,
        qid: u64,
        query: &EmbeddingMatrix,
        candidates: &[u64],
        k: usize,
    ) -> Result<RankedList> {
        check_depth(k)?;
        if candidates.is_empty() {
            return Err(Error::InvalidParams(
                "rerank needs at least one candidate".into(),
            ));
        }
        let kernel = self.kernel(query)?;
        let mut slots = candidates
            .iter()
            .map(|pid| self.slots.get(pid).copied().ok_or(Error::UnknownPid(*pid)))
            .collect::<Result<Vec<_>>>()?;
        slots.sort_unstable();
        slots.dedup();
        Ok(self.score_slots(qid, &kernel, &slots, k))
    }

    /// Pids owning at least one of the `fanout` nearest token vectors of some
    /// query row, in ascending pid order.
    pub fn candidate_pids(
        &self,
        query: &EmbeddingMatrix,
        params: &CandidateParams,
    ) -> Result<Vec<u64>> {
        if params.fanout == 0 {
            return Err(Error::InvalidParams(
                "candidate fan-out must be at least 1".into(),
            ));
        }
        let kernel = self.kernel(query)?;
        let slots = match &self.clusters {
            None => self.scan_all(&kernel, params.fanout),
            Some(c) => self.scan_probed(query, c, params),
        };
        let mut pids: Vec<u64> = slots.into_iter().map(|s| self.entries[s].pid).collect();
        pids.sort_unstable();
        Ok(pids)
    }

    fn scan_all(&self, kernel: &QueryKernel, fanout: usize) -> Vec<usize> {
        if fanout >= self.owners.len() {
            return (0..self.entries.len()).collect();
        }
        let dim = self.meta.dim;
        let mut heaps: Vec<TopN> = (0..kernel.rows()).map(|_| TopN::new(fanout)).collect();
        let mut dots = vec![0.0; kernel.rows()];
        for (row, v) in self.vectors.chunks_exact(dim).enumerate() {
            kernel.row_dots(v, &mut dots);
            for (heap, &score) in heaps.iter_mut().zip(&dots) {
                heap.offer(Candidate {
                    score,
                    row: row as u32,
                });
            }
        }
        self.owning_slots(heaps)
    }

    fn scan_probed(
        &self,
        query: &EmbeddingMatrix,
        clusters: &Clusters,
        params: &CandidateParams,
    ) -> Vec<usize> {
        let dim = self.meta.dim;
        let mut heaps = Vec::with_capacity(query.rows());
        for i in 0..query.rows() {
            let q = query.row(i);
            let mut probed = TopN::new(params.probe.max(1));
            for (c, centroid) in clusters.centroids.chunks_exact(dim).enumerate() {
                probed.offer(Candidate {
                    score: dot(q, centroid),
                    row: c as u32,
                });
            }
            let mut heap = TopN::new(params.fanout);
            for Reverse(c) in probed.heap {
                for &row in &clusters.members[c.row as usize] {
                    let v = &self.vectors[row as usize * dim..(row as usize + 1) * dim];
                    heap.offer(Candidate {
                        score: dot(q, v),
                        row,
                    });
                }
            }
            heaps.push(heap);
        }
        self.owning_slots(heaps)
    }

    fn owning_slots(&self, heaps: Vec<TopN>) -> Vec<usize> {
        let mut slots: Vec<usize> = heaps
            .into_iter()
            .flat_map(|h| {
                h.heap
                    .into_iter()
                    .map(|Reverse(c)| self.owners[c.row as usize] as usize)
            })
            .collect();
        slots.sort_unstable();
        slots.dedup();
        slots
    }

    /// Candidate generation followed by exact re-scoring of the candidates.
    pub fn retrieve_candidates(
        &self,
        qid: u64,
        query: &EmbeddingMatrix,
        params: &CandidateParams,
        k: usize,
    ) -> Result<RankedList> {
        check_depth(k)?;
        let pids = self.candidate_pids(query, params)?;
        let kernel = self.kernel(query)?;
        let slots: Vec<usize> = pids.iter().map(|p| self.slots[p]).collect();
        Ok(self.score_slots(qid, &kernel, &slots, k))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        embfile::write_entries(
            dir.join(VECTORS_FILE),
            self.meta.dim,
            self.entries.iter().map(|e| EntryRef {
                id: e.pid,
                data: self.slot_vectors(e),
            }),
        )?;

        let mut offsets = Vec::with_capacity(self.entries.len() * 20);
        for e in &self.entries {
            offsets.extend_from_slice(&e.pid.to_le_bytes());
            offsets.extend_from_slice(&(e.start as u64).to_le_bytes());
            offsets.extend_from_slice(&(e.len as u32).to_le_bytes());
        }
        let path = dir.join(OFFSETS_FILE);
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(&offsets))
            .map_err(|e| Error::io(&path, e))?;

        if let Some(c) = &self.clusters {
            embfile::write_entries(
                dir.join(CLUSTERS_FILE),
                self.meta.dim,
                [EntryRef {
                    id: 0,
                    data: &c.centroids,
                }]
                .into_iter(),
            )?;
        }

        let json =
            serde_json::to_string_pretty(&self.meta).map_err(|e| Error::json("index meta", e))?;
        let path = dir.join(META_FILE);
        fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: IndexMeta = serde_json::from_str(&text)
            .map_err(|e| Error::json(meta_path.display().to_string(), e))?;

        let raw = embfile::read_entries(dir.join(VECTORS_FILE))?;
        if raw.dim != meta.dim {
            return Err(Error::DimensionMismatch {
                expected: meta.dim,
                found: raw.dim,
            });
        }

        let offsets_path = dir.join(OFFSETS_FILE);
        let bytes = fs::read(&offsets_path).map_err(|e| Error::io(&offsets_path, e))?;
        if bytes.len() % 20 != 0 || bytes.len() / 20 != raw.entries.len() {
            return Err(Error::Truncated {
                path: offsets_path,
                detail: format!(
                    "{} bytes do not hold {} offset records",
                    bytes.len(),
                    raw.entries.len()
                ),
            });
        }
        let mut vectors = Vec::new();
        let mut entries = Vec::with_capacity(raw.entries.len());
        for (record, (id, data)) in bytes.chunks_exact(20).zip(raw.entries) {
            let pid = u64::from_le_bytes(record[0..8].try_into().unwrap());
            let start = u64::from_le_bytes(record[8..16].try_into().unwrap()) as usize;
            let len = u32::from_le_bytes(record[16..20].try_into().unwrap()) as usize;
            let rows = data.len() / meta.dim;
            if pid != id || start != vectors.len() / meta.dim || len != rows || len == 0 {
                return Err(Error::Malformed {
                    path: offsets_path,
                    line: entries.len() + 1,
                    message: format!("offset record for pid {pid} does not partition the vectors"),
                });
            }
            entries.push(IndexEntry { pid, start, len });
            vectors.extend(data);
        }
        if entries.len() != meta.count || vectors.len() / meta.dim.max(1) != meta.vectors {
            return Err(Error::InvalidField {
                what: meta_path.display().to_string(),
                reason: "counts disagree with the vector file".into(),
            });
        }

        let clusters_path = dir.join(CLUSTERS_FILE);
        let clusters = if clusters_path.exists() {
            let raw = embfile::read_entries(&clusters_path)?;
            let centroids = raw
                .entries
                .into_iter()
                .next()
                .map(|(_, d)| d)
                .unwrap_or_default();
            Some(Clusters::from_centroids(centroids, &vectors, meta.dim))
        } else {
            None
        };
        Ok(Self::assemble(meta, vectors, entries, clusters))
    }
}

/// How a batch of queries is answered against an index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Exact,
    Candidates(CandidateParams),
}

/// Runs `mode` for every `(qid, query)` in parallel; output keyed by qid.
pub fn retrieve_all(
    index: &TokenIndex,
    queries: &[(u64, EmbeddingMatrix)],
    mode: SearchMode,
    k: usize,
) -> Result<Rankings> {
    let lists: Vec<Result<RankedList>> = queries
        .par_iter()
        .map(|(qid, q)| match mode {
            SearchMode::Exact => index.retrieve_exact(*qid, q, k),
            SearchMode::Candidates(p) => index.retrieve_candidates(*qid, q, &p, k),
        })
        .collect();
    lists.into_iter().map(|l| l.map(|l| (l.qid, l))).collect()
}

/// Re-ranks each query's candidate list from `candidates` (missing qids are
/// skipped).
pub fn rerank_all(
    index: &TokenIndex,
    queries: &[(u64, EmbeddingMatrix)],
    candidates: &Rankings,
    k: usize,
) -> Result<Rankings> {
    let lists: Vec<Option<Result<RankedList>>> = queries
        .par_iter()
        .map(|(qid, q)| {
            let list = candidates.get(qid).filter(|l| !l.is_empty())?;
            let pids: Vec<u64> = list.pids().collect();
            Some(index.rerank(*qid, q, &pids, k))
        })
        .collect();
    lists
        .into_iter()
        .flatten()
        .map(|l| l.map(|l| (l.qid, l)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Passage;
    use crate::encoder::{encode_query, EncoderConfig};

    fn corpus(bodies: &[&str]) -> Corpus {
        Corpus::new(
            bodies
                .iter()
                .enumerate()
                .map(|(i, b)| Passage::new(i as u64 + 1, "", *b).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn params() -> EncoderParams {
        EncoderParams::identity(EncoderConfig {
            query_len: 8,
            ..EncoderConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn offsets_match_row_counts() {
        let c = corpus(&["alpha beta", "gamma", "delta epsilon zeta eta"]);
        let p = params();
        let index = TokenIndex::build(&c, EmbeddingSource::Encoder(&p)).unwrap();
        let lens: Vec<usize> = index.entries().iter().map(|e| e.len).collect();
        assert_eq!(lens, vec![4, 3, 6]);
        assert_eq!(index.total_vectors(), 13);
    }

    #[test]
    fn more_shared_tokens_rank_higher() {
        let c = corpus(&[
            "paris capital france river",
            "paris bakery croissant morning",
            "volcano island lava ocean",
        ]);
        let p = params();
        let index = TokenIndex::build(&c, EmbeddingSource::Encoder(&p)).unwrap();
        let q = encode_query("paris capital france", &p);
        let list = index.retrieve_exact(1, &q, 10).unwrap();
        assert_eq!(list.pids().collect::<Vec<_>>()[..2], [1, 2]);
    }

    #[test]
    fn identical_bodies_tie_by_pid() {
        let c = corpus(&["red apple", "something else entirely", "red apple"]);
        let p = params();
        let index = TokenIndex::build(&c, EmbeddingSource::Encoder(&p)).unwrap();
        let list = index
            .retrieve_exact(1, &encode_query("red apple", &p), 3)
            .unwrap();
        assert_eq!(list.pids().collect::<Vec<_>>(), vec![1, 3, 2]);
        assert_eq!(list.hits()[0].score, list.hits()[1].score);
    }

    #[test]
    fn errors() {
        let c = corpus(&["a b"]);
        let p = params();
        let index = TokenIndex::build(&c, EmbeddingSource::Encoder(&p)).unwrap();
        let q = encode_query("a", &p);
        assert!(index.retrieve_exact(1, &q, 0).is_err());
        assert!(matches!(
            index.rerank(1, &q, &[99], 1),
            Err(Error::UnknownPid(99))
        ));
        assert!(index.rerank(1, &q, &[], 1).is_err());
        let other = EncoderParams::identity(EncoderConfig {
            out_dim: 16,
            ..EncoderConfig::default()
        })
        .unwrap();
        assert!(matches!(
            index.retrieve_exact(1, &encode_query("a", &other), 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn single_candidate_rerank() {
        let c = corpus(&["a b", "c d"]);
        let p = params();
        let index = TokenIndex::build(&c, EmbeddingSource::Encoder(&p)).unwrap();
        let q = encode_query("c", &p);
        let list = index.rerank(7, &q, &[1], 5).unwrap();
        assert_eq!(list.len(), 1);
        let exact =
            crate::scoring::maxsim(q.view(), index_matrix(&index, 1, p.out_dim()).view()).unwrap();
        assert_eq!(list.hits()[0].score, exact.0);
    }

    fn index_matrix(index: &TokenIndex, pid: u64, dim: usize) -> EmbeddingMatrix {
        EmbeddingMatrix::from_parts(
            crate::encoder::MatrixKind::Passage,
            dim,
            index.passage_vectors(pid).unwrap().to_vec(),
        )
        .unwrap()
    }
}
