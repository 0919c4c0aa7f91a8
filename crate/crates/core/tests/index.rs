use std::collections::BTreeSet;

use lateqa::bm25::{Bm25Params, InvertedIndex};
use lateqa::corpus::{tokenize_passage, Corpus, Passage};
use lateqa::encoder::{encode_passage, encode_query, EncoderConfig, EncoderParams};
use lateqa::index::{CandidateParams, EmbeddingSource, KMeansParams, RankedList, TokenIndex};
use lateqa::scoring::{maxsim, MatrixRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn encoder() -> EncoderParams {
    EncoderParams::identity(EncoderConfig::default()).unwrap()
}

fn random_corpus(n: u64, vocab: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Corpus::new(
        (0..n)
            .map(|pid| {
                let len = rng.random_range(1..25);
                let body: Vec<String> = (0..len)
                    .map(|_| format!("w{}", rng.random_range(0..vocab)))
                    .collect();
                Passage::new(pid, "", body.join(" ")).unwrap()
            })
            .collect(),
    )
    .unwrap()
}

fn pids(list: &RankedList) -> Vec<u64> {
    list.pids().collect()
}

#[test]
fn offsets_follow_row_counts() {
    let corpus = Corpus::new(vec![
        Passage::new(1, "", "a").unwrap(),
        Passage::new(2, "t", "b c d").unwrap(),
        Passage::new(3, "", "e f").unwrap(),
    ])
    .unwrap();
    let index = TokenIndex::build(&corpus, EmbeddingSource::Encoder(&encoder())).unwrap();
    let lens: Vec<usize> = index.entries().iter().map(|e| e.len).collect();
    assert_eq!(lens, vec![3, 6, 4]);
    let mut next = 0;
    for e in index.entries() {
        assert_eq!(e.start, next);
        next += e.len;
    }
    assert_eq!(next, index.total_vectors());
}

#[test]
fn vector_count_matches_independent_token_count() {
    let corpus = random_corpus(10_000, 3000, 1);
    let p = encoder();
    let index = TokenIndex::build(&corpus, EmbeddingSource::Encoder(&p)).unwrap();
    let expected: usize = corpus
        .iter()
        .map(|x| tokenize_passage(x).len().min(p.config.max_passage_len))
        .sum();
    assert_eq!(index.total_vectors(), expected);
    for pid in [0u64, 4_321, 9_999] {
        let v = index.passage_vectors(pid).unwrap();
        for row in v.chunks_exact(index.dim()) {
            let n: f64 = row
                .iter()
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt();
            assert!((n - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn rebuild_and_reload_are_byte_identical() {
    let corpus = random_corpus(300, 200, 2);
    let p = encoder();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    TokenIndex::build(&corpus, EmbeddingSource::Encoder(&p))
        .unwrap()
        .save(&a)
        .unwrap();
    TokenIndex::build(&corpus, EmbeddingSource::Encoder(&p))
        .unwrap()
        .save(&b)
        .unwrap();
    for f in ["vectors.bin", "offsets.bin", "meta.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let loaded = TokenIndex::load(&a).unwrap();
    let built = TokenIndex::build(&corpus, EmbeddingSource::Encoder(&p)).unwrap();
    for qid in 0..20 {
        let q = encode_query(&format!("w{qid} w{} w{}", qid * 3, qid * 7), &p);
        assert_eq!(
            loaded.retrieve_exact(qid, &q, 50).unwrap(),
            built.retrieve_exact(qid, &q, 50).unwrap()
        );
    }
}

#[test]
fn more_shared_tokens_rank_higher() {
    let corpus = Corpus::new(vec![
        Passage::new(0, "", "red green blue other").unwrap(),
        Passage::new(1, "", "red words here only").unwrap(),
    ])
    .unwrap();
    let p = encoder();
    let index = TokenIndex::build(&corpus, EmbeddingSource::Encoder(&p)).unwrap();
    let q = encode_query("red green blue", &p);
    let list = index.retrieve_exact(0, &q, 2).unwrap();
    assert_eq!(pids(&list), vec![0, 1]);
    let brute: Vec<f64> = corpus
        .iter()
        .map(|x| {
            let d = encode_passage(x, &p).unwrap();
            maxsim(q.view(), d.view()).unwrap().value()
        })
        .collect();
    assert!(brute[0] > brute[1]);
    assert_eq!(list.hits()[0].score, brute[0]);
}

#[test]
fn full_depth_is_a_permutation_and_ties_prefer_lower_pid() {
    let mut passages: Vec<Passage> = random_corpus(50, 40, 3).passages().to_vec();
    passages.push(Passage::new(100, "", "same body twice").unwrap());
    passages.push(Passage::new(60, "", "same body twice").unwrap());
    let corpus = Corpus::new(passages).unwrap();
    let p = encoder();
    let index = TokenIndex::build(&corpus, EmbeddingSource::Encoder(&p)).unwrap();
    let q = encode_query("same body", &p);
    let list = index.retrieve_exact(1, &q, 10_000).unwrap();
    let got: BTreeSet<u64> = list.pids().collect();
    let all: BTreeSet<u64> = corpus.iter().map(|x| x.pid).collect();
    assert_eq!(list.len(), corpus.len());
    assert_eq!(got, all);
    let order = pids(&list);
    let at = order.iter().position(|&x| x == 60).unwrap();
    assert_eq!(order[at + 1], 100);
    for w in list.hits().windows(2) {
        assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].pid < w[1].pid));
    }
}

#[test]
fn planted_passage_wins_at_any_fanout() {
    let mut passages: Vec<Passage> = random_corpus(400, 300, 4).passages().to_vec();
    passages.push(Passage::new(1000, "", "zeta kappa omicron").unwrap());
    let corpus = Corpus::new(passages).unwrap();
    // no MASK padding, so every query row is a shared token
    let p = EncoderParams::identity(EncoderConfig {
        query_len: 5,
        ..EncoderConfig::default()
    })
    .unwrap();
    let index = TokenIndex::build(&corpus, EmbeddingSource::Encoder(&p)).unwrap();
    let q = encode_query("zeta kappa omicron", &p);
    let best = corpus
        .iter()
        .map(|x| {
            (
                maxsim(q.view(), encode_passage(x, &p).unwrap().view())
                    .unwrap()
                    .value(),
                x.pid,
            )
        })
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap();
    assert_eq!(best.1, 1000);
    for fanout in [1, 2, 8, 64] {
        let list = index
            .retrieve_candidates(0, &q, &CandidateParams { fanout, probe: 8 }, 10)
            .unwrap();
        assert_eq!(list.hits()[0].pid, 1000, "fanout {fanout}");
    }
}

#[test]
fn recall_grows_with_fanout() {
    let corpus = random_corpus(2000, 500, 5);
    let p = encoder();
    let mut index = TokenIndex::build(&corpus, EmbeddingSource::Encoder(&p)).unwrap();
    let queries: Vec<_> = (0..100)
        .map(|i| encode_query(&format!("w{} w{} w{}", i, i * 5 % 500, i * 11 % 500), &p))
        .collect();
    let exact: Vec<BTreeSet<u64>> = queries
        .iter()
        .map(|q| index.retrieve_exact(0, q, 20).unwrap().pids().collect())
        .collect();
    let recall = |index: &TokenIndex, fanout: usize| -> f64 {
        let found: usize = queries
            .iter()
            .zip(&exact)
            .map(|(q, e)| {
                let got: BTreeSet<u64> = index
                    .retrieve_candidates(0, q, &CandidateParams { fanout, probe: 4 }, 20)
                    .unwrap()
                    .pids()
                    .collect();
                got.intersection(e).count()
            })
            .sum();
        found as f64 / (20 * queries.len()) as f64
    };
    let fanouts = [1, 4, 16, 64, 256, 100_000];
    let flat: Vec<f64> = fanouts.iter().map(|&f| recall(&index, f)).collect();
    assert!(flat.windows(2).all(|w| w[0] <= w[1]), "{flat:?}");
    assert_eq!(*flat.last().unwrap(), 1.0);

    index.cluster(&KMeansParams {
        clusters: 32,
        ..KMeansParams::default()
    });
    let clustered: Vec<f64> = fanouts.iter().map(|&f| recall(&index, f)).collect();
    assert!(clustered.windows(2).all(|w| w[0] <= w[1]), "{clustered:?}");
}

#[test]
fn rerank_over_bm25_candidates_matches_pairwise_maxsim() {
    let corpus = random_corpus(500, 100, 6);
    let p = encoder();
    let index = TokenIndex::build(&corpus, EmbeddingSource::Encoder(&p)).unwrap();
    let bm25 = InvertedIndex::build(&corpus, Bm25Params::default()).unwrap();
    for qid in 0..10u64 {
        let text = format!("w{} w{} w{}", qid, qid + 10, qid + 20);
        let candidates: Vec<u64> = bm25.retrieve(qid, &text, 100).unwrap().pids().collect();
        let q = encode_query(&text, &p);
        let list = index.rerank(qid, &q, &candidates, 100).unwrap();
        assert_eq!(list.len(), candidates.len());
        for hit in list.hits() {
            let d = encode_passage(corpus.get(hit.pid).unwrap(), &p).unwrap();
            let expected = maxsim(q.view(), d.view()).unwrap().value();
            assert!((hit.score - expected).abs() < 1e-9);
        }
        let single = index.rerank(qid, &q, &candidates[..1], 5).unwrap();
        assert_eq!(pids(&single), vec![candidates[0]]);
    }
    assert!(index
        .rerank(0, &encode_query("x", &p), &[99_999], 1)
        .is_err());
}

#[test]
fn adding_a_passage_keeps_relative_order() {
    let corpus = random_corpus(200, 80, 7);
    let p = encoder();
    let index = TokenIndex::build(&corpus, EmbeddingSource::Encoder(&p)).unwrap();
    let mut more = corpus.passages().to_vec();
    more.push(Passage::new(5000, "", "w1 w2 w3 w4 w5").unwrap());
    let bigger =
        TokenIndex::build(&Corpus::new(more).unwrap(), EmbeddingSource::Encoder(&p)).unwrap();
    let q = encode_query("w1 w3 w70", &p);
    let before = pids(&index.retrieve_exact(0, &q, 1000).unwrap());
    let after: Vec<u64> = bigger
        .retrieve_exact(0, &q, 1000)
        .unwrap()
        .pids()
        .filter(|&x| x != 5000)
        .collect();
    assert_eq!(before, after);
}

#[test]
fn clustered_index_survives_persistence() {
    let corpus = random_corpus(300, 100, 8);
    let p = encoder();
    let mut index = TokenIndex::build(&corpus, EmbeddingSource::Encoder(&p)).unwrap();
    index.cluster(&KMeansParams {
        clusters: 8,
        ..KMeansParams::default()
    });
    let dir = tempfile::tempdir().unwrap();
    index.save(dir.path()).unwrap();
    let back = TokenIndex::load(dir.path()).unwrap();
    assert!(back.is_clustered());
    let params = CandidateParams {
        fanout: 16,
        probe: 2,
    };
    for i in 0..10u64 {
        let q = encode_query(&format!("w{i} w{}", i + 40), &p);
        assert_eq!(
            back.retrieve_candidates(i, &q, &params, 20).unwrap(),
            index.retrieve_candidates(i, &q, &params, 20).unwrap()
        );
    }
    let view = MatrixRef::new(back.passage_vectors(0).unwrap(), back.dim()).unwrap();
    assert!(view.rows() > 0);
}
