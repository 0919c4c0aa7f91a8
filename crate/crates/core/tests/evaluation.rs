use std::collections::BTreeSet;

use lateqa::corpus::{Corpus, Dataset, Passage, QaExample};
use lateqa::evaluation::{compare_rankings, exact_match, precision_at_k, precision_curve};
use lateqa::index::{read_rankings, write_rankings, Hit, RankedList, Rankings};
use lateqa::reader::{read_predictions, write_predictions, Prediction};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PASSAGES: u64 = 400;

/// Passage `p` mentions answer `gold{p % 100}`; question `q` asks for `gold{q}`.
fn task() -> (Corpus, Dataset) {
    let corpus = Corpus::new(
        (0..PASSAGES)
            .map(|p| Passage::new(p, "", format!("text gold{:03}x more", p % 100)).unwrap())
            .collect(),
    )
    .unwrap();
    let dataset = Dataset::new(
        (0..100)
            .map(|q| QaExample {
                qid: q,
                question: format!("question {q}"),
                answers: vec![format!("gold{q:03}x")],
                gold_pids: vec![],
            })
            .collect(),
    )
    .unwrap();
    (corpus, dataset)
}

/// Each question gets a 120-deep ranking of non-bearing passages, with a
/// bearing one planted at a chosen 1-based rank or left out entirely.
fn planted(seed: u64) -> (Rankings, Vec<Option<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rankings = Rankings::new();
    let mut planted = Vec::new();
    for q in 0..100u64 {
        let mut pids: Vec<u64> = (0..PASSAGES).filter(|p| p % 100 != q).collect();
        pids.shuffle(&mut rng);
        pids.truncate(120);
        let rank = if rng.random_bool(0.2) {
            None
        } else {
            Some(rng.random_range(1..=120usize))
        };
        if let Some(r) = rank {
            pids[r - 1] = q + 100 * rng.random_range(0..4);
        }
        let hits = pids
            .iter()
            .enumerate()
            .map(|(i, &pid)| Hit {
                pid,
                score: 1000.0 - i as f64,
            })
            .collect();
        rankings.insert(q, RankedList::from_hits(q, hits, 120));
        planted.push(rank);
    }
    (rankings, planted)
}

#[test]
fn precision_matches_planted_ranks() {
    let (corpus, dataset) = task();
    for seed in 0..5 {
        let (rankings, ranks) = planted(seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ranking.tsv");
        write_rankings(&path, &rankings).unwrap();
        let from_file = read_rankings(&path).unwrap();
        for k in [1usize, 5, 20, 100] {
            let expected =
                ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / 100.0;
            assert_eq!(
                precision_at_k(&from_file, &dataset, &corpus, k, true).unwrap(),
                expected
            );
        }
        let ks: Vec<usize> = (1..=130).collect();
        let curve = precision_curve(&from_file, &dataset, &corpus, &ks, true).unwrap();
        let values: Vec<f64> = curve.values().copied().collect();
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(curve[&120], curve[&130]);
    }
}

#[test]
fn hand_planted_prediction_file_scores_37_percent() {
    let (_, dataset) = task();
    let predictions: Vec<Prediction> = (0..100u64)
        .map(|q| {
            let answer = match q % 100 {
                q if q < 37 && q % 2 == 0 => format!("  The GOLD{q:03}X. "),
                q if q < 37 => format!("gold{q:03}x"),
                q if q < 60 => format!("gold{:03}x", (q + 1) % 100),
                _ => String::new(),
            };
            Prediction {
                qid: q,
                answer,
                pid: 0,
                score: 0.0,
            }
        })
        .filter(|p| p.qid < 90)
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("predictions.jsonl");
    write_predictions(&path, &predictions).unwrap();
    let back = read_predictions(&path).unwrap();
    assert_eq!(back, predictions);
    assert_eq!(exact_match(&back, &dataset).unwrap(), 0.37);
}

#[test]
fn comparison_deltas_match_recomputation() {
    let (corpus, dataset) = task();
    let (a, ranks_a) = planted(10);
    let (b, ranks_b) = planted(11);
    let ks = [1usize, 5, 20, 100];
    let report = compare_rankings(&a, &b, &dataset, &corpus, &ks, true).unwrap();
    assert_eq!(report.shared_questions, 100);
    for (d, &k) in report.depths.iter().zip(&ks) {
        let pa = ranks_a.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / 100.0;
        let pb = ranks_b.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / 100.0;
        assert_eq!((d.p_a, d.p_b), (pa, pb));
        assert!((d.delta - (pb - pa)).abs() < 1e-12);
        let jaccard: f64 = (0..100u64)
            .map(|q| {
                let sa: BTreeSet<u64> = a[&q].pids().take(k).collect();
                let sb: BTreeSet<u64> = b[&q].pids().take(k).collect();
                sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64
            })
            .sum::<f64>()
            / 100.0;
        assert!((d.mean_jaccard - jaccard).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_ignore_dataset_order(seed in 0u64..10_000) {
        let (corpus, dataset) = task();
        let (rankings, _) = planted(seed);
        let mut examples = dataset.examples().to_vec();
        examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = Dataset::new(examples).unwrap();
        for k in [1usize, 7, 50] {
            prop_assert_eq!(
                precision_at_k(&rankings, &dataset, &corpus, k, true).unwrap(),
                precision_at_k(&rankings, &shuffled, &corpus, k, true).unwrap()
            );
        }
        let preds: Vec<Prediction> = (0..100u64)
            .filter(|q| (q + seed) % 3 != 0)
            .map(|q| Prediction { qid: q, answer: format!("gold{:03}x", (q * seed) % 100), pid: 0, score: 0.0 })
            .collect();
        prop_assert_eq!(exact_match(&preds, &dataset).unwrap(), exact_match(&preds, &shuffled).unwrap());
    }
}
