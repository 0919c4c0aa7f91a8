use lateqa::corpus::tokenize::MASK;
use lateqa::corpus::Passage;
use lateqa::encoder::embfile::{read_entries, write_entries, EntryRef};
use lateqa::encoder::{
    encode_passage, encode_query, import_embeddings, EncoderConfig, EncoderParams, MatrixKind,
};
use lateqa::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params() -> EncoderParams {
    EncoderParams::identity(EncoderConfig::default()).unwrap()
}

#[test]
fn eight_word_question_is_padded_with_mask_rows() {
    let p = params();
    let q = encode_query("one two three four five six seven eight", &p);
    assert_eq!(q.rows(), 32);
    let mask: Vec<f32> = p.token_vector(MASK).into_iter().map(|v| v as f32).collect();
    for i in 0..10 {
        assert_ne!(q.row(i), mask.as_slice(), "row {i}");
    }
    for i in 10..32 {
        assert_eq!(q.row(i), mask.as_slice(), "row {i}");
    }
}

#[test]
fn rows_are_unit_norm_and_reencoding_is_identical() {
    let p = params();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let n = rng.random_range(0..40);
        let question: Vec<String> = (0..n)
            .map(|_| format!("w{}", rng.random_range(0..500)))
            .collect();
        let question = question.join(" ");
        let a = encode_query(&question, &p);
        assert_eq!(a.rows(), 32);
        assert_eq!(a, encode_query(&question, &params()));
        for i in 0..a.rows() {
            let norm: f64 = a
                .row(i)
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn passage_rows_and_truncation() {
    let p = params();
    let five = Passage::new(1, "", "a b c d e").unwrap();
    let m = encode_passage(&five, &p).unwrap();
    assert_eq!(m.rows(), 7);
    assert_eq!(m, encode_passage(&five, &p).unwrap());

    let long_body: Vec<String> = (0..500).map(|i| format!("t{i}")).collect();
    let long = Passage::new(2, "title", long_body.join(" ")).unwrap();
    assert_eq!(encode_passage(&long, &p).unwrap().rows(), 180);

    let blank = Passage {
        pid: 3,
        title: "x".into(),
        body: "  ".into(),
    };
    assert!(matches!(
        encode_passage(&blank, &p),
        Err(Error::EmptyPassage(3))
    ));
}

#[test]
fn full_identity_projection_gives_normalized_base_vectors() {
    let config = EncoderConfig {
        base_dim: 16,
        out_dim: 16,
        ..EncoderConfig::default()
    };
    let p = EncoderParams::identity(config).unwrap();
    for token in [0u32, 5, 77, 123_456] {
        let base = p.base_embedding(token);
        let norm = base.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in p.token_vector(token).iter().zip(&base) {
            assert!((a - b / norm).abs() < 1e-12);
        }
    }
}

#[test]
fn imported_store_reports_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a: Vec<f32> = (0..3 * 128).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..5 * 128).map(|_| rng.random_range(-1.0..1.0)).collect();
    write_entries(
        &path,
        128,
        [EntryRef { id: 10, data: &a }, EntryRef { id: 11, data: &b }].into_iter(),
    )
    .unwrap();
    let store = import_embeddings(&path, MatrixKind::Passage).unwrap();
    assert_eq!(store.len(), 2);
    assert_eq!(store.get(10).unwrap().rows(), 3);
    assert_eq!(store.get(11).unwrap().rows(), 5);
}

#[test]
fn zero_row_is_rejected_with_its_id() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    let mut data = vec![0.5f32; 4 * 3];
    data[4..8].fill(0.0);
    write_entries(
        &path,
        4,
        [EntryRef {
            id: 99,
            data: &data,
        }]
        .into_iter(),
    )
    .unwrap();
    match import_embeddings(&path, MatrixKind::Passage) {
        Err(Error::ZeroNormRow { id, row }) => assert_eq!((id, row), (99, 1)),
        other => panic!("expected a zero-norm error, got {other:?}"),
    }
}

#[test]
fn hundred_random_matrices_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dim = 24;
    let matrices: Vec<(u64, Vec<f32>)> = (0..100)
        .map(|i| {
            let rows = rng.random_range(1..20);
            let mut data: Vec<f32> = (0..rows * dim)
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect();
            for row in data.chunks_exact_mut(dim) {
                let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
                row.iter_mut().for_each(|v| *v /= n);
            }
            (i * 5, data)
        })
        .collect();
    write_entries(
        &path,
        dim,
        matrices
            .iter()
            .map(|(id, d)| EntryRef { id: *id, data: d })
            .collect::<Vec<_>>()
            .into_iter(),
    )
    .unwrap();
    let raw = read_entries(&path).unwrap();
    assert_eq!(raw.entries.len(), 100);
    let store = import_embeddings(&path, MatrixKind::Passage).unwrap();
    for (id, data) in &matrices {
        let back = store.get(*id).unwrap();
        let err = back
            .data()
            .iter()
            .zip(data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 1e-6, "id {id}: {err}");
    }
}

#[test]
fn checkpoint_round_trip_keeps_hash() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = params();
    p.projection[3] = 0.25;
    p.save(dir.path()).unwrap();
    let back = EncoderParams::load(dir.path()).unwrap();
    assert_eq!(back, p);
    assert_eq!(back.config_hash(), p.config_hash());
}
