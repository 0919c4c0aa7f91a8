//! Extractive span reader.
//!
//! The input is the sequence `CLS question SEP passage SEP`. Each passage
//! word is represented by its projected token vector `h`; a span `(i, j)` is
//! scored by a one-hidden-layer tanh MLP over `[h_i; h_j]`. Training
//! maximizes the marginal likelihood of every answer-matching span in the
//! positive passage, normalized over all spans of the positive and negative
//! passages together.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::tokenize::{token_id, words, CLS, SEP};
use crate::corpus::{Corpus, Dataset, Passage};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::index::RankedList;
use crate::supervision::TrainingTriple;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReaderConfig {
    pub hidden_dim: usize,
    /// Longest span, in words.
    pub max_span_len: usize,
    /// Passages read per question at inference.
    pub top_k: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            max_span_len: 10,
            top_k: 5,
            batch_size: 16,
            max_steps: 500,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl ReaderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.max_span_len == 0 || self.top_k == 0 {
            return Err(Error::InvalidParams(
                "hidden_dim, max_span_len and top_k must be at least 1".into(),
            ));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::InvalidParams(
                "batch_size and max_steps must be at least 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Span MLP weights. `w1` is `hidden x 2·in_dim` row-major, start half first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderParams {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub max_span_len: usize,
    pub top_k: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl ReaderParams {
    /// Uniform `±1/sqrt(fan_in)` weights, zero biases.
    pub fn init(in_dim: usize, config: &ReaderConfig) -> Result<Self> {
        config.validate()?;
        if in_dim == 0 {
            return Err(Error::InvalidParams(
                "reader input dimension must be at least 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let r1 = 1.0 / ((2 * in_dim) as f64).sqrt();
        let r2 = 1.0 / (config.hidden_dim as f64).sqrt();
        let w1 = (0..config.hidden_dim * 2 * in_dim)
            .map(|_| rng.random_range(-r1..r1))
            .collect();
        let w2 = (0..config.hidden_dim)
            .map(|_| rng.random_range(-r2..r2))
            .collect();
        Ok(Self {
            in_dim,
            hidden_dim: config.hidden_dim,
            max_span_len: config.max_span_len,
            top_k: config.top_k,
            w1,
            b1: vec![0.0; config.hidden_dim],
            w2,
            b2: 0.0,
        })
    }

    pub fn zeros(in_dim: usize, hidden_dim: usize, max_span_len: usize) -> Self {
        Self {
            in_dim,
            hidden_dim,
            max_span_len,
            top_k: 1,
            w1: vec![0.0; hidden_dim * 2 * in_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim],
            b2: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, d) = (self.hidden_dim, self.in_dim);
        if h == 0 || d == 0 || self.max_span_len == 0 || self.top_k == 0 {
            return Err(Error::InvalidField {
                what: "reader params".into(),
                reason: "dimensions, span length and top_k must be at least 1".into(),
            });
        }
        if self.w1.len() != h * 2 * d || self.b1.len() != h || self.w2.len() != h {
            return Err(Error::InvalidField {
                what: "reader params".into(),
                reason: "weight shapes do not match the declared dimensions".into(),
            });
        }
        if !self.flat().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidField {
                what: "reader params".into(),
                reason: "non-finite weight".into(),
            });
        }
        Ok(())
    }

    /// All weights in the order `w1, b1, w2, b2`.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_weights());
        v.extend(&self.w1);
        v.extend(&self.b1);
        v.extend(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn num_weights(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// Inverse of [`Self::flat`].
    pub fn set_flat(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.num_weights());
        let (a, rest) = v.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, rest) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2 = rest[0];
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).map_err(|e| Error::json("reader params", e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: Self =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        params.validate()?;
        Ok(params)
    }

    /// `W1_start · h` and `W1_end · h` for each row of `h`.
    fn half_products(&self, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (hd, d) = (self.hidden_dim, self.in_dim);
        let rows = h.len() / d;
        let mut a = vec![0.0; rows * hd];
        let mut b = vec![0.0; rows * hd];
        for (r, x) in h.chunks_exact(d).enumerate() {
            for k in 0..hd {
                let w = &self.w1[k * 2 * d..(k + 1) * 2 * d];
                let (ws, we) = w.split_at(d);
                a[r * hd + k] = ws.iter().zip(x).map(|(p, q)| p * q).sum();
                b[r * hd + k] = we.iter().zip(x).map(|(p, q)| p * q).sum();
            }
        }
        (a, b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanCandidate {
    pub pid: u64,
    /// Word offsets into the passage, inclusive.
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub text: String,
}

/// The reader's view of one question-passage pair.
#[derive(Debug, Clone)]
pub struct ReaderInput {
    pub pid: u64,
    /// Passage words (title then body), capped at the encoder's passage length.
    pub words: Vec<String>,
    /// Full sequence ids: `CLS question SEP passage SEP`.
    pub sequence: Vec<u32>,
    /// Index of the first passage word in `sequence`.
    pub offset: usize,
    /// Row-major `sequence.len() x out_dim` token representations.
    pub hidden: Vec<f64>,
}

impl ReaderInput {
    pub fn new(question: &str, passage: &Passage, encoder: &EncoderParams) -> Self {
        Self::with_cache(question, passage, encoder, &mut HashMap::new())
    }

    fn with_cache(
        question: &str,
        passage: &Passage,
        encoder: &EncoderParams,
        cache: &mut HashMap<u32, Vec<f64>>,
    ) -> Self {
        let mut pw = words(&passage.title);
        pw.extend(words(&passage.body));
        pw.truncate(encoder.config.max_passage_len);
        let mut sequence = vec![CLS];
        sequence.extend(words(question).iter().map(|w| token_id(w)));
        sequence.push(SEP);
        let offset = sequence.len();
        sequence.extend(pw.iter().map(|w| token_id(w)));
        sequence.push(SEP);
        let mut hidden = Vec::with_capacity(sequence.len() * encoder.out_dim());
        for &id in &sequence {
            let v = cache.entry(id).or_insert_with(|| encoder.token_vector(id));
            hidden.extend_from_slice(v);
        }
        Self {
            pid: passage.pid,
            words: pw,
            sequence,
            offset,
            hidden,
        }
    }

    pub fn passage_hidden(&self, dim: usize) -> &[f64] {
        &self.hidden[self.offset * dim..(self.offset + self.words.len()) * dim]
    }
}

/// Number of spans of at most `max_len` words in a passage of `m` words.
pub fn span_count(m: usize, max_len: usize) -> usize {
    (0..m).map(|i| max_len.min(m - i)).sum()
}

/// `(start, end)` pairs in enumeration order: by start, then by length.
pub fn enumerate_spans(m: usize, max_len: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |i| (i..m.min(i + max_len)).map(move |j| (i, j)))
}

/// Hidden pre-activations and scores of all spans of one passage.
struct SpanForward {
    spans: Vec<(usize, usize)>,
    scores: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

fn forward(params: &ReaderParams, hidden: &[f64]) -> SpanForward {
    let hd = params.hidden_dim;
    let m = hidden.len() / params.in_dim;
    let (a, b) = params.half_products(hidden);
    let spans: Vec<(usize, usize)> = enumerate_spans(m, params.max_span_len).collect();
    let scores = spans
        .iter()
        .map(|&(i, j)| {
            let mut s = params.b2;
            for k in 0..hd {
                s += params.w2[k] * (a[i * hd + k] + b[j * hd + k] + params.b1[k]).tanh();
            }
            s
        })
        .collect();
    SpanForward {
        spans,
        scores,
        a,
        b,
    }
}

/// Raw scores of every span of `input`'s passage.
pub fn span_scores(input: &ReaderInput, params: &ReaderParams) -> Vec<SpanCandidate> {
    let f = forward(params, input.passage_hidden(params.in_dim));
    f.spans
        .iter()
        .zip(&f.scores)
        .map(|(&(start, end), &score)| SpanCandidate {
            pid: input.pid,
            start,
            end,
            score,
            text: input.words[start..=end].join(" "),
        })
        .collect()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax over the raw scores of spans pooled from several passages.
pub fn span_probabilities(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log Σ_{s ∈ gold} P(s)` with `P` the softmax over all `scores`. `None`
/// when no span is gold.
pub fn mml_loss(scores: &[f64], gold: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), gold.len());
    if !gold.iter().any(|&g| g) {
        return None;
    }
    let all = log_sum_exp(scores.iter().copied());
    let matched = log_sum_exp(scores.iter().zip(gold).filter(|(_, &g)| g).map(|(s, _)| *s));
    Some((all - matched).max(0.0))
}

/// Word sequences of the answers; a span is gold when its words equal one.
pub fn answer_word_sets(answers: &[String]) -> Vec<Vec<String>> {
    answers
        .iter()
        .map(|a| words(a))
        .filter(|w| !w.is_empty())
        .collect()
}

fn is_gold(words: &[String], (i, j): (usize, usize), answers: &[Vec<String>]) -> bool {
    answers.iter().any(|a| a.as_slice() == &words[i..=j])
}

#[derive(Debug, Clone)]
struct ReaderExample {
    pos: usize,
    neg: usize,
    answers: Vec<Vec<String>>,
}

/// MML objective over reader triples, as a function of the MLP weights.
#[derive(Debug, Clone)]
pub struct ReaderObjective {
    dim: usize,
    inputs: Vec<ReaderInput>,
    examples: Vec<ReaderExample>,
}

impl ReaderObjective {
    pub fn new(
        triples: &[TrainingTriple],
        dataset: &Dataset,
        corpus: &Corpus,
        encoder: &EncoderParams,
    ) -> Result<Self> {
        let mut cache = HashMap::new();
        let mut slots: HashMap<(u64, u64), usize> = HashMap::new();
        let mut inputs = Vec::new();
        let mut examples = Vec::with_capacity(triples.len());
        for t in triples {
            let ex = dataset.get(t.qid).ok_or_else(|| Error::InvalidField {
                what: format!("reader triple for question {}", t.qid),
                reason: "question not in dataset".into(),
            })?;
            let mut slot = |pid: u64| -> Result<usize> {
                if let Some(&s) = slots.get(&(t.qid, pid)) {
                    return Ok(s);
                }
                let input = ReaderInput::with_cache(
                    &ex.question,
                    corpus.require(pid)?,
                    encoder,
                    &mut cache,
                );
                inputs.push(input);
                slots.insert((t.qid, pid), inputs.len() - 1);
                Ok(inputs.len() - 1)
            };
            let pos = slot(t.pos_pid)?;
            let neg = slot(t.neg_pid)?;
            examples.push(ReaderExample {
                pos,
                neg,
                answers: answer_word_sets(&ex.answers),
            });
        }
        Ok(Self {
            dim: encoder.out_dim(),
            inputs,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Mean MML loss over the examples at `batch` that have a gold span, its
    /// gradient in [`ReaderParams::flat`] order, and the number skipped.
    pub fn loss_and_grad(&self, params: &ReaderParams, batch: &[usize]) -> (f64, Vec<f64>, usize) {
        let (hd, d) = (params.hidden_dim, params.in_dim);
        assert_eq!(d, self.dim);
        let mut g_w1 = vec![0.0; params.w1.len()];
        let mut g_b1 = vec![0.0; hd];
        let mut g_w2 = vec![0.0; hd];
        let mut g_b2 = 0.0;
        let mut total = 0.0;
        let mut used = 0usize;

        let per_example: Vec<Option<(f64, [(usize, SpanForward, Vec<f64>); 2])>> = batch
            .iter()
            .map(|&e| {
                let ex = &self.examples[e];
                let pos = &self.inputs[ex.pos];
                let neg = &self.inputs[ex.neg];
                let fp = forward(params, pos.passage_hidden(d));
                let fneg = forward(params, neg.passage_hidden(d));
                let gold: Vec<bool> = fp
                    .spans
                    .iter()
                    .map(|&s| is_gold(&pos.words, s, &ex.answers))
                    .chain(std::iter::repeat_n(false, fneg.scores.len()))
                    .collect();
                let scores: Vec<f64> = fp.scores.iter().chain(&fneg.scores).copied().collect();
                let loss = mml_loss(&scores, &gold)?;
                let p = span_probabilities(&scores);
                let matched = log_sum_exp(
                    scores
                        .iter()
                        .zip(&gold)
                        .filter(|(_, &g)| g)
                        .map(|(s, _)| *s),
                );
                let g_scores: Vec<f64> = scores
                    .iter()
                    .zip(&p)
                    .zip(&gold)
                    .map(|((s, p), &g)| if g { p - (s - matched).exp() } else { *p })
                    .collect();
                let (gp, gn) = g_scores.split_at(fp.scores.len());
                let (gp, gn) = (gp.to_vec(), gn.to_vec());
                Some((loss, [(ex.pos, fp, gp), (ex.neg, fneg, gn)]))
            })
            .collect();

        for item in per_example.iter().flatten() {
            total += item.0;
            used += 1;
        }
        let scale = if used == 0 { 0.0 } else { 1.0 / used as f64 };
        for (_, parts) in per_example.iter().flatten() {
            for (slot, f, g_scores) in parts {
                let input = &self.inputs[*slot];
                let h = input.passage_hidden(d);
                let m = input.words.len();
                let mut g_a = vec![0.0; m * hd];
                let mut g_b = vec![0.0; m * hd];
                for (&(i, j), &gs) in f.spans.iter().zip(g_scores) {
                    let gs = gs * scale;
                    if gs == 0.0 {
                        continue;
                    }
                    g_b2 += gs;
                    for k in 0..hd {
                        let act = (f.a[i * hd + k] + f.b[j * hd + k] + params.b1[k]).tanh();
                        g_w2[k] += gs * act;
                        let dz = gs * params.w2[k] * (1.0 - act * act);
                        g_b1[k] += dz;
                        g_a[i * hd + k] += dz;
                        g_b[j * hd + k] += dz;
                    }
                }
                for r in 0..m {
                    let x = &h[r * d..(r + 1) * d];
                    for k in 0..hd {
                        let (ga, gb) = (g_a[r * hd + k], g_b[r * hd + k]);
                        let row = &mut g_w1[k * 2 * d..(k + 1) * 2 * d];
                        let (rs, re) = row.split_at_mut(d);
                        if ga != 0.0 {
                            rs.iter_mut().zip(x).for_each(|(w, v)| *w += ga * v);
                        }
                        if gb != 0.0 {
                            re.iter_mut().zip(x).for_each(|(w, v)| *w += gb * v);
                        }
                    }
                }
            }
        }
        let mut grad = g_w1;
        grad.extend(g_b1);
        grad.extend(g_w2);
        grad.push(g_b2);
        (total * scale, grad, batch.len() - used)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReaderOutcome {
    pub params: ReaderParams,
    pub loss_curve: Vec<f64>,
    /// Examples whose positive passage had no answer-matching span.
    pub skipped: usize,
}

/// SGD on the mean MML loss of each batch.
pub fn train_reader(
    triples: &[TrainingTriple],
    dataset: &Dataset,
    corpus: &Corpus,
    encoder: &EncoderParams,
    config: &ReaderConfig,
) -> Result<ReaderOutcome> {
    let init = ReaderParams::init(encoder.out_dim(), config)?;
    train_reader_from(triples, dataset, corpus, encoder, init, config)
}

/// [`train_reader`] starting from given weights.
pub fn train_reader_from(
    triples: &[TrainingTriple],
    dataset: &Dataset,
    corpus: &Corpus,
    encoder: &EncoderParams,
    mut params: ReaderParams,
    config: &ReaderConfig,
) -> Result<ReaderOutcome> {
    config.validate()?;
    params.validate()?;
    if triples.is_empty() {
        return Err(Error::InvalidParams("no reader training triples".into()));
    }
    let objective = ReaderObjective::new(triples, dataset, corpus, encoder)?;
    let schedule = crate::training::batch_schedule(
        objective.len(),
        config.batch_size,
        config.max_steps,
        config.seed,
    );
    let mut weights = params.flat();
    let mut loss_curve = Vec::with_capacity(config.max_steps);
    let mut skipped = 0;
    for (step, batch) in schedule.enumerate() {
        params.set_flat(&weights);
        let (loss, grad, skip) = objective.loss_and_grad(&params, &batch);
        skipped += skip;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        loss_curve.push(loss);
        if config.learning_rate > 0.0 {
            for (w, g) in weights.iter_mut().zip(&grad) {
                *w -= config.learning_rate * g;
            }
        }
    }
    params.set_flat(&weights);
    if skipped > 0 {
        tracing::warn!(
            skipped,
            "reader examples without an answer span were skipped"
        );
    }
    Ok(ReaderOutcome {
        params,
        loss_curve,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub qid: u64,
    pub answer: String,
    pub pid: u64,
    pub score: f64,
}

fn better(a: &SpanCandidate, b: &SpanCandidate) -> bool {
    a.score
        .total_cmp(&b.score)
        .then(b.pid.cmp(&a.pid))
        .then(b.start.cmp(&a.start))
        .then((b.end - b.start).cmp(&(a.end - a.start)))
        .is_gt()
}

/// Highest raw-scoring span over the top `k` passages of `ranking`. Ties go
/// to the lower pid, then the earlier start, then the shorter span.
pub fn answer(
    question: &str,
    ranking: &RankedList,
    corpus: &Corpus,
    reader: &ReaderParams,
    encoder: &EncoderParams,
    k: usize,
) -> Result<Option<SpanCandidate>> {
    let mut best: Option<SpanCandidate> = None;
    for hit in ranking.top(k) {
        let input = ReaderInput::new(question, corpus.require(hit.pid)?, encoder);
        for span in span_scores(&input, reader) {
            if best.as_ref().is_none_or(|b| better(&span, b)) {
                best = Some(span);
            }
        }
    }
    Ok(best)
}

/// Predictions for every dataset question with a non-empty ranking, in qid
/// order.
pub fn predict_all(
    dataset: &Dataset,
    rankings: &BTreeMap<u64, RankedList>,
    corpus: &Corpus,
    reader: &ReaderParams,
    encoder: &EncoderParams,
    k: usize,
) -> Result<Vec<Prediction>> {
    if k == 0 {
        return Err(Error::InvalidParams(
            "reader depth k must be at least 1".into(),
        ));
    }
    let mut out: Vec<Result<Option<Prediction>>> = dataset
        .examples()
        .par_iter()
        .map(|ex| {
            let Some(list) = rankings.get(&ex.qid) else {
                return Ok(None);
            };
            Ok(
                answer(&ex.question, list, corpus, reader, encoder, k)?.map(|s| Prediction {
                    qid: ex.qid,
                    answer: s.text,
                    pid: s.pid,
                    score: s.score,
                }),
            )
        })
        .collect();
    let mut preds = Vec::with_capacity(out.len());
    for p in out.drain(..) {
        if let Some(p) = p? {
            preds.push(p);
        }
    }
    preds.sort_by_key(|p| p.qid);
    Ok(preds)
}

pub fn write_predictions(path: impl AsRef<Path>, predictions: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for p in predictions {
        serde_json::to_writer(&mut out, p).map_err(|e| Error::json("prediction", e))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
