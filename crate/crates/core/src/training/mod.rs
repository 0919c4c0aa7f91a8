//! Retriever training: pairwise softmax cross-entropy over
//! `(question, positive, negative)` triples, back-propagated through the
//! late-interaction score into the shared projection matrix.
//!
//! Base token embeddings are frozen; only the projection moves. Gradients are
//! computed in `f64` and accumulated per distinct token of a batch, in a
//! fixed order, so training is reproducible bit for bit.

mod stage;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, QuestionTexts};
use crate::encoder::{base_embedding, passage_tokens, query_tokens, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::scoring::{maxsim_grad, MatrixRef};
use crate::supervision::TrainingTriple;

pub use stage::{
    run_pipeline, run_stage, Guide, Init, PipelineOptions, RetrievalMode, StageConfig, StageInputs,
    StageOutput, StagePlan, StageReport, TripleStats,
};

/// `-log(e^pos / (e^pos + e^neg))`, i.e. `softplus(neg - pos)`.
pub fn pairwise_loss(s_pos: f64, s_neg: f64) -> f64 {
    let x = s_neg - s_pos;
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivatives of [`pairwise_loss`] with respect to `(s_pos, s_neg)`.
pub fn pairwise_loss_grad(s_pos: f64, s_neg: f64) -> (f64, f64) {
    let x = s_neg - s_pos;
    let sigmoid = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    (-sigmoid, sigmoid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub n_neg_per_pos: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_steps: 2000,
            learning_rate: 0.05,
            seed: 0,
            n_neg_per_pos: 10,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.n_neg_per_pos == 0 {
            return Err(Error::InvalidParams(
                "batch_size, max_steps and n_neg_per_pos must be at least 1".into(),
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

/// Token ids of every question and passage a triple set touches.
#[derive(Debug, Clone)]
struct TripleTokens {
    query: Vec<u32>,
    pos: Vec<u32>,
    neg: Vec<u32>,
}

/// Pairwise objective over a fixed triple set, as a function of the
/// projection matrix.
#[derive(Debug, Clone)]
pub struct ProjectionObjective {
    config: EncoderConfig,
    triples: Vec<TripleTokens>,
    base: HashMap<u32, Vec<f64>>,
}

struct TokenState {
    norm: f64,
    unit: Vec<f64>,
}

impl ProjectionObjective {
    /// Tokenizes every triple. Questions come as bare text, so answers are
    /// never visible here.
    pub fn new(
        triples: &[TrainingTriple],
        questions: &QuestionTexts,
        corpus: &Corpus,
        config: EncoderConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mut query_cache: HashMap<u64, Vec<u32>> = HashMap::new();
        let mut passage_cache: HashMap<u64, Vec<u32>> = HashMap::new();
        let mut prepared = Vec::with_capacity(triples.len());
        for t in triples {
            if t.pos_pid == t.neg_pid {
                return Err(Error::InvalidField {
                    what: format!("triple for question {}", t.qid),
                    reason: "positive and negative are the same passage".into(),
                });
            }
            let query = match query_cache.get(&t.qid) {
                Some(q) => q.clone(),
                None => {
                    let text = questions.get(&t.qid).ok_or_else(|| Error::InvalidField {
                        what: format!("triple for question {}", t.qid),
                        reason: "question text not found".into(),
                    })?;
                    let ids = query_tokens(text, config.query_len).ids;
                    query_cache.insert(t.qid, ids.clone());
                    ids
                }
            };
            let mut passage = |pid: u64| -> Result<Vec<u32>> {
                if let Some(ids) = passage_cache.get(&pid) {
                    return Ok(ids.clone());
                }
                let ids = passage_tokens(corpus.require(pid)?, config.max_passage_len).ids;
                passage_cache.insert(pid, ids.clone());
                Ok(ids)
            };
            prepared.push(TripleTokens {
                query,
                pos: passage(t.pos_pid)?,
                neg: passage(t.neg_pid)?,
            });
        }
        let mut base = HashMap::new();
        for t in &prepared {
            for &id in t.query.iter().chain(&t.pos).chain(&t.neg) {
                base.entry(id)
                    .or_insert_with(|| base_embedding(config.seed, id, config.base_dim));
            }
        }
        Ok(Self {
            config,
            triples: prepared,
            base,
        })
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Mean loss over the triples at `batch` and its gradient with respect to
    /// the row-major `base_dim x out_dim` projection `w`.
    pub fn loss_and_grad(&self, w: &[f64], batch: &[usize]) -> (f64, Vec<f64>) {
        let (base_dim, out_dim) = (self.config.base_dim, self.config.out_dim);
        assert_eq!(w.len(), base_dim * out_dim);

        // distinct tokens in first-appearance order
        let mut local: HashMap<u32, usize> = HashMap::new();
        let mut order: Vec<u32> = Vec::new();
        for &b in batch {
            let t = &self.triples[b];
            for &id in t.query.iter().chain(&t.pos).chain(&t.neg) {
                local.entry(id).or_insert_with(|| {
                    order.push(id);
                    order.len() - 1
                });
            }
        }
        let states: Vec<TokenState> = order
            .iter()
            .map(|id| {
                let base = &self.base[id];
                let mut u = vec![0.0; out_dim];
                for (b, &x) in base.iter().enumerate() {
                    for (acc, &wv) in u.iter_mut().zip(&w[b * out_dim..(b + 1) * out_dim]) {
                        *acc += x * wv;
                    }
                }
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                let unit = if norm > 0.0 && norm.is_finite() {
                    u.iter().map(|v| v / norm).collect()
                } else {
                    let mut e = vec![0.0; out_dim];
                    e[0] = 1.0;
                    e
                };
                TokenState { norm, unit }
            })
            .collect();

        let gather = |ids: &[u32]| -> Vec<f64> {
            ids.iter()
                .flat_map(|id| states[local[id]].unit.iter().copied())
                .collect()
        };

        let scale = 1.0 / batch.len().max(1) as f64;
        let mut grad_unit = vec![0.0f64; order.len() * out_dim];
        let mut scatter = |ids: &[u32], grad: &[f64], weight: f64| {
            for (row, id) in ids.iter().enumerate() {
                let slot = local[id];
                for (g, &v) in grad_unit[slot * out_dim..(slot + 1) * out_dim]
                    .iter_mut()
                    .zip(&grad[row * out_dim..(row + 1) * out_dim])
                {
                    *g += weight * v;
                }
            }
        };

        let mut loss = 0.0;
        for &b in batch {
            let t = &self.triples[b];
            let (q, dp, dn) = (gather(&t.query), gather(&t.pos), gather(&t.neg));
            let qv = MatrixRef::new(&q, out_dim).expect("shape");
            let gp = maxsim_grad(qv, MatrixRef::new(&dp, out_dim).expect("shape"))
                .expect("non-empty passage");
            let gn = maxsim_grad(qv, MatrixRef::new(&dn, out_dim).expect("shape"))
                .expect("non-empty passage");
            loss += pairwise_loss(gp.score.0, gn.score.0);
            let (dpos, dneg) = pairwise_loss_grad(gp.score.0, gn.score.0);
            scatter(&t.query, &gp.query, dpos * scale);
            scatter(&t.query, &gn.query, dneg * scale);
            scatter(&t.pos, &gp.doc, dpos * scale);
            scatter(&t.neg, &gn.doc, dneg * scale);
        }

        let mut grad_w = vec![0.0f64; base_dim * out_dim];
        for (slot, (id, state)) in order.iter().zip(&states).enumerate() {
            if !(state.norm > 0.0 && state.norm.is_finite()) {
                continue;
            }
            let g = &grad_unit[slot * out_dim..(slot + 1) * out_dim];
            let along: f64 = g.iter().zip(&state.unit).map(|(a, b)| a * b).sum();
            let grad_u: Vec<f64> = g
                .iter()
                .zip(&state.unit)
                .map(|(gv, e)| (gv - along * e) / state.norm)
                .collect();
            for (b, &x) in self.base[id].iter().enumerate() {
                for (gw, &gu) in grad_w[b * out_dim..(b + 1) * out_dim]
                    .iter_mut()
                    .zip(&grad_u)
                {
                    *gw += x * gu;
                }
            }
        }
        (loss * scale, grad_w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Mean batch loss before each update.
    pub loss_curve: Vec<f64>,
}

/// Batch index sequence: seeded permutations of all triples, one per epoch,
/// concatenated and cut into batches.
pub(crate) fn batch_schedule(
    n: usize,
    batch_size: usize,
    max_steps: usize,
    seed: u64,
) -> impl Iterator<Item = Vec<usize>> {
    let mut epoch = 0u64;
    let mut pending: Vec<usize> = Vec::new();
    std::iter::from_fn(move || {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if pending.is_empty() {
                let mut perm: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch));
                perm.shuffle(&mut rng);
                perm.reverse();
                pending = perm;
                epoch += 1;
            }
            batch.push(pending.pop().expect("refilled"));
        }
        Some(batch)
    })
    .take(max_steps)
}

/// Plain SGD on the mean pairwise loss of each batch.
pub fn train_projection(
    triples: &[TrainingTriple],
    questions: &QuestionTexts,
    corpus: &Corpus,
    init: &EncoderParams,
    config: &TrainerConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    init.validate()?;
    if triples.is_empty() {
        return Err(Error::InvalidParams("no training triples".into()));
    }
    let objective = ProjectionObjective::new(triples, questions, corpus, init.config)?;
    let mut w: Vec<f64> = init.projection.iter().map(|&v| f64::from(v)).collect();
    let mut loss_curve = Vec::with_capacity(config.max_steps);
    let schedule = batch_schedule(
        objective.len(),
        config.batch_size,
        config.max_steps,
        config.seed,
    );
    for (step, batch) in schedule.enumerate() {
        let (loss, grad) = objective.loss_and_grad(&w, &batch);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        loss_curve.push(loss);
        if config.learning_rate > 0.0 {
            for (wv, g) in w.iter_mut().zip(&grad) {
                *wv -= config.learning_rate * g;
            }
        }
        if step % 500 == 0 {
            tracing::debug!(step, loss, "projection training");
        }
    }
    let projection = w.iter().map(|&v| v as f32).collect();
    Ok(TrainOutcome {
        params: EncoderParams::with_projection(init.config, projection)?,
        loss_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Passage;

    #[test]
    fn loss_closed_forms() {
        assert!((pairwise_loss(0.3, 0.3) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((pairwise_loss(10.0, 0.0) - (-10.0f64).exp().ln_1p()).abs() < 1e-18);
        assert!((pairwise_loss(10.0, 0.0) - 4.5399e-5).abs() < 1e-9);
        // large margins stay finite
        assert!(pairwise_loss(0.0, 1e4).is_finite());
        assert!(pairwise_loss(1e4, 0.0) >= 0.0);
    }

    #[test]
    fn loss_grad_matches_finite_differences() {
        let h = 1e-6;
        for &(a, b) in &[
            (0.0, 0.0),
            (1.5, -0.5),
            (-3.0, 7.0),
            (20.0, 19.0),
            (0.1, 12.0),
        ] {
            let (ga, gb) = pairwise_loss_grad(a, b);
            let fa = (pairwise_loss(a + h, b) - pairwise_loss(a - h, b)) / (2.0 * h);
            let fb = (pairwise_loss(a, b + h) - pairwise_loss(a, b - h)) / (2.0 * h);
            assert!(
                (fa - ga).abs() / ga.abs().max(1e-12) < 1e-6,
                "{a} {b}: {fa} vs {ga}"
            );
            assert!(
                (fb - gb).abs() / gb.abs().max(1e-12) < 1e-6,
                "{a} {b}: {fb} vs {gb}"
            );
        }
    }

    proptest::proptest! {
        #[test]
        fn loss_properties(a in -50.0f64..50.0, b in -50.0f64..50.0, c in -100.0f64..100.0) {
            proptest::prop_assert!(pairwise_loss(a, b) >= 0.0);
            let sym = pairwise_loss(a, b) + pairwise_loss(b, a);
            proptest::prop_assert!(sym >= 2.0 * std::f64::consts::LN_2 - 1e-12);
            let shifted = pairwise_loss(a + c, b + c);
            proptest::prop_assert!((shifted - pairwise_loss(a, b)).abs() <= 1e-9 * (1.0 + pairwise_loss(a, b)));
        }
    }

    fn toy() -> (Corpus, QuestionTexts, Vec<TrainingTriple>, EncoderParams) {
        let corpus = Corpus::new(vec![
            Passage::new(1, "", "orbit moon tide signal").unwrap(),
            Passage::new(2, "", "orbit moon craters dust").unwrap(),
            Passage::new(3, "", "harbor ships tide cargo signal").unwrap(),
        ])
        .unwrap();
        let mut questions = QuestionTexts::new();
        questions.insert(1, "what pulls the tide".into());
        questions.insert(2, "where do ships unload cargo".into());
        let triples = vec![
            TrainingTriple {
                qid: 1,
                pos_pid: 1,
                neg_pid: 2,
            },
            TrainingTriple {
                qid: 2,
                pos_pid: 3,
                neg_pid: 2,
            },
        ];
        let params = EncoderParams::identity(EncoderConfig {
            base_dim: 12,
            out_dim: 6,
            query_len: 8,
            max_passage_len: 16,
            seed: 5,
        })
        .unwrap();
        (corpus, questions, triples, params)
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let (corpus, questions, triples, params) = toy();
        let config = TrainerConfig {
            learning_rate: 0.0,
            max_steps: 5,
            batch_size: 2,
            ..TrainerConfig::default()
        };
        let out = train_projection(&triples, &questions, &corpus, &params, &config).unwrap();
        assert_eq!(out.params, params);
        assert_eq!(out.loss_curve.len(), 5);
    }

    #[test]
    fn separable_triple_loss_decreases() {
        let (corpus, questions, triples, params) = toy();
        let config = TrainerConfig {
            learning_rate: 0.05,
            max_steps: 10,
            batch_size: 1,
            ..TrainerConfig::default()
        };
        let out = train_projection(&triples[..1], &questions, &corpus, &params, &config).unwrap();
        for pair in out.loss_curve.windows(2) {
            assert!(pair[1] < pair[0], "{:?}", out.loss_curve);
        }
    }

    #[test]
    fn identical_seeds_identical_params() {
        let (corpus, questions, triples, params) = toy();
        let config = TrainerConfig {
            max_steps: 20,
            batch_size: 1,
            seed: 9,
            ..TrainerConfig::default()
        };
        let a = train_projection(&triples, &questions, &corpus, &params, &config).unwrap();
        let b = train_projection(&triples, &questions, &corpus, &params, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let (corpus, questions, triples, params) = toy();
        let objective =
            ProjectionObjective::new(&triples, &questions, &corpus, params.config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        use rand::Rng;
        let w: Vec<f64> = (0..params.projection.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let (_, grad) = objective.loss_and_grad(&w, &[0, 1]);
        let h = 1e-6;
        for idx in 0..w.len() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[idx] += h;
            minus[idx] -= h;
            let fd = (objective.loss_and_grad(&plus, &[0, 1]).0
                - objective.loss_and_grad(&minus, &[0, 1]).0)
                / (2.0 * h);
            let denom = grad[idx].abs().max(fd.abs()).max(1e-6);
            assert!(
                (fd - grad[idx]).abs() / denom < 1e-3,
                "entry {idx}: fd {fd} vs {}",
                grad[idx]
            );
        }
    }

    #[test]
    fn batches_cycle_through_epochs() {
        let all: Vec<Vec<usize>> = batch_schedule(5, 3, 4, 0).collect();
        assert_eq!(all.len(), 4);
        let mut first_epoch: Vec<usize> = all.concat()[..5].to_vec();
        first_epoch.sort_unstable();
        assert_eq!(first_epoch, vec![0, 1, 2, 3, 4]);
    }
}
