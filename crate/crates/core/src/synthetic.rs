//! Planted question-answering task for experiments and fixtures.
//!
//! Every question names an entity and a few context words. Its answer
//! passage holds the entity, the answer word and a shared signature word;
//! its distractors repeat the entity and context words but never an answer.
//! An untrained encoder is drawn to the distractors by their extra word
//! overlap. A trained one can learn that the signature word marks answers.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dataset, Passage, QaExample};
use crate::error::{Error, Result};

pub const SIGNATURE: &str = "sig";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub train_questions: usize,
    pub dev_questions: usize,
    /// Size of the answer vocabulary shared by train and dev.
    pub answers: usize,
    pub context_words: usize,
    /// Context words repeated in the answer passage.
    pub answer_context: usize,
    pub min_distractors: usize,
    pub max_distractors: usize,
    /// Context words per distractor, at most.
    pub distractor_context: usize,
    pub filler_passages: usize,
    pub filler_len: usize,
    pub filler_vocab: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_questions: 300,
            dev_questions: 200,
            answers: 20,
            context_words: 3,
            answer_context: 1,
            min_distractors: 2,
            max_distractors: 9,
            distractor_context: 2,
            filler_passages: 100,
            filler_len: 8,
            filler_vocab: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub corpus: Corpus,
    pub train: Dataset,
    pub dev: Dataset,
}

impl SyntheticTask {
    /// Writes `corpus.tsv`, `train.jsonl` and `dev.jsonl`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.corpus.save(dir.join("corpus.tsv"))?;
        self.train.save(dir.join("train.jsonl"))?;
        self.dev.save(dir.join("dev.jsonl"))
    }
}

fn answer_word(i: usize) -> String {
    format!("a{i:04}")
}

fn filler(rng: &mut ChaCha8Rng, config: &SyntheticConfig, n: usize) -> Vec<String> {
    (0..n)
        .map(|_| format!("f{:05}", rng.random_range(0..config.filler_vocab)))
        .collect()
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticTask> {
    let c = config;
    if c.answers == 0 || c.filler_vocab == 0 || c.train_questions + c.dev_questions == 0 {
        return Err(Error::InvalidParams(
            "answers, filler vocabulary and question count must be positive".into(),
        ));
    }
    if c.min_distractors > c.max_distractors
        || c.answer_context > c.context_words
        || c.distractor_context > c.context_words
    {
        return Err(Error::InvalidParams(
            "inconsistent synthetic task sizes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let total = c.train_questions + c.dev_questions;
    let mut passages = Vec::new();
    let mut examples = Vec::with_capacity(total);
    let mut next_pid = 0u64;
    let mut push = |words: Vec<String>, passages: &mut Vec<Passage>| -> Result<u64> {
        let pid = next_pid;
        next_pid += 1;
        passages.push(Passage::new(pid, "", words.join(" "))?);
        Ok(pid)
    };

    for q in 0..total {
        let entity = format!("e{q:05}");
        let context: Vec<String> = (0..c.context_words)
            .map(|j| format!("c{:06}", q * c.context_words + j))
            .collect();
        let answer = answer_word(rng.random_range(0..c.answers));

        let mut words = vec![entity.clone(), answer.clone(), SIGNATURE.to_owned()];
        words.extend(context.iter().take(c.answer_context).cloned());
        words.extend(filler(&mut rng, c, c.filler_len));
        words.shuffle(&mut rng);
        let gold = push(words, &mut passages)?;

        let distractors = rng.random_range(c.min_distractors..=c.max_distractors);
        for _ in 0..distractors {
            let mut words = vec![entity.clone()];
            let shared = rng.random_range(c.distractor_context.min(1)..=c.distractor_context);
            let mut ctx = context.clone();
            ctx.shuffle(&mut rng);
            words.extend(ctx.into_iter().take(shared));
            words.extend(filler(&mut rng, c, c.filler_len));
            words.shuffle(&mut rng);
            push(words, &mut passages)?;
        }

        let question = format!("what links {entity} {}", context.join(" "));
        examples.push(QaExample {
            qid: q as u64,
            question,
            answers: vec![answer],
            gold_pids: vec![gold],
        });
    }
    for _ in 0..c.filler_passages {
        let words = filler(&mut rng, c, c.filler_len + 2);
        push(words, &mut passages)?;
    }

    let dev = examples.split_off(c.train_questions);
    Ok(SyntheticTask {
        corpus: Corpus::new(passages)?,
        train: Dataset::new(examples)?,
        dev: Dataset::new(dev)?,
    })
}
