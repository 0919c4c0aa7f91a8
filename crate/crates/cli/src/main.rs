use std::fs;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use lateqa::bm25::{Bm25Params, InvertedIndex};
use lateqa::corpus::{Corpus, Dataset};
use lateqa::encoder::{
    encode_query, import_embeddings, EmbeddingMatrix, EncoderConfig, EncoderParams, MatrixKind,
};
use lateqa::evaluation::{compare_rankings, exact_match, precision_curve};
use lateqa::index::{
    read_rankings, rerank_all, retrieve_all, write_rankings, CandidateParams, EmbeddingSource,
    KMeansParams, RankedList, Rankings, SearchMode, TokenIndex,
};
use lateqa::reader::{
    predict_all, read_predictions, train_reader, write_predictions, ReaderConfig, ReaderParams,
};
use lateqa::supervision::{
    gold_positives, make_triples, read_triples, retrieve_and_filter, write_coverage, write_triples,
    FilterParams,
};
use lateqa::synthetic::{generate, SyntheticConfig};
use lateqa::training::{
    run_pipeline, train_projection, Guide, Init, PipelineOptions, RetrievalMode, StageConfig,
    StageInputs, TrainerConfig,
};
use rayon::prelude::*;
use serde_json::json;

const DATA_DIR_ENV: &str = "LATEQA_DATA_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "lateqa",
    version,
    about = "Late-interaction retrieval and weakly supervised open-domain QA"
)]
struct Cli {
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode a corpus into a token-vector index.
    Index(IndexArgs),
    /// Search an index with every question of a dataset.
    Retrieve(RetrieveArgs),
    /// Re-score the candidates of an existing ranking.
    Rerank(RerankArgs),
    /// Build a BM25 inverted index.
    Bm25Index(Bm25IndexArgs),
    /// Rank passages with BM25.
    Bm25Retrieve(Bm25RetrieveArgs),
    /// Retrieve-and-filter training triples from a guiding ranking.
    Triples(TriplesArgs),
    /// Training triples with gold-evidence positives.
    GoldTriples(GoldTriplesArgs),
    /// Train the retriever projection on triples.
    TrainRetriever(TrainRetrieverArgs),
    /// Train the span reader on triples.
    TrainReader(TrainReaderArgs),
    /// Extract answers from ranked passages.
    Predict(PredictArgs),
    /// P@k of a ranking file.
    EvalRetrieval(EvalRetrievalArgs),
    /// Exact Match of a predictions file.
    EvalQa(EvalQaArgs),
    /// Compare two ranking files.
    Compare(CompareArgs),
    /// Run the staged self-guided training pipeline.
    Pipeline(PipelineArgs),
    /// Write a planted synthetic task.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
struct OutArg {
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct CorpusArg {
    /// Passage TSV (default: $LATEQA_DATA_DIR/corpus.tsv).
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct DatasetArg {
    /// Question JSONL (default: $LATEQA_DATA_DIR/train.jsonl).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct EncoderArgs {
    /// Encoder checkpoint directory; an untrained encoder is used without it.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = EncoderConfig::default().base_dim)]
    base_dim: usize,
    #[arg(long, default_value_t = EncoderConfig::default().out_dim)]
    out_dim: usize,
    #[arg(long, default_value_t = EncoderConfig::default().query_len)]
    query_len: usize,
    #[arg(long, default_value_t = EncoderConfig::default().max_passage_len)]
    max_passage_len: usize,
}

impl EncoderArgs {
    fn config(&self, seed: u64) -> EncoderConfig {
        EncoderConfig {
            base_dim: self.base_dim,
            out_dim: self.out_dim,
            query_len: self.query_len,
            max_passage_len: self.max_passage_len,
            seed,
        }
    }

    fn params(&self, seed: u64) -> anyhow::Result<EncoderParams> {
        Ok(match &self.checkpoint {
            Some(dir) => EncoderParams::load(dir)?,
            None => EncoderParams::identity(self.config(seed))?,
        })
    }
}

#[derive(Args, Debug, Clone)]
struct FilterArgs {
    /// Positives kept per question.
    #[arg(long, default_value_t = 3)]
    t: usize,
    #[arg(long, default_value_t = 1000)]
    k_pos: usize,
    #[arg(long, default_value_t = 1000)]
    k_neg: usize,
    /// Match answers in passage bodies only.
    #[arg(long)]
    exclude_title: bool,
}

impl FilterArgs {
    fn params(&self) -> FilterParams {
        FilterParams {
            t: self.t,
            k_pos: self.k_pos,
            k_neg: self.k_neg,
            include_title: !self.exclude_title,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = TrainerConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainerConfig::default().max_steps)]
    max_steps: usize,
    #[arg(long, default_value_t = TrainerConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainerConfig::default().n_neg_per_pos)]
    neg_per_pos: usize,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> TrainerConfig {
        TrainerConfig {
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            learning_rate: self.lr,
            seed,
            n_neg_per_pos: self.neg_per_pos,
        }
    }
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    #[command(flatten)]
    encoder: EncoderArgs,
    /// Precomputed passage embeddings instead of the built-in encoder.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Cluster token vectors into this many centroids for candidate search.
    #[arg(long)]
    clusters: Option<usize>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct SearchArgs {
    /// Two-stage candidate search instead of an exhaustive scan.
    #[arg(long)]
    candidates: bool,
    #[arg(long, default_value_t = CandidateParams::default().fanout)]
    fanout: usize,
    #[arg(long, default_value_t = CandidateParams::default().probe)]
    probe: usize,
}

impl SearchArgs {
    fn mode(&self) -> SearchMode {
        if self.candidates {
            SearchMode::Candidates(CandidateParams {
                fanout: self.fanout,
                probe: self.probe,
            })
        } else {
            SearchMode::Exact
        }
    }
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    /// Index directory written by `index`.
    #[arg(long)]
    index: PathBuf,
    #[command(flatten)]
    dataset: DatasetArg,
    #[command(flatten)]
    encoder: EncoderArgs,
    /// Precomputed query embeddings keyed by qid.
    #[arg(long)]
    query_embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    k: usize,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct RerankArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    #[command(flatten)]
    dataset: DatasetArg,
    /// Ranking whose candidates are re-scored.
    #[arg(long)]
    ranking: PathBuf,
    /// Candidates taken from the top of each list.
    #[arg(long, default_value_t = 1000)]
    depth: usize,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    query_embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    k: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct Bm25IndexArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    #[arg(long, default_value_t = Bm25Params::default().k1)]
    k1: f64,
    #[arg(long, default_value_t = Bm25Params::default().b)]
    b: f64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct Bm25RetrieveArgs {
    /// Index file written by `bm25-index`; built from --corpus otherwise.
    #[arg(long)]
    index: Option<PathBuf>,
    #[command(flatten)]
    corpus: CorpusArg,
    #[command(flatten)]
    dataset: DatasetArg,
    #[arg(long, default_value_t = 1000)]
    k: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct TriplesArgs {
    /// Guiding ranking.
    #[arg(long)]
    ranking: PathBuf,
    #[command(flatten)]
    corpus: CorpusArg,
    #[command(flatten)]
    dataset: DatasetArg,
    #[command(flatten)]
    filter: FilterArgs,
    #[arg(long, default_value_t = TrainerConfig::default().n_neg_per_pos)]
    neg_per_pos: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct GoldTriplesArgs {
    /// Ranking that supplies the negatives.
    #[arg(long)]
    ranking: PathBuf,
    #[command(flatten)]
    corpus: CorpusArg,
    #[command(flatten)]
    dataset: DatasetArg,
    #[arg(long, default_value_t = 1000)]
    k_neg: usize,
    #[arg(long)]
    exclude_title: bool,
    #[arg(long, default_value_t = TrainerConfig::default().n_neg_per_pos)]
    neg_per_pos: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct TrainRetrieverArgs {
    #[arg(long)]
    triples: PathBuf,
    #[command(flatten)]
    corpus: CorpusArg,
    #[command(flatten)]
    dataset: DatasetArg,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct TrainReaderArgs {
    #[arg(long)]
    triples: PathBuf,
    #[command(flatten)]
    corpus: CorpusArg,
    #[command(flatten)]
    dataset: DatasetArg,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[arg(long, default_value_t = ReaderConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = ReaderConfig::default().max_steps)]
    max_steps: usize,
    #[arg(long, default_value_t = ReaderConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = ReaderConfig::default().hidden_dim)]
    hidden_dim: usize,
    #[arg(long, default_value_t = ReaderConfig::default().max_span_len)]
    max_span_len: usize,
    /// Passages read per question at prediction time.
    #[arg(long, default_value_t = ReaderConfig::default().top_k)]
    k: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    ranking: PathBuf,
    /// Reader weights written by `train-reader`.
    #[arg(long)]
    reader: PathBuf,
    #[command(flatten)]
    corpus: CorpusArg,
    #[command(flatten)]
    dataset: DatasetArg,
    #[command(flatten)]
    encoder: EncoderArgs,
    /// Passages read per question (default: the reader's own setting).
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct EvalRetrievalArgs {
    #[arg(long)]
    ranking: PathBuf,
    #[command(flatten)]
    corpus: CorpusArg,
    #[command(flatten)]
    dataset: DatasetArg,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 20, 100])]
    depths: Vec<usize>,
    #[arg(long)]
    exclude_title: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct EvalQaArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[command(flatten)]
    dataset: DatasetArg,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[command(flatten)]
    corpus: CorpusArg,
    #[command(flatten)]
    dataset: DatasetArg,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 20, 100])]
    depths: Vec<usize>,
    #[arg(long)]
    exclude_title: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ModeArg {
    #[value(name = "end2end")]
    EndToEnd,
    Rerank,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    corpus: CorpusArg,
    #[command(flatten)]
    dataset: DatasetArg,
    /// Dev question JSONL (default: $LATEQA_DATA_DIR/dev.jsonl).
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Stages to run, starting at 0 with no gaps.
    #[arg(long, value_delimiter = ',', default_values_t = [0u32, 1, 2])]
    stages: Vec<u32>,
    /// Guide for stage 1: bm25, stage:0 or ranking:<file>.
    #[arg(long, default_value = "stage:0")]
    guiding: String,
    /// How stages after 0 produce rankings.
    #[arg(long, value_enum, default_value_t = ModeArg::EndToEnd)]
    mode: ModeArg,
    /// Candidates re-ranked per question in rerank mode.
    #[arg(long, default_value_t = 1000)]
    rerank_depth: usize,
    /// Start each stage from the untrained encoder instead of its predecessor.
    #[arg(long)]
    fresh: bool,
    /// Depth of the dev rankings written per stage.
    #[arg(long, default_value_t = 1000)]
    k: usize,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    filter: FilterArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = SyntheticConfig::default().train_questions)]
    train_questions: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().dev_questions)]
    dev_questions: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().answers)]
    answers: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().answer_context)]
    answer_context: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().filler_passages)]
    filler_passages: usize,
    #[command(flatten)]
    out: OutArg,
}

/// Failure while resolving arguments; reported like a parse error.
#[derive(Debug)]
struct Usage(clap::Error);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for Usage {}

fn usage(flag: &str) -> anyhow::Error {
    let err = Cli::command().error(
        ErrorKind::MissingRequiredArgument,
        format!("--{flag} is required (or set {DATA_DIR_ENV})"),
    );
    Usage(err).into()
}

fn resolve(flag: &str, given: &Option<PathBuf>, default_name: &str) -> anyhow::Result<PathBuf> {
    if let Some(p) = given {
        return Ok(p.clone());
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if !dir.is_empty() => Ok(Path::new(&dir).join(default_name)),
        _ => Err(usage(flag)),
    }
}

impl CorpusArg {
    fn path(&self) -> anyhow::Result<PathBuf> {
        resolve("corpus", &self.corpus, "corpus.tsv")
    }

    fn load(&self) -> anyhow::Result<Corpus> {
        Ok(Corpus::load(self.path()?)?)
    }
}

impl DatasetArg {
    fn load(&self) -> anyhow::Result<Dataset> {
        Ok(Dataset::load(resolve(
            "dataset",
            &self.dataset,
            "train.jsonl",
        )?)?)
    }
}

fn out_dir(out: &OutArg) -> anyhow::Result<&Path> {
    fs::create_dir_all(&out.out).with_context(|| format!("creating {}", out.out.display()))?;
    Ok(&out.out)
}

fn write_json(path: PathBuf, value: &serde_json::Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn encode_queries(
    dataset: &Dataset,
    encoder: &EncoderParams,
    imported: Option<&Path>,
) -> anyhow::Result<Vec<(u64, EmbeddingMatrix)>> {
    match imported {
        Some(path) => {
            let store = import_embeddings(path, MatrixKind::Query)?;
            dataset
                .iter()
                .map(|ex| {
                    let m = store
                        .get(ex.qid)
                        .ok_or(lateqa::Error::MissingEmbedding(ex.qid))?;
                    Ok((ex.qid, m.clone()))
                })
                .collect()
        }
        None => Ok(dataset
            .examples()
            .par_iter()
            .map(|ex| (ex.qid, encode_query(&ex.question, encoder)))
            .collect()),
    }
}

fn cmd_index(seed: u64, a: &IndexArgs) -> anyhow::Result<()> {
    let corpus = a.corpus.load()?;
    let mut index = match &a.embeddings {
        Some(path) => {
            let store = import_embeddings(path, MatrixKind::Passage)?;
            TokenIndex::build(&corpus, EmbeddingSource::Imported(&store))?
        }
        None => {
            let params = a.encoder.params(seed)?;
            TokenIndex::build(&corpus, EmbeddingSource::Encoder(&params))?
        }
    };
    if let Some(clusters) = a.clusters {
        index.cluster(&KMeansParams {
            clusters,
            seed,
            ..KMeansParams::default()
        });
    }
    index.save(out_dir(&a.out)?)?;
    Ok(())
}

fn cmd_retrieve(seed: u64, a: &RetrieveArgs) -> anyhow::Result<()> {
    let index = TokenIndex::load(&a.index)?;
    let dataset = a.dataset.load()?;
    let encoder = a.encoder.params(seed)?;
    if a.query_embeddings.is_none() && index.meta().encoder_config_hash != "imported" {
        let hash = encoder.config_hash();
        if hash != index.meta().encoder_config_hash {
            return Err(lateqa::Error::InvalidField {
                what: "query encoder".into(),
                reason: "does not match the encoder the index was built with".into(),
            }
            .into());
        }
    }
    let queries = encode_queries(&dataset, &encoder, a.query_embeddings.as_deref())?;
    let rankings = retrieve_all(&index, &queries, a.search.mode(), a.k)?;
    write_rankings(out_dir(&a.out)?.join("ranking.tsv"), &rankings)?;
    Ok(())
}

fn truncate(rankings: &Rankings, depth: usize) -> Rankings {
    rankings
        .iter()
        .map(|(&qid, l)| {
            (
                qid,
                RankedList::from_hits(qid, l.top(depth).to_vec(), depth),
            )
        })
        .collect()
}

fn cmd_rerank(seed: u64, a: &RerankArgs) -> anyhow::Result<()> {
    if a.depth == 0 {
        return Err(lateqa::Error::InvalidParams("--depth must be at least 1".into()).into());
    }
    let corpus = a.corpus.load()?;
    let dataset = a.dataset.load()?;
    let candidates = truncate(&read_rankings(&a.ranking)?, a.depth);
    let mut pids: Vec<u64> = candidates.values().flat_map(|l| l.pids()).collect();
    pids.sort_unstable();
    pids.dedup();
    let encoder = a.encoder.params(seed)?;
    let index = match &a.embeddings {
        Some(path) => {
            let store = import_embeddings(path, MatrixKind::Passage)?;
            TokenIndex::build_subset(&corpus, &pids, EmbeddingSource::Imported(&store))?
        }
        None => TokenIndex::build_subset(&corpus, &pids, EmbeddingSource::Encoder(&encoder))?,
    };
    let queries = encode_queries(&dataset, &encoder, a.query_embeddings.as_deref())?;
    let rankings = rerank_all(&index, &queries, &candidates, a.k)?;
    write_rankings(out_dir(&a.out)?.join("ranking.tsv"), &rankings)?;
    Ok(())
}

fn cmd_bm25_index(a: &Bm25IndexArgs) -> anyhow::Result<()> {
    let corpus = a.corpus.load()?;
    let index = InvertedIndex::build(&corpus, Bm25Params { k1: a.k1, b: a.b })?;
    index.save(out_dir(&a.out)?.join("bm25.json"))?;
    Ok(())
}

fn cmd_bm25_retrieve(a: &Bm25RetrieveArgs) -> anyhow::Result<()> {
    let index = match &a.index {
        Some(path) => InvertedIndex::load(path)?,
        None => InvertedIndex::build(&a.corpus.load()?, Bm25Params::default())?,
    };
    let dataset = a.dataset.load()?;
    let lists: Vec<lateqa::Result<RankedList>> = dataset
        .examples()
        .par_iter()
        .map(|ex| index.retrieve(ex.qid, &ex.question, a.k))
        .collect();
    let mut rankings = Rankings::new();
    for l in lists {
        let l = l?;
        rankings.insert(l.qid, l);
    }
    write_rankings(out_dir(&a.out)?.join("ranking.tsv"), &rankings)?;
    Ok(())
}

fn cmd_triples(seed: u64, a: &TriplesArgs) -> anyhow::Result<()> {
    let corpus = a.corpus.load()?;
    let dataset = a.dataset.load()?;
    let rankings = read_rankings(&a.ranking)?;
    let labels = retrieve_and_filter(&rankings, &dataset, &corpus, &a.filter.params())?;
    let triples = make_triples(&labels, a.neg_per_pos, seed)?;
    let out = out_dir(&a.out)?;
    write_triples(out.join("triples.tsv"), &triples)?;
    write_coverage(out.join("coverage.json"), &labels.report)?;
    Ok(())
}

fn cmd_gold_triples(seed: u64, a: &GoldTriplesArgs) -> anyhow::Result<()> {
    let corpus = a.corpus.load()?;
    let dataset = a.dataset.load()?;
    let rankings = read_rankings(&a.ranking)?;
    let labels = gold_positives(&dataset, &rankings, &corpus, a.k_neg, !a.exclude_title)?;
    let triples = make_triples(&labels, a.neg_per_pos, seed)?;
    let out = out_dir(&a.out)?;
    write_triples(out.join("triples.tsv"), &triples)?;
    write_coverage(out.join("coverage.json"), &labels.report)?;
    Ok(())
}

fn cmd_train_retriever(seed: u64, a: &TrainRetrieverArgs) -> anyhow::Result<()> {
    let corpus = a.corpus.load()?;
    let dataset = a.dataset.load()?;
    let triples = read_triples(&a.triples)?;
    let init = a.encoder.params(seed)?;
    let outcome = train_projection(
        &triples,
        &dataset.question_texts(),
        &corpus,
        &init,
        &a.train.config(seed),
    )?;
    let out = out_dir(&a.out)?;
    outcome.params.save(out.join("checkpoint"))?;
    write_json(
        out.join("loss.json"),
        &json!({ "loss_curve": outcome.loss_curve }),
    )
}

fn cmd_train_reader(seed: u64, a: &TrainReaderArgs) -> anyhow::Result<()> {
    let corpus = a.corpus.load()?;
    let dataset = a.dataset.load()?;
    let triples = read_triples(&a.triples)?;
    let encoder = a.encoder.params(seed)?;
    let config = ReaderConfig {
        hidden_dim: a.hidden_dim,
        max_span_len: a.max_span_len,
        top_k: a.k,
        batch_size: a.batch_size,
        max_steps: a.max_steps,
        learning_rate: a.lr,
        seed,
    };
    let outcome = train_reader(&triples, &dataset, &corpus, &encoder, &config)?;
    let out = out_dir(&a.out)?;
    outcome.params.save(out.join("reader.json"))?;
    write_json(
        out.join("loss.json"),
        &json!({ "loss_curve": outcome.loss_curve, "skipped": outcome.skipped }),
    )
}

fn cmd_predict(seed: u64, a: &PredictArgs) -> anyhow::Result<()> {
    let corpus = a.corpus.load()?;
    let dataset = a.dataset.load()?;
    let rankings = read_rankings(&a.ranking)?;
    let reader = ReaderParams::load(&a.reader)?;
    let encoder = a.encoder.params(seed)?;
    if encoder.out_dim() != reader.in_dim {
        return Err(lateqa::Error::DimensionMismatch {
            expected: reader.in_dim,
            found: encoder.out_dim(),
        }
        .into());
    }
    let k = a.k.unwrap_or(reader.top_k);
    let predictions = predict_all(&dataset, &rankings, &corpus, &reader, &encoder, k)?;
    write_predictions(out_dir(&a.out)?.join("predictions.jsonl"), &predictions)?;
    Ok(())
}

fn p_at_json(curve: &std::collections::BTreeMap<usize, f64>) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = curve
        .iter()
        .map(|(k, v)| (k.to_string(), json!(v)))
        .collect();
    serde_json::Value::Object(map)
}

fn cmd_eval_retrieval(a: &EvalRetrievalArgs) -> anyhow::Result<()> {
    let corpus = a.corpus.load()?;
    let dataset = a.dataset.load()?;
    let rankings = read_rankings(&a.ranking)?;
    let curve = precision_curve(&rankings, &dataset, &corpus, &a.depths, !a.exclude_title)?;
    write_json(
        out_dir(&a.out)?.join("retrieval_eval.json"),
        &json!({ "questions": dataset.len(), "p_at": p_at_json(&curve) }),
    )
}

fn cmd_eval_qa(a: &EvalQaArgs) -> anyhow::Result<()> {
    let dataset = a.dataset.load()?;
    let predictions = read_predictions(&a.predictions)?;
    let em = exact_match(&predictions, &dataset)?;
    write_json(
        out_dir(&a.out)?.join("qa_eval.json"),
        &json!({ "questions": dataset.len(), "predictions": predictions.len(), "exact_match": em }),
    )
}

fn cmd_compare(a: &CompareArgs) -> anyhow::Result<()> {
    let corpus = a.corpus.load()?;
    let dataset = a.dataset.load()?;
    let ra = read_rankings(&a.a)?;
    let rb = read_rankings(&a.b)?;
    let report = compare_rankings(&ra, &rb, &dataset, &corpus, &a.depths, !a.exclude_title)?;
    write_json(
        out_dir(&a.out)?.join("comparison.json"),
        &serde_json::to_value(report)?,
    )
}

fn parse_guide(arg: &str) -> anyhow::Result<Guide> {
    if arg == "bm25" {
        return Ok(Guide::Bm25(Bm25Params::default()));
    }
    if let Some(n) = arg.strip_prefix("stage:") {
        let n: u32 = n.parse().map_err(|_| Usage(invalid_guide(arg)))?;
        return Ok(Guide::Stage(n));
    }
    if let Some(file) = arg.strip_prefix("ranking:") {
        let rankings = read_rankings(file)?;
        let label = Path::new(file)
            .file_name()
            .map_or_else(|| file.to_owned(), |n| n.to_string_lossy().into_owned());
        return Ok(Guide::Rankings { label, rankings });
    }
    Err(Usage(invalid_guide(arg)).into())
}

fn invalid_guide(arg: &str) -> clap::Error {
    Cli::command().error(
        ErrorKind::InvalidValue,
        format!("invalid --guiding '{arg}' (expected bm25, stage:<n> or ranking:<file>)"),
    )
}

fn cmd_pipeline(seed: u64, a: &PipelineArgs) -> anyhow::Result<()> {
    let stages = &a.stages;
    if stages.is_empty() || stages.iter().enumerate().any(|(i, &s)| s != i as u32) {
        return Err(Usage(Cli::command().error(
            ErrorKind::InvalidValue,
            "--stages must list consecutive stages starting at 0, e.g. 0,1,2",
        ))
        .into());
    }
    let first_guide = parse_guide(&a.guiding)?;
    if let Guide::Stage(n) = first_guide {
        if n != 0 {
            return Err(Usage(Cli::command().error(
                ErrorKind::InvalidValue,
                "stage 1 can only be guided by stage:0",
            ))
            .into());
        }
    }
    let corpus = a.corpus.load()?;
    let train = a.dataset.load()?;
    let dev = Dataset::load(resolve("dev", &a.dev, "dev.jsonl")?)?;
    let config = StageConfig {
        encoder: a.encoder.config(seed),
        filter: a.filter.params(),
        trainer: a.train.config(seed),
        search: a.search.mode(),
        dev_depth: a.k,
        report_ks: vec![5, 20],
    };
    let options = PipelineOptions {
        first_guide,
        mode: match a.mode {
            ModeArg::EndToEnd => RetrievalMode::EndToEnd,
            ModeArg::Rerank => RetrievalMode::Rerank {
                depth: a.rerank_depth,
            },
        },
        init: if a.fresh { Init::Fresh } else { Init::Prior },
    };
    let last = *stages.last().expect("non-empty");
    let inputs = StageInputs {
        corpus: &corpus,
        train: &train,
        dev: &dev,
    };
    let outputs = run_pipeline(last, inputs, &config, &options)?;
    let out = out_dir(&a.out)?;
    for stage in &outputs {
        stage.write(out.join(format!("stage_{}", stage.stage)))?;
    }
    let summary: Vec<serde_json::Value> = outputs
        .iter()
        .map(|o| json!({ "stage": o.stage, "p_at": o.report.p_at }))
        .collect();
    write_json(out.join("summary.json"), &json!(summary))
}

fn cmd_synth(seed: u64, a: &SynthArgs) -> anyhow::Result<()> {
    let config = SyntheticConfig {
        train_questions: a.train_questions,
        dev_questions: a.dev_questions,
        answers: a.answers,
        answer_context: a.answer_context,
        filler_passages: a.filler_passages,
        seed,
        ..SyntheticConfig::default()
    };
    generate(&config)?.write(out_dir(&a.out)?)?;
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Index(a) => cmd_index(seed, a),
        Command::Retrieve(a) => cmd_retrieve(seed, a),
        Command::Rerank(a) => cmd_rerank(seed, a),
        Command::Bm25Index(a) => cmd_bm25_index(a),
        Command::Bm25Retrieve(a) => cmd_bm25_retrieve(a),
        Command::Triples(a) => cmd_triples(seed, a),
        Command::GoldTriples(a) => cmd_gold_triples(seed, a),
        Command::TrainRetriever(a) => cmd_train_retriever(seed, a),
        Command::TrainReader(a) => cmd_train_reader(seed, a),
        Command::Predict(a) => cmd_predict(seed, a),
        Command::EvalRetrieval(a) => cmd_eval_retrieval(a),
        Command::EvalQa(a) => cmd_eval_qa(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Pipeline(a) => cmd_pipeline(seed, a),
        Command::Synth(a) => cmd_synth(seed, a),
    }
}

fn usage_exit(err: &clap::Error) -> ExitCode {
    let _ = err.print();
    match err.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => return usage_exit(&err),
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            return usage_exit(
                &Cli::command().error(ErrorKind::InvalidValue, "--threads must be at least 1"),
            );
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(u) = err.downcast_ref::<Usage>() {
                return usage_exit(&u.0);
            }
            match err.downcast_ref::<lateqa::Error>() {
                Some(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(if e.is_data_error() { 2 } else { 3 })
                }
                None => {
                    eprintln!("error: {err:#}");
                    ExitCode::from(3)
                }
            }
        }
    }
}
