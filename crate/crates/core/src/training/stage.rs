//! Self-guided training rounds. Stage 0 is the untrained encoder; each later
//! stage filters a guiding ranking into triples, trains, and re-ranks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train_projection, TrainerConfig};
use crate::bm25::{Bm25Params, InvertedIndex};
use crate::corpus::{Corpus, Dataset};
use crate::encoder::{encode_query, EmbeddingMatrix, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::evaluation::precision_curve;
use crate::index::{
    rerank_all, retrieve_all, write_rankings, EmbeddingSource, Rankings, SearchMode, TokenIndex,
};
use crate::supervision::{
    make_triples, retrieve_and_filter, write_coverage, write_triples, CoverageReport, FilterParams,
    TrainingTriple,
};

/// Where a stage's training rankings come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Guide {
    None,
    Bm25(Bm25Params),
    Stage(u32),
    Rankings { label: String, rankings: Rankings },
}

impl Guide {
    pub fn label(&self) -> String {
        match self {
            Guide::None => "none".into(),
            Guide::Bm25(_) => "bm25".into(),
            Guide::Stage(s) => format!("stage:{s}"),
            Guide::Rankings { label, .. } => format!("ranking:{label}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalMode {
    /// Rebuild the full index with the new encoder.
    EndToEnd,
    /// Re-score the previous stage's top `depth` with the new encoder.
    Rerank { depth: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Fresh,
    Prior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stage: u32,
    pub guide: Guide,
    pub mode: RetrievalMode,
    pub init: Init,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub encoder: EncoderConfig,
    pub filter: FilterParams,
    pub trainer: TrainerConfig,
    pub search: SearchMode,
    /// Depth of the dev rankings a stage emits.
    pub dev_depth: usize,
    /// Cut-offs reported as P@k.
    pub report_ks: Vec<usize>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            filter: FilterParams::default(),
            trainer: TrainerConfig::default(),
            search: SearchMode::Exact,
            dev_depth: 1000,
            report_ks: vec![5, 20],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StageInputs<'a> {
    pub corpus: &'a Corpus,
    pub train: &'a Dataset,
    pub dev: &'a Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripleStats {
    pub count: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u32,
    pub guiding: String,
    pub p_at: BTreeMap<String, f64>,
    pub triples: TripleStats,
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub stage: u32,
    pub params: EncoderParams,
    pub train_rankings: Rankings,
    pub dev_rankings: Rankings,
    pub triples: Vec<TrainingTriple>,
    pub coverage: CoverageReport,
    pub report: StageReport,
}

impl StageOutput {
    /// Writes `report.json`, `dev_ranking.tsv`, `train_ranking.tsv`,
    /// `checkpoint/` and, for trained stages, `triples.tsv` and
    /// `coverage.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let report = serde_json::to_string_pretty(&self.report)
            .map_err(|e| Error::json("stage report", e))?;
        let path = dir.join("report.json");
        fs::write(&path, report).map_err(|e| Error::io(&path, e))?;
        write_rankings(dir.join("dev_ranking.tsv"), &self.dev_rankings)?;
        write_rankings(dir.join("train_ranking.tsv"), &self.train_rankings)?;
        self.params.save(dir.join("checkpoint"))?;
        if self.stage > 0 {
            write_triples(dir.join("triples.tsv"), &self.triples)?;
            write_coverage(dir.join("coverage.json"), &self.coverage)?;
        }
        Ok(())
    }
}

fn encode_all(dataset: &Dataset, params: &EncoderParams) -> Vec<(u64, EmbeddingMatrix)> {
    use rayon::prelude::*;
    dataset
        .examples()
        .par_iter()
        .map(|ex| (ex.qid, encode_query(&ex.question, params)))
        .collect()
}

fn truncate(rankings: &Rankings, depth: usize) -> Rankings {
    rankings
        .iter()
        .map(|(&qid, list)| {
            let hits = list.top(depth).to_vec();
            (qid, crate::index::RankedList::from_hits(qid, hits, depth))
        })
        .collect()
}

fn bm25_rankings(
    corpus: &Corpus,
    dataset: &Dataset,
    params: Bm25Params,
    depth: usize,
) -> Result<Rankings> {
    use rayon::prelude::*;
    let index = InvertedIndex::build(corpus, params)?;
    let lists: Vec<Result<_>> = dataset
        .examples()
        .par_iter()
        .map(|ex| index.retrieve(ex.qid, &ex.question, depth))
        .collect();
    lists.into_iter().map(|l| l.map(|l| (l.qid, l))).collect()
}

/// Runs one stage. `prior` is the previous stage's output; it is required
/// when the plan is guided by it, initializes from it, or re-ranks it.
pub fn run_stage(
    plan: &StagePlan,
    inputs: StageInputs<'_>,
    config: &StageConfig,
    prior: Option<&StageOutput>,
) -> Result<StageOutput> {
    config.filter.validate()?;
    config.trainer.validate()?;
    if config.dev_depth == 0 {
        return Err(Error::InvalidParams(
            "dev ranking depth must be at least 1".into(),
        ));
    }
    let need_prior = |what: &str| {
        prior.ok_or_else(|| {
            Error::InvalidParams(format!(
                "stage {} {what} but no prior stage was given",
                plan.stage
            ))
        })
    };
    let train_depth = config.filter.k_pos.max(config.filter.k_neg);

    let (params, triples, coverage, loss_curve) = if plan.stage == 0 || plan.guide == Guide::None {
        let params = match plan.init {
            Init::Fresh => EncoderParams::identity(config.encoder)?,
            Init::Prior => need_prior("initializes from a prior")?.params.clone(),
        };
        (params, Vec::new(), CoverageReport::default(), Vec::new())
    } else {
        let owned;
        let guiding: &Rankings = match &plan.guide {
            Guide::None => unreachable!(),
            Guide::Bm25(p) => {
                owned = bm25_rankings(inputs.corpus, inputs.train, *p, train_depth)?;
                &owned
            }
            Guide::Stage(s) => {
                let prior = need_prior("is guided by a prior stage")?;
                if prior.stage != *s {
                    return Err(Error::InvalidParams(format!(
                        "stage {} is guided by stage {s} but the prior is stage {}",
                        plan.stage, prior.stage
                    )));
                }
                &prior.train_rankings
            }
            Guide::Rankings { rankings, .. } => rankings,
        };
        let labels = retrieve_and_filter(guiding, inputs.train, inputs.corpus, &config.filter)?;
        let triples = make_triples(&labels, config.trainer.n_neg_per_pos, config.trainer.seed)?;
        if triples.is_empty() {
            return Err(Error::NoTriples {
                total: labels.report.total,
                with_positive: labels.report.with_positive,
            });
        }
        tracing::info!(
            stage = plan.stage,
            triples = triples.len(),
            coverage = labels.report.coverage,
            "training retriever"
        );
        let init = match plan.init {
            Init::Fresh => EncoderParams::identity(config.encoder)?,
            Init::Prior => need_prior("initializes from a prior")?.params.clone(),
        };
        let outcome = train_projection(
            &triples,
            &inputs.train.question_texts(),
            inputs.corpus,
            &init,
            &config.trainer,
        )?;
        (outcome.params, triples, labels.report, outcome.loss_curve)
    };

    let train_queries = encode_all(inputs.train, &params);
    let dev_queries = encode_all(inputs.dev, &params);
    let (train_rankings, dev_rankings) = match plan.mode {
        RetrievalMode::EndToEnd => {
            let index = TokenIndex::build(inputs.corpus, EmbeddingSource::Encoder(&params))?;
            (
                retrieve_all(&index, &train_queries, config.search, train_depth)?,
                retrieve_all(&index, &dev_queries, config.search, config.dev_depth)?,
            )
        }
        RetrievalMode::Rerank { depth } => {
            let prior = need_prior("re-ranks a prior")?;
            let train_candidates = truncate(&prior.train_rankings, depth);
            let dev_candidates = truncate(&prior.dev_rankings, depth);
            let mut pids: Vec<u64> = train_candidates
                .values()
                .chain(dev_candidates.values())
                .flat_map(|l| l.pids())
                .collect();
            pids.sort_unstable();
            pids.dedup();
            let index =
                TokenIndex::build_subset(inputs.corpus, &pids, EmbeddingSource::Encoder(&params))?;
            (
                rerank_all(&index, &train_queries, &train_candidates, train_depth)?,
                rerank_all(&index, &dev_queries, &dev_candidates, config.dev_depth)?,
            )
        }
    };

    let curve = precision_curve(
        &dev_rankings,
        inputs.dev,
        inputs.corpus,
        &config.report_ks,
        config.filter.include_title,
    )?;
    let report = StageReport {
        stage: plan.stage,
        guiding: plan.guide.label(),
        p_at: curve.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        triples: TripleStats {
            count: triples.len(),
            coverage: coverage.coverage,
        },
        loss_curve,
    };
    Ok(StageOutput {
        stage: plan.stage,
        params,
        train_rankings,
        dev_rankings,
        triples,
        coverage,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    /// Guide for stage 1; later stages are always guided by their predecessor.
    pub first_guide: Guide,
    /// Retrieval mode for stages 1 and up. Stage 0 is always end-to-end.
    pub mode: RetrievalMode,
    pub init: Init,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            first_guide: Guide::Stage(0),
            mode: RetrievalMode::EndToEnd,
            init: Init::Prior,
        }
    }
}

/// Runs stages `0..=last` in order.
pub fn run_pipeline(
    last: u32,
    inputs: StageInputs<'_>,
    config: &StageConfig,
    options: &PipelineOptions,
) -> Result<Vec<StageOutput>> {
    let mut outputs: Vec<StageOutput> = Vec::new();
    for stage in 0..=last {
        let plan = if stage == 0 {
            StagePlan {
                stage,
                guide: Guide::None,
                mode: RetrievalMode::EndToEnd,
                init: Init::Fresh,
            }
        } else {
            StagePlan {
                stage,
                guide: if stage == 1 {
                    options.first_guide.clone()
                } else {
                    Guide::Stage(stage - 1)
                },
                mode: options.mode,
                init: options.init,
            }
        };
        let out = run_stage(&plan, inputs, config, outputs.last())?;
        tracing::info!(stage, p_at = ?out.report.p_at, "stage finished");
        outputs.push(out);
    }
    Ok(outputs)
}
