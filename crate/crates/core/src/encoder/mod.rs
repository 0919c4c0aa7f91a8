//! Token-level encoders producing unit-norm embedding matrices.
//!
//! Each token id maps to a fixed pseudorandom base vector (seeded, frozen),
//! which a shared linear projection reduces to the output width before every
//! row is L2-normalized. Queries are padded with MASK tokens to a fixed
//! length; passages are only truncated.

pub mod embfile;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::tokenize::{self, Mode, MASK};
use crate::corpus::{Passage, TokenSequence};
use crate::error::{Error, Result};
use crate::scoring::MatrixRef;
use embfile::EntryRef;

pub use embfile::{import_embeddings, EmbeddingStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Query,
    Passage,
}

/// Row-major `f32` token matrix with unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    kind: MatrixKind,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn from_parts(kind: MatrixKind, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: data.len(),
            });
        }
        Ok(Self { kind, dim, data })
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: MatrixKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn view(&self) -> MatrixRef<'_, f32> {
        MatrixRef::new(&self.data, self.dim).expect("shape checked at construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub base_dim: usize,
    pub out_dim: usize,
    /// Query length after truncation or MASK padding.
    pub query_len: usize,
    pub max_passage_len: usize,
    /// Seed of the base token embedding table.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            base_dim: 64,
            out_dim: 32,
            query_len: 32,
            max_passage_len: 180,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if self.out_dim == 0 || self.out_dim > self.base_dim {
            return bad(format!(
                "out_dim must be in 1..={} (base_dim), got {}",
                self.base_dim, self.out_dim
            ));
        }
        if self.query_len < 2 {
            return bad(format!(
                "query_len must be at least 2, got {}",
                self.query_len
            ));
        }
        if self.max_passage_len < 2 {
            return bad(format!(
                "max_passage_len must be at least 2, got {}",
                self.max_passage_len
            ));
        }
        Ok(())
    }
}

/// Encoder configuration plus the `base_dim x out_dim` projection (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub projection: Vec<f32>,
}

const CHECKPOINT_MATRIX: &str = "projection.bin";
const CHECKPOINT_META: &str = "meta.json";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    #[serde(flatten)]
    config: EncoderConfig,
    config_hash: String,
}

impl EncoderParams {
    /// Untrained parameters: the projection keeps the first `out_dim` base
    /// coordinates (identity block).
    pub fn identity(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut projection = vec![0.0; config.base_dim * config.out_dim];
        for i in 0..config.out_dim {
            projection[i * config.out_dim + i] = 1.0;
        }
        Ok(Self { config, projection })
    }

    pub fn with_projection(config: EncoderConfig, projection: Vec<f32>) -> Result<Self> {
        let params = Self { config, projection };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.config.base_dim * self.config.out_dim;
        if self.projection.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: self.projection.len(),
            });
        }
        if self.projection.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(
                "projection has non-finite entries".into(),
            ));
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    /// SHA-256 over the configuration and projection bytes.
    pub fn config_hash(&self) -> String {
        let c = &self.config;
        let mut h = Sha256::new();
        for v in [c.base_dim, c.out_dim, c.query_len, c.max_passage_len] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(c.seed.to_le_bytes());
        for v in &self.projection {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn base_embedding(&self, token: u32) -> Vec<f64> {
        base_embedding(self.config.seed, token, self.config.base_dim)
    }

    /// Projects a base vector and rescales it to unit length. A vector that
    /// projects to zero maps to the first basis vector.
    pub fn project_normalized(&self, base: &[f64]) -> Vec<f64> {
        let out_dim = self.config.out_dim;
        let mut u = vec![0.0f64; out_dim];
        for (b, &x) in base.iter().enumerate() {
            let row = &self.projection[b * out_dim..(b + 1) * out_dim];
            for (acc, &w) in u.iter_mut().zip(row) {
                *acc += x * f64::from(w);
            }
        }
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            u.iter_mut().for_each(|v| *v /= norm);
        } else {
            u.iter_mut().for_each(|v| *v = 0.0);
            u[0] = 1.0;
        }
        u
    }

    /// Projected, normalized embedding of a single token.
    pub fn token_vector(&self, token: u32) -> Vec<f64> {
        self.project_normalized(&self.base_embedding(token))
    }

    fn embed(&self, kind: MatrixKind, ids: &[u32]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(ids.len() * self.config.out_dim);
        for &id in ids {
            data.extend(self.token_vector(id).into_iter().map(|v| v as f32));
        }
        EmbeddingMatrix {
            kind,
            dim: self.config.out_dim,
            data,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        embfile::write_entries(
            dir.join(CHECKPOINT_MATRIX),
            self.config.out_dim,
            [EntryRef {
                id: 0,
                data: &self.projection,
            }]
            .into_iter(),
        )?;
        let meta = CheckpointMeta {
            config: self.config,
            config_hash: self.config_hash(),
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json("checkpoint", e))?;
        let path = dir.join(CHECKPOINT_META);
        fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(CHECKPOINT_META);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)
            .map_err(|e| Error::json(meta_path.display().to_string(), e))?;
        let raw = embfile::read_entries(dir.join(CHECKPOINT_MATRIX))?;
        if raw.dim != meta.config.out_dim {
            return Err(Error::DimensionMismatch {
                expected: meta.config.out_dim,
                found: raw.dim,
            });
        }
        let projection = match raw.entries.into_iter().next() {
            Some((_, data)) => data,
            None => Vec::new(),
        };
        Self::with_projection(meta.config, projection)
    }
}

/// Deterministic base vector for `token`: `dim` entries uniform in [-1, 1)
/// drawn from a ChaCha8 stream keyed by the seed and the token id.
pub fn base_embedding(seed: u64, token: u32, dim: usize) -> Vec<f64> {
    let key = seed.rotate_left(32) ^ u64::from(token).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Query tokens truncated to, or MASK-padded up to, `query_len`.
pub fn query_tokens(question: &str, query_len: usize) -> TokenSequence {
    let mut seq = tokenize::tokenize(question, Mode::Query);
    seq.ids.resize(query_len, MASK);
    seq
}

/// Passage tokens truncated to `max_len`.
pub fn passage_tokens(passage: &Passage, max_len: usize) -> TokenSequence {
    let mut seq = tokenize::tokenize_passage(passage);
    seq.ids.truncate(max_len);
    seq
}

pub fn encode_query(question: &str, params: &EncoderParams) -> EmbeddingMatrix {
    let seq = query_tokens(question, params.config.query_len);
    params.embed(MatrixKind::Query, &seq.ids)
}

pub fn encode_passage(passage: &Passage, params: &EncoderParams) -> Result<EmbeddingMatrix> {
    if passage.body.trim().is_empty() {
        return Err(Error::EmptyPassage(passage.pid));
    }
    let seq = passage_tokens(passage, params.config.max_passage_len);
    Ok(params.embed(MatrixKind::Passage, &seq.ids))
}
