//! Passage collection, QA datasets, tokenization and answer matching.
//!
//! The corpus file is UTF-8 TSV with one passage per line: `pid`, `body`,
//! `title`. An optional `id\ttext\ttitle` header line is accepted and is
//! always written by [`Corpus::save`].

mod answer;
mod dataset;
pub mod tokenize;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

pub use answer::{contains_answer, normalize_answer, normalize_text, AnswerMatcher, MatchMode};
pub use dataset::{Dataset, QaExample, QuestionTexts};
pub use tokenize::{tokenize, tokenize_passage, Mode, TokenSequence};

use crate::error::{Error, Result};

const HEADER: &str = "id\ttext\ttitle";

/// Separator placed between title and body when a passage is rendered.
pub const TITLE_SEPARATOR: &str = " | ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub pid: u64,
    pub title: String,
    pub body: String,
}

impl Passage {
    pub fn new(pid: u64, title: impl Into<String>, body: impl Into<String>) -> Result<Self> {
        let passage = Self {
            pid,
            title: title.into(),
            body: body.into(),
        };
        if passage.body.trim().is_empty() {
            return Err(Error::EmptyPassage(pid));
        }
        Ok(passage)
    }

    /// Title prepended to the body.
    pub fn rendered(&self) -> String {
        render(&self.title, &self.body)
    }
}

pub fn render(title: &str, body: &str) -> String {
    format!("{title}{TITLE_SEPARATOR}{body}")
}

/// Immutable passage collection, in file order.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    passages: Vec<Passage>,
    slots: HashMap<u64, usize>,
}

impl Corpus {
    pub fn new(passages: Vec<Passage>) -> Result<Self> {
        let mut slots = HashMap::with_capacity(passages.len());
        for (slot, p) in passages.iter().enumerate() {
            if p.body.trim().is_empty() {
                return Err(Error::EmptyPassage(p.pid));
            }
            if slots.insert(p.pid, slot).is_some() {
                return Err(Error::DuplicateId {
                    kind: "passage",
                    id: p.pid,
                });
            }
        }
        Ok(Self { passages, slots })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let malformed = |line: usize, message: String| Error::Malformed {
            path: path.to_owned(),
            line,
            message,
        };

        let mut passages = Vec::new();
        let mut slots = HashMap::new();
        for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
            let line_no = i + 1;
            let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
            if raw.is_empty() {
                continue;
            }
            let line = std::str::from_utf8(raw)
                .map_err(|e| malformed(line_no, format!("invalid UTF-8: {e}")))?;
            if i == 0 && line == HEADER {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [pid, body, title] = fields[..] else {
                return Err(malformed(
                    line_no,
                    format!("expected 3 tab-separated fields, found {}", fields.len()),
                ));
            };
            let pid: u64 = pid
                .trim()
                .parse()
                .map_err(|e| malformed(line_no, format!("bad passage id {pid:?}: {e}")))?;
            if body.trim().is_empty() {
                return Err(malformed(
                    line_no,
                    format!("passage {pid} has an empty body"),
                ));
            }
            if slots.insert(pid, passages.len()).is_some() {
                return Err(Error::DuplicateId {
                    kind: "passage",
                    id: pid,
                });
            }
            passages.push(Passage {
                pid,
                title: title.to_owned(),
                body: body.to_owned(),
            });
        }
        tracing::debug!(count = passages.len(), path = %path.display(), "loaded corpus");
        Ok(Self { passages, slots })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::with_capacity(self.passages.len() * 64);
        out.push_str(HEADER);
        out.push('\n');
        for p in &self.passages {
            for (what, field) in [("body", &p.body), ("title", &p.title)] {
                if field.contains(['\t', '\n', '\r']) {
                    return Err(Error::InvalidField {
                        what: format!("passage {} {what}", p.pid),
                        reason: "tabs and line breaks cannot be stored in TSV".into(),
                    });
                }
            }
            out.push_str(&format!("{}\t{}\t{}\n", p.pid, p.body, p.title));
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Passage> {
        self.passages.iter()
    }

    pub fn get(&self, pid: u64) -> Option<&Passage> {
        self.slots.get(&pid).map(|&s| &self.passages[s])
    }

    pub fn require(&self, pid: u64) -> Result<&Passage> {
        self.get(pid).ok_or(Error::UnknownPid(pid))
    }
}
