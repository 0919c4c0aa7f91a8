use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub qid: u64,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default)]
    pub gold_pids: Vec<u64>,
}

/// Question text keyed by qid, with no access to answers.
pub type QuestionTexts = BTreeMap<u64, String>;

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    examples: Vec<QaExample>,
    slots: HashMap<u64, usize>,
}

impl Dataset {
    pub fn new(examples: Vec<QaExample>) -> Result<Self> {
        let mut slots = HashMap::with_capacity(examples.len());
        for (slot, ex) in examples.iter().enumerate() {
            if ex.answers.is_empty() {
                return Err(Error::InvalidField {
                    what: format!("question {}", ex.qid),
                    reason: "answers must be non-empty".into(),
                });
            }
            if slots.insert(ex.qid, slot).is_some() {
                return Err(Error::DuplicateId {
                    kind: "question",
                    id: ex.qid,
                });
            }
        }
        Ok(Self { examples, slots })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut examples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ex: QaExample = serde_json::from_str(line).map_err(|e| Error::Malformed {
                path: path.to_owned(),
                line: i + 1,
                message: e.to_string(),
            })?;
            examples.push(ex);
        }
        Self::new(examples)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for ex in &self.examples {
            serde_json::to_writer(&mut out, ex).map_err(|e| Error::json("dataset", e))?;
            out.push(b'\n');
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }

    /// Checks that every gold pid refers to a passage of `corpus`.
    pub fn validate_gold(&self, corpus: &Corpus) -> Result<()> {
        for ex in &self.examples {
            if let Some(&pid) = ex.gold_pids.iter().find(|&&p| corpus.get(p).is_none()) {
                return Err(Error::UnknownPid(pid));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[QaExample] {
        &self.examples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, QaExample> {
        self.examples.iter()
    }

    pub fn get(&self, qid: u64) -> Option<&QaExample> {
        self.slots.get(&qid).map(|&s| &self.examples[s])
    }

    pub fn question_texts(&self) -> QuestionTexts {
        self.examples
            .iter()
            .map(|ex| (ex.qid, ex.question.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_qid_and_empty_answers() {
        let ex = |qid, answers: &[&str]| QaExample {
            qid,
            question: "q".into(),
            answers: answers.iter().map(|s| s.to_string()).collect(),
            gold_pids: vec![],
        };
        assert!(matches!(
            Dataset::new(vec![ex(1, &["a"]), ex(1, &["b"])]),
            Err(Error::DuplicateId { id: 1, .. })
        ));
        assert!(matches!(
            Dataset::new(vec![ex(1, &[])]),
            Err(Error::InvalidField { .. })
        ));
    }

    #[test]
    fn jsonl_round_trip_and_optional_gold() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        fs::write(
            &path,
            "{\"qid\": 3, \"question\": \"who?\", \"answers\": [\"me\"]}\n\n\
             {\"qid\": 4, \"question\": \"what?\", \"answers\": [\"it\", \"that\"], \"gold_pids\": [9]}\n",
        )
        .unwrap();
        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.get(3).unwrap().gold_pids.is_empty());
        assert_eq!(ds.get(4).unwrap().gold_pids, vec![9]);

        let again = dir.path().join("again.jsonl");
        ds.save(&again).unwrap();
        assert_eq!(Dataset::load(&again).unwrap().examples(), ds.examples());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        fs::write(
            &path,
            "{\"qid\": 1, \"question\": \"q\", \"answers\": [\"a\"]}\nnot json\n",
        )
        .unwrap();
        match Dataset::load(&path) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
