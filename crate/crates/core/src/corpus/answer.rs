//! Answer-string matching against passages.

use unicode_normalization::UnicodeNormalization;

use super::Passage;

/// How a normalized answer must occur inside normalized passage text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchMode {
    /// Raw substring occurrence.
    #[default]
    Substring,
    /// Occurrence bounded by non-alphanumeric characters or the text ends.
    TokenBoundary,
}

/// Case-fold, NFKC and collapse whitespace.
pub fn normalize_text(text: &str) -> String {
    let folded = text.nfkc().collect::<String>().to_lowercase();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// [`normalize_text`] plus stripping of leading and trailing punctuation.
pub fn normalize_answer(answer: &str) -> String {
    let text = normalize_text(answer);
    text.trim_matches(|c: char| !c.is_alphanumeric()).to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnswerMatcher {
    pub include_title: bool,
    pub mode: MatchMode,
}

impl Default for AnswerMatcher {
    fn default() -> Self {
        Self {
            include_title: true,
            mode: MatchMode::Substring,
        }
    }
}

impl AnswerMatcher {
    pub fn new(include_title: bool) -> Self {
        Self {
            include_title,
            ..Self::default()
        }
    }

    /// Normalizes a set of answers once so it can be reused across passages.
    /// Answers that normalize to the empty string are dropped; they would
    /// otherwise match everything.
    pub fn prepare(answers: &[String]) -> Vec<String> {
        answers
            .iter()
            .map(|a| normalize_answer(a))
            .filter(|a| !a.is_empty())
            .collect()
    }

    pub fn matches(&self, passage: &Passage, answers: &[String]) -> bool {
        self.matches_prepared(passage, &Self::prepare(answers))
    }

    pub fn matches_prepared(&self, passage: &Passage, prepared: &[String]) -> bool {
        if prepared.is_empty() {
            return false;
        }
        let body = normalize_text(&passage.body);
        if prepared.iter().any(|a| self.occurs(&body, a)) {
            return true;
        }
        if self.include_title {
            let title = normalize_text(&passage.title);
            return prepared.iter().any(|a| self.occurs(&title, a));
        }
        false
    }

    fn occurs(&self, haystack: &str, needle: &str) -> bool {
        match self.mode {
            MatchMode::Substring => haystack.contains(needle),
            MatchMode::TokenBoundary => haystack.match_indices(needle).any(|(at, m)| {
                let before = haystack[..at].chars().next_back();
                let after = haystack[at + m.len()..].chars().next();
                !before.is_some_and(char::is_alphanumeric)
                    && !after.is_some_and(char::is_alphanumeric)
            }),
        }
    }
}

/// True iff any normalized answer occurs in the normalized passage text.
/// Title and body are matched separately so no match can straddle them.
pub fn contains_answer(passage: &Passage, answers: &[String], include_title: bool) -> bool {
    AnswerMatcher::new(include_title).matches(passage, answers)
}
