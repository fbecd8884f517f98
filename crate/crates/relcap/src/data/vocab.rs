//! Token vocabularies and the answer candidate list.

use std::collections::{BTreeMap, HashMap};

use sha2::{Digest, Sha256};

use super::{DataError, ExampleRecord};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const START: usize = 2;
pub const END: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<start>", "<end>"];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from whitespace-tokenized lowercase text. Tokens seen fewer
    /// than `min_count` times fold into `<unk>`. Order: descending count,
    /// ties alphabetical, after the four specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Vocab {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for tok in text.split_whitespace() {
                *counts.entry(tok.to_lowercase()).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, n)| *n >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Vocab::from_tokens(tokens).expect("constructed token list is well-formed")
    }

    /// Rebuild from a stored token list (specials first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab, DataError> {
        if tokens.len() < SPECIALS.len()
            || tokens[..SPECIALS.len()].iter().map(String::as_str).ne(SPECIALS)
        {
            return Err(DataError::Config(
                "vocabulary must start with <pad>, <unk>, <start>, <end>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DataError::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn decode(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Content hash for checkpoint compatibility checks.
    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        format!("{:x}", h.finalize())
    }
}

/// Build question/caption vocabularies and the answer candidate list.
///
/// Candidates are the answers that carry full score in at least
/// `min_answer_count` records; partial-credit answers that never appear as a
/// true answer are not candidates (their score mass drops at encode time
/// with a warning, mirroring open-vocabulary answers at full scale).
pub fn build_vocabs(
    records: &[ExampleRecord],
    min_word_count: usize,
    min_answer_count: usize,
) -> Result<(Vocab, Vocab, Vec<String>), DataError> {
    if records.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let question_vocab = Vocab::build(records.iter().map(|r| r.question.as_str()), min_word_count);
    let caption_vocab = Vocab::build(
        records.iter().flat_map(|r| r.captions.iter().map(String::as_str)),
        min_word_count,
    );
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        for (answer, score) in &r.answer_scores {
            if *score >= 1.0 {
                *counts.entry(answer.as_str()).or_default() += 1;
            }
        }
    }
    let mut answers: Vec<(&str, usize)> =
        counts.into_iter().filter(|(_, n)| *n >= min_answer_count).collect();
    answers.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let answers: Vec<String> = answers.into_iter().map(|(a, _)| a.to_string()).collect();
    if answers.is_empty() {
        return Err(DataError::Config(format!(
            "no answer appears at least {min_answer_count} times"
        )));
    }
    Ok((question_vocab, caption_vocab, answers))
}
