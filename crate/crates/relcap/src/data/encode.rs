//! Turning raw records into model-ready index/score tensors.

use log::warn;

use super::vocab::{Vocab, END, PAD, START};
use super::{DataError, ExampleRecord};
use crate::attn_eval::GRID_SIDE;

pub const MAX_QUESTION_TOKENS: usize = 14;
/// Log marker for answer mass dropped because the string is not a candidate.
pub const ANSWER_MISS_WARNING: &str = "answer not in candidate list, dropping its score mass";

/// One example in index space, padded and masked for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub image_id: String,
    /// Length `max_question_tokens`, `<pad>`-filled past `question_len`.
    pub question_tokens: Vec<usize>,
    pub question_len: usize,
    /// Each caption is `<start> tokens… <end>`.
    pub captions: Vec<Vec<usize>>,
    /// Dense soft scores over the candidate list.
    pub answer_scores: Vec<f64>,
    /// `max_objects x feature_dim`, zero rows past `valid_objects`.
    pub features: Vec<f64>,
    pub valid_objects: usize,
    pub feature_dim: usize,
    pub max_objects: usize,
    pub relevant_caption_index: usize,
    pub attention_truth: Option<Vec<f64>>,
}

pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

pub fn encode_example(
    rec: &ExampleRecord,
    question_vocab: &Vocab,
    caption_vocab: &Vocab,
    answers: &[String],
    max_question_tokens: usize,
    max_caption_tokens: usize,
    max_objects: usize,
) -> Result<EncodedExample, DataError> {
    let err = |msg: String| DataError::Record { index: 0, msg };

    let q_tokens = normalize_tokens(&rec.question);
    if q_tokens.is_empty() {
        return Err(err("empty question".into()));
    }
    let question_len = q_tokens.len().min(max_question_tokens);
    let mut question_tokens: Vec<usize> =
        q_tokens.iter().take(question_len).map(|t| question_vocab.encode(t)).collect();
    question_tokens.resize(max_question_tokens, PAD);

    let mut captions = Vec::with_capacity(rec.captions.len());
    for (i, c) in rec.captions.iter().enumerate() {
        let toks = normalize_tokens(c);
        if toks.is_empty() {
            return Err(err(format!("caption {i} is empty")));
        }
        let mut ids = Vec::with_capacity(toks.len().min(max_caption_tokens) + 2);
        ids.push(START);
        ids.extend(toks.iter().take(max_caption_tokens).map(|t| caption_vocab.encode(t)));
        ids.push(END);
        captions.push(ids);
    }
    if rec.relevant_caption_index >= captions.len() {
        return Err(err(format!(
            "relevant caption index {} out of range for {} captions",
            rec.relevant_caption_index,
            captions.len()
        )));
    }

    if answers.is_empty() {
        return Err(DataError::Config("empty answer candidate list".into()));
    }
    let mut answer_scores = vec![0.0; answers.len()];
    for (answer, score) in &rec.answer_scores {
        match answers.iter().position(|a| a == answer) {
            Some(j) => answer_scores[j] = *score,
            None => warn!("{ANSWER_MISS_WARNING}: {answer:?} (score {score})"),
        }
    }

    if rec.features.len() != rec.object_count * rec.feature_dim {
        return Err(err(format!(
            "feature matrix has {} values, expected {}x{}",
            rec.features.len(),
            rec.object_count,
            rec.feature_dim
        )));
    }
    if rec.object_count == 0 {
        return Err(err("record has no objects".into()));
    }
    if rec.object_count > max_objects {
        return Err(err(format!(
            "{} objects exceed the configured maximum {max_objects}",
            rec.object_count
        )));
    }
    let mut features = rec.features.clone();
    features.resize(max_objects * rec.feature_dim, 0.0);

    if let Some(truth) = &rec.attention_truth {
        if truth.len() != GRID_SIDE * GRID_SIDE {
            return Err(err(format!("attention truth has {} cells", truth.len())));
        }
    }

    Ok(EncodedExample {
        image_id: rec.image_id.clone(),
        question_tokens,
        question_len,
        captions,
        answer_scores,
        features,
        valid_objects: rec.object_count,
        feature_dim: rec.feature_dim,
        max_objects,
        relevant_caption_index: rec.relevant_caption_index,
        attention_truth: rec.attention_truth.clone(),
    })
}

/// Question tokens back to text; inverse of encode on in-vocabulary input.
pub fn decode_question(tokens: &[usize], len: usize, vocab: &Vocab) -> Vec<String> {
    tokens[..len].iter().filter_map(|id| vocab.decode(*id).map(str::to_string)).collect()
}

/// Caption token ids back to words, stripping the start/end wrapper.
pub fn decode_caption(ids: &[usize], vocab: &Vocab) -> Vec<String> {
    ids.iter()
        .filter(|id| ![START, END, PAD].contains(id))
        .filter_map(|id| vocab.decode(*id).map(str::to_string))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen::{generate, DataConfig};
    use crate::data::vocab::build_vocabs;

    fn sample() -> (Vec<ExampleRecord>, Vocab, Vocab, Vec<String>) {
        let cfg = DataConfig { train_examples: 40, val_examples: 8, ..DataConfig::default() };
        let data = generate(&cfg, 31).unwrap();
        let (qv, cv, answers) = build_vocabs(&data.train.records, 1, 1).unwrap();
        (data.train.records, qv, cv, answers)
    }

    #[test]
    fn question_round_trip_matches_normalization() {
        let (records, qv, cv, answers) = sample();
        for rec in &records {
            let enc = encode_example(rec, &qv, &cv, &answers, 14, 12, 8).unwrap();
            let decoded = decode_question(&enc.question_tokens, enc.question_len, &qv);
            let expect: Vec<String> =
                normalize_tokens(&rec.question).into_iter().take(14).collect();
            assert_eq!(decoded, expect);
        }
    }

    #[test]
    fn caption_round_trip_matches_normalization() {
        let (records, qv, cv, answers) = sample();
        for rec in &records {
            let enc = encode_example(rec, &qv, &cv, &answers, 14, 12, 8).unwrap();
            for (raw, ids) in rec.captions.iter().zip(&enc.captions) {
                assert_eq!(ids[0], START);
                assert_eq!(*ids.last().unwrap(), END);
                let decoded = decode_caption(ids, &cv);
                let expect: Vec<String> =
                    normalize_tokens(raw).into_iter().take(12).collect();
                assert_eq!(decoded, expect);
            }
        }
    }

    #[test]
    fn long_question_is_trimmed() {
        let (records, qv, cv, answers) = sample();
        let mut rec = records[0].clone();
        rec.question = (0..16).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let enc = encode_example(&rec, &qv, &cv, &answers, 14, 12, 8).unwrap();
        assert_eq!(enc.question_len, 14);
    }

    #[test]
    fn empty_caption_is_an_error() {
        let (records, qv, cv, answers) = sample();
        let mut rec = records[0].clone();
        rec.captions[0] = "   ".into();
        assert!(encode_example(&rec, &qv, &cv, &answers, 14, 12, 8).is_err());
    }

    #[test]
    fn unknown_answer_mass_is_dropped() {
        let (records, qv, cv, answers) = sample();
        let mut rec = records[0].clone();
        rec.answer_scores.insert("zebra".into(), 0.4);
        let enc = encode_example(&rec, &qv, &cv, &answers, 14, 12, 8).unwrap();
        let total_in: f64 = rec
            .answer_scores
            .iter()
            .filter(|(k, _)| answers.contains(k))
            .map(|(_, v)| v)
            .sum();
        let total_out: f64 = enc.answer_scores.iter().sum();
        assert!((total_out - total_in).abs() < 1e-12);
    }

    #[test]
    fn too_many_objects_rejected() {
        let (records, qv, cv, answers) = sample();
        let rec = records.iter().find(|r| r.object_count > 2).unwrap();
        assert!(encode_example(rec, &qv, &cv, &answers, 14, 12, 2).is_err());
    }

    #[test]
    fn pad_fills_question_tail() {
        let (records, qv, cv, answers) = sample();
        for rec in &records {
            let enc = encode_example(rec, &qv, &cv, &answers, 14, 12, 8).unwrap();
            for t in &enc.question_tokens[enc.question_len..] {
                assert_eq!(*t, PAD);
            }
        }
    }
}
