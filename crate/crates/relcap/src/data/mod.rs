//! Synthetic desk-scene dataset: generation, vocabularies, encoding, and the
//! on-disk manifest/blob format (also the ingestion point for externally
//! produced per-object features).

pub mod encode;
pub mod gen;
pub mod io;
pub mod vocab;

use std::collections::BTreeMap;

use crate::attn_eval::AttnError;

pub use encode::{
    decode_caption, decode_question, encode_example, normalize_tokens, EncodedExample,
    MAX_QUESTION_TOKENS,
};
pub use gen::{
    generate, DataConfig, GeneratedDataset, GeneratedSplit, ObjectSpec, QuestionKind, RecordMeta,
    SceneSpec, CATEGORIES, COLORS, COUNT_WORDS, SIZES,
};
pub use io::{
    load_header, load_split, load_vocabs, save_dataset, save_split, save_vocabs, write_atomic,
    DatasetHeader, SplitFiles, SCHEMA_VERSION,
};
pub use vocab::{build_vocabs, Vocab, END, PAD, START, UNK};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("captions per question must be at least 2, got {0}")]
    TooFewCaptions(usize),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("record {index}: {msg}")]
    Record { index: usize, msg: String },
    #[error("schema version {got}, expected {expected}")]
    Schema { got: u32, expected: u32 },
    #[error("feature blob corrupt: {0}")]
    Blob(String),
    #[error(transparent)]
    Attention(#[from] AttnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One training item: per-object features, question, gold captions, soft
/// answer scores, and optional ground-truth attention.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleRecord {
    pub image_id: String,
    pub question: String,
    pub captions: Vec<String>,
    /// Answer string to soft score in [0, 1]; ordered map so serialization
    /// is deterministic.
    pub answer_scores: BTreeMap<String, f64>,
    /// Which caption the generator planted as question-relevant. Evaluation
    /// metadata; the model never sees it.
    pub relevant_caption_index: usize,
    /// `object_count x feature_dim`, row-major, valid rows only.
    pub features: Vec<f64>,
    pub object_count: usize,
    pub feature_dim: usize,
    /// Row-major 14x14 mass distribution over the target objects, absent
    /// when the question has no target (count 0, existence "no").
    pub attention_truth: Option<Vec<f64>>,
}
