//! Dataset persistence: JSON-lines manifest plus raw feature blob, with a
//! sidecar metadata file for generator-only fields.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::gen::{DataConfig, GeneratedDataset, GeneratedSplit, RecordMeta};
use super::vocab::Vocab;
use super::{DataError, ExampleRecord};

pub const SCHEMA_VERSION: u32 = 1;
const FEATURE_MAGIC: &[u8; 4] = b"RFEA";

/// Paths of one split's three files.
#[derive(Clone, Debug)]
pub struct SplitFiles {
    pub manifest: PathBuf,
    pub features: PathBuf,
    pub meta: PathBuf,
}

impl SplitFiles {
    pub fn in_dir(dir: &Path, split: &str) -> SplitFiles {
        SplitFiles {
            manifest: dir.join(format!("{split}.manifest.jsonl")),
            features: dir.join(format!("{split}.features.bin")),
            meta: dir.join(format!("{split}.meta.jsonl")),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    image_id: String,
    question: String,
    captions: Vec<String>,
    answer_scores: BTreeMap<String, f64>,
    relevant_caption_index: usize,
    feature_offset: u64,
    feature_shape: [usize; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    attention_truth: Option<Vec<f64>>,
}

/// Write bytes to a temp file in the target directory, then rename into
/// place, so readers never observe partial content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn save_split(files: &SplitFiles, split: &GeneratedSplit) -> Result<(), DataError> {
    let mut blob: Vec<u8> = Vec::new();
    let mut manifest = Vec::new();
    for rec in &split.records {
        let offset = blob.len() as u64;
        for v in &rec.features {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let line = ManifestLine {
            image_id: rec.image_id.clone(),
            question: rec.question.clone(),
            captions: rec.captions.clone(),
            answer_scores: rec.answer_scores.clone(),
            relevant_caption_index: rec.relevant_caption_index,
            feature_offset: offset,
            feature_shape: [rec.object_count, rec.feature_dim],
            attention_truth: rec.attention_truth.clone(),
        };
        manifest.extend_from_slice(serde_json::to_string(&line)?.as_bytes());
        manifest.push(b'\n');
    }
    let mut framed = Vec::with_capacity(blob.len() + 12);
    framed.extend_from_slice(FEATURE_MAGIC);
    framed.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    framed.extend_from_slice(&blob);
    write_atomic(&files.features, &framed)?;
    write_atomic(&files.manifest, &manifest)?;

    let mut meta = Vec::new();
    for m in &split.metas {
        meta.extend_from_slice(serde_json::to_string(m)?.as_bytes());
        meta.push(b'\n');
    }
    write_atomic(&files.meta, &meta)?;
    Ok(())
}

pub fn load_split(files: &SplitFiles) -> Result<GeneratedSplit, DataError> {
    let framed = fs::read(&files.features)?;
    if framed.len() < 12 || &framed[..4] != FEATURE_MAGIC {
        return Err(DataError::Blob("missing RFEA header".into()));
    }
    let declared = u64::from_le_bytes(framed[4..12].try_into().unwrap()) as usize;
    let payload = &framed[12..];
    if declared != payload.len() {
        return Err(DataError::Blob(format!(
            "length header says {declared} bytes, file carries {}",
            payload.len()
        )));
    }

    let reader = BufReader::new(fs::File::open(&files.manifest)?);
    let mut records = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| DataError::Record { index, msg: format!("bad manifest line: {e}") })?;
        let [rows, cols] = m.feature_shape;
        let start = m.feature_offset as usize;
        let bytes = rows * cols * 8;
        if start + bytes > payload.len() {
            return Err(DataError::Record {
                index,
                msg: format!(
                    "feature slice {start}..{} overruns blob of {} bytes",
                    start + bytes,
                    payload.len()
                ),
            });
        }
        let features: Vec<f64> = payload[start..start + bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(truth) = &m.attention_truth {
            if truth.len() != 196 {
                return Err(DataError::Record {
                    index,
                    msg: format!("attention_truth has {} cells, expected 196", truth.len()),
                });
            }
        }
        records.push(ExampleRecord {
            image_id: m.image_id,
            question: m.question,
            captions: m.captions,
            answer_scores: m.answer_scores,
            relevant_caption_index: m.relevant_caption_index,
            features,
            object_count: rows,
            feature_dim: cols,
            attention_truth: m.attention_truth,
        });
    }

    // The metadata sidecar is generator-only; externally produced datasets
    // may omit it.
    let metas = if files.meta.exists() {
        let reader = BufReader::new(fs::File::open(&files.meta)?);
        let mut metas = Vec::new();
        for (index, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let m: RecordMeta = serde_json::from_str(&line)
                .map_err(|e| DataError::Record { index, msg: format!("bad meta line: {e}") })?;
            metas.push(m);
        }
        if metas.len() != records.len() {
            return Err(DataError::Blob(format!(
                "{} meta lines against {} records",
                metas.len(),
                records.len()
            )));
        }
        metas
    } else {
        Vec::new()
    };

    Ok(GeneratedSplit { records, metas })
}

#[derive(Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub seed: u64,
    pub config: DataConfig,
    pub splits: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    question: Vec<String>,
    caption: Vec<String>,
    answers: Vec<String>,
}

pub fn save_dataset(
    dir: &Path,
    seed: u64,
    cfg: &DataConfig,
    data: &GeneratedDataset,
) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let header = DatasetHeader {
        schema_version: SCHEMA_VERSION,
        seed,
        config: cfg.clone(),
        splits: vec!["train".into(), "val".into()],
    };
    write_atomic(&dir.join("dataset.json"), serde_json::to_string_pretty(&header)?.as_bytes())?;
    save_split(&SplitFiles::in_dir(dir, "train"), &data.train)?;
    save_split(&SplitFiles::in_dir(dir, "val"), &data.val)?;
    Ok(())
}

pub fn load_header(dir: &Path) -> Result<DatasetHeader, DataError> {
    let header: DatasetHeader = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(DataError::Schema { got: header.schema_version, expected: SCHEMA_VERSION });
    }
    Ok(header)
}

pub fn save_vocabs(
    dir: &Path,
    question: &Vocab,
    caption: &Vocab,
    answers: &[String],
) -> Result<(), DataError> {
    let file = VocabFile {
        question: question.tokens().to_vec(),
        caption: caption.tokens().to_vec(),
        answers: answers.to_vec(),
    };
    write_atomic(&dir.join("vocab.json"), serde_json::to_string_pretty(&file)?.as_bytes())?;
    Ok(())
}

pub fn load_vocabs(dir: &Path) -> Result<(Vocab, Vocab, Vec<String>), DataError> {
    let file: VocabFile = serde_json::from_str(&fs::read_to_string(dir.join("vocab.json"))?)?;
    Ok((Vocab::from_tokens(file.question)?, Vocab::from_tokens(file.caption)?, file.answers))
}
