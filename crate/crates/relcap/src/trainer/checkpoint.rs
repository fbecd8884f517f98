//! Versioned binary checkpoints.
//!
//! Layout: 4-byte magic, u32 version, u64 manifest length, the manifest as
//! JSON, then every named array as packed little-endian f64 in manifest
//! order. Arrays cover the parameters followed by both optimizer moment
//! sets, so a loaded trainer continues bit-for-bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::model::{Model, ModelConfig};

use super::{AdaMax, Trainer};

pub const MAGIC: [u8; 4] = *b"RCAP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayDesc {
    pub name: String,
    pub len: usize,
}

/// Everything outside the arrays: run cursor, optimizer scalars, the model
/// shape needed to rebuild the parameter set, and vocabulary fingerprints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub phase: u8,
    pub epoch: usize,
    pub batch: usize,
    pub seed: u64,
    pub base_lr: f64,
    pub track_planted: bool,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub model: ModelConfig,
    pub question_vocab: usize,
    pub caption_vocab: usize,
    pub answers: usize,
    pub feature_dim: usize,
    pub question_vocab_sha: String,
    pub caption_vocab_sha: String,
    pub arrays: Vec<ArrayDesc>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    Magic,
    #[error("checkpoint version {got}, expected {expected}")]
    Version { got: u32, expected: u32 },
    #[error("checkpoint truncated at the {0}")]
    Truncated(&'static str),
    #[error("{which} vocabulary hash does not match the checkpoint")]
    VocabHash { which: &'static str },
    #[error("array layout mismatch: {0}")]
    Layout(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn array_plan(model: &Model) -> Vec<ArrayDesc> {
    let ps = &model.params;
    let mut arrays = Vec::with_capacity(ps.len() * 3);
    for prefix in ["param", "adamax.m", "adamax.u"] {
        for (_, name, t) in ps.iter() {
            arrays.push(ArrayDesc { name: format!("{prefix}.{name}"), len: t.len() });
        }
    }
    arrays
}

fn push_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(data: &[u8], off: &mut usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(f64::from_le_bytes(data[*off..*off + 8].try_into().unwrap()));
        *off += 8;
    }
    out
}

pub fn save_checkpoint(
    path: &Path,
    tr: &Trainer,
    question_vocab_sha: &str,
    caption_vocab_sha: &str,
) -> Result<(), CheckpointError> {
    let manifest = Manifest {
        phase: tr.phase,
        epoch: tr.epoch,
        batch: tr.batch,
        seed: tr.seed,
        base_lr: tr.base_lr,
        track_planted: tr.track_planted,
        lr: tr.opt.lr,
        beta1: tr.opt.beta1,
        beta2: tr.opt.beta2,
        eps: tr.opt.eps,
        step: tr.opt.step,
        model: tr.model.cfg.clone(),
        question_vocab: tr.model.question_vocab,
        caption_vocab: tr.model.caption_vocab,
        answers: tr.model.answers,
        feature_dim: tr.model.feature_dim,
        question_vocab_sha: question_vocab_sha.to_string(),
        caption_vocab_sha: caption_vocab_sha.to_string(),
        arrays: array_plan(&tr.model),
    };
    let mjson = serde_json::to_vec(&manifest)?;
    let total: usize = manifest.arrays.iter().map(|a| a.len).sum();
    let mut buf = Vec::with_capacity(16 + mjson.len() + total * 8);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    buf.extend_from_slice(&mjson);
    let ps = &tr.model.params;
    for id in ps.ids() {
        push_f64s(&mut buf, ps.get(id).values());
    }
    for m in &tr.opt.m {
        push_f64s(&mut buf, m);
    }
    for u in &tr.opt.u {
        push_f64s(&mut buf, u);
    }
    write_atomic(path, &buf)?;
    Ok(())
}

/// Rebuild a trainer. When vocabulary hashes are given, they must match the
/// stored ones.
pub fn load_checkpoint(
    path: &Path,
    expect_vocab_shas: Option<(&str, &str)>,
) -> Result<(Trainer, Manifest), CheckpointError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated("header"));
    }
    if bytes[..4] != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { got: version, expected: CHECKPOINT_VERSION });
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(CheckpointError::Truncated("manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])?;
    if let Some((q, c)) = expect_vocab_shas {
        if q != manifest.question_vocab_sha {
            return Err(CheckpointError::VocabHash { which: "question" });
        }
        if c != manifest.caption_vocab_sha {
            return Err(CheckpointError::VocabHash { which: "caption" });
        }
    }

    let mut model = Model::new(
        manifest.model.clone(),
        manifest.question_vocab,
        manifest.caption_vocab,
        manifest.answers,
        manifest.feature_dim,
        manifest.seed,
    );
    let plan = array_plan(&model);
    if plan != manifest.arrays {
        return Err(CheckpointError::Layout(format!(
            "stored {} arrays, this configuration has {}",
            manifest.arrays.len(),
            plan.len()
        )));
    }
    let total: usize = plan.iter().map(|a| a.len).sum();
    let data = &bytes[16 + mlen..];
    if data.len() < total * 8 {
        return Err(CheckpointError::Truncated("arrays"));
    }
    if data.len() > total * 8 {
        return Err(CheckpointError::Layout(format!(
            "{} trailing bytes after the arrays",
            data.len() - total * 8
        )));
    }

    let mut off = 0;
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        let n = model.params.get(id).len();
        let vals = read_f64s(data, &mut off, n);
        model.params.get_mut(id).values_mut().copy_from_slice(&vals);
    }
    let mut opt = AdaMax::new(&model.params, manifest.lr);
    for i in 0..ids.len() {
        let n = opt.m[i].len();
        opt.m[i] = read_f64s(data, &mut off, n);
    }
    for i in 0..ids.len() {
        let n = opt.u[i].len();
        opt.u[i] = read_f64s(data, &mut off, n);
    }
    opt.beta1 = manifest.beta1;
    opt.beta2 = manifest.beta2;
    opt.eps = manifest.eps;
    opt.step = manifest.step;

    let trainer = Trainer {
        model,
        opt,
        phase: manifest.phase,
        epoch: manifest.epoch,
        batch: manifest.batch,
        seed: manifest.seed,
        base_lr: manifest.base_lr,
        track_planted: manifest.track_planted,
    };
    Ok((trainer, manifest))
}
