//! Two-phase optimization: pretraining on gold captions with online caption
//! selection, then fine-tuning on model-generated captions at a quartered
//! learning rate.
//!
//! A [`Trainer`] owns the model and optimizer plus a (phase, epoch, batch)
//! cursor. Every random choice is derived from the base seed and the cursor,
//! so a checkpointed run continues bit-for-bit where it stopped. Batch
//! members run their forward and backward passes in parallel; gradients are
//! then reduced sequentially in example order to keep sums associative-safe.

mod adamax;
mod checkpoint;
mod metrics;

pub use adamax::{clip_global_norm, AdaMax, BETA1, BETA2, EPS};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, ArrayDesc, CheckpointError, Manifest, CHECKPOINT_VERSION,
    MAGIC,
};
pub use metrics::{metrics_to_csv, read_metrics, write_metrics, MetricsRow};

use std::path::Path;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{TapeError, Var};
use crate::captioner::{GenMode, GeneratedCaption};
use crate::data::{EncodedExample, START};
use crate::model::Model;
use crate::seeds;
use crate::selection::{self, SelectionReport};

/// The divergence guard: batch losses above this abort training.
pub const LOSS_CEILING: f64 = 1e6;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("NaN gradient in {name}")]
    NanGradient { name: String },
    #[error("gradient set has {got} entries where {expected} were expected")]
    GradLayout { got: usize, expected: usize },
    #[error("loss diverged to {loss:.3e} at epoch {epoch}, batch {batch}")]
    Diverged { loss: f64, epoch: usize, batch: usize },
    #[error("caption dump row {row}: {msg}")]
    Dump { row: usize, msg: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { batch_size: 32, epochs: 20, lr: 0.002, clip_norm: 10.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::Config(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase2Config {
    pub epochs: usize,
    /// Multiplier on the phase-1 learning rate.
    pub lr_factor: f64,
    pub captions_per_pair: usize,
    pub max_len: usize,
    pub temperature: f64,
    /// Drop the caption loss term and skip selection during fine-tuning.
    pub vqa_only: bool,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Phase2Config {
            epochs: 10,
            lr_factor: 0.25,
            captions_per_pair: 5,
            max_len: 14,
            temperature: 1.0,
            vqa_only: false,
        }
    }
}

impl Phase2Config {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.captions_per_pair == 0 || self.max_len == 0 {
            return Err(TrainError::Config(
                "captions_per_pair and max_len must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(TrainError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(TrainError::Config(format!(
                "lr_factor must lie in (0, 1], got {}",
                self.lr_factor
            )));
        }
        Ok(())
    }
}

/// How each example's loss is assembled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SelectionMode {
    /// Answer loss plus the best feasible caption's loss; falls back to the
    /// answer loss alone when nothing is feasible or the model runs without
    /// captions.
    Joint { xi: f64 },
    /// Answer loss only, selection never computed.
    VqaOnly,
}

impl SelectionMode {
    fn xi(&self) -> Option<f64> {
        match self {
            SelectionMode::Joint { xi } => Some(*xi),
            SelectionMode::VqaOnly => None,
        }
    }
}

/// Model, optimizer, and the run cursor.
pub struct Trainer {
    pub model: Model,
    pub opt: AdaMax,
    pub phase: u8,
    /// Epoch the next step belongs to; continues across phases.
    pub epoch: usize,
    /// Next batch within the current epoch.
    pub batch: usize,
    pub seed: u64,
    /// Phase-1 learning rate, kept for the exact phase-2 scaling.
    pub base_lr: f64,
    /// Whether `planted_recovery` is meaningful (gold captions in play).
    pub track_planted: bool,
}

#[derive(Default)]
struct EpochAccum {
    loss_sum: f64,
    examples: usize,
    selection_ran: usize,
    feasible: usize,
    recovered: usize,
    g_sum: f64,
    g_count: usize,
}

impl EpochAccum {
    fn absorb(&mut self, loss: f64, report: Option<&SelectionReport>, planted: usize) {
        self.loss_sum += loss;
        self.examples += 1;
        if let Some(rep) = report {
            self.selection_ran += 1;
            self.g_sum += rep.inner_products.iter().sum::<f64>();
            self.g_count += rep.inner_products.len();
            if let Some(star) = rep.selected {
                self.feasible += 1;
                if star == planted {
                    self.recovered += 1;
                }
            }
        }
    }

    fn row(&self, epoch: usize, phase: u8, val_soft_acc: f64, planted: bool) -> MetricsRow {
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        MetricsRow {
            epoch,
            phase,
            train_loss: if self.examples > 0 { self.loss_sum / self.examples as f64 } else { 0.0 },
            val_soft_acc,
            feasible_rate: ratio(self.feasible, self.selection_ran),
            planted_recovery: if planted { ratio(self.recovered, self.feasible) } else { None },
            mean_inner_product: (self.g_count > 0).then(|| self.g_sum / self.g_count as f64),
        }
    }
}

struct ExamplePass {
    loss: f64,
    grads: Vec<Vec<f64>>,
    report: Option<SelectionReport>,
    planted: usize,
}

fn example_pass(
    model: &Model,
    ex: &EncodedExample,
    mode: SelectionMode,
) -> Result<ExamplePass, TrainError> {
    let mut trace = model.forward_example(ex)?;
    let (loss_var, report): (Var, Option<SelectionReport>) = match mode.xi() {
        None => (trace.vqa_loss, None),
        Some(_) if trace.caption_nlls.is_empty() => (trace.vqa_loss, None),
        Some(xi) => {
            let rep = selection::report(&trace, xi)?;
            let nlls: Vec<Var> = trace.caption_nlls.iter().map(|r| r.nll).collect();
            let joint =
                selection::joint_loss(&mut trace.tape, trace.vqa_loss, &nlls, rep.selected)?;
            (joint, Some(rep))
        }
    };
    let loss = trace.tape.value(loss_var).item();
    let grads = trace.tape.backward(loss_var)?;
    let dense: Vec<Vec<f64>> = model
        .params
        .ids()
        .map(|id| grads.dense(trace.bound.var(id), model.params.get(id).len()))
        .collect();
    Ok(ExamplePass {
        loss,
        grads: dense,
        report,
        planted: ex.relevant_caption_index,
    })
}

impl Trainer {
    pub fn new(model: Model, lr: f64, seed: u64) -> Trainer {
        let opt = AdaMax::new(&model.params, lr);
        Trainer {
            model,
            opt,
            phase: 1,
            epoch: 0,
            batch: 0,
            seed,
            base_lr: lr,
            track_planted: true,
        }
    }

    /// Switch to fine-tuning: learning rate becomes exactly
    /// `lr_factor x` the phase-1 rate, the planted-recovery column goes
    /// blank, and the cursor moves to a fresh epoch boundary.
    pub fn enter_phase2(&mut self, lr_factor: f64) {
        self.phase = 2;
        self.opt.lr = self.base_lr * lr_factor;
        self.track_planted = false;
        if self.batch != 0 {
            self.epoch += 1;
            self.batch = 0;
        }
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeds::derive(self.seed, &[seeds::ORDER, self.epoch as u64]));
        order
    }

    fn step_batch(
        &mut self,
        train: &[EncodedExample],
        idxs: &[usize],
        cfg: &TrainConfig,
        mode: SelectionMode,
        acc: &mut EpochAccum,
    ) -> Result<f64, TrainError> {
        let model = &self.model;
        let passes: Vec<Result<ExamplePass, TrainError>> =
            idxs.par_iter().map(|&i| example_pass(model, &train[i], mode)).collect();

        let mut mean: Vec<Vec<f64>> =
            self.model.params.ids().map(|id| vec![0.0; self.model.params.get(id).len()]).collect();
        let scale = 1.0 / idxs.len() as f64;
        let mut loss_sum = 0.0;
        for pass in passes {
            let pass = pass?;
            loss_sum += pass.loss;
            for (a, g) in mean.iter_mut().zip(&pass.grads) {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += scale * y;
                }
            }
            acc.absorb(pass.loss, pass.report.as_ref(), pass.planted);
        }
        let batch_loss = loss_sum * scale;
        if !batch_loss.is_finite() || batch_loss > LOSS_CEILING {
            return Err(TrainError::Diverged {
                loss: batch_loss,
                epoch: self.epoch,
                batch: self.batch,
            });
        }
        if let Some(pre) = clip_global_norm(&mut mean, cfg.clip_norm) {
            info!(
                "epoch {} batch {}: clipped gradient norm {pre:.3} to {}",
                self.epoch, self.batch, cfg.clip_norm
            );
        }
        self.opt.apply(&mut self.model.params, &mean)?;
        Ok(batch_loss)
    }

    /// Run a fixed number of optimizer steps, rolling across epoch
    /// boundaries as needed. Returns each batch's mean loss.
    pub fn run_steps(
        &mut self,
        train: &[EncodedExample],
        cfg: &TrainConfig,
        steps: usize,
        mode: SelectionMode,
    ) -> Result<Vec<f64>, TrainError> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut losses = Vec::with_capacity(steps);
        let mut scratch = EpochAccum::default();
        while losses.len() < steps {
            let order = self.epoch_order(train.len());
            let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
            while self.batch < batches.len() && losses.len() < steps {
                let loss =
                    self.step_batch(train, batches[self.batch], cfg, mode, &mut scratch)?;
                losses.push(loss);
                self.batch += 1;
            }
            if self.batch >= batches.len() {
                self.epoch += 1;
                self.batch = 0;
            }
        }
        Ok(losses)
    }

    /// Run whole epochs, appending one metrics row per epoch. A cursor left
    /// mid-epoch by a step-granular resume first finishes that epoch; its
    /// row then covers only the remaining batches.
    pub fn run_epochs(
        &mut self,
        train: &[EncodedExample],
        val: &[EncodedExample],
        cfg: &TrainConfig,
        epochs: usize,
        mode: SelectionMode,
        rows: &mut Vec<MetricsRow>,
    ) -> Result<(), TrainError> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        for _ in 0..epochs {
            let mut acc = EpochAccum::default();
            let order = self.epoch_order(train.len());
            let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
            while self.batch < batches.len() {
                self.step_batch(train, batches[self.batch], cfg, mode, &mut acc)?;
                self.batch += 1;
            }
            let val_acc = self.validate(val)?;
            rows.push(acc.row(self.epoch, self.phase, val_acc, self.track_planted));
            self.epoch += 1;
            self.batch = 0;
        }
        Ok(())
    }

    /// Mean soft accuracy over a split, no parameter updates.
    pub fn validate(&self, val: &[EncodedExample]) -> Result<f64, TrainError> {
        if val.is_empty() {
            return Ok(0.0);
        }
        let scores: Vec<Result<f64, TrainError>> = val
            .par_iter()
            .map(|ex| Ok(self.model.forward_example(ex)?.soft_score))
            .collect();
        let mut sum = 0.0;
        for s in scores {
            sum += s?;
        }
        Ok(sum / val.len() as f64)
    }
}

/// Generated captions for one (image, question) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCaptions {
    pub image_id: String,
    /// Question word ids, unpadded.
    pub question: Vec<usize>,
    pub captions: Vec<GeneratedCaption>,
}

/// Sample `captions_per_pair` captions for every example. The `stream` tag
/// keeps draws for different splits independent.
pub fn generate_captions(
    model: &Model,
    examples: &[EncodedExample],
    cfg: &Phase2Config,
    seed: u64,
    stream: u64,
) -> Result<Vec<PairCaptions>, TrainError> {
    cfg.validate()?;
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let objects = model.attended_objects(ex)?;
            let mut rng = seeds::derive(seed, &[seeds::SAMPLE, stream, i as u64]);
            let captions = model.decoder.generate(
                &model.params,
                &objects,
                GenMode::Sample,
                cfg.captions_per_pair,
                cfg.max_len,
                cfg.temperature,
                &mut rng,
            )?;
            Ok(PairCaptions {
                image_id: ex.image_id.clone(),
                question: ex.question_tokens[..ex.question_len].to_vec(),
                captions,
            })
        })
        .collect()
}

pub fn save_caption_dump(path: &Path, pairs: &[PairCaptions]) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut buf, p)?;
        buf.push(b'\n');
    }
    crate::data::write_atomic(path, &buf)?;
    Ok(())
}

pub fn load_caption_dump(path: &Path) -> Result<Vec<PairCaptions>, TrainError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(row, line)| {
            serde_json::from_str(line)
                .map_err(|e| TrainError::Dump { row, msg: e.to_string() })
        })
        .collect()
}

/// Replace each example's gold captions with its generated ones, re-wrapped
/// for the decoder. Rows must align with the examples pair for pair and
/// carry exactly `expect` captions each.
pub fn swap_captions(
    examples: &[EncodedExample],
    dump: &[PairCaptions],
    expect: usize,
) -> Result<Vec<EncodedExample>, TrainError> {
    if examples.len() != dump.len() {
        return Err(TrainError::Dump {
            row: 0,
            msg: format!("dump has {} rows for {} examples", dump.len(), examples.len()),
        });
    }
    examples
        .iter()
        .zip(dump)
        .enumerate()
        .map(|(row, (ex, pair))| {
            if pair.image_id != ex.image_id
                || pair.question != ex.question_tokens[..ex.question_len]
            {
                return Err(TrainError::Dump {
                    row,
                    msg: format!("pair mismatch: dump is for {}", pair.image_id),
                });
            }
            if pair.captions.len() != expect {
                return Err(TrainError::Dump {
                    row,
                    msg: format!("{} captions where {expect} were expected", pair.captions.len()),
                });
            }
            let mut out = ex.clone();
            out.captions = pair
                .captions
                .iter()
                .map(|c| {
                    if c.tokens.is_empty() {
                        return Err(TrainError::Dump { row, msg: "empty caption".into() });
                    }
                    let mut wrapped = Vec::with_capacity(c.tokens.len() + 1);
                    wrapped.push(START);
                    wrapped.extend(&c.tokens);
                    Ok(wrapped)
                })
                .collect::<Result<_, _>>()?;
            out.relevant_caption_index = 0;
            Ok(out)
        })
        .collect()
}
