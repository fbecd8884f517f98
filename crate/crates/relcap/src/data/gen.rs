//! Deterministic generation of the desk micro-world.
//!
//! Each image is a handful of colored objects on a desk. Questions come from
//! three templates (color-of, count-of, existence-of). Every question gets
//! one planted caption that states the answer-bearing attributes of its
//! target objects; the remaining captions describe distractor objects or
//! neutral desk filler. Per-object features are attribute one-hots pushed
//! through a fixed random projection plus Gaussian noise, standing in for
//! detector features.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, ExampleRecord};
use crate::attn_eval::{rasterize, GRID_SIDE};
use crate::seeds;

pub const CATEGORIES: [&str; 8] =
    ["cube", "sphere", "cone", "cylinder", "pyramid", "torus", "wedge", "block"];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "purple", "orange"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const COUNT_WORDS: [&str; 9] =
    ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight"];

const FILLERS: [&str; 8] = [
    "the desk surface is wooden and plain",
    "a notebook lies open near the edge",
    "soft light falls across the desk",
    "the room beyond the desk is quiet",
    "a coffee mug rests off to the side",
    "papers are stacked neatly nearby",
    "the drawer under the desk is closed",
    "a pen sits in the metal holder",
];

/// Attribute vector layout: category one-hot, color one-hot, size one-hot,
/// then the normalized box.
const ATTR_DIM: usize = CATEGORIES.len() + COLORS.len() + SIZES.len() + 4;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_examples: usize,
    pub val_examples: usize,
    pub questions_per_image: usize,
    pub max_objects: usize,
    pub feature_dim: usize,
    pub captions_per_question: usize,
    pub max_caption_tokens: usize,
    pub noise: f64,
    pub count_partial: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_examples: 2000,
            val_examples: 400,
            questions_per_image: 2,
            max_objects: 8,
            feature_dim: 32,
            captions_per_question: 5,
            max_caption_tokens: 12,
            noise: 0.1,
            count_partial: 0.3,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.captions_per_question < 2 {
            return Err(DataError::TooFewCaptions(self.captions_per_question));
        }
        if self.max_objects == 0 || self.max_objects > 8 {
            return Err(DataError::Config(format!(
                "max_objects must be in 1..=8 (count answers are digits), got {}",
                self.max_objects
            )));
        }
        if self.feature_dim == 0 {
            return Err(DataError::Config("feature_dim must be positive".into()));
        }
        if self.questions_per_image == 0 {
            return Err(DataError::Config("questions_per_image must be positive".into()));
        }
        if self.train_examples == 0 || self.val_examples == 0 {
            return Err(DataError::Config("both splits need at least one example".into()));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(DataError::Config(format!("noise must be nonnegative, got {}", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.count_partial) {
            return Err(DataError::Config(format!(
                "count_partial must lie in [0, 1], got {}",
                self.count_partial
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub category: usize,
    pub color: usize,
    pub size: usize,
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Color,
    Count,
    Exist,
}

/// Generator-side metadata a trained model never sees: boxes for attention
/// evaluation, object attributes for probes, template and target labels for
/// selector scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub object_count: usize,
    pub boxes: Vec<[f64; 4]>,
    pub object_attrs: Vec<[usize; 3]>,
    pub template: QuestionKind,
    pub targets: Vec<usize>,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSplit {
    pub records: Vec<ExampleRecord>,
    pub metas: Vec<RecordMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub train: GeneratedSplit,
    pub val: GeneratedSplit,
}

fn sample_scene(rng: &mut ChaCha12Rng, cfg: &DataConfig) -> SceneSpec {
    let n = rng.gen_range(1..=cfg.max_objects);
    let objects = (0..n)
        .map(|_| {
            let category = rng.gen_range(0..CATEGORIES.len());
            let color = rng.gen_range(0..COLORS.len());
            let size = rng.gen_range(0..SIZES.len());
            let (lo, hi) = if size == 0 { (0.07, 0.14) } else { (0.18, 0.30) };
            let w = rng.gen_range(lo..hi);
            let h = rng.gen_range(lo..hi);
            let x = rng.gen_range(0.0..(1.0 - w));
            let y = rng.gen_range(0.0..(1.0 - h));
            ObjectSpec { category, color, size, bbox: [x, y, w, h] }
        })
        .collect();
    SceneSpec { objects }
}

fn describe(o: &ObjectSpec) -> String {
    format!(
        "a {} {} {} sits on the desk",
        COLORS[o.color], SIZES[o.size], CATEGORIES[o.category]
    )
}

fn matching(scene: &SceneSpec, category: usize, color: Option<usize>) -> Vec<usize> {
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.category == category && color.map_or(true, |c| o.color == c))
        .map(|(i, _)| i)
        .collect()
}

struct Question {
    text: String,
    answer: String,
    scores: BTreeMap<String, f64>,
    targets: Vec<usize>,
    relevant: String,
    kind: QuestionKind,
    /// Color index distractor captions must avoid mentioning, so only the
    /// planted caption carries the answer token.
    avoid_color: Option<usize>,
}

fn color_question(scene: &SceneSpec, unique: &[usize], rng: &mut ChaCha12Rng) -> Question {
    let cat = unique[rng.gen_range(0..unique.len())];
    let obj_idx = scene.objects.iter().position(|o| o.category == cat).unwrap();
    let obj = &scene.objects[obj_idx];
    let answer = COLORS[obj.color].to_string();
    let mut scores = BTreeMap::new();
    scores.insert(answer.clone(), 1.0);
    Question {
        text: format!("what color is the {}", CATEGORIES[cat]),
        answer,
        scores,
        targets: vec![obj_idx],
        relevant: describe(obj),
        kind: QuestionKind::Color,
        avoid_color: Some(obj.color),
    }
}

fn count_question(scene: &SceneSpec, cfg: &DataConfig, rng: &mut ChaCha12Rng) -> Question {
    let present: Vec<usize> = {
        let mut cats: Vec<usize> = scene.objects.iter().map(|o| o.category).collect();
        cats.sort_unstable();
        cats.dedup();
        cats
    };
    let cat = if rng.gen_bool(0.7) {
        present[rng.gen_range(0..present.len())]
    } else {
        rng.gen_range(0..CATEGORIES.len())
    };
    let with_color = rng.gen_bool(0.5);
    let color = if with_color {
        let of_cat: Vec<usize> =
            scene.objects.iter().filter(|o| o.category == cat).map(|o| o.color).collect();
        Some(if !of_cat.is_empty() && rng.gen_bool(0.7) {
            of_cat[rng.gen_range(0..of_cat.len())]
        } else {
            rng.gen_range(0..COLORS.len())
        })
    } else {
        None
    };
    let targets = matching(scene, cat, color);
    let count = targets.len();
    let answer = count.to_string();
    let mut scores = BTreeMap::new();
    scores.insert(answer.clone(), 1.0);
    if cfg.count_partial > 0.0 {
        for adjacent in [count.wrapping_sub(1), count + 1] {
            if adjacent <= cfg.max_objects && adjacent != count {
                scores.insert(adjacent.to_string(), cfg.count_partial);
            }
        }
    }
    let (text, relevant) = match color {
        Some(c) => (
            format!("how many {} {} objects are there", COLORS[c], CATEGORIES[cat]),
            format!(
                "there are {} {} {} objects on the desk",
                COUNT_WORDS[count], COLORS[c], CATEGORIES[cat]
            ),
        ),
        None => (
            format!("how many {} objects are there", CATEGORIES[cat]),
            format!("there are {} {} objects on the desk", COUNT_WORDS[count], CATEGORIES[cat]),
        ),
    };
    Question { text, answer, scores, targets, relevant, kind: QuestionKind::Count, avoid_color: color }
}

fn exist_question(scene: &SceneSpec, rng: &mut ChaCha12Rng) -> Question {
    let (cat, color) = if rng.gen_bool(0.5) {
        let o = &scene.objects[rng.gen_range(0..scene.objects.len())];
        (o.category, o.color)
    } else {
        (rng.gen_range(0..CATEGORIES.len()), rng.gen_range(0..COLORS.len()))
    };
    let targets = matching(scene, cat, Some(color));
    let yes = !targets.is_empty();
    let answer = if yes { "yes" } else { "no" }.to_string();
    let mut scores = BTreeMap::new();
    scores.insert(answer.clone(), 1.0);
    let relevant = if yes {
        describe(&scene.objects[targets[0]])
    } else {
        format!("there is no {} {} on the desk", COLORS[color], CATEGORIES[cat])
    };
    Question {
        text: format!("is there a {} {} on the desk", COLORS[color], CATEGORIES[cat]),
        answer,
        scores,
        targets,
        relevant,
        kind: QuestionKind::Exist,
        avoid_color: Some(color),
    }
}

fn build_captions(
    scene: &SceneSpec,
    q: &Question,
    cfg: &DataConfig,
    rng: &mut ChaCha12Rng,
) -> (Vec<String>, usize) {
    let mut candidates: Vec<usize> = (0..scene.objects.len())
        .filter(|i| !q.targets.contains(i))
        .filter(|i| q.avoid_color != Some(scene.objects[*i].color))
        .collect();
    candidates.shuffle(rng);
    let need = cfg.captions_per_question - 1;
    let mut distractors: Vec<String> =
        candidates.iter().take(need).map(|i| describe(&scene.objects[*i])).collect();
    if distractors.len() < need {
        let mut fillers: Vec<&str> = FILLERS.to_vec();
        fillers.shuffle(rng);
        for f in fillers {
            if distractors.len() == need {
                break;
            }
            distractors.push(f.to_string());
        }
    }
    let slot = rng.gen_range(0..cfg.captions_per_question);
    let mut captions = distractors;
    captions.insert(slot, q.relevant.clone());
    (captions, slot)
}

fn object_features(
    scene: &SceneSpec,
    cfg: &DataConfig,
    projection: &[f64],
    rng: &mut ChaCha12Rng,
) -> Vec<f64> {
    let d = cfg.feature_dim;
    let mut out = Vec::with_capacity(scene.objects.len() * d);
    for o in &scene.objects {
        let mut attrs = [0.0f64; ATTR_DIM];
        attrs[o.category] = 1.0;
        attrs[CATEGORIES.len() + o.color] = 1.0;
        attrs[CATEGORIES.len() + COLORS.len() + o.size] = 1.0;
        let box_base = CATEGORIES.len() + COLORS.len() + SIZES.len();
        attrs[box_base..box_base + 4].copy_from_slice(&o.bbox);
        for row in 0..d {
            let mut v = 0.0;
            for (a, p) in attrs.iter().zip(&projection[row * ATTR_DIM..(row + 1) * ATTR_DIM]) {
                v += a * p;
            }
            let eps: f64 = StandardNormal.sample(rng);
            out.push(v + cfg.noise * eps);
        }
    }
    out
}

fn attention_truth(scene: &SceneSpec, targets: &[usize]) -> Result<Option<Vec<f64>>, DataError> {
    if targets.is_empty() {
        return Ok(None);
    }
    let boxes: Vec<[f64; 4]> = targets.iter().map(|i| scene.objects[*i].bbox).collect();
    let weights = vec![1.0 / targets.len() as f64; targets.len()];
    let grid = rasterize(&boxes, &weights, GRID_SIDE)?;
    Ok(Some(grid.cells().to_vec()))
}

/// Generate both splits. Deterministic in `(config, seed)`.
pub fn generate(cfg: &DataConfig, seed: u64) -> Result<GeneratedDataset, DataError> {
    cfg.validate()?;
    let projection: Vec<f64> = {
        let mut rng = seeds::derive(seed, &[seeds::FEATURES]);
        let scale = 1.0 / (ATTR_DIM as f64).sqrt();
        (0..cfg.feature_dim * ATTR_DIM)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * scale
            })
            .collect()
    };

    let total = cfg.train_examples + cfg.val_examples;
    let images = total.div_ceil(cfg.questions_per_image);
    let mut records = Vec::with_capacity(total);
    let mut metas = Vec::with_capacity(total);
    for img in 0..images {
        let mut scene_rng = seeds::derive(seed, &[seeds::SCENE, img as u64]);
        let scene = sample_scene(&mut scene_rng, cfg);
        let mut feat_rng = seeds::derive(seed, &[seeds::FEATURES, img as u64]);
        let features = object_features(&scene, cfg, &projection, &mut feat_rng);
        for slot in 0..cfg.questions_per_image {
            let idx = img * cfg.questions_per_image + slot;
            if idx >= total {
                break;
            }
            let mut rng = seeds::derive(seed, &[seeds::QUESTION, idx as u64]);
            let unique: Vec<usize> = (0..CATEGORIES.len())
                .filter(|c| scene.objects.iter().filter(|o| o.category == *c).count() == 1)
                .collect();
            let mut kinds = vec![QuestionKind::Count, QuestionKind::Exist];
            if !unique.is_empty() {
                kinds.push(QuestionKind::Color);
            }
            let kind = kinds[rng.gen_range(0..kinds.len())];
            let q = match kind {
                QuestionKind::Color => color_question(&scene, &unique, &mut rng),
                QuestionKind::Count => count_question(&scene, cfg, &mut rng),
                QuestionKind::Exist => exist_question(&scene, &mut rng),
            };
            let (captions, relevant_idx) = build_captions(&scene, &q, cfg, &mut rng);
            for c in &captions {
                let tokens = c.split_whitespace().count();
                if tokens > cfg.max_caption_tokens {
                    return Err(DataError::Config(format!(
                        "caption template needs {tokens} tokens but max_caption_tokens is {}",
                        cfg.max_caption_tokens
                    )));
                }
            }
            let truth = attention_truth(&scene, &q.targets)?;
            records.push(ExampleRecord {
                image_id: format!("img{img:06}"),
                question: q.text.clone(),
                captions,
                answer_scores: q.scores.clone(),
                relevant_caption_index: relevant_idx,
                features: features.clone(),
                object_count: scene.objects.len(),
                feature_dim: cfg.feature_dim,
                attention_truth: truth,
            });
            metas.push(RecordMeta {
                object_count: scene.objects.len(),
                boxes: scene.objects.iter().map(|o| o.bbox).collect(),
                object_attrs: scene.objects.iter().map(|o| [o.category, o.color, o.size]).collect(),
                template: q.kind,
                targets: q.targets.clone(),
                answer: q.answer.clone(),
            });
        }
    }

    let val_records = records.split_off(cfg.train_examples);
    let val_metas = metas.split_off(cfg.train_examples);
    Ok(GeneratedDataset {
        train: GeneratedSplit { records, metas },
        val: GeneratedSplit { records: val_records, metas: val_metas },
    })
}
