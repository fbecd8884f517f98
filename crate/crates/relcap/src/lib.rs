//! Joint visual question answering and question-relevant captioning on a
//! synthetic desk-scale scene world, with a from-scratch reverse-mode
//! differentiation core.

pub mod attn_eval;
pub mod autodiff;
pub mod captioner;
pub mod config;
pub mod data;
pub mod encoders;
pub mod gradcheck;
pub mod model;
pub mod seeds;
pub mod selection;
pub mod trainer;
pub mod vqa;
