//! Attention-faithfulness evaluation: rasterize per-object weights onto a
//! cell grid and score them against ground truth by earth mover's distance.

pub mod emd;
pub mod eval;
pub mod raster;

pub use emd::{cell_distance, emd, grid_diameter};
pub use eval::{
    evaluate_attention, reports_to_csv, AttentionEvalReport, EvalError, EvalRow, Summary,
};
pub use raster::{rasterize, rasterize_raw, AttentionGrid, AttnError, GRID_SIDE};
