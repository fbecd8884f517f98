//! Box-to-grid rasterization of per-object attention weights.

pub const GRID_SIDE: usize = 14;

#[derive(Debug, thiserror::Error)]
pub enum AttnError {
    #[error("expected {expected} cells for a {side}x{side} grid, got {got}")]
    CellCount { side: usize, expected: usize, got: usize },
    #[error("negative cell mass {value} at cell {index}")]
    NegativeMass { index: usize, value: f64 },
    #[error("grid mass {sum} deviates from 1 by more than 1e-6")]
    NotNormalized { sum: f64 },
    #[error("attention mass is zero, nothing to normalize")]
    ZeroMass,
    #[error("box {index} leaves the unit square: {bounds:?}")]
    BoxOutOfRange { index: usize, bounds: [f64; 4] },
    #[error("negative attention weight {value} for box {index}")]
    NegativeWeight { index: usize, value: f64 },
    #[error("{count} boxes against {weights} weights")]
    CountMismatch { count: usize, weights: usize },
    #[error("grids have different sides: {0} vs {1}")]
    SideMismatch(usize, usize),
    #[error("transport solver exceeded its iteration budget")]
    SolverStuck,
}

/// Normalized nonnegative mass distribution over a square cell grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrid {
    side: usize,
    cells: Vec<f64>,
}

impl AttentionGrid {
    /// Wrap an already-normalized grid, validating mass and sign.
    pub fn from_normalized(side: usize, cells: Vec<f64>) -> Result<Self, AttnError> {
        if cells.len() != side * side {
            return Err(AttnError::CellCount { side, expected: side * side, got: cells.len() });
        }
        for (i, v) in cells.iter().enumerate() {
            if *v < 0.0 {
                return Err(AttnError::NegativeMass { index: i, value: *v });
            }
        }
        let sum: f64 = cells.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(AttnError::NotNormalized { sum });
        }
        Ok(AttentionGrid { side, cells })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn sum(&self) -> f64 {
        self.cells.iter().sum()
    }
}

fn validate(boxes: &[[f64; 4]], weights: &[f64]) -> Result<(), AttnError> {
    if boxes.len() != weights.len() {
        return Err(AttnError::CountMismatch { count: boxes.len(), weights: weights.len() });
    }
    const EDGE_EPS: f64 = 1e-9;
    for (i, b) in boxes.iter().enumerate() {
        let [x, y, w, h] = *b;
        if !(x >= -EDGE_EPS && y >= -EDGE_EPS && w >= 0.0 && h >= 0.0)
            || x + w > 1.0 + EDGE_EPS
            || y + h > 1.0 + EDGE_EPS
        {
            return Err(AttnError::BoxOutOfRange { index: i, bounds: *b });
        }
    }
    for (i, w) in weights.iter().enumerate() {
        if *w < 0.0 || !w.is_finite() {
            return Err(AttnError::NegativeWeight { index: i, value: *w });
        }
    }
    Ok(())
}

/// Spread each box's weight over the cells it overlaps, proportional to the
/// per-cell overlap area, and sum over boxes. No normalization.
pub fn rasterize_raw(
    boxes: &[[f64; 4]],
    weights: &[f64],
    side: usize,
) -> Result<Vec<f64>, AttnError> {
    validate(boxes, weights)?;
    let mut grid = vec![0.0; side * side];
    let s = side as f64;
    for (b, &weight) in boxes.iter().zip(weights) {
        if weight == 0.0 {
            continue;
        }
        let [x, y, w, h] = *b;
        let area = w * h;
        if area <= 0.0 {
            // Degenerate box: all weight lands in the cell holding its center.
            let cx = (x + w / 2.0).clamp(0.0, 1.0);
            let cy = (y + h / 2.0).clamp(0.0, 1.0);
            let col = ((cx * s) as usize).min(side - 1);
            let row = ((cy * s) as usize).min(side - 1);
            grid[row * side + col] += weight;
            continue;
        }
        let (x0, x1) = (x.max(0.0), (x + w).min(1.0));
        let (y0, y1) = (y.max(0.0), (y + h).min(1.0));
        let col_lo = ((x0 * s) as usize).min(side - 1);
        let col_hi = ((x1 * s).ceil() as usize).min(side);
        let row_lo = ((y0 * s) as usize).min(side - 1);
        let row_hi = ((y1 * s).ceil() as usize).min(side);
        for row in row_lo..row_hi {
            let (cy0, cy1) = (row as f64 / s, (row + 1) as f64 / s);
            let oy = (y1.min(cy1) - y0.max(cy0)).max(0.0);
            if oy == 0.0 {
                continue;
            }
            for col in col_lo..col_hi {
                let (cx0, cx1) = (col as f64 / s, (col + 1) as f64 / s);
                let ox = (x1.min(cx1) - x0.max(cx0)).max(0.0);
                if ox > 0.0 {
                    grid[row * side + col] += weight * (ox * oy) / area;
                }
            }
        }
    }
    Ok(grid)
}

/// Rasterize and normalize to unit total mass.
pub fn rasterize(
    boxes: &[[f64; 4]],
    weights: &[f64],
    side: usize,
) -> Result<AttentionGrid, AttnError> {
    let mut cells = rasterize_raw(boxes, weights, side)?;
    let total: f64 = cells.iter().sum();
    if total <= 0.0 {
        return Err(AttnError::ZeroMass);
    }
    for c in cells.iter_mut() {
        *c /= total;
    }
    AttentionGrid::from_normalized(side, cells)
}
