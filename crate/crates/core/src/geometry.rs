//! Metric <-> cell mapping of the BEV grid.

use serde::{Deserialize, Serialize};

/// Square-celled BEV grid. Row index follows `y`, column index follows `x`.
///
/// Cells are half-open `[lo, hi)` except the last row and column, which are
/// closed so that points exactly on the far boundary still bin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevExtent {
    pub x_min: f32,
    pub y_min: f32,
    pub cell: f32,
    pub rows: usize,
    pub cols: usize,
}

impl BevExtent {
    /// The default 108 x 108 grid of 1 m cells centred on the ego vehicle.
    pub fn toy() -> Self {
        BevExtent { x_min: -54.0, y_min: -54.0, cell: 1.0, rows: 108, cols: 108 }
    }

    pub fn x_max(&self) -> f32 {
        self.x_min + self.cell * self.cols as f32
    }

    pub fn y_max(&self) -> f32 {
        self.y_min + self.cell * self.rows as f32
    }

    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= self.x_min && x <= self.x_max() && y >= self.y_min && y <= self.y_max()
    }

    /// `(row, col)` of the cell holding `(x, y)`, `None` outside the extent.
    pub fn cell_of(&self, x: f32, y: f32) -> Option<(usize, usize)> {
        if !x.is_finite() || !y.is_finite() || !self.contains(x, y) {
            return None;
        }
        let col = (((x - self.x_min) / self.cell).floor() as usize).min(self.cols - 1);
        let row = (((y - self.y_min) / self.cell).floor() as usize).min(self.rows - 1);
        Some((row, col))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f32, f32) {
        (
            self.x_min + (col as f32 + 0.5) * self.cell,
            self.y_min + (row as f32 + 0.5) * self.cell,
        )
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }
}
