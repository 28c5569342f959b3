//! Point-density grids and the per-cell reliability target.

use std::io::Write;

use crate::error::{config_err, Result};
use crate::geometry::BevExtent;
use crate::scene::PointCloud;

#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub extent: BevExtent,
    /// Row-major `[rows, cols]`.
    pub counts: Vec<u32>,
}

impl DensityGrid {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn at(&self, row: usize, col: usize) -> u32 {
        self.counts[row * self.extent.cols + col]
    }
}

pub fn density_grid(cloud: &PointCloud, extent: &BevExtent) -> DensityGrid {
    let mut counts = vec![0u32; extent.num_cells()];
    for p in &cloud.points {
        if let Some((r, c)) = extent.cell_of(p.x, p.y) {
            counts[r * extent.cols + c] += 1;
        }
    }
    DensityGrid { extent: *extent, counts }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetGrid {
    pub extent: BevExtent,
    pub values: Vec<f32>,
}

/// `clamp(D_corr / D_clean, 0, 1)`, and 1 wherever the clean cell is empty.
pub fn reliability_target(clean: &DensityGrid, corrupted: &DensityGrid) -> Result<TargetGrid> {
    if clean.extent != corrupted.extent {
        return config_err("density grids cover different extents");
    }
    let values = clean
        .counts
        .iter()
        .zip(&corrupted.counts)
        .map(|(&d0, &d1)| if d0 == 0 { 1.0 } else { (d1 as f32 / d0 as f32).clamp(0.0, 1.0) })
        .collect();
    Ok(TargetGrid { extent: clean.extent, values })
}

/// Nearest-neighbour resampling to `[h, w]`; identity at the grid's own size.
pub fn align_target(t: &TargetGrid, h: usize, w: usize) -> Vec<f32> {
    let (rows, cols) = (t.extent.rows, t.extent.cols);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let si = (i * rows) / h;
        for j in 0..w {
            let sj = (j * cols) / w;
            out.push(t.values[si * cols + sj]);
        }
    }
    out
}

pub const GRID_MAGIC: &[u8; 8] = b"PFSGRID1";

/// Flat grid file: magic, u32 rows, u32 cols, u32 kind (0 counts, 1 targets),
/// f32 x_min, y_min, cell, then row-major little-endian payload (u32 or f32).
pub fn write_counts(w: &mut impl Write, g: &DensityGrid) -> std::io::Result<()> {
    header(w, &g.extent, 0)?;
    for &c in &g.counts {
        w.write_all(&c.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_targets(w: &mut impl Write, t: &TargetGrid) -> std::io::Result<()> {
    header(w, &t.extent, 1)?;
    for &v in &t.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn header(w: &mut impl Write, e: &BevExtent, kind: u32) -> std::io::Result<()> {
    w.write_all(GRID_MAGIC)?;
    for v in [e.rows as u32, e.cols as u32, kind] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in [e.x_min, e.y_min, e.cell] {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::LidarPoint;

    fn pc(pts: &[(f32, f32)]) -> PointCloud {
        PointCloud {
            points: pts.iter().map(|&(x, y)| LidarPoint { x, y, z: 0.0, intensity: 0.5, beam: 0 }).collect(),
            beam_count: 32,
        }
    }

    #[test]
    fn empty_and_single() {
        let e = BevExtent::toy();
        assert_eq!(density_grid(&pc(&[]), &e).total(), 0);
        let g = density_grid(&pc(&[(0.0, 0.0)]), &e);
        assert_eq!(g.total(), 1);
        assert_eq!(g.at(54, 54), 1);
    }

    #[test]
    fn target_cases() {
        let e = BevExtent { x_min: 0.0, y_min: 0.0, cell: 1.0, rows: 1, cols: 3 };
        let clean = DensityGrid { extent: e, counts: vec![10, 0, 3] };
        let corr = DensityGrid { extent: e, counts: vec![4, 0, 3] };
        let t = reliability_target(&clean, &corr).unwrap();
        assert_eq!(t.values, vec![0.4, 1.0, 1.0]);
        let same = reliability_target(&clean, &clean).unwrap();
        assert!(same.values.iter().all(|&v| v == 1.0));
        let other = DensityGrid { extent: BevExtent::toy(), counts: vec![0; 108 * 108] };
        assert!(reliability_target(&clean, &other).unwrap_err().is_config());
    }

    #[test]
    fn align_identity_constant_and_upsample() {
        let e = BevExtent { x_min: 0.0, y_min: 0.0, cell: 1.0, rows: 2, cols: 2 };
        let t = TargetGrid { extent: e, values: vec![0.1, 0.2, 0.3, 0.4] };
        assert_eq!(align_target(&t, 2, 2), t.values);
        assert_eq!(
            align_target(&t, 4, 4),
            vec![0.1, 0.1, 0.2, 0.2, 0.1, 0.1, 0.2, 0.2, 0.3, 0.3, 0.4, 0.4, 0.3, 0.3, 0.4, 0.4]
        );
        let c = TargetGrid { extent: e, values: vec![0.7; 4] };
        assert!(align_target(&c, 5, 3).iter().all(|&v| v == 0.7));
    }

    #[test]
    fn header_layout() {
        let g = density_grid(&pc(&[(1.0, 1.0)]), &BevExtent::toy());
        let mut buf = Vec::new();
        write_counts(&mut buf, &g).unwrap();
        assert_eq!(&buf[..8], GRID_MAGIC);
        assert_eq!(buf.len(), 8 + 12 + 12 + 4 * 108 * 108);
    }
}
