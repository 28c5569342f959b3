//! Heatmap/regression targets and their inverse, the peak decoder.

use serde::{Deserialize, Serialize};

use super::model::REG_CHANNELS;
use crate::geometry::BevExtent;
use crate::scene::GroundBox;

/// Gaussian peak width in cells.
pub const PEAK_SIGMA: f32 = 0.5;
const PEAK_RADIUS: isize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets {
    /// `[K, rows, cols]`, exactly 1 at box centre cells.
    pub heat: Vec<f32>,
    /// `[6, rows, cols]`.
    pub reg: Vec<f32>,
    /// Same layout as `reg`; set on every channel of centre cells.
    pub reg_mask: Vec<bool>,
    pub num_classes: usize,
}

pub fn render_targets(boxes: &[GroundBox], extent: &BevExtent, num_classes: usize) -> DetectionTargets {
    let n = extent.num_cells();
    let mut heat = vec![0.0f32; num_classes * n];
    let mut reg = vec![0.0f32; REG_CHANNELS * n];
    let mut reg_mask = vec![false; REG_CHANNELS * n];
    for b in boxes {
        let Some((r, c)) = extent.cell_of(b.center[0], b.center[1]) else { continue };
        for dr in -PEAK_RADIUS..=PEAK_RADIUS {
            for dc in -PEAK_RADIUS..=PEAK_RADIUS {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr >= extent.rows as isize || cc >= extent.cols as isize {
                    continue;
                }
                let g = if dr == 0 && dc == 0 {
                    1.0
                } else {
                    (-((dr * dr + dc * dc) as f32) / (2.0 * PEAK_SIGMA * PEAK_SIGMA)).exp()
                };
                let i = b.class_id * n + rr as usize * extent.cols + cc as usize;
                heat[i] = heat[i].max(g);
            }
        }
        let (cx, cy) = extent.cell_center(r, c);
        let vals = [
            (b.center[0] - cx) / extent.cell,
            (b.center[1] - cy) / extent.cell,
            b.size[0].ln(),
            b.size[1].ln(),
            b.yaw.sin(),
            b.yaw.cos(),
        ];
        for (ch, v) in vals.into_iter().enumerate() {
            let i = ch * n + r * extent.cols + c;
            reg[i] = v;
            reg_mask[i] = true;
        }
    }
    DetectionTargets { heat, reg, reg_mask, num_classes }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub score: f32,
    pub bbox: GroundBox,
}

/// Local maxima (at least every 3x3 neighbour) above `threshold`, decoded
/// through the regression map, best `max_det` by score.
pub fn decode_detections(
    heat: &[f32],
    reg: &[f32],
    num_classes: usize,
    extent: &BevExtent,
    threshold: f32,
    max_det: usize,
) -> Vec<Detection> {
    let (rows, cols) = (extent.rows, extent.cols);
    let n = rows * cols;
    let mut out = Vec::new();
    for k in 0..num_classes {
        let hm = &heat[k * n..(k + 1) * n];
        for r in 0..rows {
            for c in 0..cols {
                let s = hm[r * cols + c];
                if s < threshold {
                    continue;
                }
                let mut peak = true;
                'nb: for rr in r.saturating_sub(1)..(r + 2).min(rows) {
                    for cc in c.saturating_sub(1)..(c + 2).min(cols) {
                        if hm[rr * cols + cc] > s {
                            peak = false;
                            break 'nb;
                        }
                    }
                }
                if !peak {
                    continue;
                }
                let i = r * cols + c;
                let rv = |ch: usize| reg[ch * n + i];
                let (cx, cy) = extent.cell_center(r, c);
                out.push(Detection {
                    score: s,
                    bbox: GroundBox {
                        center: [cx + rv(0) * extent.cell, cy + rv(1) * extent.cell],
                        size: [rv(2).clamp(-5.0, 5.0).exp(), rv(3).clamp(-5.0, 5.0).exp()],
                        yaw: rv(4).atan2(rv(5)),
                        class_id: k,
                    },
                });
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(max_det);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn below_threshold_is_empty() {
        let e = BevExtent::toy();
        let heat = vec![0.2; 3 * e.num_cells()];
        let reg = vec![0.0; 6 * e.num_cells()];
        assert!(decode_detections(&heat, &reg, 3, &e, 0.3, 100).is_empty());
    }

    #[test]
    fn single_peak_with_zero_offsets() {
        let e = BevExtent::toy();
        let n = e.num_cells();
        let mut heat = vec![0.0; 3 * n];
        heat[n + 20 * 108 + 30] = 0.9;
        let reg = vec![0.0; 6 * n];
        let d = decode_detections(&heat, &reg, 3, &e, 0.5, 100);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox.class_id, 1);
        assert_eq!(d[0].bbox.center, [e.cell_center(20, 30).0, e.cell_center(20, 30).1]);
    }

    #[test]
    fn decode_inverts_targets() {
        let e = BevExtent::toy();
        let cfg = crate::config::SceneConfig::default();
        for id in 0..5 {
            let s = crate::scene::generate_scene(9, id, &cfg).unwrap();
            let t = render_targets(&s.boxes, &e, 3);
            let d = decode_detections(&t.heat, &t.reg, 3, &e, 0.5, 100);
            assert_eq!(d.len(), s.boxes.len());
            for b in &s.boxes {
                let m = d
                    .iter()
                    .find(|x| x.bbox.class_id == b.class_id && (x.bbox.center[0] - b.center[0]).hypot(x.bbox.center[1] - b.center[1]) <= 0.5)
                    .expect("box recovered");
                assert!((m.bbox.size[0] - b.size[0]).abs() < 1e-4);
                assert!((m.bbox.yaw - b.yaw).abs() < 1e-4);
            }
        }
    }
}
