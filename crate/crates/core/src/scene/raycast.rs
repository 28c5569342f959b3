use super::GroundBox;

/// Which surface a ray struck.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BoxHit {
    /// Side face; `true` for the faces normal to the box heading.
    Side(bool),
    Top,
}

/// Horizontal-distance interval `[t_in, t_out]` where the ray from the origin
/// with heading `phi` is over the footprint, plus which slab it entered through.
pub fn ray_box_interval(b: &GroundBox, phi: f32) -> Option<(f32, f32, bool)> {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (phi.cos(), phi.sin());
    // Ray origin and direction in the box frame.
    let ox = c * -b.center[0] + s * -b.center[1];
    let oy = -s * -b.center[0] + c * -b.center[1];
    let ux = c * dx + s * dy;
    let uy = -s * dx + c * dy;
    let half = [b.size[0] / 2.0, b.size[1] / 2.0];
    let mut t_in = f32::NEG_INFINITY;
    let mut t_out = f32::INFINITY;
    let mut front = true;
    for (axis, (o, u)) in [(ox, ux), (oy, uy)].into_iter().enumerate() {
        if u.abs() < 1e-12 {
            if o.abs() > half[axis] {
                return None;
            }
            continue;
        }
        let a = (-half[axis] - o) / u;
        let bb = (half[axis] - o) / u;
        let (lo, hi) = if a < bb { (a, bb) } else { (bb, a) };
        if lo > t_in {
            t_in = lo;
            front = axis == 0;
        }
        t_out = t_out.min(hi);
    }
    if t_in > t_out || t_out < 0.0 {
        return None;
    }
    Some((t_in.max(0.0), t_out, front))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Hit {
    Object { index: usize, dist: f32, face: BoxHit },
    Ground { dist: f32 },
    Nothing,
}

/// First surface hit by a ray from `(0, 0, z0)` with heading `phi` and
/// elevation `elev`. Distances are horizontal.
pub(crate) fn cast(boxes: &[GroundBox], z0: f32, phi: f32, elev: f32, max_dist: f32) -> Hit {
    let slope = elev.tan();
    let mut best = Hit::Nothing;
    let mut best_d = max_dist;
    if slope < 0.0 {
        let d = z0 / -slope;
        if d < best_d {
            best_d = d;
            best = Hit::Ground { dist: d };
        }
    }
    for (index, b) in boxes.iter().enumerate() {
        let Some((t_in, t_out, front)) = ray_box_interval(b, phi) else { continue };
        if t_in >= best_d {
            continue;
        }
        let h = b.height();
        let z_in = z0 + slope * t_in;
        let hit = if (0.0..=h).contains(&z_in) {
            Some((t_in, BoxHit::Side(front)))
        } else if z_in > h && slope < 0.0 {
            let t_top = (h - z0) / slope;
            (t_top <= t_out).then_some((t_top, BoxHit::Top))
        } else {
            None
        };
        if let Some((d, face)) = hit {
            if d < best_d {
                best_d = d;
                best = Hit::Object { index, dist: d, face };
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(x: f32) -> GroundBox {
        GroundBox { center: [x, 0.0], size: [2.0, 2.0], yaw: 0.0, class_id: 0 }
    }

    #[test]
    fn interval_along_axis() {
        let (a, b, front) = ray_box_interval(&unit_box(10.0), 0.0).unwrap();
        assert!((a - 9.0).abs() < 1e-5 && (b - 11.0).abs() < 1e-5 && front);
        assert!(ray_box_interval(&unit_box(10.0), std::f32::consts::PI).is_none());
    }

    #[test]
    fn horizontal_ray_hits_side_below_roof() {
        match cast(&[unit_box(10.0)], 1.0, 0.0, 0.0, 70.0) {
            Hit::Object { dist, face, .. } => {
                assert!((dist - 9.0).abs() < 1e-5);
                assert_eq!(face, BoxHit::Side(true));
            }
            other => panic!("{other:?}"),
        }
        // Sensor above the roof, level ray: nothing.
        assert_eq!(cast(&[unit_box(10.0)], 2.0, 0.0, 0.0, 70.0), Hit::Nothing);
    }

    #[test]
    fn descending_ray_can_land_on_roof() {
        // Car height 1.6; from z=1.8 a ray dropping 0.02 m per metre reaches
        // z=1.6 after 10 m, inside the footprint [9, 11].
        let slope = -0.02f32;
        match cast(&[unit_box(10.0)], 1.8, 0.0, slope.atan(), 70.0) {
            Hit::Object { dist, face, .. } => {
                assert!((dist - 10.0).abs() < 1e-3);
                assert_eq!(face, BoxHit::Top);
            }
            other => panic!("{other:?}"),
        }
    }
}
