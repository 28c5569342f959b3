//! Class-averaged average precision with centre-distance matching.

use super::targets::Detection;
use crate::scene::GroundBox;

/// AP from a ranked true/false-positive list: area under the monotone
/// precision envelope, all recall points.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / num_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_rec = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        if *r > last_rec {
            ap += (r - last_rec) * p;
            last_rec = *r;
        }
    }
    ap
}

/// Greedy matching in descending score order: each prediction takes the
/// closest still-unmatched ground truth of its class in its sample within
/// `threshold` metres.
fn class_ap(preds: &[Vec<Detection>], gts: &[Vec<GroundBox>], class: usize, threshold: f64) -> Option<f64> {
    let num_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class_id == class).count()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, usize, f32)> = preds
        .iter()
        .enumerate()
        .flat_map(|(s, ds)| ds.iter().enumerate().filter(|(_, d)| d.bbox.class_id == class).map(move |(i, d)| (s, i, d.score)))
        .collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(ranked.len());
    for (s, i, _) in ranked {
        let p = preds[s][i].bbox.center;
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[s].iter().enumerate() {
            if g.class_id != class || used[s][j] {
                continue;
            }
            let d = ((p[0] - g.center[0]) as f64).hypot((p[1] - g.center[1]) as f64);
            if d <= threshold && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, _)) = best {
            used[s][j] = true;
        }
        tp.push(best.is_some());
    }
    Some(average_precision(&tp, num_gt))
}

/// Mean over distance thresholds of the class-averaged AP. Classes without
/// ground truth are skipped; with no ground truth at all the score is 0.
pub fn map_proxy(preds: &[Vec<Detection>], gts: &[Vec<GroundBox>], thresholds: &[f64], num_classes: usize) -> f64 {
    assert_eq!(preds.len(), gts.len(), "one prediction list per sample");
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let aps: Vec<f64> = (0..num_classes).filter_map(|k| class_ap(preds, gts, k, t)).collect();
        if aps.is_empty() {
            return 0.0;
        }
        per_threshold.push(aps.iter().sum::<f64>() / aps.len() as f64);
    }
    if per_threshold.is_empty() {
        return 0.0;
    }
    per_threshold.iter().sum::<f64>() / per_threshold.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(x: f32, y: f32, k: usize) -> GroundBox {
        GroundBox { center: [x, y], size: [4.0, 2.0], yaw: 0.0, class_id: k }
    }

    fn det(b: GroundBox, score: f32) -> Detection {
        Detection { score, bbox: b }
    }

    const TH: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

    #[test]
    fn perfect_predictions_score_one() {
        let gts = vec![vec![gt(1.0, 2.0, 0), gt(-5.0, 3.0, 1)], vec![gt(10.0, 10.0, 2)]];
        let preds: Vec<Vec<_>> = gts.iter().map(|g| g.iter().map(|b| det(*b, 1.0)).collect()).collect();
        assert_eq!(map_proxy(&preds, &gts, &TH, 3), 1.0);
    }

    #[test]
    fn no_predictions_score_zero() {
        let gts = vec![vec![gt(1.0, 2.0, 0)]];
        assert_eq!(map_proxy(&[vec![]], &gts, &TH, 3), 0.0);
    }

    #[test]
    fn half_recall_no_false_positive() {
        let gts = vec![vec![gt(1.0, 2.0, 0), gt(20.0, 2.0, 0)]];
        let preds = vec![vec![det(gt(1.1, 2.0, 0), 0.8)]];
        assert!((map_proxy(&preds, &gts, &[1.0], 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn interleaved_false_positive() {
        // TP, FP, TP over 2 GT: envelope precision 1 up to recall 0.5, 2/3 after.
        assert!((average_precision(&[true, false, true], 2) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn adding_a_true_positive_never_lowers_the_score(
            gxy in prop::collection::vec((-40.0f32..40.0, -40.0f32..40.0, 0usize..3), 1..6),
            noise in prop::collection::vec((-40.0f32..40.0, -40.0f32..40.0, 0usize..3, 0.0f32..1.0), 0..8),
            keep in prop::collection::vec(any::<bool>(), 6),
            scores in prop::collection::vec(0.0f32..1.0, 6),
            extra_score in 0.0f32..1.0,
        ) {
            let gts: Vec<GroundBox> = gxy.iter().map(|&(x, y, k)| gt(x, y, k)).collect();
            let mut preds: Vec<Detection> = noise.iter().map(|&(x, y, k, s)| det(gt(x, y, k), s)).collect();
            let mut missing = None;
            for (i, g) in gts.iter().enumerate() {
                if keep[i] {
                    preds.push(det(*g, scores[i]));
                } else if missing.is_none() {
                    missing = Some(*g);
                }
            }
            let Some(m) = missing else { return Ok(()) };
            // Only meaningful when no existing prediction could claim the missing box.
            prop_assume!(preds.iter().all(|p| p.bbox.class_id != m.class_id
                || ((p.bbox.center[0] - m.center[0]).hypot(p.bbox.center[1] - m.center[1])) > 4.0));
            let before = map_proxy(&[preds.clone()], &[gts.clone()], &TH, 3);
            preds.push(det(m, extra_score));
            let after = map_proxy(&[preds], &[gts], &TH, 3);
            prop_assert!(after >= before - 1e-12, "{before} -> {after}");
        }
    }
}
