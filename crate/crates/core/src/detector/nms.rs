use crate::bbox::Detection;

/// Class-aware greedy NMS: candidates are visited in descending score order
/// (stable, so ties keep input order) and a candidate is dropped when its IoU
/// with an already kept box of the same class exceeds `iou`. At most `top_k`
/// detections are returned.
pub fn nms(dets: &[Detection], iou: f32, top_k: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::with_capacity(top_k.min(dets.len()));
    for i in order {
        if kept.len() >= top_k {
            break;
        }
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > iou);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BBox;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x1: f32, y1: f32, x2: f32, y2: f32, score: f32, class_id: usize) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2),
            score,
            class_id,
            level_index: 0,
        }
    }

    /// Textbook O(n²) form: repeatedly take the best remaining box and
    /// delete everything it overlaps, then truncate.
    fn reference_nms(dets: &[Detection], iou: f32, top_k: usize) -> Vec<Detection> {
        let mut remaining: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
        let mut out = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for j in 1..remaining.len() {
                let (bj, bb) = (remaining[j].1.score, remaining[best].1.score);
                if bj > bb || (bj == bb && remaining[j].0 < remaining[best].0) {
                    best = j;
                }
            }
            let (_, b) = remaining.remove(best);
            remaining.retain(|(_, d)| !(d.class_id == b.class_id && d.bbox.iou(&b.bbox) > iou));
            out.push(b);
        }
        out.truncate(top_k);
        out
    }

    #[test]
    fn identical_boxes_keep_best() {
        let d = [det(0.0, 0.0, 10.0, 10.0, 0.8, 0), det(0.0, 0.0, 10.0, 10.0, 0.9, 0)];
        let out = nms(&d, 0.5, 100);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn disjoint_boxes_survive() {
        let d = [
            det(0.0, 0.0, 10.0, 10.0, 0.8, 0),
            det(20.0, 0.0, 30.0, 10.0, 0.9, 0),
            det(40.0, 0.0, 50.0, 10.0, 0.7, 0),
        ];
        assert_eq!(nms(&d, 0.5, 100).len(), 3);
    }

    #[test]
    fn different_classes_do_not_suppress() {
        let d = [det(0.0, 0.0, 10.0, 10.0, 0.8, 0), det(0.0, 0.0, 10.0, 10.0, 0.9, 1)];
        assert_eq!(nms(&d, 0.5, 100).len(), 2);
    }

    #[test]
    fn truncates_to_top_k() {
        let d: Vec<_> = (0..10)
            .map(|i| det(i as f32 * 20.0, 0.0, i as f32 * 20.0 + 10.0, 10.0, i as f32 / 10.0, 0))
            .collect();
        let out = nms(&d, 0.5, 3);
        assert_eq!(out.iter().map(|d| d.score).collect::<Vec<_>>(), vec![0.9, 0.8, 0.7]);
    }

    #[test]
    fn matches_reference_on_random_boxes() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dets: Vec<_> = (0..50)
                .map(|_| {
                    let x = rng.gen_range(0.0..80.0f32);
                    let y = rng.gen_range(0.0..80.0f32);
                    let w = rng.gen_range(5.0..30.0f32);
                    let h = rng.gen_range(5.0..30.0f32);
                    // quantised scores force ties
                    let s = (rng.gen_range(0.0..1.0f32) * 20.0).round() / 20.0;
                    det(x, y, x + w, y + h, s, rng.gen_range(0..2))
                })
                .collect();
            for top_k in [5, 100] {
                assert_eq!(nms(&dets, 0.5, top_k), reference_nms(&dets, 0.5, top_k));
            }
        }
    }
}
