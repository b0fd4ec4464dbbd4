//! Greedy non-maximum suppression.

use crate::detect::boxes::BoxXywh;

/// Visits boxes by descending score (ties: lower index first), keeping a
/// box unless it overlaps an already kept one with IoU above `iou_thresh`.
/// Stops after `keep` boxes.
pub fn nms(boxes: &[BoxXywh], scores: &[f64], iou_thresh: f64, keep: usize) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= keep {
            break;
        }
        if kept.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}
