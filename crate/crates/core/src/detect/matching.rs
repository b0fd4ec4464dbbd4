//! Anchor-to-ground-truth assignment for the proposal network.

use crate::detect::boxes::BoxXywh;
use crate::error::{Error, Result};

pub const IOU_FG: f64 = 0.7;
pub const IOU_BG: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Foreground,
    Background,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchLabels {
    pub labels: Vec<Label>,
    /// Ground-truth index for foreground anchors.
    pub matched: Vec<Option<usize>>,
}

impl MatchLabels {
    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// IoU `>= iou_fg` is foreground, `< iou_bg` background, anything between
/// is ignored. Afterwards every ground-truth box claims its best anchor(s)
/// as foreground, so no box goes unmatched.
pub fn match_anchors(
    anchors: &[BoxXywh],
    gt: &[BoxXywh],
    iou_fg: f64,
    iou_bg: f64,
) -> Result<MatchLabels> {
    if !(0.0 < iou_bg && iou_bg <= iou_fg && iou_fg < 1.0) {
        return Err(Error::invalid(
            "match_anchors",
            format!("need 0 < iou_bg <= iou_fg < 1, got {iou_bg} / {iou_fg}"),
        ));
    }
    let mut labels = vec![Label::Background; anchors.len()];
    let mut matched = vec![None; anchors.len()];
    if gt.is_empty() {
        return Ok(MatchLabels { labels, matched });
    }
    let iou: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gt.iter().map(|g| a.iou(g)).collect())
        .collect();
    for (i, row) in iou.iter().enumerate() {
        let (best_g, best) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (g, &v)| if v > acc.1 { (g, v) } else { acc });
        if best >= iou_fg {
            labels[i] = Label::Foreground;
            matched[i] = Some(best_g);
        } else if best >= iou_bg {
            labels[i] = Label::Ignore;
        }
    }
    for g in 0..gt.len() {
        let best = iou.iter().map(|r| r[g]).fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (i, row) in iou.iter().enumerate() {
            if row[g] == best {
                labels[i] = Label::Foreground;
                if matched[i].is_none() || best > row[matched[i].unwrap()] {
                    matched[i] = Some(g);
                }
            }
        }
    }
    Ok(MatchLabels { labels, matched })
}
