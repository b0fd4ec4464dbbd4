//! The five-term training objective with unit weights.

use std::fmt;

use crate::detect::losses::SmoothL1Params;
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Head outputs the objective reads. `objectness` and `anchor_deltas` are
/// flattened across levels; the rest are per ROI.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub objectness: Var,
    pub anchor_deltas: Var,
    pub class_logits: Var,
    pub box_deltas: Var,
    pub mask_logits: Var,
}

/// Targets addressed by flat index into the matching output.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionTargets {
    pub objectness: Vec<(usize, f64)>,
    pub anchor_deltas: Vec<(usize, f64)>,
    pub roi_classes: Vec<usize>,
    pub box_deltas: Vec<(usize, f64)>,
    pub mask_classes: Vec<usize>,
    pub mask_truth: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub objectness: f64,
    pub anchor: f64,
    pub class: f64,
    pub bbox: f64,
    pub mask: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "total,objectness,anchor,class,bbox,mask";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.total, self.objectness, self.anchor, self.class, self.bbox, self.mask
        )
    }

    pub fn terms(&self) -> [f64; 5] {
        [self.objectness, self.anchor, self.class, self.bbox, self.mask]
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={} objectness={} anchor={} class={} bbox={} mask={}",
            self.total, self.objectness, self.anchor, self.class, self.bbox, self.mask
        )
    }
}

/// `L_obj + L_anchor + L_cls + L_box + L_mask`. Terms with nothing to
/// average over contribute 0 (e.g. every head but objectness when the
/// image has no ground truth).
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &HeadOutputs,
    targets: &DetectionTargets,
    smooth: SmoothL1Params,
) -> Result<(Var, LossBreakdown)> {
    let obj = tape.objectness_loss(out.objectness, &targets.objectness)?;
    let anchor = tape.smooth_l1_loss(out.anchor_deltas, &targets.anchor_deltas, smooth)?;
    let class = tape.classification_loss(out.class_logits, &targets.roi_classes)?;
    let bbox = tape.smooth_l1_loss(out.box_deltas, &targets.box_deltas, smooth)?;
    let mask = tape.mask_loss(out.mask_logits, &targets.mask_classes, &targets.mask_truth)?;
    let total = tape.sum(&[obj, anchor, class, bbox, mask])?;
    let v = |tape: &Tape<T>, x: Var| tape.value(x).data()[0].as_f64();
    let breakdown = LossBreakdown {
        objectness: v(tape, obj),
        anchor: v(tape, anchor),
        class: v(tape, class),
        bbox: v(tape, bbox),
        mask: v(tape, mask),
        total: v(tape, total),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor4;

    #[test]
    fn saturated_predictions_cost_nothing() {
        let mut tape = Tape::<f64>::new();
        let obj = tape.param(Tensor4::from_vec([1, 2, 1, 1], vec![20.0, -20.0]).unwrap());
        let ad = tape.param(Tensor4::from_vec([1, 4, 1, 1], vec![1.0, 2.0, 0.0, 0.0]).unwrap());
        let mut cls = Tensor4::zeros([1, 6, 1, 1]);
        cls.data_mut()[2] = 20.0;
        let cls = tape.param(cls);
        let bd = tape.param(Tensor4::zeros([1, 24, 1, 1]));
        let ml = tape.param(Tensor4::full([1, 6, 2, 2], 20.0));
        let out = HeadOutputs {
            objectness: obj,
            anchor_deltas: ad,
            class_logits: cls,
            box_deltas: bd,
            mask_logits: ml,
        };
        let t = DetectionTargets {
            objectness: vec![(0, 1.0), (1, 0.0)],
            anchor_deltas: vec![(0, 1.0), (1, 2.0)],
            roi_classes: vec![2],
            box_deltas: vec![(8, 0.0)],
            mask_classes: vec![2],
            mask_truth: vec![vec![1.0; 4]],
        };
        let (_, b) = total_loss(&mut tape, &out, &t, SmoothL1Params::default()).unwrap();
        assert!(b.total <= 1e-5, "{b}");
        assert!((b.terms().iter().sum::<f64>() - b.total).abs() <= 1e-9);
    }
}
