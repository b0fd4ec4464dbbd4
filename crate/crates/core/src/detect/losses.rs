//! Training losses. Each kernel returns the scalar loss together with its
//! gradient with respect to the prediction tensor.
//!
//! * objectness: mean binary cross-entropy over labelled anchors
//! * smooth L1: `0.5 x²` for `|x| < β`, else `|x| − 0.5 β`, summed and
//!   divided by the element count
//! * classification: softmax cross-entropy, averaged over ROIs
//! * mask: per-ROI mean binary cross-entropy on the true class channel,
//!   averaged over ROIs

use crate::error::{Error, Result};
use crate::kernels::sigmoid_scalar;
use crate::tensor::{Scalar, Tensor4};

/// Probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]` before the log.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothL1Params {
    pub beta: f64,
}

impl Default for SmoothL1Params {
    fn default() -> Self {
        Self { beta: 1.0 }
    }
}

impl SmoothL1Params {
    pub fn new(beta: f64) -> Result<Self> {
        if beta > 0.0 && beta.is_finite() {
            Ok(Self { beta })
        } else {
            Err(Error::invalid("smooth_l1", format!("beta must be > 0, got {beta}")))
        }
    }
}

pub fn smooth_l1_value(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x
    } else {
        x.abs() - 0.5 * beta
    }
}

pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x
    } else {
        x.signum()
    }
}

pub struct LossOutput<T> {
    pub loss: f64,
    pub grad: Tensor4<T>,
    /// Set when there was nothing to average over; the loss is then 0.
    pub empty: bool,
}

/// Binary cross-entropy of clamped probability `p` against label `y`, and
/// its derivative with respect to the logit.
fn bce_term(z: f64, y: f64) -> (f64, f64) {
    let raw = sigmoid_scalar(z);
    let p = raw.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let dz = if raw == p { p - y } else { 0.0 };
    (loss, dz)
}

fn check_index<T: Scalar>(op: &'static str, t: &Tensor4<T>, idx: usize) -> Result<()> {
    if idx < t.len() {
        Ok(())
    } else {
        Err(Error::invalid(op, format!("index {idx} outside tensor {:?}", t.dims())))
    }
}

/// Mean BCE over `(flat index, label)` pairs of a logit tensor.
pub fn objectness_loss<T: Scalar>(
    logits: &Tensor4<T>,
    targets: &[(usize, f64)],
) -> Result<LossOutput<T>> {
    let mut grad = Tensor4::zeros(logits.dims());
    if targets.is_empty() {
        return Ok(LossOutput {
            loss: 0.0,
            grad,
            empty: true,
        });
    }
    let n = targets.len() as f64;
    let mut sum = 0.0;
    for &(i, y) in targets {
        check_index("objectness_loss", logits, i)?;
        let (l, dz) = bce_term(logits.data()[i].as_f64(), y);
        sum += l;
        grad.data_mut()[i] += T::of(dz / n);
    }
    Ok(LossOutput {
        loss: sum / n,
        grad,
        empty: false,
    })
}

/// Smooth L1 over `(flat index, target)` pairs, normalized by pair count.
pub fn smooth_l1_loss<T: Scalar>(
    pred: &Tensor4<T>,
    targets: &[(usize, f64)],
    params: SmoothL1Params,
) -> Result<LossOutput<T>> {
    let mut grad = Tensor4::zeros(pred.dims());
    if targets.is_empty() {
        return Ok(LossOutput {
            loss: 0.0,
            grad,
            empty: true,
        });
    }
    let n = targets.len() as f64;
    let mut sum = 0.0;
    for &(i, t) in targets {
        check_index("smooth_l1_loss", pred, i)?;
        let x = pred.data()[i].as_f64() - t;
        sum += smooth_l1_value(x, params.beta);
        grad.data_mut()[i] += T::of(smooth_l1_grad(x, params.beta) / n);
    }
    Ok(LossOutput {
        loss: sum / n,
        grad,
        empty: false,
    })
}

/// Softmax cross-entropy for `(R, C, 1, 1)` logits, averaged over the `R`
/// rows.
pub fn classification_loss<T: Scalar>(
    logits: &Tensor4<T>,
    classes: &[usize],
) -> Result<LossOutput<T>> {
    let [r, c, h, w] = logits.dims();
    if h != 1 || w != 1 || classes.len() != r {
        return Err(Error::invalid(
            "classification_loss",
            format!("{} labels for logits {:?}", classes.len(), logits.dims()),
        ));
    }
    let mut grad = Tensor4::zeros(logits.dims());
    if r == 0 {
        return Ok(LossOutput {
            loss: 0.0,
            grad,
            empty: true,
        });
    }
    let rn = r as f64;
    let mut sum = 0.0;
    for (row, &k) in classes.iter().enumerate() {
        if k >= c {
            return Err(Error::invalid(
                "classification_loss",
                format!("class index {k} outside 0..{c}"),
            ));
        }
        let z: Vec<f64> = logits.item(row).iter().map(|v| v.as_f64()).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        sum += lse - z[k];
        let g = &mut grad.data_mut()[row * c..(row + 1) * c];
        for (j, gv) in g.iter_mut().enumerate() {
            let p = (z[j] - lse).exp();
            let y = if j == k { 1.0 } else { 0.0 };
            *gv = T::of((p - y) / rn);
        }
    }
    Ok(LossOutput {
        loss: sum / rn,
        grad,
        empty: false,
    })
}

/// Mask BCE for `(R, K, m, m)` logits: ROI `r` is scored only on channel
/// `classes[r]` against the binary `m × m` grid `truth[r]`.
pub fn mask_loss<T: Scalar>(
    logits: &Tensor4<T>,
    classes: &[usize],
    truth: &[Vec<f64>],
) -> Result<LossOutput<T>> {
    let [r, k, m, m2] = logits.dims();
    if m != m2 || classes.len() != r || truth.len() != r {
        return Err(Error::invalid(
            "mask_loss",
            format!(
                "{} classes / {} truth grids for logits {:?}",
                classes.len(),
                truth.len(),
                logits.dims()
            ),
        ));
    }
    let mut grad = Tensor4::zeros(logits.dims());
    if r == 0 {
        return Ok(LossOutput {
            loss: 0.0,
            grad,
            empty: true,
        });
    }
    let cells = (m * m) as f64;
    let rn = r as f64;
    let mut sum = 0.0;
    for row in 0..r {
        let cls = classes[row];
        if cls >= k {
            return Err(Error::invalid(
                "mask_loss",
                format!("class index {cls} outside 0..{k}"),
            ));
        }
        if truth[row].len() != m * m {
            return Err(Error::invalid(
                "mask_loss",
                format!("truth grid of {} cells, expected {}", truth[row].len(), m * m),
            ));
        }
        let base = (row * k + cls) * m * m;
        let mut roi_sum = 0.0;
        for cell in 0..m * m {
            let (l, dz) = bce_term(logits.data()[base + cell].as_f64(), truth[row][cell]);
            roi_sum += l;
            grad.data_mut()[base + cell] = T::of(dz / (cells * rn));
        }
        sum += roi_sum / cells;
    }
    Ok(LossOutput {
        loss: sum / rn,
        grad,
        empty: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_golden_values() {
        assert_eq!(smooth_l1_value(0.0, 1.0), 0.0);
        assert_eq!(smooth_l1_value(0.5, 1.0), 0.125);
        assert_eq!(smooth_l1_value(2.0, 1.0), 1.5);
        let below = smooth_l1_value(1.0 - 1e-12, 1.0);
        let above = smooth_l1_value(1.0 + 1e-12, 1.0);
        assert!((below - 0.5).abs() < 1e-11 && (above - 0.5).abs() < 1e-11);
        assert_eq!(smooth_l1_grad(0.3, 1.0), 0.3);
        assert_eq!(smooth_l1_grad(-3.0, 1.0), -1.0);
        assert!(SmoothL1Params::new(0.0).is_err());
    }

    #[test]
    fn objectness_examples() {
        let z = Tensor4::<f64>::zeros([1, 2, 1, 1]);
        let one = objectness_loss(&z, &[(0, 1.0)]).unwrap();
        assert!((one.loss - 2f64.ln()).abs() < 1e-15);
        let two = objectness_loss(&z, &[(0, 1.0), (1, 0.0)]).unwrap();
        assert!((two.loss - 2f64.ln()).abs() < 1e-15);
        let sat = Tensor4::from_vec([1, 2, 1, 1], vec![20.0, -20.0]).unwrap();
        assert!(objectness_loss(&sat, &[(0, 1.0), (1, 0.0)]).unwrap().loss <= 1e-6);
        let empty = objectness_loss(&z, &[]).unwrap();
        assert!(empty.empty && empty.loss == 0.0);
    }

    #[test]
    fn classification_examples() {
        let z = Tensor4::<f64>::zeros([2, 6, 1, 1]);
        let out = classification_loss(&z, &[0, 3]).unwrap();
        assert!((out.loss - 6f64.ln()).abs() < 1e-15);
        let mut sat = Tensor4::<f64>::zeros([1, 6, 1, 1]);
        sat.data_mut()[2] = 20.0;
        assert!(classification_loss(&sat, &[2]).unwrap().loss <= 1e-6);
        assert!(classification_loss(&z, &[0, 6]).is_err());
    }

    #[test]
    fn classification_mean_over_rois() {
        let z = Tensor4::from_vec([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let a = classification_loss(&z, &[1, 1]).unwrap().loss;
        let l0 = -(0f64.exp() / (1f64.exp() + 1.0)).ln();
        let l1 = -(3f64.exp() / (3f64.exp() + 1.0)).ln();
        assert!((a - 0.5 * (l0 + l1)).abs() < 1e-14);
    }

    #[test]
    fn mask_examples() {
        let z = Tensor4::<f64>::zeros([1, 6, 14, 14]);
        let ones = vec![1.0; 196];
        assert!((mask_loss(&z, &[3], &[ones]).unwrap().loss - 2f64.ln()).abs() < 1e-12);
        let z2 = Tensor4::<f64>::zeros([1, 6, 2, 2]);
        let diag = vec![1.0, 0.0, 0.0, 1.0];
        let out = mask_loss(&z2, &[1], &[diag]).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-15);
        // only the true class channel carries gradient
        let g = out.grad;
        assert!(g.plane(0, 0).iter().all(|&v| v == 0.0));
        assert!(g.plane(0, 1).iter().any(|&v| v != 0.0));
        assert!(mask_loss(&z2, &[1], &[vec![1.0; 3]]).is_err());
    }
}
