//! Bilinear ROI pooling: one sample at the center of each of the
//! `res × res` bins covering the box.

use rayon::prelude::*;

use crate::detect::boxes::BoxXywh;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    /// Index into the level list passed to the pooler.
    pub level: usize,
    /// Batch item of the level map.
    pub batch: usize,
    pub bbox: BoxXywh,
}

/// Pyramid level whose anchor size is nearest to `sqrt(w * h)` on a log
/// scale; ties go to the finer level.
pub fn assign_level(b: &BoxXywh, anchor_sizes: &[f64]) -> usize {
    let scale = (b.w * b.h).sqrt().max(1e-9).log2();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &s) in anchor_sizes.iter().enumerate() {
        let d = (s.log2() - scale).abs();
        if d < best_d - 1e-12 {
            best = i;
            best_d = d;
        }
    }
    best
}

#[derive(Clone, Copy)]
struct Tap {
    offset: [usize; 4],
    weight: [f64; 4],
}

/// Bilinear taps (within one channel plane) for every bin of `roi`.
fn taps(roi: &Roi, stride: f64, h: usize, w: usize, res: usize) -> Vec<Tap> {
    let b = &roi.bbox;
    let (x0, y0) = (b.x0(), b.y0());
    let (bw, bh) = (b.w / res as f64, b.h / res as f64);
    let coord = |img: f64, size: usize| -> (usize, usize, f64) {
        let f = (img / stride - 0.5).clamp(0.0, (size - 1) as f64);
        let lo = f.floor() as usize;
        let hi = (lo + 1).min(size - 1);
        (lo, hi, f - lo as f64)
    };
    let mut out = Vec::with_capacity(res * res);
    for a in 0..res {
        let (ylo, yhi, ly) = coord(y0 + (a as f64 + 0.5) * bh, h);
        for c in 0..res {
            let (xlo, xhi, lx) = coord(x0 + (c as f64 + 0.5) * bw, w);
            out.push(Tap {
                offset: [ylo * w + xlo, ylo * w + xhi, yhi * w + xlo, yhi * w + xhi],
                weight: [
                    (1.0 - ly) * (1.0 - lx),
                    (1.0 - ly) * lx,
                    ly * (1.0 - lx),
                    ly * lx,
                ],
            });
        }
    }
    out
}

fn validate<T: Scalar>(levels: &[&Tensor4<T>], strides: &[f64], rois: &[Roi]) -> Result<usize> {
    if levels.is_empty() || levels.len() != strides.len() {
        return Err(Error::invalid(
            "roi_align",
            format!("{} levels but {} strides", levels.len(), strides.len()),
        ));
    }
    let c = levels[0].c();
    for l in levels {
        if l.c() != c {
            return Err(Error::Shape {
                op: "roi_align",
                lhs: levels[0].dims(),
                rhs: l.dims(),
            });
        }
    }
    for r in rois {
        if r.level >= levels.len() || r.batch >= levels[r.level].n() {
            return Err(Error::invalid("roi_align", format!("roi {r:?} out of range")));
        }
        if !(r.bbox.w >= 1.0 && r.bbox.h >= 1.0) {
            return Err(Error::invalid(
                "roi_align",
                format!("degenerate box {:?} (extent below one pixel)", r.bbox),
            ));
        }
    }
    Ok(c)
}

/// Output is `(rois.len(), c, res, res)`.
pub fn roi_align_forward<T: Scalar>(
    levels: &[&Tensor4<T>],
    strides: &[f64],
    rois: &[Roi],
    res: usize,
) -> Result<Tensor4<T>> {
    let c = validate(levels, strides, rois)?;
    let mut out = Tensor4::zeros([rois.len(), c, res, res]);
    let item = c * res * res;
    out.data_mut()
        .par_chunks_mut(item.max(1))
        .zip(rois.par_iter())
        .for_each(|(dst, roi)| {
            let map = levels[roi.level];
            let (h, w) = (map.h(), map.w());
            let taps = taps(roi, strides[roi.level], h, w, res);
            for ch in 0..c {
                let plane = map.plane(roi.batch, ch);
                for (bin, tap) in taps.iter().enumerate() {
                    let mut v = 0.0;
                    for k in 0..4 {
                        v += tap.weight[k] * plane[tap.offset[k]].as_f64();
                    }
                    dst[ch * res * res + bin] = T::of(v);
                }
            }
        });
    Ok(out)
}

/// Gradient with respect to each level map.
pub fn roi_align_backward<T: Scalar>(
    level_dims: &[[usize; 4]],
    strides: &[f64],
    rois: &[Roi],
    res: usize,
    dy: &Tensor4<T>,
) -> Vec<Tensor4<T>> {
    let mut grads: Vec<Tensor4<T>> = level_dims.iter().map(|&d| Tensor4::zeros(d)).collect();
    let all_taps: Vec<Vec<Tap>> = rois
        .iter()
        .map(|r| {
            let d = level_dims[r.level];
            taps(r, strides[r.level], d[2], d[3], res)
        })
        .collect();
    for (lvl, g) in grads.iter_mut().enumerate() {
        let [_, c, h, w] = level_dims[lvl];
        let hw = h * w;
        // Each (batch, channel) plane is owned by one task; ROIs are
        // accumulated in index order.
        g.data_mut()
            .par_chunks_mut(hw.max(1))
            .enumerate()
            .for_each(|(plane_idx, plane)| {
                let (b, ch) = (plane_idx / c, plane_idx % c);
                for (ri, roi) in rois.iter().enumerate() {
                    if roi.level != lvl || roi.batch != b {
                        continue;
                    }
                    let src = &dy.item(ri)[ch * res * res..(ch + 1) * res * res];
                    for (bin, tap) in all_taps[ri].iter().enumerate() {
                        let gv = src[bin];
                        for k in 0..4 {
                            plane[tap.offset[k]] += gv * T::of(tap.weight[k]);
                        }
                    }
                }
            });
    }
    grads
}
