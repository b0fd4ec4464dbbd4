//! The full segmentation model: feature extractor, proposal network, box
//! and mask heads, one training step and inference.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::dataset::{image_tensor, instances, Instance};
use crate::data::mask::LabelMask;
use crate::data::palette::ClassPalette;
use crate::detect::anchors::{generate_anchors, AnchorGrid, ANCHOR_SIZES};
use crate::detect::boxes::{decode_deltas, encode_deltas, BoxXywh, Deltas};
use crate::detect::heads::{
    box_head_forward, mask_head_forward, rpn_head_forward, HeadConfig, HeadWeights, BOX_RES,
    MASK_RES,
};
use crate::detect::losses::SmoothL1Params;
use crate::detect::matching::{match_anchors, Label, IOU_BG, IOU_FG};
use crate::detect::nms::nms;
use crate::detect::roi::{assign_level, Roi};
use crate::detect::total::{total_loss, DetectionTargets, HeadOutputs, LossBreakdown};
use crate::error::{Error, Result};
use crate::fpn::{extract, ExtractorConfig, ExtractorWeights, LEVELS, STRIDES};
use crate::kernels::sigmoid_scalar;
use crate::params::{join, ParamTree};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub heads: HeadConfig,
    pub normalized_deltas: bool,
    pub smooth_l1: SmoothL1Params,
    /// Proposals kept per level after suppression.
    pub proposals_per_level: usize,
    pub rpn_nms: f64,
    /// Proposals (best first, all levels) handed to the ROI heads.
    pub roi_proposals: usize,
    /// ROIs per training image; all foreground ROIs are kept and background
    /// fills the remainder.
    pub roi_batch: usize,
    /// At most this many foreground ROIs train the mask head.
    pub mask_rois: usize,
    pub roi_fg_iou: f64,
    pub score_thresh: f64,
    pub class_nms: f64,
    pub mask_thresh: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let extractor = ExtractorConfig::default();
        let heads = HeadConfig::new(extractor.pyramid_width);
        Self {
            extractor,
            heads,
            normalized_deltas: false,
            smooth_l1: SmoothL1Params::default(),
            proposals_per_level: 1000,
            rpn_nms: 0.7,
            roi_proposals: 32,
            roi_batch: 48,
            mask_rois: 16,
            roi_fg_iou: 0.5,
            score_thresh: 0.5,
            class_nms: 0.5,
            mask_thresh: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<V> {
    pub extractor: ExtractorWeights<V>,
    pub heads: HeadWeights<V>,
}

impl<V> ParamTree<V> for ModelWeights<V> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V)) {
        self.extractor.visit(&join(prefix, "extractor"), f);
        self.heads.visit(&join(prefix, "heads"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V)) {
        self.extractor.visit_mut(&join(prefix, "extractor"), f);
        self.heads.visit_mut(&join(prefix, "heads"), f);
    }
}

impl<V> ModelWeights<V> {
    pub fn map<W>(&self, f: &mut dyn FnMut(&V) -> W) -> ModelWeights<W> {
        ModelWeights {
            extractor: self.extractor.map(f),
            heads: self.heads.map(f),
        }
    }
}

impl<T: Scalar> ModelWeights<Tensor4<T>> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.heads.width != cfg.extractor.pyramid_width {
            return Err(Error::Config(format!(
                "head width {} differs from pyramid width {}",
                cfg.heads.width, cfg.extractor.pyramid_width
            )));
        }
        Ok(Self {
            extractor: ExtractorWeights::init(&cfg.extractor, rng)?,
            heads: HeadWeights::init(&cfg.heads, rng),
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ModelWeights<Var> {
        self.map(&mut |t| tape.param(t.clone()))
    }
}

/// One image with its ground-truth instances.
#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub image: Tensor4<T>,
    pub instances: Vec<Instance>,
}

impl<T: Scalar> TrainSample<T> {
    pub fn new(image: &image::GrayImage, mask: &LabelMask, palette: &ClassPalette) -> Self {
        Self {
            image: image_tensor(image),
            instances: instances(mask, palette),
        }
    }
}

fn level_dims(h: usize, w: usize) -> Vec<(usize, usize)> {
    STRIDES.iter().map(|s| (h / s, w / s)).collect()
}

fn anchors_for(h: usize, w: usize) -> Result<AnchorGrid> {
    let strides: Vec<f64> = STRIDES.iter().map(|&s| s as f64).collect();
    generate_anchors(&level_dims(h, w), &ANCHOR_SIZES, &strides)
}

fn pool_strides() -> Vec<f64> {
    STRIDES.iter().map(|&s| s as f64).collect()
}

/// Proposal network outputs for every level, flattened across levels.
struct RpnOut {
    objectness: Var,
    deltas: Var,
}

fn run_rpn<T: Scalar>(
    tape: &mut Tape<T>,
    levels: &[Var; LEVELS],
    w: &HeadWeights<Var>,
) -> Result<RpnOut> {
    let mut obj = Vec::with_capacity(LEVELS);
    let mut del = Vec::with_capacity(LEVELS);
    for &l in levels {
        let (o, d) = rpn_head_forward(tape, l, &w.rpn)?;
        obj.push(o);
        del.push(d);
    }
    Ok(RpnOut {
        objectness: tape.concat_flat(&obj)?,
        deltas: tape.concat_flat(&del)?,
    })
}

/// Flat index of delta component `j` of anchor `a` inside the
/// level-concatenated `(1, 4, h, w)` delta maps.
fn anchor_delta_index(grid: &AnchorGrid, a: usize, j: usize) -> usize {
    let (k, cell) = grid.locate(a);
    let offset = grid.offsets()[k];
    let (h, w) = grid.dims[k];
    4 * offset + j * h * w + cell
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BoxXywh,
    pub score: f64,
    pub level: usize,
}

/// Decodes, clips and suppresses proposals per level, then merges them
/// best first.
fn proposals<T: Scalar>(
    cfg: &ModelConfig,
    grid: &AnchorGrid,
    objectness: &Tensor4<T>,
    deltas: &Tensor4<T>,
    img_h: usize,
    img_w: usize,
) -> Result<Vec<Proposal>> {
    let mut out = Vec::new();
    for (k, level) in grid.levels.iter().enumerate() {
        let off = grid.offsets()[k];
        let mut boxes = Vec::with_capacity(level.len());
        let mut scores = Vec::with_capacity(level.len());
        for (cell, anchor) in level.iter().enumerate() {
            let a = off + cell;
            let d = Deltas::from_array(std::array::from_fn(|j| {
                deltas.data()[anchor_delta_index(grid, a, j)].as_f64()
            }));
            let b = decode_deltas(anchor, &d, cfg.normalized_deltas)?.clip(img_w as f64, img_h as f64);
            if b.w >= 1.0 && b.h >= 1.0 && b.x.is_finite() && b.y.is_finite() {
                boxes.push(b);
                scores.push(sigmoid_scalar(objectness.data()[a].as_f64()));
            }
        }
        for i in nms(&boxes, &scores, cfg.rpn_nms, cfg.proposals_per_level) {
            out.push(Proposal {
                bbox: boxes[i],
                score: scores[i],
                level: k,
            });
        }
    }
    // Stable sort keeps level order among equal scores.
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

fn rois_for(boxes: &[BoxXywh]) -> Vec<Roi> {
    boxes
        .iter()
        .map(|b| Roi {
            level: assign_level(b, &ANCHOR_SIZES),
            batch: 0,
            bbox: *b,
        })
        .collect()
}

/// Builds the training graph for one image and returns the scalar loss,
/// its breakdown and the bound weights (for gradient extraction).
pub fn training_graph<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    weights: &ModelWeights<Tensor4<T>>,
    sample: &TrainSample<T>,
    rng: &mut impl Rng,
) -> Result<(Var, LossBreakdown, ModelWeights<Var>)> {
    let [_, _, h, w] = sample.image.dims();
    let bound = weights.bind(tape);
    let image = tape.constant(sample.image.clone());
    let levels = extract(tape, image, &cfg.extractor, &bound.extractor)?;
    let rpn = run_rpn(tape, &levels, &bound.heads)?;

    let grid = anchors_for(h, w)?;
    let anchors = grid.flat();
    let gt: Vec<BoxXywh> = sample.instances.iter().map(|i| i.bbox).collect();
    let matches = match_anchors(&anchors, &gt, IOU_FG, IOU_BG)?;
    let mut targets = DetectionTargets::default();
    for (a, label) in matches.labels.iter().enumerate() {
        match label {
            Label::Foreground => {
                targets.objectness.push((a, 1.0));
                let g = matches.matched[a].expect("foreground anchor has a match");
                let d = encode_deltas(&anchors[a], &gt[g], cfg.normalized_deltas)?;
                for (j, v) in d.to_array().into_iter().enumerate() {
                    targets.anchor_deltas.push((anchor_delta_index(&grid, a, j), v));
                }
            }
            Label::Background => targets.objectness.push((a, 0.0)),
            Label::Ignore => {}
        }
    }

    // ROI set: best proposals plus the ground-truth boxes themselves.
    let props = proposals(
        cfg,
        &grid,
        tape.value(rpn.objectness),
        tape.value(rpn.deltas),
        h,
        w,
    )?;
    let mut candidates: Vec<BoxXywh> = props
        .iter()
        .take(cfg.roi_proposals)
        .map(|p| p.bbox)
        .collect();
    candidates.extend_from_slice(&gt);
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for b in candidates {
        let best = gt
            .iter()
            .enumerate()
            .map(|(i, g)| (i, b.iou(g)))
            .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((i, v)),
            });
        match best {
            Some((g, v)) if v >= cfg.roi_fg_iou => fg.push((b, g)),
            _ => bg.push(b),
        }
    }
    bg.shuffle(rng);
    bg.truncate(cfg.roi_batch.saturating_sub(fg.len()));

    let k = cfg.heads.num_classes;
    let mut roi_boxes = Vec::with_capacity(fg.len() + bg.len());
    for (r, &(b, g)) in fg.iter().enumerate() {
        roi_boxes.push(b);
        let cls = sample.instances[g].class as usize;
        targets.roi_classes.push(cls);
        let d = encode_deltas(&b, &gt[g], cfg.normalized_deltas)?;
        for (j, v) in d.to_array().into_iter().enumerate() {
            targets.box_deltas.push((r * 4 * k + 4 * cls + j, v));
        }
    }
    for &b in &bg {
        roi_boxes.push(b);
        targets.roi_classes.push(0);
    }
    let strides = pool_strides();
    let (class_logits, box_deltas) = if roi_boxes.is_empty() {
        (
            tape.constant(Tensor4::zeros([0, k, 1, 1])),
            tape.constant(Tensor4::zeros([0, 4 * k, 1, 1])),
        )
    } else {
        let pooled = tape.roi_align(&levels, &strides, &rois_for(&roi_boxes), BOX_RES)?;
        box_head_forward(tape, pooled, &bound.heads.box_head)?
    };

    let mut mask_sel: Vec<usize> = (0..fg.len()).collect();
    if mask_sel.len() > cfg.mask_rois {
        mask_sel.shuffle(rng);
        mask_sel.truncate(cfg.mask_rois);
        mask_sel.sort_unstable();
    }
    let mask_logits = if mask_sel.is_empty() {
        tape.constant(Tensor4::zeros([0, k, MASK_RES, MASK_RES]))
    } else {
        let boxes: Vec<BoxXywh> = mask_sel.iter().map(|&i| fg[i].0).collect();
        let pooled = tape.roi_align(&levels, &strides, &rois_for(&boxes), MASK_RES)?;
        mask_head_forward(tape, pooled, &bound.heads.mask)?
    };
    for &i in &mask_sel {
        let (b, g) = fg[i];
        targets.mask_classes.push(sample.instances[g].class as usize);
        targets.mask_truth.push(sample.instances[g].mask_grid(&b, MASK_RES));
    }

    let outputs = HeadOutputs {
        objectness: rpn.objectness,
        anchor_deltas: rpn.deltas,
        class_logits,
        box_deltas,
        mask_logits,
    };
    let (loss, breakdown) = total_loss(tape, &outputs, &targets, cfg.smooth_l1)?;
    Ok((loss, breakdown, bound))
}

/// Loss and gradients (same tree shape as the weights) for one image.
pub fn loss_and_grad<T: Scalar>(
    cfg: &ModelConfig,
    weights: &ModelWeights<Tensor4<T>>,
    sample: &TrainSample<T>,
    rng: &mut impl Rng,
) -> Result<(LossBreakdown, ModelWeights<Tensor4<T>>)> {
    let mut tape = Tape::new();
    let (loss, breakdown, bound) = training_graph(&mut tape, cfg, weights, sample, rng)?;
    tape.backward(loss)?;
    let grads = bound.map(&mut |&v| {
        tape.take_grad(v)
            .unwrap_or_else(|| Tensor4::zeros(tape.dims(v)))
    });
    Ok((breakdown, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoxXywh,
    pub class: u8,
    pub score: f64,
    /// `MASK_RES × MASK_RES` foreground probabilities over `bbox`.
    pub mask: Vec<f64>,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Runs the model on one `(1, 1, h, w)` image.
pub fn detect<T: Scalar>(
    cfg: &ModelConfig,
    weights: &ModelWeights<Tensor4<T>>,
    image: &Tensor4<T>,
) -> Result<(Vec<Proposal>, Vec<Detection>)> {
    let [_, _, h, w] = image.dims();
    let mut tape = Tape::new();
    tape.set_checked(false);
    let bound = weights.bind(&mut tape);
    let img = tape.constant(image.clone());
    let levels = extract(&mut tape, img, &cfg.extractor, &bound.extractor)?;
    let rpn = run_rpn(&mut tape, &levels, &bound.heads)?;
    let grid = anchors_for(h, w)?;
    let props = proposals(
        cfg,
        &grid,
        tape.value(rpn.objectness),
        tape.value(rpn.deltas),
        h,
        w,
    )?;
    let kept: Vec<BoxXywh> = props.iter().take(cfg.roi_proposals).map(|p| p.bbox).collect();
    if kept.is_empty() {
        return Ok((props, Vec::new()));
    }
    let strides = pool_strides();
    let pooled = tape.roi_align(&levels, &strides, &rois_for(&kept), BOX_RES)?;
    let (cls, del) = box_head_forward(&mut tape, pooled, &bound.heads.box_head)?;
    let k = cfg.heads.num_classes;
    let (cls_v, del_v) = (tape.value(cls).clone(), tape.value(del).clone());

    // Per class: every proposal scoring above threshold, then class-wise
    // suppression.
    let mut dets: Vec<(BoxXywh, u8, f64)> = Vec::new();
    for class in 1..k {
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (r, p) in kept.iter().enumerate() {
            let z: Vec<f64> = cls_v.item(r).iter().map(|v| v.as_f64()).collect();
            let prob = softmax(&z)[class];
            if prob <= cfg.score_thresh {
                continue;
            }
            let d = Deltas::from_array(std::array::from_fn(|j| {
                del_v.item(r)[4 * class + j].as_f64()
            }));
            let b = decode_deltas(p, &d, cfg.normalized_deltas)?.clip(w as f64, h as f64);
            if b.w >= 1.0 && b.h >= 1.0 {
                boxes.push(b);
                scores.push(prob);
            }
        }
        for i in nms(&boxes, &scores, cfg.class_nms, usize::MAX) {
            dets.push((boxes[i], class as u8, scores[i]));
        }
    }
    dets.sort_by(|a, b| b.2.total_cmp(&a.2));
    if dets.is_empty() {
        return Ok((props, Vec::new()));
    }
    let boxes: Vec<BoxXywh> = dets.iter().map(|d| d.0).collect();
    let pooled = tape.roi_align(&levels, &strides, &rois_for(&boxes), MASK_RES)?;
    let logits = mask_head_forward(&mut tape, pooled, &bound.heads.mask)?;
    let lv = tape.value(logits);
    let detections = dets
        .iter()
        .enumerate()
        .map(|(r, &(bbox, class, score))| Detection {
            bbox,
            class,
            score,
            mask: lv
                .plane(r, class as usize)
                .iter()
                .map(|&v| sigmoid_scalar(v.as_f64()))
                .collect(),
        })
        .collect();
    Ok((props, detections))
}

/// Bilinear sample of an `m × m` grid at continuous cell coordinates
/// (cell centers at integers), clamped to the grid.
fn sample_grid(grid: &[f64], m: usize, u: f64, v: f64) -> f64 {
    let top = (m - 1) as f64;
    let (u, v) = (u.clamp(0.0, top), v.clamp(0.0, top));
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(m - 1), (y0 + 1).min(m - 1));
    let (lx, ly) = (u - x0 as f64, v - y0 as f64);
    let g = |y: usize, x: usize| grid[y * m + x];
    (1.0 - ly) * ((1.0 - lx) * g(y0, x0) + lx * g(y0, x1)) + ly * ((1.0 - lx) * g(y1, x0) + lx * g(y1, x1))
}

/// Resizes each detection's mask into its box and composites them: a pixel
/// takes the class of the highest-scoring detection whose pasted
/// probability exceeds `thresh`.
pub fn paste_masks(dets: &[Detection], h: usize, w: usize, thresh: f64) -> LabelMask {
    let mut out = LabelMask::new(h, w);
    let mut best = vec![f64::NEG_INFINITY; h * w];
    for d in dets {
        let m = (d.mask.len() as f64).sqrt() as usize;
        let b = &d.bbox;
        let ys = b.y0().floor().max(0.0) as usize;
        let ye = (b.y1().ceil().max(0.0) as usize).min(h);
        let xs = b.x0().floor().max(0.0) as usize;
        let xe = (b.x1().ceil().max(0.0) as usize).min(w);
        for y in ys..ye {
            let cy = y as f64 + 0.5;
            if cy < b.y0() || cy > b.y1() {
                continue;
            }
            let v = (cy - b.y0()) / b.h * m as f64 - 0.5;
            for x in xs..xe {
                let cx = x as f64 + 0.5;
                if cx < b.x0() || cx > b.x1() {
                    continue;
                }
                let u = (cx - b.x0()) / b.w * m as f64 - 0.5;
                let i = y * w + x;
                if d.score > best[i] && sample_grid(&d.mask, m, u, v) > thresh {
                    best[i] = d.score;
                    out.ids[i] = d.class;
                }
            }
        }
    }
    out
}

/// Image in, label mask out.
pub fn segment<T: Scalar>(
    cfg: &ModelConfig,
    weights: &ModelWeights<Tensor4<T>>,
    image: &Tensor4<T>,
) -> Result<LabelMask> {
    let [_, _, h, w] = image.dims();
    let (_, dets) = detect(cfg, weights, image)?;
    Ok(paste_masks(&dets, h, w, cfg.mask_thresh))
}
