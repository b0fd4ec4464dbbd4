//! Proposal, box and mask heads. One weight set of each serves every
//! pyramid level.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{join, ConvWeights, ParamTree};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor4};

/// Five organs plus background.
pub const NUM_CLASSES: usize = 6;
pub const BOX_RES: usize = 7;
pub const MASK_RES: usize = 14;
pub const MASK_CONVS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    /// Pyramid width the heads consume.
    pub width: usize,
    pub box_hidden: usize,
    pub mask_width: usize,
    pub num_classes: usize,
}

impl HeadConfig {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            box_hidden: 128,
            mask_width: 16,
            num_classes: NUM_CLASSES,
        }
    }
}

/// 3×3 conv + ReLU, then sibling 1×1 convs for the objectness logit and
/// the four anchor deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnHeadWeights<V> {
    pub conv: ConvWeights<V>,
    pub objectness: ConvWeights<V>,
    pub deltas: ConvWeights<V>,
}

/// Two hidden dense layers over the flattened 7×7 ROI features, then
/// class logits and per-class deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxHeadWeights<V> {
    pub fc1: ConvWeights<V>,
    pub fc2: ConvWeights<V>,
    pub cls: ConvWeights<V>,
    pub bbox: ConvWeights<V>,
}

/// Four 3×3 conv + ReLU layers on 14×14 ROI features, then a 1×1 conv to
/// one mask logit map per class.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskHeadWeights<V> {
    pub convs: Vec<ConvWeights<V>>,
    pub logits: ConvWeights<V>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<V> {
    pub rpn: RpnHeadWeights<V>,
    pub box_head: BoxHeadWeights<V>,
    pub mask: MaskHeadWeights<V>,
}

impl<V> ParamTree<V> for RpnHeadWeights<V> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.objectness.visit(&join(prefix, "objectness"), f);
        self.deltas.visit(&join(prefix, "deltas"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.objectness.visit_mut(&join(prefix, "objectness"), f);
        self.deltas.visit_mut(&join(prefix, "deltas"), f);
    }
}

impl<V> ParamTree<V> for BoxHeadWeights<V> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        self.cls.visit(&join(prefix, "cls"), f);
        self.bbox.visit(&join(prefix, "bbox"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        self.cls.visit_mut(&join(prefix, "cls"), f);
        self.bbox.visit_mut(&join(prefix, "bbox"), f);
    }
}

impl<V> ParamTree<V> for MaskHeadWeights<V> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V)) {
        self.convs.visit(&join(prefix, "conv"), f);
        self.logits.visit(&join(prefix, "logits"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V)) {
        self.convs.visit_mut(&join(prefix, "conv"), f);
        self.logits.visit_mut(&join(prefix, "logits"), f);
    }
}

impl<V> ParamTree<V> for HeadWeights<V> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V)) {
        self.rpn.visit(&join(prefix, "rpn"), f);
        self.box_head.visit(&join(prefix, "box"), f);
        self.mask.visit(&join(prefix, "mask"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V)) {
        self.rpn.visit_mut(&join(prefix, "rpn"), f);
        self.box_head.visit_mut(&join(prefix, "box"), f);
        self.mask.visit_mut(&join(prefix, "mask"), f);
    }
}

impl<V> HeadWeights<V> {
    pub fn map<W>(&self, f: &mut dyn FnMut(&V) -> W) -> HeadWeights<W> {
        HeadWeights {
            rpn: RpnHeadWeights {
                conv: self.rpn.conv.map(f),
                objectness: self.rpn.objectness.map(f),
                deltas: self.rpn.deltas.map(f),
            },
            box_head: BoxHeadWeights {
                fc1: self.box_head.fc1.map(f),
                fc2: self.box_head.fc2.map(f),
                cls: self.box_head.cls.map(f),
                bbox: self.box_head.bbox.map(f),
            },
            mask: MaskHeadWeights {
                convs: self.mask.convs.iter().map(|c| c.map(f)).collect(),
                logits: self.mask.logits.map(f),
            },
        }
    }
}

impl<T: Scalar> HeadWeights<Tensor4<T>> {
    /// Output layers start small so initial logits and deltas sit near 0.
    pub fn init(cfg: &HeadConfig, rng: &mut impl Rng) -> Self {
        let p = cfg.width;
        let k = cfg.num_classes;
        let small = |mut c: ConvWeights<Tensor4<T>>| {
            c.weight = c.weight.scale(T::of(0.1));
            c
        };
        let mut convs = Vec::with_capacity(MASK_CONVS);
        let mut c_in = p;
        for _ in 0..MASK_CONVS {
            convs.push(ConvWeights::init(c_in, cfg.mask_width, 3, rng));
            c_in = cfg.mask_width;
        }
        Self {
            rpn: RpnHeadWeights {
                conv: ConvWeights::init(p, p, 3, rng),
                objectness: small(ConvWeights::init(p, 1, 1, rng)),
                deltas: small(ConvWeights::init(p, 4, 1, rng)),
            },
            box_head: BoxHeadWeights {
                fc1: ConvWeights::init_dense(p * BOX_RES * BOX_RES, cfg.box_hidden, rng),
                fc2: ConvWeights::init_dense(cfg.box_hidden, cfg.box_hidden, rng),
                cls: small(ConvWeights::init_dense(cfg.box_hidden, k, rng)),
                bbox: small(ConvWeights::init_dense(cfg.box_hidden, 4 * k, rng)),
            },
            mask: MaskHeadWeights {
                convs,
                logits: small(ConvWeights::init(cfg.mask_width, k, 1, rng)),
            },
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> HeadWeights<Var> {
        self.map(&mut |t| tape.param(t.clone()))
    }
}

/// Returns `(objectness (n, 1, h, w), deltas (n, 4, h, w))` for one level.
pub fn rpn_head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    level: Var,
    w: &RpnHeadWeights<Var>,
) -> Result<(Var, Var)> {
    let h = tape.conv(level, w.conv.weight, w.conv.bias, 1)?;
    let h = tape.relu(h)?;
    let obj = tape.conv(h, w.objectness.weight, w.objectness.bias, 1)?;
    let deltas = tape.conv(h, w.deltas.weight, w.deltas.bias, 1)?;
    Ok((obj, deltas))
}

/// `(R, P, 7, 7)` pooled features → `(class logits (R, K, 1, 1), deltas
/// (R, 4K, 1, 1))`.
pub fn box_head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    pooled: Var,
    w: &BoxHeadWeights<Var>,
) -> Result<(Var, Var)> {
    let [_, _, h, wd] = tape.dims(pooled);
    if h != BOX_RES || wd != BOX_RES {
        return Err(Error::invalid(
            "box_head",
            format!("expected {BOX_RES}×{BOX_RES} ROI features, got {h}×{wd}"),
        ));
    }
    let x = tape.fully_connected(pooled, w.fc1.weight, w.fc1.bias)?;
    let x = tape.relu(x)?;
    let x = tape.fully_connected(x, w.fc2.weight, w.fc2.bias)?;
    let x = tape.relu(x)?;
    let cls = tape.fully_connected(x, w.cls.weight, w.cls.bias)?;
    let deltas = tape.fully_connected(x, w.bbox.weight, w.bbox.bias)?;
    Ok((cls, deltas))
}

/// `(R, P, m, m)` pooled features → `(R, K, m, m)` mask logits.
pub fn mask_head_forward<T: Scalar>(
    tape: &mut Tape<T>,
    pooled: Var,
    w: &MaskHeadWeights<Var>,
) -> Result<Var> {
    let mut x = pooled;
    for c in &w.convs {
        x = tape.conv(x, c.weight, c.bias, 1)?;
        x = tape.relu(x)?;
    }
    tape.conv(x, w.logits.weight, w.logits.bias, 1)
}
