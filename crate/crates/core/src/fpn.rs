//! Feature extractor: a small residual backbone with the stride schedule
//! {4, 8, 16, 32}, lateral 1×1 projections merged top-down, and per-level
//! fusion with the spatial-RNN context map.
//!
//! Per level `k`:
//!
//! ```text
//! semantic_k = lateral_k(stage_k) + upsample2x(semantic_{k+1})
//! context_k  = srnn_k(stage_k)
//! out_k      = compress_k(l2norm_scale(concat(semantic_k, context_k), gamma_k))
//! ```
//!
//! With the context branch disabled the concat holds only `semantic_k`,
//! which gives the plain pyramid baseline.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::irnn::{srnn_module, IrnnWeights, SrnnConfig};
use crate::params::{join, ConvWeights, Leaf, ParamTree};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor4};

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub widths: [usize; LEVELS],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: [16, 32, 64, 128],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<V> {
    pub conv1: ConvWeights<V>,
    pub conv2: ConvWeights<V>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<V> {
    pub down: ConvWeights<V>,
    pub block: ResidualBlock<V>,
}

/// A stride-2 stem followed by four stride-2 stages, so stage outputs sit
/// at strides 4, 8, 16 and 32.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights<V> {
    pub stem: ConvWeights<V>,
    pub stages: Vec<Stage<V>>,
}

impl<V> ParamTree<V> for ResidualBlock<V> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

impl<V> ParamTree<V> for Stage<V> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V)) {
        self.down.visit(&join(prefix, "down"), f);
        self.block.visit(&join(prefix, "block"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V)) {
        self.down.visit_mut(&join(prefix, "down"), f);
        self.block.visit_mut(&join(prefix, "block"), f);
    }
}

impl<V> ParamTree<V> for BackboneWeights<V> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.stages.visit(&join(prefix, "stage"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.stages.visit_mut(&join(prefix, "stage"), f);
    }
}

impl<V> BackboneWeights<V> {
    pub fn map<W>(&self, f: &mut dyn FnMut(&V) -> W) -> BackboneWeights<W> {
        BackboneWeights {
            stem: self.stem.map(f),
            stages: self
                .stages
                .iter()
                .map(|s| Stage {
                    down: s.down.map(f),
                    block: ResidualBlock {
                        conv1: s.block.conv1.map(f),
                        conv2: s.block.conv2.map(f),
                    },
                })
                .collect(),
        }
    }
}

impl<T: Scalar> BackboneWeights<Tensor4<T>> {
    pub fn init(cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let stem = ConvWeights::init(cfg.in_channels, cfg.widths[0], 3, rng);
        let mut prev = cfg.widths[0];
        let stages = cfg
            .widths
            .iter()
            .map(|&w| {
                let s = Stage {
                    down: ConvWeights::init(prev, w, 3, rng),
                    block: ResidualBlock {
                        conv1: ConvWeights::init(w, w, 3, rng),
                        conv2: ConvWeights::init(w, w, 3, rng),
                    },
                };
                prev = w;
                s
            })
            .collect();
        Self { stem, stages }
    }
}

/// `x + conv2(relu(conv1(x)))`
pub fn residual_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    b: &ResidualBlock<Var>,
) -> Result<Var> {
    let h = tape.conv(x, b.conv1.weight, b.conv1.bias, 1)?;
    let h = tape.relu(h)?;
    let h = tape.conv(h, b.conv2.weight, b.conv2.bias, 1)?;
    tape.add(x, h)
}

pub fn check_input_dims(dims: [usize; 4], in_channels: usize) -> Result<()> {
    let [_, c, h, w] = dims;
    if c != in_channels {
        return Err(Error::invalid(
            "backbone",
            format!("image has {c} channels, backbone expects {in_channels}"),
        ));
    }
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::invalid(
            "backbone",
            format!("image size {h}×{w} is not a multiple of 32; pad the image to a multiple of 32"),
        ));
    }
    Ok(())
}

/// Stage outputs at strides 4, 8, 16, 32.
pub fn backbone_forward<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    cfg: &BackboneConfig,
    w: &BackboneWeights<Var>,
) -> Result<[Var; LEVELS]> {
    check_input_dims(tape.dims(image), cfg.in_channels)?;
    let mut x = tape.conv(image, w.stem.weight, w.stem.bias, 2)?;
    x = tape.relu(x)?;
    let mut outs = [x; LEVELS];
    for (k, s) in w.stages.iter().enumerate() {
        x = tape.conv(x, s.down.weight, s.down.bias, 2)?;
        x = tape.relu(x)?;
        x = residual_block(tape, x, &s.block)?;
        outs[k] = x;
    }
    Ok(outs)
}

/// Semantic branch: `level_3 = lateral_3(stage_3)`,
/// `level_k = lateral_k(stage_k) + upsample2x(level_{k+1})`. Returned
/// finest first.
pub fn build_pyramid<T: Scalar>(
    tape: &mut Tape<T>,
    stages: &[Var; LEVELS],
    laterals: &[ConvWeights<Var>],
) -> Result<[Var; LEVELS]> {
    if laterals.len() != LEVELS {
        return Err(Error::invalid(
            "build_pyramid",
            format!("{} lateral projections for {LEVELS} stages", laterals.len()),
        ));
    }
    let lat: Vec<Var> = stages
        .iter()
        .zip(laterals)
        .map(|(&s, l)| tape.conv(s, l.weight, l.bias, 1))
        .collect::<Result<_>>()?;
    let mut levels = [lat[LEVELS - 1]; LEVELS];
    for k in (0..LEVELS - 1).rev() {
        let up = tape.upsample2x(levels[k + 1])?;
        levels[k] = tape
            .add(lat[k], up)
            .map_err(|e| e.context(format!("top-down merge into level {k}")))?;
    }
    Ok(levels)
}

/// `compress(l2norm_scale(concat(semantic, context), gamma))`; without a
/// context map the concat is the semantic map alone.
pub fn fuse_context<T: Scalar>(
    tape: &mut Tape<T>,
    semantic: Var,
    context: Option<Var>,
    gamma: Var,
    compress: &ConvWeights<Var>,
) -> Result<Var> {
    let cat = match context {
        Some(c) => tape.concat_channels(&[semantic, c])?,
        None => semantic,
    };
    let normed = tape.l2norm_scale(cat, gamma)?;
    tape.conv(normed, compress.weight, compress.bias, 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorConfig {
    pub backbone: BackboneConfig,
    pub pyramid_width: usize,
    pub srnn_enabled: bool,
    pub srnn_rounds: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            pyramid_width: 64,
            srnn_enabled: true,
            srnn_rounds: 2,
        }
    }
}

impl ExtractorConfig {
    /// Context module of level `k`: hidden width follows the stage width,
    /// output width matches the pyramid.
    pub fn srnn_config(&self, k: usize) -> Result<SrnnConfig> {
        SrnnConfig::new(self.srnn_rounds, self.backbone.widths[k], self.pyramid_width)
    }

    fn fused_width(&self) -> usize {
        if self.srnn_enabled {
            2 * self.pyramid_width
        } else {
            self.pyramid_width
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorWeights<V> {
    pub backbone: BackboneWeights<V>,
    pub laterals: Vec<ConvWeights<V>>,
    /// Per level, per round. Empty when the context branch is disabled.
    pub srnn: Vec<Vec<IrnnWeights<V>>>,
    pub gamma: Vec<Leaf<V>>,
    pub compress: Vec<ConvWeights<V>>,
}

impl<V> ParamTree<V> for ExtractorWeights<V> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a V)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.laterals.visit(&join(prefix, "lateral"), f);
        self.srnn.visit(&join(prefix, "srnn"), f);
        self.gamma.visit(&join(prefix, "gamma"), f);
        self.compress.visit(&join(prefix, "compress"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut V)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.laterals.visit_mut(&join(prefix, "lateral"), f);
        self.srnn.visit_mut(&join(prefix, "srnn"), f);
        self.gamma.visit_mut(&join(prefix, "gamma"), f);
        self.compress.visit_mut(&join(prefix, "compress"), f);
    }
}

impl<V> ExtractorWeights<V> {
    pub fn map<W>(&self, f: &mut dyn FnMut(&V) -> W) -> ExtractorWeights<W> {
        ExtractorWeights {
            backbone: self.backbone.map(f),
            laterals: self.laterals.iter().map(|l| l.map(f)).collect(),
            srnn: self
                .srnn
                .iter()
                .map(|rounds| rounds.iter().map(|r| r.map(f)).collect())
                .collect(),
            gamma: self.gamma.iter().map(|g| Leaf(f(&g.0))).collect(),
            compress: self.compress.iter().map(|c| c.map(f)).collect(),
        }
    }
}

impl<T: Scalar> ExtractorWeights<Tensor4<T>> {
    pub fn init(cfg: &ExtractorConfig, rng: &mut impl Rng) -> Result<Self> {
        let backbone = BackboneWeights::init(&cfg.backbone, rng);
        let p = cfg.pyramid_width;
        let laterals = cfg
            .backbone
            .widths
            .iter()
            .map(|&w| ConvWeights::init(w, p, 1, rng))
            .collect();
        let srnn = if cfg.srnn_enabled {
            (0..LEVELS)
                .map(|k| Ok(cfg.srnn_config(k)?.init_weights(cfg.backbone.widths[k], rng)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let fused = cfg.fused_width();
        let gamma = (0..LEVELS)
            .map(|_| Leaf(Tensor4::full([1, fused, 1, 1], T::one())))
            .collect();
        let compress = (0..LEVELS)
            .map(|_| ConvWeights::init(fused, p, 1, rng))
            .collect();
        Ok(Self {
            backbone,
            laterals,
            srnn,
            gamma,
            compress,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ExtractorWeights<Var> {
        self.map(&mut |t| tape.param(t.clone()))
    }
}

/// Image → four fused pyramid levels, finest first.
pub fn extract<T: Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    cfg: &ExtractorConfig,
    w: &ExtractorWeights<Var>,
) -> Result<[Var; LEVELS]> {
    let stages = backbone_forward(tape, image, &cfg.backbone, &w.backbone)
        .map_err(|e| e.context("backbone"))?;
    let semantic = build_pyramid(tape, &stages, &w.laterals)?;
    let mut out = semantic;
    for k in 0..LEVELS {
        let level_err = |e: Error| e.context(format!("pyramid level {k} (stride {})", STRIDES[k]));
        let context = if cfg.srnn_enabled {
            let scfg = cfg.srnn_config(k).map_err(level_err)?;
            Some(srnn_module(tape, stages[k], &scfg, &w.srnn[k]).map_err(level_err)?)
        } else {
            None
        };
        out[k] = fuse_context(tape, semantic[k], context, w.gamma[k].0, &w.compress[k])
            .map_err(level_err)?;
    }
    Ok(out)
}

/// Extracted pyramid levels with their strides, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<(usize, Tensor4<T>)>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn from_tape(tape: &Tape<T>, levels: &[Var; LEVELS]) -> Self {
        Self {
            levels: STRIDES
                .iter()
                .zip(levels)
                .map(|(&s, &v)| (s, tape.value(v).clone()))
                .collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.levels.first().map(|(_, t)| t.c()).unwrap_or(0)
    }

    /// Writes `level{k}_stride{s}.tns` per level into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for (k, (s, t)) in self.levels.iter().enumerate() {
            let p = dir.join(format!("level{k}_stride{s}.tns"));
            t.save(&p)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

/// Forward-only extraction on stored weights.
pub fn extract_pyramid<T: Scalar>(
    image: &Tensor4<T>,
    cfg: &ExtractorConfig,
    w: &ExtractorWeights<Tensor4<T>>,
) -> Result<FeaturePyramid<T>> {
    let mut tape = Tape::new();
    let img = tape.constant(image.clone());
    let bound = w.bind(&mut tape);
    let levels = extract(&mut tape, img, cfg, &bound)?;
    Ok(FeaturePyramid::from_tape(&tape, &levels))
}
