//! The full gradient-check suite: every differentiable op plus the
//! composite modules, each over several seeded trials.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::boxes::BoxXywh;
use crate::detect::heads::{
    box_head_forward, mask_head_forward, rpn_head_forward, HeadConfig, HeadWeights, BOX_RES,
    MASK_RES,
};
use crate::detect::losses::SmoothL1Params;
use crate::detect::roi::Roi;
use crate::detect::total::{total_loss, DetectionTargets, HeadOutputs};
use crate::error::Result;
use crate::fpn::{extract, fuse_context, BackboneConfig, ExtractorConfig, ExtractorWeights};
use crate::gradcheck::{grad_check_with, GradCheckOptions, GradReport};
use crate::irnn::{srnn_module, Direction, SrnnConfig};
use crate::params::{ConvWeights, ParamTree};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor4;

type Inputs = Vec<(String, Tensor4<f64>)>;
type Configure<'a> = &'a dyn Fn(&mut Tape<f64>);

pub struct GradCase {
    pub name: &'static str,
    run: fn(&mut ChaCha8Rng, &GradCheckOptions, Configure) -> Result<GradReport>,
}

impl GradCase {
    pub fn run(&self, rng: &mut ChaCha8Rng, opts: &GradCheckOptions, configure: Configure) -> Result<GradReport> {
        (self.run)(rng, opts, configure)
    }
}

fn u(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::uniform(dims, -1.0, 1.0, rng)
}

fn named(list: Vec<(&str, Tensor4<f64>)>) -> Inputs {
    list.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// `(name, tensor)` inputs for every slot of a weight tree, prefixed.
/// Every value is jittered: zero-initialized biases would otherwise let a
/// dead ReLU feed an exact zero into the next one, which sits on the kink.
fn tree_inputs<P: ParamTree<Tensor4<f64>>>(prefix: &str, p: &P, rng: &mut ChaCha8Rng) -> Inputs {
    let mut out = Vec::new();
    p.visit(prefix, &mut |n, t| {
        let mut t = t.clone();
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        out.push((n, t));
    });
    out
}

/// Rebuilds a `Var` tree from consecutive inputs; `map` walks slots in
/// the same order as `visit`.
fn rebind<W>(vars: &[Var], map: impl FnOnce(&mut dyn FnMut(&Tensor4<f64>) -> Var) -> W) -> W {
    let mut i = 0;
    map(&mut |_| {
        let v = vars[i];
        i += 1;
        v
    })
}

fn check(
    name: &str,
    inputs: Inputs,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
    configure: Configure,
) -> Result<GradReport> {
    grad_check_with(name, &inputs, f, opts, rng, |t| configure(t))
}

macro_rules! case {
    ($name:expr, $body:expr) => {
        GradCase {
            name: $name,
            run: $body,
        }
    };
}

fn conv_case(
    name: &str,
    x: [usize; 4],
    k: usize,
    c_out: usize,
    stride: usize,
    rng: &mut ChaCha8Rng,
    o: &GradCheckOptions,
    c: Configure,
) -> Result<GradReport> {
    let inputs = named(vec![
        ("x", u(x, rng)),
        ("weight", u([c_out, x[1], k, k], rng)),
        ("bias", u([1, c_out, 1, 1], rng)),
    ]);
    check(name, inputs, move |t, v| t.conv(v[0], v[1], v[2], stride), o, rng, c)
}

fn scan_case(dir: Direction, rng: &mut ChaCha8Rng, o: &GradCheckOptions, c: Configure) -> Result<GradReport> {
    // Near-identity recurrence keeps states well away from the ReLU kink
    // for most cells while still mixing channels.
    let w = Tensor4::from_fn([3, 3, 1, 1], |[i, j, _, _]| {
        (if i == j { 0.8 } else { 0.0 }) + rng.gen_range(-0.2..0.2)
    });
    let inputs = named(vec![("x", u([2, 3, 4, 5], rng)), ("w_hh", w)]);
    let name = format!("scan_{}", dir.name());
    check(&name, inputs, move |t, v| t.scan(v[0], v[1], dir), o, rng, c)
}

fn small_heads(rng: &mut ChaCha8Rng) -> (HeadConfig, HeadWeights<Tensor4<f64>>) {
    let cfg = HeadConfig {
        width: 3,
        box_hidden: 5,
        mask_width: 3,
        num_classes: 6,
    };
    let mut w = HeadWeights::init(&cfg, rng);
    // Undo the small output-layer init so every path carries signal.
    w.visit_mut("", &mut |_, t| {
        if t.h() == 1 && t.w() == 1 && t.n() == 1 && t.c() > 1 {
            *t = Tensor4::uniform(t.dims(), -0.5, 0.5, rng);
        }
    });
    (cfg, w)
}

fn rois(rng: &mut ChaCha8Rng, n: usize) -> Vec<Roi> {
    (0..n)
        .map(|_| Roi {
            level: rng.gen_range(0..2),
            batch: 0,
            bbox: BoxXywh::new(
                rng.gen_range(8.0..24.0),
                rng.gen_range(8.0..24.0),
                rng.gen_range(6.0..20.0),
                rng.gen_range(6.0..20.0),
            ),
        })
        .collect()
}

fn levels(rng: &mut ChaCha8Rng, c: usize) -> Inputs {
    named(vec![("level0", u([1, c, 8, 8], rng)), ("level1", u([1, c, 4, 4], rng))])
}

const POOL_STRIDES: [f64; 2] = [4.0, 8.0];

pub fn suite() -> Vec<GradCase> {
    vec![
        case!("conv3x3", |r, o, c| conv_case("conv3x3", [2, 3, 6, 5], 3, 4, 1, r, o, c)),
        case!("conv3x3_stride2", |r, o, c| conv_case("conv3x3_stride2", [1, 3, 7, 6], 3, 2, 2, r, o, c)),
        case!("conv1x1", |r, o, c| conv_case("conv1x1", [2, 5, 4, 4], 1, 3, 1, r, o, c)),
        case!("relu", |r, o, c| {
            check("relu", named(vec![("x", u([2, 3, 4, 4], r))]), |t, v| t.relu(v[0]), o, r, c)
        }),
        case!("sigmoid", |r, o, c| {
            let x = Tensor4::uniform([2, 3, 3, 3], -4.0, 4.0, r);
            check("sigmoid", named(vec![("x", x)]), |t, v| t.sigmoid(v[0]), o, r, c)
        }),
        case!("softmax_channels", |r, o, c| {
            let x = Tensor4::uniform([2, 4, 3, 3], -3.0, 3.0, r);
            check("softmax_channels", named(vec![("x", x)]), |t, v| t.softmax_channels(v[0]), o, r, c)
        }),
        case!("add", |r, o, c| {
            let i = named(vec![("a", u([1, 2, 3, 3], r)), ("b", u([1, 2, 3, 3], r))]);
            check("add", i, |t, v| t.add(v[0], v[1]), o, r, c)
        }),
        case!("concat_channels", |r, o, c| {
            let i = named(vec![("a", u([2, 2, 3, 3], r)), ("b", u([2, 3, 3, 3], r))]);
            check("concat_channels", i, |t, v| t.concat_channels(&[v[0], v[1]]), o, r, c)
        }),
        case!("slice_channels", |r, o, c| {
            let i = named(vec![("x", u([2, 5, 3, 3], r))]);
            check("slice_channels", i, |t, v| t.slice_channels(v[0], 1, 3), o, r, c)
        }),
        case!("upsample2x", |r, o, c| {
            let i = named(vec![("x", u([1, 2, 3, 4], r))]);
            check("upsample2x", i, |t, v| t.upsample2x(v[0]), o, r, c)
        }),
        case!("maxpool2x2", |r, o, c| {
            let i = named(vec![("x", u([1, 2, 4, 6], r))]);
            check("maxpool2x2", i, |t, v| t.maxpool2x2(v[0]), o, r, c)
        }),
        case!("avgpool2x2", |r, o, c| {
            let i = named(vec![("x", u([1, 2, 4, 6], r))]);
            check("avgpool2x2", i, |t, v| t.avgpool2x2(v[0]), o, r, c)
        }),
        case!("l2norm_scale", |r, o, c| {
            let i = named(vec![("x", u([2, 4, 3, 3], r)), ("gamma", u([1, 4, 1, 1], r))]);
            check("l2norm_scale", i, |t, v| t.l2norm_scale(v[0], v[1]), o, r, c)
        }),
        case!("fully_connected", |r, o, c| {
            let i = named(vec![
                ("x", u([3, 2, 3, 3], r)),
                ("weight", u([5, 18, 1, 1], r)),
                ("bias", u([1, 5, 1, 1], r)),
            ]);
            check("fully_connected", i, |t, v| t.fully_connected(v[0], v[1], v[2]), o, r, c)
        }),
        case!("scan_right", |r, o, c| scan_case(Direction::Right, r, o, c)),
        case!("scan_left", |r, o, c| scan_case(Direction::Left, r, o, c)),
        case!("scan_down", |r, o, c| scan_case(Direction::Down, r, o, c)),
        case!("scan_up", |r, o, c| scan_case(Direction::Up, r, o, c)),
        case!("roi_align", |r, o, c| {
            let rs = rois(r, 3);
            check(
                "roi_align",
                levels(r, 2),
                move |t, v| t.roi_align(v, &POOL_STRIDES, &rs, 3),
                o,
                r,
                c,
            )
        }),
        case!("concat_flat", |r, o, c| {
            let i = named(vec![("a", u([1, 2, 2, 2], r)), ("b", u([1, 1, 3, 3], r))]);
            check("concat_flat", i, |t, v| t.concat_flat(&[v[0], v[1]]), o, r, c)
        }),
        case!("objectness_loss", |r, o, c| {
            let targets: Vec<(usize, f64)> = (0..6).map(|i| (i, r.gen_range(0..2) as f64)).collect();
            let i = named(vec![("logits", Tensor4::uniform([1, 6, 1, 1], -3.0, 3.0, r))]);
            check("objectness_loss", i, move |t, v| t.objectness_loss(v[0], &targets), o, r, c)
        }),
        case!("smooth_l1_loss", |r, o, c| {
            let targets: Vec<(usize, f64)> = (0..8).map(|i| (i, r.gen_range(-2.0..2.0))).collect();
            let i = named(vec![("pred", Tensor4::uniform([1, 8, 1, 1], -2.0, 2.0, r))]);
            check(
                "smooth_l1_loss",
                i,
                move |t, v| t.smooth_l1_loss(v[0], &targets, SmoothL1Params::default()),
                o,
                r,
                c,
            )
        }),
        case!("classification_loss", |r, o, c| {
            let classes: Vec<usize> = (0..4).map(|_| r.gen_range(0..6)).collect();
            let i = named(vec![("logits", Tensor4::uniform([4, 6, 1, 1], -2.0, 2.0, r))]);
            check("classification_loss", i, move |t, v| t.classification_loss(v[0], &classes), o, r, c)
        }),
        case!("mask_loss", |r, o, c| {
            let classes: Vec<usize> = (0..3).map(|_| r.gen_range(0..6)).collect();
            let truth: Vec<Vec<f64>> =
                (0..3).map(|_| (0..16).map(|_| r.gen_range(0..2) as f64).collect()).collect();
            let i = named(vec![("logits", Tensor4::uniform([3, 6, 4, 4], -3.0, 3.0, r))]);
            check("mask_loss", i, move |t, v| t.mask_loss(v[0], &classes, &truth), o, r, c)
        }),
        case!("sum", |r, o, c| {
            let i = named(vec![("a", u([1, 1, 1, 1], r)), ("b", u([1, 1, 1, 1], r))]);
            check("sum", i, |t, v| t.sum(&[v[0], v[1], v[0]]), o, r, c)
        }),
        case!("srnn_module", |r, o, c| {
            let cfg = SrnnConfig::new(2, 3, 4).unwrap();
            let w = cfg.init_weights::<f64>(2, r);
            let mut inputs = named(vec![("x", u([1, 2, 5, 6], r))]);
            inputs.extend(tree_inputs("srnn", &w, r));
            check(
                "srnn_module",
                inputs,
                move |t, v| {
                    let mut rest = &v[1..];
                    let mut bound = Vec::new();
                    for wr in &w {
                        let b = rebind(rest, |f| wr.map(f));
                        rest = &rest[crate::params::param_names(wr).len()..];
                        bound.push(b);
                    }
                    srnn_module(t, v[0], &cfg, &bound)
                },
                o,
                r,
                c,
            )
        }),
        case!("fuse_context", |r, o, c| {
            let inputs = named(vec![
                ("semantic", u([1, 3, 4, 4], r)),
                ("context", u([1, 3, 4, 4], r)),
                ("gamma", u([1, 6, 1, 1], r)),
                ("compress.weight", u([3, 6, 1, 1], r)),
                ("compress.bias", u([1, 3, 1, 1], r)),
            ]);
            check(
                "fuse_context",
                inputs,
                |t, v| {
                    let cw = ConvWeights {
                        weight: v[3],
                        bias: v[4],
                    };
                    fuse_context(t, v[0], Some(v[1]), v[2], &cw)
                },
                o,
                r,
                c,
            )
        }),
        case!("rpn_head", |r, o, c| {
            let (_, w) = small_heads(r);
            let mut inputs = named(vec![("features", u([1, 3, 4, 5], r))]);
            inputs.extend(tree_inputs("rpn", &w.rpn, r));
            check(
                "rpn_head",
                inputs,
                move |t, v| {
                    let b = rebind(&v[1..], |f| crate::detect::heads::RpnHeadWeights {
                        conv: w.rpn.conv.map(f),
                        objectness: w.rpn.objectness.map(f),
                        deltas: w.rpn.deltas.map(f),
                    });
                    let (obj, d) = rpn_head_forward(t, v[0], &b)?;
                    t.concat_flat(&[obj, d])
                },
                o,
                r,
                c,
            )
        }),
        case!("box_head", |r, o, c| {
            let (_, w) = small_heads(r);
            let mut inputs = named(vec![("pooled", u([2, 3, BOX_RES, BOX_RES], r))]);
            inputs.extend(tree_inputs("box", &w.box_head, r));
            check(
                "box_head",
                inputs,
                move |t, v| {
                    let b = rebind(&v[1..], |f| crate::detect::heads::BoxHeadWeights {
                        fc1: w.box_head.fc1.map(f),
                        fc2: w.box_head.fc2.map(f),
                        cls: w.box_head.cls.map(f),
                        bbox: w.box_head.bbox.map(f),
                    });
                    let (cls, d) = box_head_forward(t, v[0], &b)?;
                    t.concat_flat(&[cls, d])
                },
                o,
                r,
                c,
            )
        }),
        case!("mask_head", |r, o, c| {
            let (_, w) = small_heads(r);
            let mut inputs = named(vec![("pooled", u([1, 3, MASK_RES, MASK_RES], r))]);
            inputs.extend(tree_inputs("mask", &w.mask, r));
            check(
                "mask_head",
                inputs,
                move |t, v| {
                    let b = rebind(&v[1..], |f| crate::detect::heads::MaskHeadWeights {
                        convs: w.mask.convs.iter().map(|cw| cw.map(&mut *f)).collect(),
                        logits: w.mask.logits.map(f),
                    });
                    mask_head_forward(t, v[0], &b)
                },
                o,
                r,
                c,
            )
        }),
        case!("extractor", |r, o, c| extractor_case(r, o, c)),
        case!("total_loss", |r, o, c| total_loss_case(r, o, c)),
    ]
}

/// Image → backbone → pyramid with context fusion, all four levels.
fn extractor_case(r: &mut ChaCha8Rng, o: &GradCheckOptions, c: Configure) -> Result<GradReport> {
    let cfg = ExtractorConfig {
        backbone: BackboneConfig {
            in_channels: 1,
            widths: [2, 3, 3, 4],
        },
        pyramid_width: 3,
        srnn_enabled: true,
        srnn_rounds: 2,
    };
    let w = ExtractorWeights::<Tensor4<f64>>::init(&cfg, r)?;
    let mut inputs = named(vec![("image", Tensor4::uniform([1, 1, 32, 32], 0.0, 1.0, r))]);
    inputs.extend(tree_inputs("extractor", &w, r));
    check(
        "extractor",
        inputs,
        move |t, v| {
            let b = rebind(&v[1..], |f| w.map(f));
            let levels = extract(t, v[0], &cfg, &b)?;
            t.concat_flat(&levels)
        },
        o,
        r,
        c,
    )
}

/// Pyramid levels → proposal head on both levels → ROI pooling → box and
/// mask heads → the five-term objective, with fixed targets.
fn total_loss_case(r: &mut ChaCha8Rng, o: &GradCheckOptions, c: Configure) -> Result<GradReport> {
    let (cfg, w) = small_heads(r);
    let k = cfg.num_classes;
    let mut inputs = levels(r, cfg.width);
    inputs.extend(tree_inputs("heads", &w, r));
    let box_rois = rois(r, 3);
    let mask_rois: Vec<Roi> = box_rois[..2].to_vec();
    let anchors = 8 * 8 + 4 * 4;
    let targets = DetectionTargets {
        objectness: (0..anchors).step_by(7).map(|i| (i, (i % 2) as f64)).collect(),
        anchor_deltas: (0..12).map(|i| (i * 13, r.gen_range(-2.0..2.0))).collect(),
        roi_classes: vec![1, 4, 0],
        box_deltas: (0..4)
            .map(|j| 4 + j)
            .chain((0..4).map(|j| 4 * k + 16 + j))
            .map(|i| (i, r.gen_range(-2.0..2.0)))
            .collect(),
        mask_classes: vec![1, 4],
        mask_truth: (0..2)
            .map(|_| (0..MASK_RES * MASK_RES).map(|_| r.gen_range(0..2) as f64).collect())
            .collect(),
    };
    check(
        "total_loss",
        inputs,
        move |t, v| {
            let lv = [v[0], v[1]];
            let hw = rebind(&v[2..], |f| w.map(f));
            let mut obj = Vec::new();
            let mut del = Vec::new();
            for &l in &lv {
                let (ob, d) = rpn_head_forward(t, l, &hw.rpn)?;
                obj.push(ob);
                del.push(d);
            }
            let objectness = t.concat_flat(&obj)?;
            let anchor_deltas = t.concat_flat(&del)?;
            let pooled = t.roi_align(&lv, &POOL_STRIDES, &box_rois, BOX_RES)?;
            let (class_logits, box_deltas) = box_head_forward(t, pooled, &hw.box_head)?;
            let mpooled = t.roi_align(&lv, &POOL_STRIDES, &mask_rois, MASK_RES)?;
            let mask_logits = mask_head_forward(t, mpooled, &hw.mask)?;
            let out = HeadOutputs {
                objectness,
                anchor_deltas,
                class_logits,
                box_deltas,
                mask_logits,
            };
            Ok(total_loss(t, &out, &targets, SmoothL1Params::default())?.0)
        },
        o,
        r,
        c,
    )
}

/// Step scale for the single retry of a failed trial.
pub const KINK_RETRY_SCALE: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    /// Worst error over all trials.
    pub max_rel_error: f64,
    pub trials: usize,
    /// Trials that failed at the base step and were rerun, first at a
    /// finer step and then, if needed, on freshly drawn inputs.
    pub retried: usize,
    pub passed: bool,
    /// Input with the worst error, for the report.
    pub worst_input: String,
}

/// Runs every case whose name contains one of `filter` (all cases when the
/// filter is empty), `trials` times each with seeds derived from `seed`.
pub fn run_suite(
    filter: &[String],
    trials: usize,
    seed: u64,
    opts: &GradCheckOptions,
    inject_conv_fault: bool,
) -> Result<Vec<CaseResult>> {
    let configure = move |t: &mut Tape<f64>| t.inject_conv_backward_fault(inject_conv_fault);
    let mut out = Vec::new();
    for (ci, case) in suite().iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| case.name.contains(f.as_str())) {
            continue;
        }
        let mut worst = 0.0f64;
        let mut worst_input = String::new();
        let mut retried = 0;
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((ci as u64) << 32) | trial as u64);
            let snapshot = rng.clone();
            let mut report = case.run(&mut rng, opts, &configure)?;
            if !report.passed() {
                // A probe straddling a ReLU kink fails at one step size but
                // not at a much smaller one; a wrong backward fails at both.
                let fine = GradCheckOptions {
                    step: opts.step * KINK_RETRY_SCALE,
                    ..opts.clone()
                };
                report = case.run(&mut snapshot.clone(), &fine, &configure)?;
                retried += 1;
                if !report.passed() {
                    // A kink closer than any usable step: redraw the inputs.
                    let mut fresh = ChaCha8Rng::seed_from_u64(seed);
                    fresh.set_stream(((ci as u64) << 32) | (1 << 31) | trial as u64);
                    report = case.run(&mut fresh, opts, &configure)?;
                }
            }
            for (name, e) in &report.per_input {
                if *e > worst || worst_input.is_empty() {
                    worst = worst.max(*e);
                    worst_input = name.clone();
                }
            }
        }
        out.push(CaseResult {
            name: case.name,
            max_rel_error: worst,
            trials,
            retried,
            passed: worst <= opts.tolerance,
            worst_input,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_and_visit_agree_on_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, w) = small_heads(&mut rng);
        let mut i = 0usize;
        let idx = w.map(&mut |_| {
            i += 1;
            i - 1
        });
        let mut seen = Vec::new();
        idx.visit("", &mut |_, &v| seen.push(v));
        assert_eq!(seen, (0..seen.len()).collect::<Vec<_>>());
    }

    #[test]
    fn names_are_unique() {
        let s = suite();
        let mut names: Vec<_> = s.iter().map(|c| c.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), s.len());
    }
}
