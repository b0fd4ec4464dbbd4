//! Library results against independent brute-force or hand-derived
//! references.

use std::collections::HashSet;

use organseg::data::dice::{mean_dice, AbsentClassPolicy, DICE_EPS};
use organseg::data::histogram::{class_histogram, mask_histogram};
use organseg::data::mask::LabelMask;
use organseg::data::palette::{ClassPalette, KIDNEY, LIVER};
use organseg::detect::boxes::BoxXywh;
use organseg::detect::heads::{HeadConfig, HeadWeights};
use organseg::detect::losses::{SmoothL1Params, P_CLAMP};
use organseg::detect::nms::nms;
use organseg::detect::total::{total_loss, DetectionTargets, HeadOutputs};
use organseg::fpn::{build_pyramid, extract_pyramid, fuse_context, ExtractorConfig, ExtractorWeights, BackboneConfig};
use organseg::model::{ModelConfig, ModelWeights};
use organseg::params::{count_params, param_names, ConvWeights};
use organseg::{Tape, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reference_nms(boxes: &[BoxXywh], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        // Best remaining box; ties go to the lower index.
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        for i in 0..boxes.len() {
            if alive[i] && boxes[i].iou(&boxes[b]) > thresh {
                alive[i] = false;
            }
        }
        alive[b] = false;
    }
    kept
}

#[test]
fn nms_matches_exhaustive_suppression() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boxes: Vec<BoxXywh> = (0..50)
            .map(|_| {
                BoxXywh::new(
                    rng.gen_range(0.0..60.0),
                    rng.gen_range(0.0..60.0),
                    rng.gen_range(4.0..30.0),
                    rng.gen_range(4.0..30.0),
                )
            })
            .collect();
        // Coarse scores so ties actually occur.
        let scores: Vec<f64> = (0..50).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
        for thresh in [0.3, 0.5, 0.7] {
            assert_eq!(
                nms(&boxes, &scores, thresh, usize::MAX),
                reference_nms(&boxes, &scores, thresh),
                "seed {seed} thresh {thresh}"
            );
        }
    }
}

fn random_mask(rng: &mut ChaCha8Rng, classes: u8) -> LabelMask {
    // Blocky masks so classes are sometimes absent and overlaps are partial.
    let mut m = LabelMask::new(32, 32);
    for _ in 0..rng.gen_range(0..6) {
        let k = rng.gen_range(0..classes);
        let (y0, x0) = (rng.gen_range(0..32), rng.gen_range(0..32));
        let (h, w) = (rng.gen_range(1..16), rng.gen_range(1..16));
        for y in y0..(y0 + h).min(32) {
            for x in x0..(x0 + w).min(32) {
                m.set(y, x, k);
            }
        }
    }
    m
}

fn pixel_set(m: &LabelMask, k: u8) -> HashSet<(usize, usize)> {
    (0..m.h)
        .flat_map(|y| (0..m.w).map(move |x| (y, x)))
        .filter(|&(y, x)| m.get(y, x) == k)
        .collect()
}

fn reference_mean_dice(x: &LabelMask, y: &LabelMask, skip_absent: bool) -> f64 {
    let mut terms = Vec::new();
    for k in 1..=5u8 {
        let (sx, sy) = (pixel_set(x, k), pixel_set(y, k));
        if skip_absent && sx.is_empty() && sy.is_empty() {
            continue;
        }
        let both = sx.intersection(&sy).count() as f64;
        terms.push(2.0 * both / (sx.len() as f64 + sy.len() as f64 + 1e-6));
    }
    if terms.is_empty() {
        1.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

#[test]
fn mean_dice_matches_set_counting() {
    assert_eq!(DICE_EPS, 1e-6);
    let palette = ClassPalette::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..200 {
        let x = random_mask(&mut rng, 6);
        let y = if i % 7 == 0 { x.clone() } else { random_mask(&mut rng, 6) };
        for (policy, skip) in [(AbsentClassPolicy::Zero, false), (AbsentClassPolicy::Skip, true)] {
            let got = mean_dice(&x, &y, &palette, policy).unwrap().mean;
            let want = reference_mean_dice(&x, &y, skip);
            assert!((got - want).abs() <= 1e-12, "pair {i} {policy:?}: {got} vs {want}");
        }
    }
}

#[test]
fn two_disjoint_blobs_count_twice() {
    let palette = ClassPalette::default();
    let mut m = LabelMask::new(12, 12);
    for (y0, x0) in [(1, 1), (7, 7)] {
        for y in y0..y0 + 3 {
            for x in x0..x0 + 3 {
                m.set(y, x, KIDNEY);
            }
        }
    }
    let counts = mask_histogram(&m, &palette);
    assert_eq!(counts[KIDNEY as usize], 2);
    assert_eq!(counts[LIVER as usize], 0);
    // A diagonal bridge joins them under 8-connectivity.
    for i in 4..7 {
        m.set(i, i, KIDNEY);
    }
    assert_eq!(mask_histogram(&m, &palette)[KIDNEY as usize], 1);
}

#[test]
fn empty_directory_histogram_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let h = class_histogram(dir.path(), &ClassPalette::default()).unwrap();
    assert!(h.counts.iter().all(|&c| c == 0));
    assert_eq!((h.files, h.skipped), (0, 0));
}

fn bce(z: f64, y: f64) -> f64 {
    let p = (1.0 / (1.0 + (-z).exp())).clamp(P_CLAMP, 1.0 - P_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

#[test]
fn total_loss_matches_straight_line_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let obj = Tensor4::<f64>::uniform([1, 3, 4, 4], -3.0, 3.0, &mut rng);
    let anchor = Tensor4::<f64>::uniform([1, 12, 4, 4], -2.0, 2.0, &mut rng);
    let cls = Tensor4::<f64>::uniform([3, 6, 1, 1], -3.0, 3.0, &mut rng);
    let boxd = Tensor4::<f64>::uniform([3, 24, 1, 1], -2.0, 2.0, &mut rng);
    let mask = Tensor4::<f64>::uniform([2, 6, 3, 3], -3.0, 3.0, &mut rng);
    let targets = DetectionTargets {
        objectness: (0..48).step_by(5).map(|i| (i, (i % 2) as f64)).collect(),
        anchor_deltas: (0..192).step_by(11).map(|i| (i, rng.gen_range(-3.0..3.0))).collect(),
        roi_classes: vec![0, 4, 2],
        box_deltas: (16..20).chain(8..12).map(|i| (i, rng.gen_range(-3.0..3.0))).collect(),
        mask_classes: vec![4, 2],
        mask_truth: (0..2).map(|_| (0..9).map(|_| rng.gen_range(0..2) as f64).collect()).collect(),
    };

    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let l_obj = mean(targets.objectness.iter().map(|&(i, y)| bce(obj.data()[i], y)).collect());
    let l_anchor = mean(
        targets.anchor_deltas.iter().map(|&(i, t)| smooth_l1(anchor.data()[i] - t)).collect(),
    );
    let l_cls = mean(
        targets
            .roi_classes
            .iter()
            .enumerate()
            .map(|(r, &k)| {
                let z: Vec<f64> = (0..6).map(|c| cls.at(r, c, 0, 0)).collect();
                z.iter().map(|v| v.exp()).sum::<f64>().ln() - z[k]
            })
            .collect(),
    );
    let l_box = mean(targets.box_deltas.iter().map(|&(i, t)| smooth_l1(boxd.data()[i] - t)).collect());
    let l_mask = mean(
        targets
            .mask_classes
            .iter()
            .enumerate()
            .map(|(r, &k)| {
                mean((0..9).map(|c| bce(mask.at(r, k, c / 3, c % 3), targets.mask_truth[r][c])).collect())
            })
            .collect(),
    );
    let want = [l_obj, l_anchor, l_cls, l_box, l_mask];

    let mut tape = Tape::<f64>::new();
    let out = HeadOutputs {
        objectness: tape.param(obj),
        anchor_deltas: tape.param(anchor),
        class_logits: tape.param(cls),
        box_deltas: tape.param(boxd),
        mask_logits: tape.param(mask),
    };
    let (_, got) = total_loss(&mut tape, &out, &targets, SmoothL1Params::default()).unwrap();
    for (g, w) in got.terms().iter().zip(want) {
        assert!((g - w).abs() <= 1e-9, "{got} vs {want:?}");
    }
    assert!((got.total - want.iter().sum::<f64>()).abs() <= 1e-9);
}

/// `v` at one location as a `(1, c, 1, 1)` tensor.
fn column(v: &[f64]) -> Tensor4<f64> {
    Tensor4::from_vec([1, v.len(), 1, 1], v.to_vec()).unwrap()
}

#[test]
fn fuse_context_fixture() {
    let v = [3.0, -4.0, 12.0];
    let norm = 13.0;
    let p = v.len();
    // Compress keeps the semantic half and drops the context half.
    let keep_semantic = Tensor4::from_fn([p, 2 * p, 1, 1], |[o, i, _, _]| if i == o { 1.0 } else { 0.0 });
    let cases = [
        // Zero context: the concat norm is |v|, so γ = √2 scales to √2·v/|v|.
        (vec![0.0; 3], 2f64.sqrt() / norm),
        // Equal halves: the concat norm is √2·|v|, leaving v/|v|.
        (v.to_vec(), 1.0 / norm),
    ];
    for (context, factor) in cases {
        let mut tape = Tape::<f64>::new();
        let s = tape.param(column(&v));
        let c = tape.param(column(&context));
        let gamma = tape.param(Tensor4::full([1, 2 * p, 1, 1], 2f64.sqrt()));
        let compress = ConvWeights {
            weight: tape.param(keep_semantic.clone()),
            bias: tape.param(Tensor4::zeros([1, p, 1, 1])),
        };
        let y = fuse_context(&mut tape, s, Some(c), gamma, &compress).unwrap();
        for (got, x) in tape.value(y).data().iter().zip(v) {
            assert!((got - x * factor).abs() <= 1e-12, "{got} vs {}", x * factor);
        }
    }
}

#[test]
fn semantic_equal_context_normalizes_to_unit_length() {
    let v = [0.5, 2.0, -1.0, 7.0];
    let mut tape = Tape::<f64>::new();
    let s = tape.param(column(&v));
    let cat = tape.concat_channels(&[s, s]).unwrap();
    let gamma = tape.param(Tensor4::full([1, 8, 1, 1], 1.0));
    let y = tape.l2norm_scale(cat, gamma).unwrap();
    let out = tape.value(y).data();
    assert!((out.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() <= 1e-12);
    assert_eq!(out[..4], out[4..]);
}

fn small_extractor(srnn: bool) -> ExtractorConfig {
    ExtractorConfig {
        backbone: BackboneConfig {
            in_channels: 1,
            widths: [4, 6, 6, 8],
        },
        pyramid_width: 5,
        srnn_enabled: srnn,
        srnn_rounds: 2,
    }
}

#[test]
fn every_level_has_pyramid_width() {
    for srnn in [true, false] {
        let cfg = small_extractor(srnn);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = ExtractorWeights::<Tensor4<f64>>::init(&cfg, &mut rng).unwrap();
        let img = Tensor4::uniform([1, 1, 32, 32], 0.0, 1.0, &mut rng);
        let pyr = extract_pyramid(&img, &cfg, &w).unwrap();
        let sides: Vec<_> = pyr.levels.iter().map(|(s, t)| (*s, t.c(), t.h())).collect();
        assert_eq!(sides, vec![(4, 5, 8), (8, 5, 4), (16, 5, 2), (32, 5, 1)]);
        assert!(pyr.levels.iter().all(|(_, t)| t.all_finite()));
    }
}

#[test]
fn top_down_path_is_linear_in_laterals() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let widths = [3, 4, 4, 5];
    let stages: Vec<Tensor4<f64>> = widths
        .iter()
        .enumerate()
        .map(|(k, &c)| Tensor4::uniform([1, c, 16 >> k, 16 >> k], -1.0, 1.0, &mut rng))
        .collect();
    let laterals: Vec<Tensor4<f64>> =
        widths.iter().map(|&c| Tensor4::uniform([6, c, 1, 1], -1.0, 1.0, &mut rng)).collect();
    let run = |scale: f64| {
        let mut tape = Tape::<f64>::new();
        let s: Vec<_> = stages.iter().map(|t| tape.constant(t.clone())).collect();
        let l: Vec<_> = laterals
            .iter()
            .map(|w| ConvWeights {
                weight: tape.constant(w.scale(scale)),
                bias: tape.constant(Tensor4::zeros([1, 6, 1, 1])),
            })
            .collect();
        let levels = build_pyramid(&mut tape, &[s[0], s[1], s[2], s[3]], &l).unwrap();
        levels.map(|v| tape.value(v).clone())
    };
    let (once, twice) = (run(1.0), run(2.0));
    for (a, b) in once.iter().zip(&twice) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.0 * x - y).abs() <= 1e-6 * y.abs().max(1e-12), "{x} {y}");
        }
    }
}

#[test]
fn heads_hold_one_weight_set_for_all_levels() {
    let cfg = ModelConfig {
        extractor: small_extractor(true),
        heads: HeadConfig::new(5),
        ..ModelConfig::default()
    };
    let w = ModelWeights::<Tensor4<f64>>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let heads = HeadWeights::<Tensor4<f64>>::init(&cfg.heads, &mut ChaCha8Rng::seed_from_u64(0));
    let in_model: Vec<_> = param_names(&w).into_iter().filter(|n| n.starts_with("heads")).collect();
    assert_eq!(in_model.len(), param_names(&heads).len());
    assert_eq!(count_params(&w.heads), count_params(&heads));
    // Nothing under the heads is indexed by pyramid level.
    assert!(in_model.iter().all(|n| !n.contains("level")), "{in_model:?}");
}

#[test]
fn extraction_is_identical_across_thread_counts() {
    let cfg = small_extractor(true);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let w = ExtractorWeights::<Tensor4<f64>>::init(&cfg, &mut rng).unwrap();
    let img = Tensor4::uniform([2, 1, 64, 64], 0.0, 1.0, &mut rng);
    let bytes = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let pyr = extract_pyramid(&img, &cfg, &w).unwrap();
            pyr.levels.iter().flat_map(|(_, t)| t.to_bytes()).collect::<Vec<u8>>()
        })
    };
    let one = bytes(1);
    assert_eq!(one, bytes(4));
    assert_eq!(one, bytes(1));
}
