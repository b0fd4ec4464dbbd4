//! Algebraic properties of the kernels, boxes, losses and Dice, checked on
//! generated inputs.

use organseg::data::dice::{dice_pair, mean_dice, AbsentClassPolicy};
use organseg::data::mask::{decode_mask, render_overlay, LabelMask, DECODE_TOLERANCE};
use organseg::data::palette::ClassPalette;
use organseg::detect::boxes::{decode_deltas, encode_deltas, BoxXywh};
use organseg::detect::losses::{
    classification_loss, mask_loss, objectness_loss, smooth_l1_loss, smooth_l1_value,
    SmoothL1Params,
};
use organseg::irnn::scan::{identity, scan_forward};
use organseg::irnn::Direction;
use organseg::kernels::conv::conv_forward;
use organseg::kernels::{avgpool2x2, concat_channels, relu, upsample2x_nearest};
use organseg::Tensor4;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(dims: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor4<f64> {
    Tensor4::uniform(dims, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn small_dims() -> impl Strategy<Value = [usize; 4]> {
    (1..3usize, 1..4usize, 1..7usize, 1..7usize).prop_map(|(n, c, h, w)| [n, c, h, w])
}

fn mask_pair(seed: u64, classes: u8) -> (LabelMask, LabelMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let ids = (0..16 * 16).map(|_| rng.gen_range(0..classes)).collect();
        LabelMask::from_ids(16, 16, ids).unwrap()
    };
    (draw(), draw())
}

fn arb_box() -> impl Strategy<Value = BoxXywh> {
    (0.0..500.0f64, 0.0..500.0f64, 1.0..300.0f64, 1.0..300.0f64)
        .prop_map(|(x, y, w, h)| BoxXywh::new(x, y, w, h))
}

/// Boxes whose pairwise size ratios stay inside the decoder's clamp.
fn bounded_box() -> impl Strategy<Value = BoxXywh> {
    (0.0..500.0f64, 0.0..500.0f64, 8.0..400.0f64, 8.0..400.0f64)
        .prop_map(|(x, y, w, h)| BoxXywh::new(x, y, w, h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_in_its_input(
        dims in small_dims(),
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1..3usize,
        c_out in 1..4usize,
        seed in any::<u64>(),
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
    ) {
        let x = tensor(dims, seed, -1.0, 1.0);
        let y = tensor(dims, seed ^ 1, -1.0, 1.0);
        let w = tensor([c_out, dims[1], k, k], seed ^ 2, -1.0, 1.0);
        let zero = Tensor4::zeros([1, c_out, 1, 1]);
        let mut mix = x.scale(a);
        mix.add_assign(&y.scale(b)).unwrap();
        let lhs = conv_forward(&mix, &w, &zero, stride).unwrap();
        let mut rhs = conv_forward(&x, &w, &zero, stride).unwrap().scale(a);
        rhs.add_assign(&conv_forward(&y, &w, &zero, stride).unwrap().scale(b)).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() <= 1e-5 * r.abs().max(1.0), "{l} vs {r}");
        }
    }

    #[test]
    fn relu_is_idempotent(dims in small_dims(), seed in any::<u64>()) {
        let x = tensor(dims, seed, -1.0, 1.0);
        let once = relu(&x);
        prop_assert_eq!(relu(&once), once);
    }

    #[test]
    fn avgpool_undoes_nearest_upsampling(dims in small_dims(), seed in any::<u64>()) {
        let x = tensor(dims, seed, -10.0, 10.0);
        prop_assert_eq!(avgpool2x2(&upsample2x_nearest(&x)).unwrap(), x);
    }

    #[test]
    fn concat_then_slice_recovers_parts(
        n in 1..3usize, h in 1..5usize, w in 1..5usize,
        widths in prop::collection::vec(1..4usize, 1..4),
        seed in any::<u64>(),
    ) {
        let parts: Vec<_> = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| tensor([n, c, h, w], seed + i as u64, -1.0, 1.0))
            .collect();
        let refs: Vec<_> = parts.iter().collect();
        let cat = concat_channels(&refs).unwrap();
        let mut start = 0;
        for p in &parts {
            prop_assert_eq!(&cat.slice_channels(start, p.c()).unwrap(), p);
            start += p.c();
        }
    }

    #[test]
    fn reverse_scans_are_flipped_forward_scans(dims in small_dims(), seed in any::<u64>()) {
        let x = tensor(dims, seed, -1.0, 1.0);
        let c = dims[1];
        let w = tensor([c, c, 1, 1], seed ^ 7, -0.6, 0.6);
        let left = scan_forward(&x, &w, Direction::Left).unwrap();
        let via_right = scan_forward(&x.flip_w(), &w, Direction::Right).unwrap().flip_w();
        prop_assert_eq!(left, via_right);
        let up = scan_forward(&x, &w, Direction::Up).unwrap();
        let via_down = scan_forward(&x.flip_h(), &w, Direction::Down).unwrap().flip_h();
        prop_assert_eq!(up, via_down);
    }

    #[test]
    fn rows_scan_independently(dims in small_dims(), seed in any::<u64>(), row in 0..6usize) {
        let [n, c, h, w] = dims;
        let row = row % h;
        let x = tensor(dims, seed, -1.0, 1.0);
        let wt = tensor([c, c, 1, 1], seed ^ 3, -0.6, 0.6);
        let mut zeroed = x.clone();
        for b in 0..n {
            for ch in 0..c {
                for col in 0..w {
                    zeroed.set(b, ch, row, col, 0.0);
                }
            }
        }
        let a = scan_forward(&x, &wt, Direction::Right).unwrap();
        let z = scan_forward(&zeroed, &wt, Direction::Right).unwrap();
        for b in 0..n {
            for ch in 0..c {
                for y in (0..h).filter(|&y| y != row) {
                    for col in 0..w {
                        prop_assert_eq!(a.at(b, ch, y, col), z.at(b, ch, y, col));
                    }
                }
            }
        }
    }

    #[test]
    fn identity_scan_is_a_running_sum(dims in small_dims(), seed in any::<u64>()) {
        let [n, c, h, w] = dims;
        let x = tensor(dims, seed, 0.0, 1.0);
        let out = scan_forward(&x, &identity(c), Direction::Right).unwrap();
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    let mut acc = 0.0;
                    for col in 0..w {
                        acc += x.at(b, ch, y, col);
                        prop_assert_eq!(out.at(b, ch, y, col), acc);
                    }
                }
            }
        }
    }

    #[test]
    fn iou_is_symmetric_and_reflexive(a in arb_box(), b in arb_box()) {
        prop_assert_eq!(a.iou(&b), b.iou(&a));
        prop_assert!((a.iou(&a) - 1.0).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.iou(&b)));
    }

    #[test]
    fn deltas_round_trip(p in bounded_box(), g in bounded_box(), normalized in any::<bool>()) {
        let d = encode_deltas(&p, &g, normalized).unwrap();
        let back = decode_deltas(&p, &d, normalized).unwrap();
        for (u, v) in [(back.x, g.x), (back.y, g.y), (back.w, g.w), (back.h, g.h)] {
            prop_assert!((u - v).abs() <= 1e-6, "{back:?} vs {g:?}");
        }
    }

    #[test]
    fn smooth_l1_is_even(x in -50.0..50.0f64, beta in 0.1..3.0f64) {
        prop_assert_eq!(smooth_l1_value(x, beta), smooth_l1_value(-x, beta));
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = tensor([3, 6, 2, 2], seed, -30.0, 30.0);
        let obj: Vec<_> = (0..12).map(|i| (i, rng.gen_range(0..2) as f64)).collect();
        let reg: Vec<_> = (0..12).map(|i| (i, rng.gen_range(-5.0..5.0))).collect();
        let cls = tensor([3, 6, 1, 1], seed, -30.0, 30.0);
        let classes: Vec<usize> = (0..3).map(|_| rng.gen_range(0..6)).collect();
        let truth: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.gen_range(0..2) as f64).collect()).collect();
        prop_assert!(objectness_loss(&z, &obj).unwrap().loss >= 0.0);
        prop_assert!(smooth_l1_loss(&z, &reg, SmoothL1Params::default()).unwrap().loss >= 0.0);
        prop_assert!(classification_loss(&cls, &classes).unwrap().loss >= 0.0);
        prop_assert!(mask_loss(&z, &classes, &truth).unwrap().loss >= 0.0);
    }

    #[test]
    fn dice_is_symmetric_and_bounded(seed in any::<u64>(), classes in 1..6u8) {
        let (x, y) = mask_pair(seed, classes);
        for k in 0..6u8 {
            let d = dice_pair(&x, &y, k).unwrap();
            prop_assert_eq!(d, dice_pair(&y, &x, k).unwrap());
            prop_assert!((0.0..1.0).contains(&d));
        }
    }

    #[test]
    fn near_perfect_dice_means_equal_masks(seed in any::<u64>(), flips in 0..3usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = rng.gen_range(60..160usize);
        let mut ids = vec![0u8; 256];
        ids[..size].iter_mut().for_each(|v| *v = 1);
        let x = LabelMask::from_ids(16, 16, ids.clone()).unwrap();
        for _ in 0..flips {
            let i = rng.gen_range(0..256);
            ids[i] = 1 - ids[i];
        }
        let y = LabelMask::from_ids(16, 16, ids).unwrap();
        let d = dice_pair(&x, &y, 1).unwrap();
        prop_assert_eq!(d > 1.0 - 1e-5, x == y, "d={} size={}", d, size);
        if x == y && x.count(1) >= 100 {
            prop_assert!(d >= 1.0 - 1e-5);
        }
    }

    #[test]
    fn render_at_full_alpha_decodes_back(seed in any::<u64>()) {
        let palette = ClassPalette::default();
        let (mask, _) = mask_pair(seed, 6);
        let gray = image::GrayImage::from_fn(16, 16, |x, y| image::Luma([((x * 7 + y * 3) % 20) as u8]));
        let rgb = render_overlay(&gray, &mask, &palette, 1.0).unwrap();
        let (back, stats) = decode_mask(&rgb, &palette, DECODE_TOLERANCE).unwrap();
        prop_assert_eq!(back, mask);
        prop_assert_eq!(stats.ambiguous, 0);
    }

    #[test]
    fn identical_masks_score_one_under_skip(seed in any::<u64>()) {
        let palette = ClassPalette::default();
        let (x, _) = mask_pair(seed, 6);
        let r = mean_dice(&x, &x, &palette, AbsentClassPolicy::Skip).unwrap();
        prop_assert!(r.mean >= 1.0 - 1e-5);
    }
}
