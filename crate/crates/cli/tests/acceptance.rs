//! End-to-end acceptance checks. Each test prints one `PASS` or `FAIL`
//! line straight to stderr so the verdicts show up even when libtest
//! captures output. Tests hold a shared lock: the timed ones must not
//! compete for the CPU.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use organseg::data::dice::{dice_pair, mean_dice, AbsentClassPolicy};
use organseg::data::mask::LabelMask;
use organseg::data::palette::ClassPalette;
use organseg::detect::boxes::{decode_deltas, encode_deltas, BoxXywh};
use organseg::detect::losses::{classification_loss, mask_loss, objectness_loss, smooth_l1_value};
use organseg::irnn::scan::{identity, scan_forward, Direction};
use organseg::irnn::{srnn_forward, IrnnWeights, SrnnConfig};
use organseg::train::smoothed_totals;
use organseg::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_TRIALS: &str = "10";
const GRADCHECK_BUDGET: Duration = Duration::from_secs(300);
const BOX_ROUND_TRIP_TOL: f64 = 1e-6;
const GOLDEN_TOL: f64 = 1e-9;
const DICE_ORACLE_TOL: f64 = 1e-12;
const PERFECT_DICE: f64 = 1.0 - 1e-5;

const TOY_IMAGES: &str = "8";
const TOY_STEPS: &str = "3000";
const TOY_LR: &str = "0.01";
const TOY_MIN_DICE: f64 = 0.9;
const TOY_BUDGET: Duration = Duration::from_secs(600);
/// Smoothing window (steps) for the loss-trend check.
const TREND_WINDOW: usize = 201;
/// Points along the smoothed curve that must not rise.
const TREND_POINTS: usize = 10;
/// Allowed rise between trend points, relative to the starting loss.
const TREND_SLACK: f64 = 0.02;

const ABLATION_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ABLATION_TRAIN: &str = "32";
const ABLATION_HELD_OUT: &str = "16";
const ABLATION_STEPS: &str = "1500";
const ABLATION_MIN_WINS: usize = 4;

const DETERMINISM_STEPS: &str = "40";

static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(n: usize, name: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "criterion {n} {status} {name}: {detail}");
    assert!(passed, "criterion {n} ({name}) failed: {detail}");
}

fn organseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_organseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawning organseg")
}

fn organseg_ok(args: &[&str]) -> Output {
    let out = organseg(args);
    assert!(
        out.status.success(),
        "organseg {args:?} exited with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn kv(path: &Path, key: &str) -> f64 {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {}", path.display()))
        .parse()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn criterion_1_gradient_integrity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let out = organseg(&["gradcheck", "--trials", GRADCHECK_TRIALS, "--run-dir", s(dir.path())]);
    let elapsed = t0.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<(&str, &str)> = stdout
        .lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f.len() == 5 && f[0] != "op").then(|| (f[0], f[4]))
        })
        .collect();
    let names: HashSet<&str> = rows.iter().map(|r| r.0).collect();
    let composites = ["srnn_module", "fuse_context", "rpn_head", "box_head", "mask_head", "total_loss"];
    let missing: Vec<_> = composites.iter().filter(|c| !names.contains(*c)).collect();
    let failed: Vec<_> = rows.iter().filter(|r| r.1 != "PASS").map(|r| r.0).collect();
    let passed = out.status.success()
        && missing.is_empty()
        && failed.is_empty()
        && rows.len() >= 30
        && elapsed < GRADCHECK_BUDGET;
    verdict(
        1,
        "gradient integrity",
        passed,
        &format!(
            "{} cases x {GRADCHECK_TRIALS} trials in {:.0}s, failed {failed:?}, missing {missing:?}",
            rows.len(),
            elapsed.as_secs_f64()
        ),
    );
}

/// Directional running sum read straight off the definition, accumulated
/// from the edge the scan starts at.
fn cumsum(x: &Tensor4<f64>, dir: Direction) -> Tensor4<f64> {
    let [n, c, h, w] = x.dims();
    let mut out = Tensor4::zeros(x.dims());
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    let cells: Vec<(usize, usize)> = match dir {
                        Direction::Right => (0..=xx).map(|j| (y, j)).collect(),
                        Direction::Left => (xx..w).rev().map(|j| (y, j)).collect(),
                        Direction::Down => (0..=y).map(|i| (i, xx)).collect(),
                        Direction::Up => (y..h).rev().map(|i| (i, xx)).collect(),
                    };
                    for (i, j) in cells {
                        acc += x.at(b, ch, i, j);
                    }
                    out.set(b, ch, y, xx, acc);
                }
            }
        }
    }
    out
}

#[test]
fn criterion_2_scan_matches_cumulative_sum() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..100 {
        let dims = [
            rng.gen_range(1..=2),
            rng.gen_range(1..=4),
            rng.gen_range(1..=16),
            rng.gen_range(1..=16),
        ];
        let x = Tensor4::<f64>::uniform(dims, 0.0, 1.0, &mut rng);
        for dir in Direction::ALL {
            if scan_forward(&x, &identity(dims[1]), dir).unwrap() != cumsum(&x, dir) {
                mismatches += 1;
            }
        }
    }
    verdict(2, "scan cumulative-sum oracle", mismatches == 0, &format!("{mismatches} of 400 scans differ"));
}

/// Output locations that change when input pixel `(i, j)` is raised by 1.
fn changed_locations(x: &Tensor4<f64>, rounds: usize, i: usize, j: usize) -> usize {
    let cfg = SrnnConfig::new(rounds, 1, 1).unwrap();
    let w: Vec<_> = (0..rounds).map(|_| IrnnWeights::identity_like(1)).collect();
    let base = srnn_forward(x, &cfg, &w).unwrap();
    let mut bumped = x.clone();
    bumped.set(0, 0, i, j, x.at(0, 0, i, j) + 1.0);
    let out = srnn_forward(&bumped, &cfg, &w).unwrap();
    base.data().iter().zip(out.data()).filter(|(a, b)| a != b).count()
}

#[test]
fn criterion_3_two_round_global_context() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let x = Tensor4::<f64>::uniform([1, 1, 8, 8], 0.1, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let mut two = HashSet::new();
    let mut one = HashSet::new();
    for i in 0..8 {
        for j in 0..8 {
            two.insert(changed_locations(&x, 2, i, j));
            one.insert(changed_locations(&x, 1, i, j));
        }
    }
    let passed = two == HashSet::from([64]) && one == HashSet::from([15]);
    verdict(
        3,
        "two-round global context",
        passed,
        &format!("changed counts: rounds=2 {two:?}, rounds=1 {one:?}"),
    );
}

#[test]
fn criterion_4_box_coding_round_trip() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draw = |rng: &mut ChaCha8Rng| {
        BoxXywh::new(
            rng.gen_range(0.0..512.0),
            rng.gen_range(0.0..512.0),
            rng.gen_range(8.0..256.0),
            rng.gen_range(8.0..256.0),
        )
    };
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (p, g) = (draw(&mut rng), draw(&mut rng));
        let back = decode_deltas(&p, &encode_deltas(&p, &g, false).unwrap(), false).unwrap();
        for (a, b) in [(back.x, g.x), (back.y, g.y), (back.w, g.w), (back.h, g.h)] {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(4, "box coding round trip", worst <= BOX_ROUND_TRIP_TOL, &format!("max error {worst:.3e} over 1000 pairs"));
}

#[test]
fn criterion_5_loss_golden_values() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let zero = |dims| Tensor4::<f64>::zeros(dims);
    let obj = objectness_loss(&zero([1, 1, 1, 1]), &[(0, 1.0)]).unwrap().loss;
    let cls = classification_loss(&zero([1, 6, 1, 1]), &[3]).unwrap().loss;
    let mask = mask_loss(&zero([1, 6, 2, 2]), &[1], &[vec![1.0; 4]]).unwrap().loss;
    let got = [obj, cls, mask, smooth_l1_value(0.5, 1.0), smooth_l1_value(2.0, 1.0)];
    let want = [2f64.ln(), 6f64.ln(), 2f64.ln(), 0.125, 1.5];
    let worst = got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    verdict(5, "loss golden values", worst <= GOLDEN_TOL, &format!("got {got:?}, max error {worst:.3e}"));
}

fn random_mask(rng: &mut ChaCha8Rng) -> LabelMask {
    let mut m = LabelMask::new(32, 32);
    for _ in 0..rng.gen_range(0..8) {
        let k = rng.gen_range(0..6u8);
        let (y0, x0) = (rng.gen_range(0..32), rng.gen_range(0..32));
        let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
        for y in y0..(y0 + h).min(32) {
            for x in x0..(x0 + w).min(32) {
                m.set(y, x, k);
            }
        }
    }
    m
}

/// `2|X ∩ Y| / (|X| + |Y| + ε)` by counting pixel sets.
fn set_dice(x: &LabelMask, y: &LabelMask, k: u8) -> f64 {
    let pixels = |m: &LabelMask| -> HashSet<usize> { (0..m.ids.len()).filter(|&i| m.ids[i] == k).collect() };
    let (a, b) = (pixels(x), pixels(y));
    2.0 * a.intersection(&b).count() as f64 / (a.len() as f64 + b.len() as f64 + 1e-6)
}

#[test]
fn criterion_6_dice_evaluator() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let palette = ClassPalette::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (x, y) = (random_mask(&mut rng), random_mask(&mut rng));
        let report = mean_dice(&x, &y, &palette, AbsentClassPolicy::Zero).unwrap();
        let mut terms = Vec::new();
        for k in 1..=5u8 {
            let want = set_dice(&x, &y, k);
            terms.push(want);
            worst = worst.max((dice_pair(&x, &y, k).unwrap() - want).abs());
        }
        worst = worst.max((report.mean - terms.iter().sum::<f64>() / 5.0).abs());
    }
    let mut perfect = LabelMask::new(32, 32);
    for i in 0..100 {
        perfect.ids[i] = 1;
    }
    let d = dice_pair(&perfect, &perfect, 1).unwrap();
    let passed = worst <= DICE_ORACLE_TOL && d >= PERFECT_DICE;
    verdict(
        6,
        "dice evaluator",
        passed,
        &format!("max oracle error {worst:.3e} over 200 pairs, perfect match at |X|=100 gives {d}"),
    );
}

/// Points of the smoothed curve at evenly spaced steps, ending at the last
/// step.
fn trend_points(csv: &str) -> Vec<f64> {
    let history: Vec<(usize, organseg::detect::LossBreakdown)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            let b = organseg::detect::LossBreakdown {
                total: f[1],
                objectness: f[2],
                anchor: f[3],
                class: f[4],
                bbox: f[5],
                mask: f[6],
            };
            (f[0] as usize, b)
        })
        .collect();
    let smooth = smoothed_totals(&history, TREND_WINDOW);
    let last = smooth.len() - 1;
    (0..=TREND_POINTS).map(|i| smooth[i * last / TREND_POINTS]).collect()
}

#[test]
fn criterion_7_toy_overfit() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let (data, run, eval) = (dir.path().join("data"), dir.path().join("train"), dir.path().join("eval"));
    organseg_ok(&["synth-data", "--count", TOY_IMAGES, "--run-dir", s(&data)]);
    let t0 = Instant::now();
    let train = organseg(&[
        "train-toy",
        "--synthetic",
        TOY_IMAGES,
        "--max-steps",
        TOY_STEPS,
        "--learning-rate",
        TOY_LR,
        "--srnn-enabled",
        "true",
        "--run-dir",
        s(&run),
    ]);
    let elapsed = t0.elapsed();
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    organseg_ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint")),
        "--dataset",
        s(&data),
        "--run-dir",
        s(&eval),
    ]);
    let dice = kv(&eval.join("dice.txt"), "per_image_mean");
    let points = trend_points(&std::fs::read_to_string(run.join("loss.csv")).unwrap());
    let slack = TREND_SLACK * points[0];
    let monotone = points.windows(2).all(|w| w[1] <= w[0] + slack) && points[TREND_POINTS] < points[0];
    let passed = dice >= TOY_MIN_DICE && elapsed < TOY_BUDGET && monotone;
    let shown: Vec<String> = points.iter().map(|v| format!("{v:.3}")).collect();
    verdict(
        7,
        "toy overfit",
        passed,
        &format!(
            "training-set dice {dice:.4} after {TOY_STEPS} steps in {:.0}s, smoothed loss [{}]",
            elapsed.as_secs_f64(),
            shown.join(" ")
        ),
    );
}

fn held_out_dice(root: &Path, seed: u64, srnn: bool, held_out: &Path) -> f64 {
    let tag = if srnn { "srnn" } else { "fpn" };
    let run = root.join(format!("train-{seed}-{tag}"));
    let eval = root.join(format!("eval-{seed}-{tag}"));
    let seed = seed.to_string();
    organseg_ok(&[
        "train-toy",
        "--synthetic",
        ABLATION_TRAIN,
        "--seed",
        &seed,
        "--max-steps",
        ABLATION_STEPS,
        "--learning-rate",
        TOY_LR,
        "--srnn-enabled",
        if srnn { "true" } else { "false" },
        "--run-dir",
        s(&run),
    ]);
    organseg_ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint")),
        "--dataset",
        s(held_out),
        "--run-dir",
        s(&eval),
    ]);
    kv(&eval.join("dice.txt"), "per_image_mean")
}

#[test]
fn criterion_8_ablation_ordering() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in ABLATION_SEEDS {
        let held_out = dir.path().join(format!("held-out-{seed}"));
        organseg_ok(&[
            "synth-data",
            "--seed",
            &seed.to_string(),
            "--start",
            ABLATION_TRAIN,
            "--count",
            ABLATION_HELD_OUT,
            "--run-dir",
            s(&held_out),
        ]);
        let with = held_out_dice(dir.path(), seed, true, &held_out);
        let without = held_out_dice(dir.path(), seed, false, &held_out);
        if with >= without {
            wins += 1;
        }
        rows.push(format!("seed {seed}: {with:.4} vs {without:.4}"));
    }
    verdict(
        8,
        "ablation ordering",
        wins >= ABLATION_MIN_WINS,
        &format!("srnn >= fpn on {wins} of {} seeds ({})", ABLATION_SEEDS.len(), rows.join(", ")),
    );
}

/// Every file under `dir` except the manifest, keyed by relative path.
fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_9_determinism() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    organseg_ok(&["synth-data", "--count", "1", "--run-dir", s(&data)]);
    let image = std::fs::read_dir(data.join("images")).unwrap().next().unwrap().unwrap().path();

    let mut extracts = Vec::new();
    let mut trains = Vec::new();
    for (i, threads) in ["1", "1", "4"].into_iter().enumerate() {
        let ex = dir.path().join(format!("extract-{i}"));
        organseg_ok(&["extract", "--seed", "42", "--threads", threads, "--image", s(&image), "--run-dir", s(&ex)]);
        extracts.push(files(&ex));
        let tr = dir.path().join(format!("train-{i}"));
        organseg_ok(&[
            "train-toy",
            "--synthetic",
            "2",
            "--seed",
            "42",
            "--threads",
            threads,
            "--max-steps",
            DETERMINISM_STEPS,
            "--learning-rate",
            TOY_LR,
            "--run-dir",
            s(&tr),
        ]);
        // The stored config records the thread count; everything else must match.
        let mut f = files(&tr);
        f.retain(|(p, _)| p.file_name().is_some_and(|n| n != "config.txt"));
        trains.push(f);
    }
    let archives = extracts[0].iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "tns")).count();
    let same_extract = extracts.iter().all(|e| *e == extracts[0]);
    let same_train = trains.iter().all(|t| *t == trains[0]);
    let has_csv = trains[0].iter().any(|(p, _)| p.ends_with("loss.csv"));
    verdict(
        9,
        "determinism",
        archives == 4 && same_extract && same_train && has_csv,
        &format!(
            "{archives} archives, extract identical {same_extract}, train-toy identical {same_train} (runs: threads 1, 1, 4)"
        ),
    );
}
