//! Synthetic ultrasound-like scenes: one ellipse per organ in a jittered
//! canonical layout over multiplicative speckle noise.

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::mask::LabelMask;
use crate::data::palette::{GALLBLADDER, KIDNEY, LIVER, SPLEEN, VESSELS};

pub const SYNTH_SIZE: usize = 64;

struct OrganSpec {
    class: u8,
    center: (f64, f64),
    axes: (f64, f64),
    intensity: f64,
}

/// Centers are `(x, y)` in pixels; kidney and spleen share an intensity,
/// as do gallbladder and vessels, so position and shape must tell them
/// apart.
const LAYOUT: [OrganSpec; 5] = [
    OrganSpec { class: LIVER, center: (20.0, 18.0), axes: (13.0, 10.0), intensity: 170.0 },
    OrganSpec { class: SPLEEN, center: (48.0, 16.0), axes: (9.0, 7.0), intensity: 130.0 },
    OrganSpec { class: KIDNEY, center: (48.0, 47.0), axes: (7.0, 9.0), intensity: 130.0 },
    OrganSpec { class: GALLBLADDER, center: (14.0, 46.0), axes: (7.0, 8.0), intensity: 25.0 },
    OrganSpec { class: VESSELS, center: (31.0, 46.0), axes: (5.0, 11.0), intensity: 25.0 },
];

const BACKGROUND_LEVEL: f64 = 80.0;
const CENTER_JITTER: f64 = 2.5;
const AXIS_JITTER: f64 = 0.12;
const ANGLE_JITTER: f64 = 0.25;
const SPECKLE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub name: String,
    pub image: GrayImage,
    pub mask: LabelMask,
}

/// Scene `index` of the sequence for `seed`; each scene has its own RNG
/// stream so scenes do not depend on how many were generated before.
pub fn synth_sample(seed: u64, index: usize) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let n = SYNTH_SIZE;
    let mut level = vec![BACKGROUND_LEVEL; n * n];
    let mut mask = LabelMask::new(n, n);
    for o in &LAYOUT {
        let cx = o.center.0 + rng.gen_range(-CENTER_JITTER..=CENTER_JITTER);
        let cy = o.center.1 + rng.gen_range(-CENTER_JITTER..=CENTER_JITTER);
        let ax = o.axes.0 * (1.0 + rng.gen_range(-AXIS_JITTER..=AXIS_JITTER));
        let ay = o.axes.1 * (1.0 + rng.gen_range(-AXIS_JITTER..=AXIS_JITTER));
        let (s, c) = rng.gen_range(-ANGLE_JITTER..=ANGLE_JITTER).sin_cos();
        let intensity = o.intensity * (1.0 + rng.gen_range(-0.1..=0.1));
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (c * dx + s * dy) / ax;
                let v = (-s * dx + c * dy) / ay;
                if u * u + v * v <= 1.0 {
                    mask.set(y, x, o.class);
                    level[y * n + x] = intensity;
                }
            }
        }
    }
    let image = GrayImage::from_fn(n as u32, n as u32, |x, y| {
        let base = level[y as usize * n + x as usize];
        let speckle = 1.0 + SPECKLE * rng.gen_range(-1.0..=1.0);
        Luma([(base * speckle).round().clamp(0.0, 255.0) as u8])
    });
    SynthSample {
        name: format!("synth_{seed}_{index:04}"),
        image,
        mask,
    }
}

/// Scenes `start .. start + count` for `seed`.
pub fn synth_dataset(seed: u64, start: usize, count: usize) -> Vec<SynthSample> {
    (start..start + count).map(|i| synth_sample(seed, i)).collect()
}
