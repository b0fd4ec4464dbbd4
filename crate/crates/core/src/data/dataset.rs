//! On-disk dataset layout: `images/NAME.png` (grayscale) and
//! `masks/NAME.png` (palette-colored RGB).

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageError, RgbImage};

use crate::data::histogram::components;
use crate::data::mask::{decode_mask, LabelMask, DECODE_TOLERANCE};
use crate::data::palette::ClassPalette;
use crate::detect::boxes::BoxXywh;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";

fn image_err(path: &Path, e: ImageError) -> Error {
    match e {
        ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path).map_err(|e| image_err(path, e))?.to_luma8())
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| image_err(path, e))?.to_rgb8())
}

pub fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

pub fn load_mask(path: &Path, palette: &ClassPalette) -> Result<LabelMask> {
    let rgb = load_rgb(path)?;
    let (mask, stats) =
        decode_mask(&rgb, palette, DECODE_TOLERANCE).map_err(|e| e.context(path.display().to_string()))?;
    if stats.ambiguous > 0 {
        log::warn!("{}: {} ambiguous pixel(s)", path.display(), stats.ambiguous);
    }
    Ok(mask)
}

/// `[0, 255]` grayscale to a `(1, 1, h, w)` tensor in `[0, 1]`.
pub fn image_tensor<T: Scalar>(img: &GrayImage) -> Tensor4<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor4::from_fn([1, 1, h, w], |[_, _, y, x]| {
        T::of(img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: GrayImage,
    pub mask: Option<LabelMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Images without a readable mask.
    pub missing_masks: usize,
}

/// Loads every `images/*.png`, sorted by name, with its mask if present.
pub fn load_dataset(dir: &Path, palette: &ClassPalette) -> Result<Dataset> {
    let img_dir = dir.join(IMAGES_DIR);
    let mut names: Vec<PathBuf> = std::fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    names.sort();
    let mut samples = Vec::with_capacity(names.len());
    let mut missing = 0;
    for p in names {
        let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let image = load_gray(&p)?;
        let mpath = dir.join(MASKS_DIR).join(format!("{name}.png"));
        let mask = if mpath.exists() {
            let m = load_mask(&mpath, palette)?;
            if m.h != image.height() as usize || m.w != image.width() as usize {
                return Err(Error::format(&mpath, "mask and image sizes differ"));
            }
            Some(m)
        } else {
            log::warn!("{name}: no mask at {}", mpath.display());
            missing += 1;
            None
        };
        samples.push(Sample { name, image, mask });
    }
    Ok(Dataset {
        samples,
        missing_masks: missing,
    })
}

pub fn save_sample(dir: &Path, name: &str, image: &GrayImage, mask: &LabelMask, palette: &ClassPalette) -> Result<()> {
    save_png(image, &dir.join(IMAGES_DIR).join(format!("{name}.png")))?;
    save_png(&mask.to_rgb(palette), &dir.join(MASKS_DIR).join(format!("{name}.png")))
}

/// One connected region of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class: u8,
    /// Tight pixel-aligned box around the region.
    pub bbox: BoxXywh,
    /// Binary map over the whole image, row-major.
    pub pixels: Vec<bool>,
    pub w: usize,
}

impl Instance {
    /// Mask target on a `res × res` grid over `b`: the bin center is
    /// looked up in the instance map (nearest pixel).
    pub fn mask_grid(&self, b: &BoxXywh, res: usize) -> Vec<f64> {
        let h = self.pixels.len() / self.w;
        let mut out = Vec::with_capacity(res * res);
        for a in 0..res {
            let y = b.y0() + (a as f64 + 0.5) * b.h / res as f64;
            for c in 0..res {
                let x = b.x0() + (c as f64 + 0.5) * b.w / res as f64;
                let (xi, yi) = (x.floor(), y.floor());
                let on = xi >= 0.0
                    && yi >= 0.0
                    && (xi as usize) < self.w
                    && (yi as usize) < h
                    && self.pixels[yi as usize * self.w + xi as usize];
                out.push(if on { 1.0 } else { 0.0 });
            }
        }
        out
    }
}

/// Components smaller than this many pixels are treated as noise.
pub const MIN_INSTANCE_PIXELS: usize = 4;

/// Every 8-connected region per organ class, in class then raster order.
pub fn instances(mask: &LabelMask, palette: &ClassPalette) -> Vec<Instance> {
    let mut out = Vec::new();
    for k in palette.organ_ids() {
        for comp in components(mask, k) {
            if comp.len() < MIN_INSTANCE_PIXELS {
                continue;
            }
            let mut pixels = vec![false; mask.h * mask.w];
            let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
            for &(y, x) in &comp {
                pixels[y * mask.w + x] = true;
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
            out.push(Instance {
                class: k,
                bbox: BoxXywh::from_corners(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64),
                pixels,
                w: mask.w,
            });
        }
    }
    out
}
