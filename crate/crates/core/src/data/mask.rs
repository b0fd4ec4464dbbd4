//! Label masks, color decoding and overlay rendering.

use image::{GrayImage, Rgb, RgbImage};

use crate::data::palette::ClassPalette;
use crate::error::{Error, Result};

/// Default per-channel tolerance when decoding colors.
pub const DECODE_TOLERANCE: u8 = 30;

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub h: usize,
    pub w: usize,
    pub ids: Vec<u8>,
}

impl LabelMask {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            ids: vec![0; h * w],
        }
    }

    pub fn from_ids(h: usize, w: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != h * w {
            return Err(Error::invalid(
                "label_mask",
                format!("{} ids for a {h}×{w} mask", ids.len()),
            ));
        }
        Ok(Self { h, w, ids })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, id: u8) {
        self.ids[y * self.w + x] = id;
    }

    pub fn count(&self, id: u8) -> usize {
        self.ids.iter().filter(|&&v| v == id).count()
    }

    /// Pure palette colors, one per pixel.
    pub fn to_rgb(&self, palette: &ClassPalette) -> RgbImage {
        RgbImage::from_fn(self.w as u32, self.h as u32, |x, y| {
            Rgb(palette.color(self.get(y as usize, x as usize)))
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecodeStats {
    /// Pixels equidistant from two or more palette colors.
    pub ambiguous: usize,
}

/// Assigns every pixel to the palette color nearest in L∞ distance. A pixel
/// farther than `tol` from every color is an error naming the first such
/// color and how many pixels are off-palette. Ties go to the lower id.
pub fn decode_mask(
    image: &RgbImage,
    palette: &ClassPalette,
    tol: u8,
) -> Result<(LabelMask, DecodeStats)> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut ids = Vec::with_capacity(w * h);
    let mut stats = DecodeStats::default();
    let mut bad: Option<([u8; 3], usize)> = None;
    for px in image.pixels() {
        let mut best = (u8::MAX, u16::MAX);
        let mut tie = false;
        for e in palette.entries() {
            let d = (0..3)
                .map(|c| (px.0[c] as i16 - e.rgb[c] as i16).unsigned_abs())
                .max()
                .unwrap_or(0);
            if d < best.1 {
                best = (e.id, d);
                tie = false;
            } else if d == best.1 {
                tie = true;
            }
        }
        if best.1 > tol as u16 {
            let entry = bad.get_or_insert((px.0, 0));
            entry.1 += 1;
        } else if tie {
            stats.ambiguous += 1;
        }
        ids.push(best.0);
    }
    if let Some((color, n)) = bad {
        return Err(Error::invalid(
            "decode_mask",
            format!("{n} pixel(s) outside tolerance {tol} of every palette color, first {color:?}"),
        ));
    }
    Ok((LabelMask { h, w, ids }, stats))
}

/// Blends each labelled pixel's palette color over the grayscale image:
/// `round((1 − α) g + α c)` per channel. Background pixels keep the gray.
pub fn render_overlay(
    image: &GrayImage,
    mask: &LabelMask,
    palette: &ClassPalette,
    alpha: f64,
) -> Result<RgbImage> {
    if image.width() as usize != mask.w || image.height() as usize != mask.h {
        return Err(Error::invalid(
            "render_overlay",
            format!(
                "image is {}×{}, mask is {}×{}",
                image.height(),
                image.width(),
                mask.h,
                mask.w
            ),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("render_overlay", format!("alpha {alpha} not in [0, 1]")));
    }
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let g = image.get_pixel(x, y).0[0];
        let id = mask.get(y as usize, x as usize);
        if id == 0 {
            return Rgb([g, g, g]);
        }
        let c = palette.color(id);
        let mix = |v: u8| ((1.0 - alpha) * g as f64 + alpha * v as f64).round() as u8;
        Rgb([mix(c[0]), mix(c[1]), mix(c[2])])
    }))
}
