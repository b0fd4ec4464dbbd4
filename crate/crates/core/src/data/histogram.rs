//! Instance counts per class over a directory of mask rasters.

use std::path::Path;

use rayon::prelude::*;

use crate::data::mask::{decode_mask, LabelMask, DECODE_TOLERANCE};
use crate::data::palette::ClassPalette;
use crate::error::{Error, Result};

/// Pixels of one 8-connected component.
pub type Component = Vec<(usize, usize)>;

/// 8-connected components of class `k`, in raster order of their first
/// pixel.
pub fn components(mask: &LabelMask, k: u8) -> Vec<Component> {
    let (h, w) = (mask.h, mask.w);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.ids[start] != k {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            comp.push((y, x));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && mask.ids[j] == k {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassHistogram {
    /// Component count per class id (background entry stays 0).
    pub counts: Vec<usize>,
    pub files: usize,
    /// Files that could not be read or decoded.
    pub skipped: usize,
}

pub fn mask_histogram(mask: &LabelMask, palette: &ClassPalette) -> Vec<usize> {
    let mut counts = vec![0; palette.len()];
    for k in palette.organ_ids() {
        counts[k as usize] = components(mask, k).len();
    }
    counts
}

/// Scans every `.png` in `dir` (sorted by name).
pub fn class_histogram(dir: &Path, palette: &ClassPalette) -> Result<ClassHistogram> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let per_file: Vec<Option<Vec<usize>>> = paths
        .par_iter()
        .map(|p| {
            let decoded = image::open(p)
                .map_err(|e| e.to_string())
                .and_then(|img| {
                    decode_mask(&img.to_rgb8(), palette, DECODE_TOLERANCE).map_err(|e| e.to_string())
                });
            match decoded {
                Ok((m, _)) => Some(mask_histogram(&m, palette)),
                Err(e) => {
                    log::warn!("skipping {}: {e}", p.display());
                    None
                }
            }
        })
        .collect();
    let mut h = ClassHistogram {
        counts: vec![0; palette.len()],
        files: paths.len(),
        skipped: 0,
    };
    for f in per_file {
        match f {
            Some(c) => h.counts.iter_mut().zip(c).for_each(|(a, b)| *a += b),
            None => h.skipped += 1,
        }
    }
    Ok(h)
}
