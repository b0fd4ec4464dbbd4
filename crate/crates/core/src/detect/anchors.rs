//! One square anchor per feature cell and level.

use crate::detect::boxes::BoxXywh;
use crate::error::{Error, Result};

/// Anchor side per pyramid level, finest first.
pub const ANCHOR_SIZES: [f64; 4] = [32.0, 64.0, 128.0, 256.0];

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    /// Per level, anchors in row-major cell order (x varies fastest).
    pub levels: Vec<Vec<BoxXywh>>,
    /// `(h, w)` of each level map.
    pub dims: Vec<(usize, usize)>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All anchors concatenated level by level.
    pub fn flat(&self) -> Vec<BoxXywh> {
        self.levels.iter().flatten().copied().collect()
    }

    /// Start of each level inside [`AnchorGrid::flat`].
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.levels
            .iter()
            .map(|l| {
                let o = acc;
                acc += l.len();
                o
            })
            .collect()
    }

    /// `(level, cell)` of a flat anchor index.
    pub fn locate(&self, flat: usize) -> (usize, usize) {
        let mut rem = flat;
        for (k, l) in self.levels.iter().enumerate() {
            if rem < l.len() {
                return (k, rem);
            }
            rem -= l.len();
        }
        panic!("anchor index {flat} out of range");
    }
}

/// Cell `(i, j)` of a level with stride `s` gets an anchor centered at
/// `((j + 0.5) s, (i + 0.5) s)` with side `size`.
pub fn generate_anchors(
    level_dims: &[(usize, usize)],
    sizes: &[f64],
    strides: &[f64],
) -> Result<AnchorGrid> {
    if sizes.len() != strides.len() || sizes.len() != level_dims.len() {
        return Err(Error::invalid(
            "generate_anchors",
            format!(
                "{} level maps, {} sizes, {} strides",
                level_dims.len(),
                sizes.len(),
                strides.len()
            ),
        ));
    }
    let levels = level_dims
        .iter()
        .zip(sizes.iter().zip(strides))
        .map(|(&(h, w), (&size, &s))| {
            let mut v = Vec::with_capacity(h * w);
            for i in 0..h {
                for j in 0..w {
                    v.push(BoxXywh::new((j as f64 + 0.5) * s, (i as f64 + 0.5) * s, size, size));
                }
            }
            v
        })
        .collect();
    Ok(AnchorGrid {
        levels,
        dims: level_dims.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride4_centers() {
        let g = generate_anchors(&[(2, 2)], &[32.0], &[4.0]).unwrap();
        let c: Vec<_> = g.levels[0].iter().map(|b| (b.x, b.y, b.w, b.h)).collect();
        assert_eq!(
            c,
            vec![
                (2.0, 2.0, 32.0, 32.0),
                (6.0, 2.0, 32.0, 32.0),
                (2.0, 6.0, 32.0, 32.0),
                (6.0, 6.0, 32.0, 32.0)
            ]
        );
    }

    #[test]
    fn stride32_centers() {
        let g = generate_anchors(&[(2, 2)], &[256.0], &[32.0]).unwrap();
        let c: Vec<_> = g.levels[0].iter().map(|b| (b.x, b.y)).collect();
        assert_eq!(c, vec![(16.0, 16.0), (48.0, 16.0), (16.0, 48.0), (48.0, 48.0)]);
    }

    #[test]
    fn counts_for_64px_input() {
        let dims = [(16, 16), (8, 8), (4, 4), (2, 2)];
        let g = generate_anchors(&dims, &ANCHOR_SIZES, &[4.0, 8.0, 16.0, 32.0]).unwrap();
        let counts: Vec<_> = g.levels.iter().map(Vec::len).collect();
        assert_eq!(counts, vec![256, 64, 16, 4]);
        assert_eq!(g.offsets(), vec![0, 256, 320, 336]);
        assert_eq!(g.locate(321), (2, 1));
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(generate_anchors(&[(2, 2)], &[32.0, 64.0], &[4.0]).is_err());
    }
}
