//! Smoothed Dice overlap per class and its averages.
//!
//! `D_k = 2 |X_k ∩ Y_k| / (|X_k| + |Y_k| + ε)` with `ε` only in the
//! denominator, so a class absent from both masks scores 0.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::mask::LabelMask;
use crate::data::palette::ClassPalette;
use crate::error::{Error, Result};

pub const DICE_EPS: f64 = 1e-6;

/// How classes absent from both masks enter the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AbsentClassPolicy {
    /// Average over every organ class; absent ones contribute 0.
    #[default]
    Zero,
    /// Average only over classes present in either mask.
    Skip,
}

impl FromStr for AbsentClassPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "skip" => Ok(Self::Skip),
            _ => Err(Error::Config(format!(
                "absent_class_policy must be `zero` or `skip`, got `{s}`"
            ))),
        }
    }
}

impl AbsentClassPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::Skip => "skip",
        }
    }
}

/// Pixel counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub x: usize,
    pub y: usize,
    pub both: usize,
}

impl ClassCounts {
    pub fn dice(&self) -> f64 {
        2.0 * self.both as f64 / (self.x as f64 + self.y as f64 + DICE_EPS)
    }

    pub fn present(&self) -> bool {
        self.x + self.y > 0
    }

    fn add(&mut self, o: &ClassCounts) {
        self.x += o.x;
        self.y += o.y;
        self.both += o.both;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    /// `(class id, dice, counts)` for each organ class.
    pub per_class: Vec<(u8, f64, ClassCounts)>,
    pub mean: f64,
    pub eps: f64,
    pub policy: AbsentClassPolicy,
}

impl DiceReport {
    fn from_counts(per: Vec<(u8, ClassCounts)>, policy: AbsentClassPolicy) -> Self {
        let per_class: Vec<_> = per.into_iter().map(|(k, c)| (k, c.dice(), c)).collect();
        let used: Vec<f64> = per_class
            .iter()
            .filter(|(_, _, c)| policy == AbsentClassPolicy::Zero || c.present())
            .map(|(_, d, _)| *d)
            .collect();
        // Nothing present anywhere under `skip`: the masks agree trivially.
        let mean = if used.is_empty() {
            1.0
        } else {
            used.iter().sum::<f64>() / used.len() as f64
        };
        Self {
            per_class,
            mean,
            eps: DICE_EPS,
            policy,
        }
    }

    /// `key=value` lines.
    pub fn to_kv(&self, palette: &ClassPalette) -> String {
        let mut s = String::new();
        for (k, d, c) in &self.per_class {
            let name = palette.name(*k);
            let _ = writeln!(s, "dice.{name}={d}");
            let _ = writeln!(s, "count.{name}.x={}", c.x);
            let _ = writeln!(s, "count.{name}.y={}", c.y);
            let _ = writeln!(s, "count.{name}.both={}", c.both);
        }
        let _ = writeln!(s, "dice.mean={}", self.mean);
        let _ = writeln!(s, "eps={}", self.eps);
        let _ = writeln!(s, "absent_class_policy={}", self.policy.as_str());
        s
    }
}

fn check_dims(x: &LabelMask, y: &LabelMask) -> Result<()> {
    if x.h != y.h || x.w != y.w {
        return Err(Error::invalid(
            "dice",
            format!("mask dims differ: {}×{} vs {}×{}", x.h, x.w, y.h, y.w),
        ));
    }
    Ok(())
}

pub fn class_counts(x: &LabelMask, y: &LabelMask, k: u8) -> Result<ClassCounts> {
    check_dims(x, y)?;
    let mut c = ClassCounts::default();
    for (&a, &b) in x.ids.iter().zip(&y.ids) {
        let (ia, ib) = (a == k, b == k);
        c.x += ia as usize;
        c.y += ib as usize;
        c.both += (ia && ib) as usize;
    }
    Ok(c)
}

pub fn dice_pair(x: &LabelMask, y: &LabelMask, k: u8) -> Result<f64> {
    Ok(class_counts(x, y, k)?.dice())
}

/// Dice per organ class (background excluded) and their mean.
pub fn mean_dice(
    x: &LabelMask,
    y: &LabelMask,
    palette: &ClassPalette,
    policy: AbsentClassPolicy,
) -> Result<DiceReport> {
    let per = palette
        .organ_ids()
        .map(|k| Ok((k, class_counts(x, y, k)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DiceReport::from_counts(per, policy))
}

/// Both dataset-level aggregations.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetDice {
    /// Mean of the per-image means.
    pub per_image_mean: f64,
    /// Dice per class from counts pooled over all images, then averaged.
    pub pooled: DiceReport,
    pub images: usize,
}

pub fn aggregate(reports: &[DiceReport], policy: AbsentClassPolicy) -> DatasetDice {
    let per_image_mean = if reports.is_empty() {
        0.0
    } else {
        reports.iter().map(|r| r.mean).sum::<f64>() / reports.len() as f64
    };
    let mut pooled: Vec<(u8, ClassCounts)> = Vec::new();
    for r in reports {
        for (i, (k, _, c)) in r.per_class.iter().enumerate() {
            if pooled.len() <= i {
                pooled.push((*k, ClassCounts::default()));
            }
            pooled[i].1.add(c);
        }
    }
    DatasetDice {
        per_image_mean,
        pooled: DiceReport::from_counts(pooled, policy),
        images: reports.len(),
    }
}
