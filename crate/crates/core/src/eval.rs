//! Dataset-level Dice evaluation of a trained model.

use std::fmt::Write as _;

use crate::data::dataset::{image_tensor, Dataset};
use crate::data::dice::{aggregate, mean_dice, AbsentClassPolicy, DatasetDice, DiceReport};
use crate::data::mask::LabelMask;
use crate::data::palette::ClassPalette;
use crate::error::Result;
use crate::model::{segment, ModelConfig, ModelWeights};
use crate::tensor::{Scalar, Tensor4};

pub struct EvalReport {
    pub rows: Vec<(String, DiceReport)>,
    /// Images skipped for lack of a mask.
    pub skipped: usize,
    pub summary: DatasetDice,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<(String, DiceReport)>, skipped: usize, policy: AbsentClassPolicy) -> Self {
        let reports: Vec<DiceReport> = rows.iter().map(|(_, r)| r.clone()).collect();
        Self {
            summary: aggregate(&reports, policy),
            rows,
            skipped,
        }
    }

    /// `image,<organ>...,mean` then one row per image.
    pub fn csv(&self, palette: &ClassPalette) -> String {
        let mut s = String::from("image");
        for k in palette.organ_ids() {
            let _ = write!(s, ",{}", palette.name(k));
        }
        s.push_str(",mean\n");
        for (name, r) in &self.rows {
            s.push_str(name);
            for (_, d, _) in &r.per_class {
                let _ = write!(s, ",{d}");
            }
            let _ = writeln!(s, ",{}", r.mean);
        }
        s
    }

    pub fn summary_kv(&self, palette: &ClassPalette) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images={}", self.summary.images);
        let _ = writeln!(s, "skipped={}", self.skipped);
        let _ = writeln!(s, "per_image_mean={}", self.summary.per_image_mean);
        let _ = writeln!(s, "pooled_mean={}", self.summary.pooled.mean);
        for line in self.summary.pooled.to_kv(palette).lines() {
            let _ = writeln!(s, "pooled.{line}");
        }
        s
    }
}

/// Dice of `predict(image)` against each labelled image.
pub fn evaluate_with(
    dataset: &Dataset,
    palette: &ClassPalette,
    policy: AbsentClassPolicy,
    mut predict: impl FnMut(&image::GrayImage) -> Result<LabelMask>,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let mut skipped = 0;
    for s in &dataset.samples {
        let Some(truth) = &s.mask else {
            skipped += 1;
            continue;
        };
        let pred = predict(&s.image)?;
        rows.push((s.name.clone(), mean_dice(&pred, truth, palette, policy)?));
    }
    Ok(EvalReport::from_rows(rows, skipped, policy))
}

pub fn evaluate<T: Scalar>(
    cfg: &ModelConfig,
    weights: &ModelWeights<Tensor4<T>>,
    dataset: &Dataset,
    palette: &ClassPalette,
    policy: AbsentClassPolicy,
) -> Result<EvalReport> {
    evaluate_with(dataset, palette, policy, |img| {
        segment(cfg, weights, &image_tensor::<T>(img))
    })
}
