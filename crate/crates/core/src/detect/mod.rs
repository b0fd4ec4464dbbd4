//! Detection side of the model: anchors, matching, suppression, ROI
//! pooling, the three heads and their losses.

pub mod anchors;
pub mod boxes;
pub mod heads;
pub mod losses;
pub mod matching;
pub mod nms;
pub mod roi;
pub mod total;

pub use anchors::{generate_anchors, AnchorGrid, ANCHOR_SIZES};
pub use boxes::{decode_deltas, encode_deltas, BoxXywh, Deltas};
pub use heads::{HeadConfig, HeadWeights, NUM_CLASSES};
pub use matching::{match_anchors, Label, MatchLabels};
pub use nms::nms;
pub use roi::Roi;
pub use total::{total_loss, DetectionTargets, HeadOutputs, LossBreakdown};
