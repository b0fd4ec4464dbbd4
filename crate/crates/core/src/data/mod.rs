//! Color-coded mask datasets, Dice evaluation and synthetic scenes.

pub mod dataset;
pub mod dice;
pub mod histogram;
pub mod mask;
pub mod palette;
pub mod synth;

pub use dice::{mean_dice, dice_pair, AbsentClassPolicy, DiceReport, DICE_EPS};
pub use mask::{decode_mask, render_overlay, LabelMask};
pub use palette::ClassPalette;
