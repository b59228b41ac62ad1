//! Copy-Paste composition, confidence-driven ensembling and the loss terms.

mod confidence;
mod losses;
mod paste;

pub use confidence::{
    confidence_weight, dice_agreement, ensemble_pseudo, ensemble_ratio, mutual_confidence,
    self_confidence, AlphaRule, ConfidencePair, PseudoLabelBundle, TAU,
};
pub use losses::{
    ce_dice, ce_loss, consensus_entropy_loss, dice_loss, divergence_mse_loss, region_masks,
    supervised_loss, total_loss, unsupervised_loss, warmup_lambda, Normalizer, RegionMasks,
    DICE_EPS,
};
pub use paste::{copy_paste, make_paste_mask, PasteMask, PASTE_RATIO_RANGE};
