//! Segmentation backbone, objectives, metrics, and checkpointing.

pub mod checkpoint;
pub mod layers;
mod loss;
mod metrics;
mod unet;

use serde::{Deserialize, Serialize};

use crate::alignhead::AlignmentLoss;
use crate::error::{Error, Result};

pub use layers::{GradVec, ParamId, ParamSet};
pub use loss::{
    segmentation_loss, segmentation_loss_parts, segmentation_loss_with_grad, SegLossConfig,
};
pub use metrics::{dice_score, DiceReport};
pub use unet::{argmax_labels, ForwardCache, UNet, UNetConfig};

/// Scalar losses of one training step with their exact composition.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_seg: f64,
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_align: f64,
    pub l_total: f64,
    /// Weight applied to the alignment term; 1.0 is the plain sum.
    pub lambda: f64,
}

impl LossBundle {
    /// Checks the defining equalities: `l_align = l_pos + l_neg` and
    /// `l_total = l_seg + lambda * l_align`, bit-exactly.
    pub fn check(&self) -> Result<()> {
        if self.l_align != self.l_pos + self.l_neg {
            return Err(Error::Validation(format!(
                "l_align {} != l_pos + l_neg {}",
                self.l_align,
                self.l_pos + self.l_neg
            )));
        }
        if self.l_total != self.l_seg + self.lambda * self.l_align {
            return Err(Error::Validation(format!(
                "l_total {} != l_seg + lambda * l_align {}",
                self.l_total,
                self.l_seg + self.lambda * self.l_align
            )));
        }
        Ok(())
    }
}

/// Combines the segmentation and alignment losses into the total
/// training objective (an unweighted sum at the default lambda = 1).
pub fn total_loss(l_seg: f64, align: &AlignmentLoss, lambda: f64) -> Result<LossBundle> {
    for (name, value) in [
        ("l_seg", l_seg),
        ("l_pos", align.l_pos),
        ("l_neg", align.l_neg),
        ("l_align", align.l_align),
        ("lambda", lambda),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
    }
    let bundle = LossBundle {
        l_seg,
        l_pos: align.l_pos,
        l_neg: align.l_neg,
        l_align: align.l_align,
        l_total: l_seg + lambda * align.l_align,
        lambda,
    };
    bundle.check()?;
    Ok(bundle)
}
