//! Segmentation objective: pixel cross-entropy plus soft Dice.

use ndarray::{Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SegLossConfig {
    pub use_ce: bool,
    pub use_dice: bool,
}

impl Default for SegLossConfig {
    fn default() -> Self {
        Self {
            use_ce: true,
            use_dice: true,
        }
    }
}

impl SegLossConfig {
    fn validate(&self) -> Result<()> {
        if !self.use_ce && !self.use_dice {
            return Err(Error::Validation(
                "segmentation loss needs at least one of use_ce/use_dice".into(),
            ));
        }
        Ok(())
    }
}

fn check_shapes(logits: &Array3<f32>, labels: &ArrayView2<'_, u8>) -> Result<()> {
    let (n, h, w) = logits.dim();
    if labels.dim() != (h, w) {
        return Err(Error::Validation(format!(
            "labels {:?} do not match logits {h}x{w}",
            labels.dim()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n) {
        return Err(Error::Validation(format!(
            "label value {bad} out of range [0, {n})"
        )));
    }
    Ok(())
}

/// Per-pixel softmax probabilities in f64 for numerical headroom.
fn softmax(logits: &Array3<f32>) -> Vec<f64> {
    let (n, h, w) = logits.dim();
    let hw = h * w;
    let ls = logits.as_slice().expect("standard layout");
    let mut probs = vec![0.0f64; n * hw];
    for i in 0..hw {
        let mut max = f64::NEG_INFINITY;
        for c in 0..n {
            max = max.max(ls[c * hw + i] as f64);
        }
        let mut sum = 0.0;
        for c in 0..n {
            let e = ((ls[c * hw + i] as f64) - max).exp();
            probs[c * hw + i] = e;
            sum += e;
        }
        for c in 0..n {
            probs[c * hw + i] /= sum;
        }
    }
    probs
}

/// The two components (cross-entropy, soft Dice), each already averaged
/// over pixels / classes respectively.
pub fn segmentation_loss_parts(
    logits: &Array3<f32>,
    labels: &ArrayView2<'_, u8>,
) -> Result<(f64, f64)> {
    check_shapes(logits, labels)?;
    let (n, h, w) = logits.dim();
    let hw = h * w;
    let probs = softmax(logits);
    let lab = labels.as_slice().expect("standard layout");

    let mut ce = 0.0f64;
    for (i, &l) in lab.iter().enumerate() {
        ce -= probs[l as usize * hw + i].max(1e-300).ln();
    }
    ce /= hw as f64;

    let mut dice_sum = 0.0f64;
    for c in 0..n {
        let mut inter = 0.0f64;
        let mut psum = 0.0f64;
        let mut tsum = 0.0f64;
        for i in 0..hw {
            let p = probs[c * hw + i];
            psum += p;
            if lab[i] as usize == c {
                inter += p;
                tsum += 1.0;
            }
        }
        dice_sum += (2.0 * inter + DICE_SMOOTH) / (psum + tsum + DICE_SMOOTH);
    }
    let dice_loss = 1.0 - dice_sum / n as f64;
    Ok((ce, dice_loss))
}

/// Scalar loss per the active components.
pub fn segmentation_loss(
    logits: &Array3<f32>,
    labels: &ArrayView2<'_, u8>,
    cfg: &SegLossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let (ce, dice) = segmentation_loss_parts(logits, labels)?;
    let mut total = 0.0;
    if cfg.use_ce {
        total += ce;
    }
    if cfg.use_dice {
        total += dice;
    }
    Ok(total)
}

/// Loss plus the gradient w.r.t. the logits.
pub fn segmentation_loss_with_grad(
    logits: &Array3<f32>,
    labels: &ArrayView2<'_, u8>,
    cfg: &SegLossConfig,
) -> Result<(f64, Array3<f32>)> {
    cfg.validate()?;
    check_shapes(logits, labels)?;
    let (n, h, w) = logits.dim();
    let hw = h * w;
    let probs = softmax(logits);
    let lab = labels.as_slice().expect("standard layout");

    let mut ce = 0.0f64;
    for (i, &l) in lab.iter().enumerate() {
        ce -= probs[l as usize * hw + i].max(1e-300).ln();
    }
    ce /= hw as f64;

    // Soft Dice per class with its gradient w.r.t. probabilities.
    let mut inter = vec![0.0f64; n];
    let mut psum = vec![0.0f64; n];
    let mut tsum = vec![0.0f64; n];
    for c in 0..n {
        for i in 0..hw {
            let p = probs[c * hw + i];
            psum[c] += p;
            if lab[i] as usize == c {
                inter[c] += p;
                tsum[c] += 1.0;
            }
        }
    }
    let mut dice_sum = 0.0;
    for c in 0..n {
        dice_sum += (2.0 * inter[c] + DICE_SMOOTH) / (psum[c] + tsum[c] + DICE_SMOOTH);
    }
    let dice_loss = 1.0 - dice_sum / n as f64;

    let mut total = 0.0f64;
    if cfg.use_ce {
        total += ce;
    }
    if cfg.use_dice {
        total += dice_loss;
    }

    // dL/dp, then through the softmax Jacobian per pixel.
    let mut dprob = vec![0.0f64; n * hw];
    if cfg.use_ce {
        let inv = 1.0 / hw as f64;
        for (i, &l) in lab.iter().enumerate() {
            let c = l as usize;
            dprob[c * hw + i] -= inv / probs[c * hw + i].max(1e-300);
        }
    }
    if cfg.use_dice {
        let inv_n = 1.0 / n as f64;
        for c in 0..n {
            let denom = psum[c] + tsum[c] + DICE_SMOOTH;
            let numer = 2.0 * inter[c] + DICE_SMOOTH;
            for i in 0..hw {
                let t = if lab[i] as usize == c { 1.0 } else { 0.0 };
                // d dice_c / dp = (2 t * denom - numer) / denom^2
                let ddice = (2.0 * t * denom - numer) / (denom * denom);
                dprob[c * hw + i] -= inv_n * ddice;
            }
        }
    }

    let mut dlogits = Array3::<f32>::zeros((n, h, w));
    let dl = dlogits.as_slice_mut().expect("standard layout");
    for i in 0..hw {
        let mut dot = 0.0f64;
        for c in 0..n {
            dot += dprob[c * hw + i] * probs[c * hw + i];
        }
        for c in 0..n {
            let p = probs[c * hw + i];
            dl[c * hw + i] = (p * (dprob[c * hw + i] - dot)) as f32;
        }
    }
    Ok((total, dlogits))
}
