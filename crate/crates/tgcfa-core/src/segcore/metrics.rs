//! Percentage Dice similarity coefficient.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class Dice percentages plus the foreground mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_class: Vec<f64>,
    /// Mean over non-background classes present in the ground truth;
    /// falls back to the all-class mean when none are.
    pub mean_foreground: f64,
}

/// Percentage Dice per class: 100 * 2|P∩T| / (|P| + |T|).
///
/// A class absent from both prediction and truth scores 100 and is
/// excluded from the foreground mean.
pub fn dice_score(
    prediction: ArrayView2<'_, u8>,
    truth: ArrayView2<'_, u8>,
    num_labels: usize,
    background: Option<usize>,
) -> Result<DiceReport> {
    if prediction.dim() != truth.dim() {
        return Err(Error::Validation(format!(
            "prediction {:?} and truth {:?} shapes differ",
            prediction.dim(),
            truth.dim()
        )));
    }
    if num_labels == 0 {
        return Err(Error::Validation("num_labels must be positive".into()));
    }
    for &v in prediction.iter().chain(truth.iter()) {
        if v as usize >= num_labels {
            return Err(Error::Validation(format!(
                "label value {v} out of range [0, {num_labels})"
            )));
        }
    }

    let mut pred_count = vec![0u64; num_labels];
    let mut truth_count = vec![0u64; num_labels];
    let mut inter = vec![0u64; num_labels];
    for (&p, &t) in prediction.iter().zip(truth.iter()) {
        pred_count[p as usize] += 1;
        truth_count[t as usize] += 1;
        if p == t {
            inter[p as usize] += 1;
        }
    }

    let per_class: Vec<f64> = (0..num_labels)
        .map(|c| {
            let denom = pred_count[c] + truth_count[c];
            if denom == 0 {
                100.0
            } else {
                100.0 * 2.0 * inter[c] as f64 / denom as f64
            }
        })
        .collect();

    let fg: Vec<f64> = (0..num_labels)
        .filter(|&c| Some(c) != background && truth_count[c] > 0)
        .map(|c| per_class[c])
        .collect();
    let mean_foreground = if fg.is_empty() {
        per_class.iter().sum::<f64>() / num_labels as f64
    } else {
        fg.iter().sum::<f64>() / fg.len() as f64
    };

    Ok(DiceReport {
        per_class,
        mean_foreground,
    })
}
