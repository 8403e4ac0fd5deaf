//! Equal-weight soft-Dice + binary cross-entropy segmentation loss.

use crate::error::{OdexError, Result};

use super::ops::sigmoid;

#[derive(Clone, Debug)]
pub struct LossWithGrad {
    pub loss: f64,
    /// Gradient with respect to whatever the loss was evaluated on
    /// (probabilities or logits, depending on the entry point).
    pub gradient: Vec<f64>,
}

/// `0.5 * (1 - softDice) + 0.5 * BCE` evaluated on probabilities.
///
/// Every probability must lie strictly inside `(0, 1)`; no clamping is done.
pub fn dice_bce_loss(probabilities: &[f64], mask: &[f64], smoothing: f64) -> Result<LossWithGrad> {
    if probabilities.len() != mask.len() {
        return Err(OdexError::DimensionMismatch {
            expected: mask.len(),
            actual: probabilities.len(),
        });
    }
    if probabilities.is_empty() {
        return Err(OdexError::EmptyInput("probability grid"));
    }
    if let Some((index, &value)) = probabilities
        .iter()
        .enumerate()
        .find(|(_, &p)| !(p > 0.0 && p < 1.0))
    {
        return Err(OdexError::ProbabilityDomain { index, value });
    }
    let n = probabilities.len() as f64;
    let (inter, sum_p, sum_g) = dice_sums(probabilities, mask);
    let denom = sum_p + sum_g + smoothing;
    let soft_dice = (2.0 * inter + smoothing) / denom;

    let bce = probabilities
        .iter()
        .zip(mask)
        .map(|(&p, &g)| -(g * p.ln() + (1.0 - g) * (1.0 - p).ln()))
        .sum::<f64>()
        / n;

    let gradient = probabilities
        .iter()
        .zip(mask)
        .map(|(&p, &g)| {
            let d_dice = (2.0 * g * denom - (2.0 * inter + smoothing)) / (denom * denom);
            let d_bce = -(g / p - (1.0 - g) / (1.0 - p)) / n;
            -0.5 * d_dice + 0.5 * d_bce
        })
        .collect();

    Ok(LossWithGrad {
        loss: 0.5 * (1.0 - soft_dice) + 0.5 * bce,
        gradient,
    })
}

/// Same loss evaluated from logits, with the gradient taken w.r.t. the logits.
/// BCE goes through a log-sum-exp form so saturated logits stay finite.
pub(crate) fn dice_bce_from_logits(logits: &[f64], mask: &[f64], smoothing: f64) -> (LossWithGrad, Vec<f64>) {
    let n = logits.len() as f64;
    let probs: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let (inter, sum_p, sum_g) = dice_sums(&probs, mask);
    let denom = sum_p + sum_g + smoothing;
    let soft_dice = (2.0 * inter + smoothing) / denom;

    let bce = logits
        .iter()
        .zip(mask)
        .map(|(&l, &g)| l.max(0.0) - g * l + (-l.abs()).exp().ln_1p())
        .sum::<f64>()
        / n;

    let gradient = probs
        .iter()
        .zip(mask)
        .map(|(&p, &g)| {
            let d_dice = (2.0 * g * denom - (2.0 * inter + smoothing)) / (denom * denom);
            -0.5 * d_dice * p * (1.0 - p) + 0.5 * (p - g) / n
        })
        .collect();

    (
        LossWithGrad {
            loss: 0.5 * (1.0 - soft_dice) + 0.5 * bce,
            gradient,
        },
        probs,
    )
}

fn dice_sums(probs: &[f64], mask: &[f64]) -> (f64, f64, f64) {
    probs
        .iter()
        .zip(mask)
        .fold((0.0, 0.0, 0.0), |(i, p, g), (&pv, &gv)| (i + pv * gv, p + pv, g + gv))
}
