use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Smoothing term added to both numerator and denominator of every Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

/// Tolerance on probabilities leaving `[0, 1]`.
const PROB_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_class_dice: Vec<f64>,
    /// Zero for classes absent from the label; the rest sum to one.
    pub per_class_weight: Vec<f64>,
}

fn valid(mask: Option<ArrayView2<'_, bool>>, idx: (usize, usize)) -> bool {
    mask.is_none_or(|m| m[idx])
}

/// Inverse-frequency class weights over the valid pixels of `label`,
/// normalized over the classes that occur.
pub fn class_weights(label: ArrayView2<'_, usize>, mask: Option<ArrayView2<'_, bool>>, class_count: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; class_count];
    for (idx, &l) in label.indexed_iter() {
        if !valid(mask, idx) {
            continue;
        }
        if l >= class_count {
            return Err(Error::Invalid(format!("label {l} at {idx:?} is outside [0, {class_count})")));
        }
        counts[l] += 1;
    }
    weights_from_counts(&counts)
}

pub fn weights_from_counts(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.iter().all(|&n| n == 0) {
        return Err(Error::Invalid("class weights need at least one labelled pixel".into()));
    }
    let inv: Vec<f64> = counts.iter().map(|&n| if n == 0 { 0.0 } else { 1.0 / n as f64 }).collect();
    let sum: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|v| v / sum).collect())
}

struct DiceTerms {
    breakdown: LossBreakdown,
    intersection: Vec<f64>,
    denominator: Vec<f64>,
}

fn dice_terms(probs: ArrayView3<'_, f64>, label: ArrayView2<'_, usize>, mask: Option<ArrayView2<'_, bool>>) -> Result<DiceTerms> {
    let (c, h, w) = probs.dim();
    if label.dim() != (h, w) {
        return Err(Error::shape("label", &[h, w], label.shape()));
    }
    if let Some(m) = mask {
        if m.dim() != (h, w) {
            return Err(Error::shape("valid mask", &[h, w], m.shape()));
        }
    }
    if let Some(p) = probs.iter().find(|p| !(-PROB_TOL..=1.0 + PROB_TOL).contains(*p)) {
        return Err(Error::Invalid(format!("probability {p} is outside [0, 1]")));
    }
    let weights = class_weights(label, mask, c)?;
    let mut inter = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut gsum = vec![0.0; c];
    for ((i, j), &l) in label.indexed_iter() {
        if !valid(mask, (i, j)) {
            continue;
        }
        for k in 0..c {
            psum[k] += probs[[k, i, j]];
        }
        inter[l] += probs[[l, i, j]];
        gsum[l] += 1.0;
    }
    let denominator: Vec<f64> = (0..c).map(|k| psum[k] + gsum[k] + DICE_EPS).collect();
    let dice: Vec<f64> = (0..c).map(|k| (2.0 * inter[k] + DICE_EPS) / denominator[k]).collect();
    let total = 1.0 - weights.iter().zip(&dice).map(|(w, d)| w * d).sum::<f64>();
    Ok(DiceTerms {
        breakdown: LossBreakdown {
            total,
            per_class_dice: dice,
            per_class_weight: weights,
        },
        intersection: inter,
        denominator,
    })
}

/// `1 − Σ ω_k·dice_k` with soft Dice over the valid pixels.
pub fn weighted_dice_loss(
    probs: ArrayView3<'_, f64>,
    label: ArrayView2<'_, usize>,
    mask: Option<ArrayView2<'_, bool>>,
) -> Result<LossBreakdown> {
    dice_terms(probs, label, mask).map(|t| t.breakdown)
}

/// Loss and its gradient with respect to `probs`. Padded pixels get zero.
pub fn weighted_dice_with_gradient(
    probs: ArrayView3<'_, f64>,
    label: ArrayView2<'_, usize>,
    mask: Option<ArrayView2<'_, bool>>,
) -> Result<(LossBreakdown, Array3<f64>)> {
    let t = dice_terms(probs, label, mask)?;
    let (c, h, w) = probs.dim();
    let weights = &t.breakdown.per_class_weight;
    let mut grad = Array3::zeros((c, h, w));
    for k in 0..c {
        if weights[k] == 0.0 {
            continue;
        }
        let s = t.denominator[k];
        let num = 2.0 * t.intersection[k] + DICE_EPS;
        let scale = -weights[k] / (s * s);
        for i in 0..h {
            for j in 0..w {
                if !valid(mask, (i, j)) {
                    continue;
                }
                let g = if label[[i, j]] == k { 1.0 } else { 0.0 };
                grad[[k, i, j]] = scale * (2.0 * g * s - num);
            }
        }
    }
    Ok((t.breakdown, grad))
}

/// Batch-mean weighted Dice of `probs` (`N × C × H × W`), recorded on the tape.
pub fn weighted_dice_on_tape(
    tape: &mut Tape,
    probs: Var,
    labels: &[Array2<usize>],
    masks: &[Array2<bool>],
) -> Result<(Var, Vec<LossBreakdown>)> {
    let p = tape.value(probs);
    let n = p.shape()[0];
    if labels.len() != n || masks.len() != n {
        return Err(Error::Invalid(format!(
            "batch of {n} probabilities with {} labels and {} masks",
            labels.len(),
            masks.len()
        )));
    }
    let mut breakdowns = Vec::with_capacity(n);
    let mut grad = ArrayD::zeros(p.raw_dim());
    for (b, (label, mask)) in labels.iter().zip(masks).enumerate() {
        let pb: ArrayView3<'_, f64> = p.index_axis(Axis(0), b).into_dimensionality().map_err(|_| {
            Error::shape("probabilities", &[n, 0, 0, 0], p.shape())
        })?;
        let (bd, g) = weighted_dice_with_gradient(pb, label.view(), Some(mask.view()))?;
        grad.index_axis_mut(Axis(0), b).assign(&g);
        breakdowns.push(bd);
    }
    let mean = breakdowns.iter().map(|b| b.total).sum::<f64>() / n as f64;
    grad /= n as f64;
    let grad = Arc::new(grad);
    let value = Array1::from_elem(1, mean).into_dyn().into_shape_with_order(IxDyn(&[])).expect("scalar");
    let loss = tape.custom(&[probs], value, move |g: &Tensor| {
        let s = g.iter().next().copied().unwrap_or(0.0);
        vec![Some(grad.as_ref() * s)]
    });
    Ok((loss, breakdowns))
}
