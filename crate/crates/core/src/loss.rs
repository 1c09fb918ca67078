//! Weighted binary cross-entropy plus soft Dice, fused into one tape op.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { bce: 0.5, dice: 0.5 }
    }
}

/// `max(l, 0) − l·y + ln(1 + e^{−|l|})`, finite for every finite logit.
#[inline]
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// `1 − (2Σpy + 1) / (Σp + Σy + 1)`.
pub fn dice_term(prob: &[f64], target: &[f64]) -> f64 {
    let (num, den) = dice_sums(prob, target);
    1.0 - num / den
}

fn dice_sums(prob: &[f64], target: &[f64]) -> (f64, f64) {
    let mut py = 0.0;
    let mut p = 0.0;
    let mut y = 0.0;
    for (&pi, &yi) in prob.iter().zip(target) {
        py += pi * yi;
        p += pi;
        y += yi;
    }
    (2.0 * py + 1.0, p + y + 1.0)
}

fn check_mask(logits: &[usize], mask: &Tensor) -> Result<()> {
    if logits != mask.dims() {
        return Err(Error::shape(format!(
            "logits {logits:?} and mask {:?} differ",
            mask.dims()
        )));
    }
    if logits.len() != 4 || logits[1] != 1 {
        return Err(Error::shape(format!("loss expects [N,1,H,W] logits, got {logits:?}")));
    }
    if let Some(bad) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(format!("mask value {bad} is not binary")));
    }
    Ok(())
}

/// Loss value without recording, for evaluation.
pub fn dice_bce_value(logits: &Tensor, mask: &Tensor, w: LossWeights) -> Result<f64> {
    check_mask(logits.dims(), mask)?;
    Ok(loss_value(logits, mask.data(), w))
}

fn loss_value(logits: &Tensor, mask: &[f64], w: LossWeights) -> f64 {
    let n = logits.dims()[0];
    let l = logits.data();
    let bce = l.iter().zip(mask).map(|(&li, &yi)| bce_with_logits(li, yi)).sum::<f64>() / l.len() as f64;
    let plane = l.len() / n;
    let prob: Vec<f64> = l.iter().map(|&v| sigmoid(v)).collect();
    let dice = prob
        .chunks_exact(plane)
        .zip(mask.chunks_exact(plane))
        .map(|(p, y)| dice_term(p, y))
        .sum::<f64>()
        / n as f64;
    w.bce * bce + w.dice * dice
}

impl Tape {
    /// `w_bce · mean(BCE) + w_dice · mean over samples of the Dice term`.
    pub fn dice_bce_loss(&mut self, logits: Var, mask: &Tensor, weights: LossWeights) -> Result<Var> {
        check_mask(self.dims(logits), mask)?;
        let value = loss_value(self.value(logits), mask.data(), weights);
        Ok(self.push(
            &[1],
            vec![value],
            Op::DiceBce {
                logits,
                mask: mask.data().to_vec(),
                bce_weight: weights.bce,
                dice_weight: weights.dice,
            },
            &[logits],
        ))
    }
}

pub(crate) fn dice_bce_backward(
    logits: &Tensor,
    mask: &[f64],
    bce_weight: f64,
    dice_weight: f64,
    upstream: f64,
    grad: &mut [f64],
) {
    let l = logits.data();
    let n = logits.dims()[0];
    let total = l.len() as f64;
    let plane = l.len() / n;
    let prob: Vec<f64> = l.iter().map(|&v| sigmoid(v)).collect();
    for s in 0..n {
        let range = s * plane..(s + 1) * plane;
        let (p, y) = (&prob[range.clone()], &mask[range.clone()]);
        let (num, den) = dice_sums(p, y);
        for (k, i) in range.enumerate() {
            let d_bce = (p[k] - y[k]) / total;
            // d(1 − num/den)/dp
            let d_dice_dp = -(2.0 * y[k] * den - num) / (den * den);
            let d_dice = d_dice_dp * p[k] * (1.0 - p[k]) / n as f64;
            grad[i] += upstream * (bce_weight * d_bce + dice_weight * d_dice);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturated_correct_prediction() {
        let logits = Tensor::full(&[1, 1, 4, 4], 20.0).unwrap();
        let mask = Tensor::ones(&[1, 1, 4, 4]).unwrap();
        let l = dice_bce_value(&logits, &mask, LossWeights::default()).unwrap();
        assert!(l < 1e-6, "{l}");
    }

    #[test]
    fn dice_identity() {
        let y = [0.0, 1.0, 1.0, 0.0, 1.0];
        assert_eq!(dice_term(&y, &y), 0.0);
    }

    #[test]
    fn zero_logits_bce_is_ln2() {
        assert_eq!(bce_with_logits(0.0, 1.0), std::f64::consts::LN_2);
        assert_eq!(bce_with_logits(0.0, 0.0), std::f64::consts::LN_2);
        let logits = Tensor::zeros(&[2, 1, 2, 2]).unwrap();
        let mask = Tensor::from_values(&[2, 1, 2, 2], vec![0., 1., 1., 0., 1., 1., 1., 1.]).unwrap();
        let only_bce = LossWeights { bce: 1.0, dice: 0.0 };
        let v = dice_bce_value(&logits, &mask, only_bce).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn extreme_logits_finite() {
        let logits = Tensor::from_values(&[1, 1, 1, 4], vec![1e4, -1e4, 1e4, -1e4]).unwrap();
        let mask = Tensor::from_values(&[1, 1, 1, 4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let v = dice_bce_value(&logits, &mask, LossWeights::default()).unwrap();
        assert!(v.is_finite());
        let mut tape = Tape::new();
        let l = tape.param(logits);
        let loss = tape.dice_bce_loss(l, &mask, LossWeights::default()).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(l).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn non_binary_mask_rejected() {
        let logits = Tensor::zeros(&[1, 1, 2, 2]).unwrap();
        let mask = Tensor::full(&[1, 1, 2, 2], 0.5).unwrap();
        assert!(matches!(
            dice_bce_value(&logits, &mask, LossWeights::default()),
            Err(Error::Contract(_))
        ));
    }
}
