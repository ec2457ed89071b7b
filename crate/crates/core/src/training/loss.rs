//! Dice + binary cross-entropy on logits, with its analytic gradient.

use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

/// Smoothing constant in the Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub dice: f64,
    pub ce: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.dice + self.ce
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check(logits: &[f64], target: &BinaryMask) -> Result<()> {
    if logits.len() != target.values().len() {
        return Err(Error::validation(format!(
            "{} logits for a {:?} target",
            logits.len(),
            target.shape()
        )));
    }
    Ok(())
}

/// Both loss terms for one logits map (row-major, same shape as `target`).
pub fn dice_ce_terms(logits: &[f64], target: &BinaryMask) -> Result<LossTerms> {
    check(logits, target)?;
    let n = logits.len() as f64;
    let (mut sp, mut st, mut spt, mut ce) = (0.0, 0.0, 0.0, 0.0);
    for (&x, &t) in logits.iter().zip(target.values()) {
        let p = sigmoid(x);
        let t = f64::from(t);
        sp += p;
        st += t;
        spt += p * t;
        // -[t ln p + (1-t) ln(1-p)] = softplus(x) - t x
        ce += softplus(x) - t * x;
    }
    Ok(LossTerms {
        dice: 1.0 - (2.0 * spt + DICE_EPS) / (sp + st + DICE_EPS),
        ce: ce / n,
    })
}

pub fn dice_ce_loss(logits: &[f64], target: &BinaryMask) -> Result<f64> {
    Ok(dice_ce_terms(logits, target)?.total())
}

/// Loss and its gradient with respect to every logit.
pub fn dice_ce_loss_grad(logits: &[f64], target: &BinaryMask) -> Result<(f64, Vec<f64>)> {
    check(logits, target)?;
    let n = logits.len() as f64;
    let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let (mut sp, mut st, mut spt) = (0.0, 0.0, 0.0);
    for (&p, &t) in probs.iter().zip(target.values()) {
        let t = f64::from(t);
        sp += p;
        st += t;
        spt += p * t;
    }
    let num = 2.0 * spt + DICE_EPS;
    let den = sp + st + DICE_EPS;
    let loss = dice_ce_loss(logits, target)?;
    let grad = probs
        .iter()
        .zip(target.values())
        .map(|(&p, &t)| {
            let t = f64::from(t);
            // d dice / dp = -(2t den - num) / den^2; dp/dx = p(1-p)
            let d_dice = -(2.0 * t * den - num) / (den * den) * p * (1.0 - p);
            let d_ce = (p - t) / n;
            d_dice + d_ce
        })
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn saturated_correct_prediction_is_near_zero() {
        let t = BinaryMask::from_vec(2, 3, vec![1, 0, 1, 0, 0, 1]).unwrap();
        let logits: Vec<f64> = t.values().iter().map(|&v| if v == 1 { 20.0 } else { -20.0 }).collect();
        assert!(dice_ce_loss(&logits, &t).unwrap() < 1e-6);
    }

    #[test]
    fn zero_logits_closed_form() {
        let t = BinaryMask::from_vec(2, 2, vec![1, 0, 1, 1]).unwrap();
        let terms = dice_ce_terms(&[0.0; 4], &t).unwrap();
        assert_eq!(terms.ce, std::f64::consts::LN_2);
        // p = 0.5 everywhere: sum(pt) = 1.5, sum(p) = 2, sum(t) = 3
        let expected = 1.0 - (3.0 + DICE_EPS) / (2.0 + 3.0 + DICE_EPS);
        assert!((terms.dice - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let t = BinaryMask::zeros(2, 2);
        assert!(matches!(dice_ce_loss(&[0.0; 5], &t), Err(Error::Validation(_))));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = BinaryMask::from_vec(8, 8, (0..64).map(|_| rng.random_range(0..2)).collect()).unwrap();
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (_, g) = dice_ce_loss_grad(&x, &t).unwrap();
        let h = 1e-5;
        for i in 0..64 {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (dice_ce_loss(&a, &t).unwrap() - dice_ce_loss(&b, &t).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative(
            bits in proptest::collection::vec(0u8..2, 16),
            xs in proptest::collection::vec(-30.0f64..30.0, 16)
        ) {
            let t = BinaryMask::from_vec(4, 4, bits).unwrap();
            let terms = dice_ce_terms(&xs, &t).unwrap();
            prop_assert!(terms.dice >= 0.0 && terms.ce >= 0.0);
        }
    }
}
