//! Dice loss, focal loss, and their equally weighted hybrid.

use crate::error::{Error, Result};
use crate::nn::{no_grad, ops, Data, Tensor};
use serde::{Deserialize, Serialize};

/// Predictions are clipped to `[LOG_CLIP, 1 - LOG_CLIP]` before the logarithm.
pub const LOG_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    /// Focusing exponent; 0 reduces the focal term to cross-entropy.
    pub gamma: f64,
    /// Constant weighting factor applied to every pixel's focal term.
    pub alpha: f64,
    /// Dice smoothing added to numerator and denominator.
    pub smooth_eps: f64,
    pub dice_weight: f64,
    pub focal_weight: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        // Gamma and alpha follow the focal-loss originators' defaults; the
        // training recipe never pins them.
        LossSettings {
            gamma: 2.0,
            alpha: 0.25,
            smooth_eps: 1.0,
            dice_weight: 1.0,
            focal_weight: 1.0,
        }
    }
}

impl LossSettings {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::Config("loss gamma must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("loss alpha must lie in [0, 1]".into()));
        }
        if self.smooth_eps <= 0.0 {
            return Err(Error::Config("dice smoothing must be positive".into()));
        }
        if self.dice_weight < 0.0 || self.focal_weight < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Soft dice loss over every pixel of the batch:
/// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn dice_loss_t(pred: &Tensor, gt: &Tensor, s: &LossSettings) -> Tensor {
    let inter = ops::sum_all(&ops::mul(pred, gt));
    let num = ops::add_scalar(&ops::mul_scalar(&inter, 2.0), s.smooth_eps);
    let den = ops::add_scalar(&ops::add(&ops::sum_all(pred), &ops::sum_all(gt)), s.smooth_eps);
    ops::add_scalar(&ops::neg(&ops::div(&num, &den)), 1.0)
}

/// Mean focal term `-alpha (1 - p_t)^gamma ln(p_t)` with
/// `p_t = p` on foreground and `1 - p` on background.
pub fn focal_loss_t(pred: &Tensor, gt: &Tensor, s: &LossSettings) -> Tensor {
    // p_t = p*g + (1-p)*(1-g), algebraically selecting by the binary mask.
    let one_minus_pred = ops::add_scalar(&ops::neg(pred), 1.0);
    let one_minus_gt = ops::add_scalar(&ops::neg(gt), 1.0);
    let pt = ops::add(&ops::mul(pred, gt), &ops::mul(&one_minus_pred, &one_minus_gt));
    let pt = ops::clamp(&pt, LOG_CLIP, 1.0 - LOG_CLIP);
    let focus = ops::powf(&ops::add_scalar(&ops::neg(&pt), 1.0), s.gamma);
    let term = ops::mul(&focus, &ops::ln(&pt));
    ops::mul_scalar(&ops::mean_all(&term), -s.alpha)
}

/// `dice_weight * dice + focal_weight * focal`.
pub fn hybrid_loss_t(pred: &Tensor, gt: &Tensor, s: &LossSettings) -> Tensor {
    ops::add(
        &ops::mul_scalar(&dice_loss_t(pred, gt, s), s.dice_weight),
        &ops::mul_scalar(&focal_loss_t(pred, gt, s), s.focal_weight),
    )
}

fn validate_pair(pred: &Data, gt: &Data) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if !pred.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::Invalid("predictions must lie in [0, 1]".into()));
    }
    if !gt.iter().all(|v| *v == 0.0 || *v == 1.0) {
        return Err(Error::Invalid("ground truth must be binary".into()));
    }
    Ok(())
}

pub fn dice_loss(pred: &Data, gt: &Data, s: &LossSettings) -> Result<f64> {
    s.validate()?;
    validate_pair(pred, gt)?;
    Ok(no_grad(|| {
        dice_loss_t(&Tensor::constant(pred.clone()), &Tensor::constant(gt.clone()), s).scalar()
    }))
}

pub fn focal_loss(pred: &Data, gt: &Data, s: &LossSettings) -> Result<f64> {
    s.validate()?;
    validate_pair(pred, gt)?;
    Ok(no_grad(|| {
        focal_loss_t(&Tensor::constant(pred.clone()), &Tensor::constant(gt.clone()), s).scalar()
    }))
}

pub fn hybrid_loss(pred: &Data, gt: &Data, s: &LossSettings) -> Result<f64> {
    s.validate()?;
    validate_pair(pred, gt)?;
    Ok(no_grad(|| {
        hybrid_loss_t(&Tensor::constant(pred.clone()), &Tensor::constant(gt.clone()), s).scalar()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use ndarray::{Array2, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(seed: u64) -> (Data, Data) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| rng.gen_range(0.05..0.95));
        let gt = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |_| f64::from(rng.gen_bool(0.5)));
        (pred, gt)
    }

    #[test]
    fn dice_identity_and_disjoint_cases() {
        let s = LossSettings::default();
        let gt = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |ix| f64::from(ix[0] < 2));
        assert_eq!(dice_loss(&gt, &gt, &s).unwrap(), 0.0);

        let flipped = gt.mapv(|v| 1.0 - v);
        let n = 8.0;
        let want = 1.0 - s.smooth_eps / (2.0 * n + s.smooth_eps);
        assert!((dice_loss(&flipped, &gt, &s).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn dice_matches_direct_formula() {
        let s = LossSettings::default();
        let pred = ArrayD::from_elem(IxDyn(&[4, 4]), 0.5);
        let gt = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |ix| f64::from(ix[1] < 2));
        // intersection = 0.5 * 8, sums: pred 8, gt 8.
        let want = 1.0 - (2.0 * 4.0 + s.smooth_eps) / (8.0 + 8.0 + s.smooth_eps);
        assert!((dice_loss(&pred, &gt, &s).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn focal_perfect_prediction_is_tiny() {
        let s = LossSettings::default();
        let gt = ArrayD::from_shape_fn(IxDyn(&[3, 3]), |ix| f64::from(ix[0] == 1));
        assert!(focal_loss(&gt, &gt, &s).unwrap() < 1e-5);
    }

    #[test]
    fn focal_reduces_to_cross_entropy_when_gamma_zero() {
        let s = LossSettings { gamma: 0.0, alpha: 1.0, ..Default::default() };
        let (pred, gt) = random_pair(80);
        let got = focal_loss(&pred, &gt, &s).unwrap();
        // Independent cross-entropy evaluation.
        let mut ce = 0.0;
        for (p, g) in pred.iter().zip(gt.iter()) {
            ce -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
        }
        ce /= pred.len() as f64;
        assert!((got - ce).abs() < 1e-6);
    }

    #[test]
    fn focal_single_pixel_scalar_value() {
        let s = LossSettings { gamma: 2.0, alpha: 0.25, ..Default::default() };
        let pred = ArrayD::from_elem(IxDyn(&[1]), 0.9);
        let gt = ArrayD::from_elem(IxDyn(&[1]), 1.0);
        let want = -0.25 * 0.1f64.powi(2) * 0.9f64.ln();
        assert!((focal_loss(&pred, &gt, &s).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn hybrid_is_the_weighted_sum_of_terms() {
        let s = LossSettings::default();
        let (pred, gt) = random_pair(81);
        let want = dice_loss(&pred, &gt, &s).unwrap() + focal_loss(&pred, &gt, &s).unwrap();
        assert!((hybrid_loss(&pred, &gt, &s).unwrap() - want).abs() < 1e-9);

        let s0 = LossSettings { dice_weight: 0.0, ..Default::default() };
        assert_eq!(
            hybrid_loss(&pred, &gt, &s0).unwrap(),
            focal_loss(&pred, &gt, &s0).unwrap()
        );
        assert!(hybrid_loss(&gt, &gt, &s).unwrap() < 1e-4);
    }

    #[test]
    fn losses_are_nonnegative() {
        let s = LossSettings::default();
        for seed in 0..10 {
            let (pred, gt) = random_pair(90 + seed);
            assert!(dice_loss(&pred, &gt, &s).unwrap() >= 0.0);
            assert!(focal_loss(&pred, &gt, &s).unwrap() >= 0.0);
            assert!(hybrid_loss(&pred, &gt, &s).unwrap() >= 0.0);
        }
    }

    #[test]
    fn moving_toward_the_target_strictly_decreases_hybrid_loss() {
        let s = LossSettings::default();
        for seed in 0..5 {
            let (pred, gt) = random_pair(110 + seed);
            let mut prev = f64::INFINITY;
            for step in 0..=10 {
                let t = step as f64 / 10.0;
                // Interpolate toward a clipped copy of the target.
                let target = gt.mapv(|g| g.clamp(1e-4, 1.0 - 1e-4));
                let interp = ndarray::Zip::from(&pred)
                    .and(&target)
                    .map_collect(|&p, &g| (1.0 - t) * p + t * g);
                let loss = hybrid_loss(&interp, &gt, &s).unwrap();
                assert!(loss < prev, "seed {seed} step {step}: {loss} !< {prev}");
                prev = loss;
            }
        }
    }

    #[test]
    fn focal_is_symmetric_under_label_flip() {
        let s = LossSettings::default();
        let (pred, gt) = random_pair(120);
        let a = focal_loss(&pred, &gt, &s).unwrap();
        let b = focal_loss(&pred.mapv(|p| 1.0 - p), &gt.mapv(|g| 1.0 - g), &s).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn shape_and_range_validation() {
        let s = LossSettings::default();
        let pred = ArrayD::from_elem(IxDyn(&[2, 2]), 0.5);
        let gt = ArrayD::from_elem(IxDyn(&[2, 3]), 1.0);
        assert!(matches!(dice_loss(&pred, &gt, &s), Err(Error::Shape(_))));

        let bad_pred = ArrayD::from_elem(IxDyn(&[2, 2]), 1.5);
        let gt = ArrayD::from_elem(IxDyn(&[2, 2]), 1.0);
        assert!(matches!(dice_loss(&bad_pred, &gt, &s), Err(Error::Invalid(_))));

        let soft_gt = ArrayD::from_elem(IxDyn(&[2, 2]), 0.5);
        assert!(matches!(focal_loss(&pred, &soft_gt, &s), Err(Error::Invalid(_))));
    }

    #[test]
    fn hybrid_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(130);
        let pred = Tensor::parameter(
            Array2::from_shape_fn((2, 2), |_| rng.gen_range(0.1..0.9)).into_dyn(),
        );
        let gt = Tensor::constant(
            Array2::from_shape_fn((2, 2), |_| f64::from(rng.gen_bool(0.5))).into_dyn(),
        );
        let s = LossSettings::default();
        check_gradients(&[pred.clone()], || hybrid_loss_t(&pred, &gt, &s));
    }
}
