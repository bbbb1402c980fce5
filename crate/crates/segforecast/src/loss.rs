//! Training losses: cross-entropy forecasting loss over non-ignored pixels,
//! mean-squared-error distillation loss on pre-softmax tensors, and their
//! weighted combination. Every loss returns its exact gradient with respect
//! to the student logits.

use ndarray::Array3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::LogitTensor;
use crate::types::SegMap;

/// Components of one training loss evaluation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossValue {
    pub total: f64,
    pub forecasting: f64,
    pub distillation: f64,
    pub lambda: f64,
}

/// Mean negative log-likelihood of the ground-truth class under the softmax
/// of `o`, averaged over non-ignored pixels. Ignored pixels contribute
/// nothing to the value or the gradient.
pub fn forecasting_loss(
    o: &LogitTensor,
    gt: &SegMap,
    ignore_label: u8,
) -> Result<(f64, Array3<f64>)> {
    let data = o.data();
    let (c, h, w) = data.dim();
    if (gt.height(), gt.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "logits are {h}x{w} but ground truth is {}x{}",
            gt.height(),
            gt.width()
        )));
    }
    if gt.num_classes() != c {
        return Err(Error::Shape(format!(
            "logits have {c} classes but ground truth has {}",
            gt.num_classes()
        )));
    }
    let mut grad = Array3::zeros((c, h, w));
    let mut n = 0usize;
    let mut loss = 0.0;
    let mut probs = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let label = gt.labels()[[y, x]];
            if label == ignore_label {
                continue;
            }
            n += 1;
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(data[[ci, y, x]]);
            }
            let mut z = 0.0;
            for ci in 0..c {
                let e = (data[[ci, y, x]] - m).exp();
                probs[ci] = e;
                z += e;
            }
            let li = usize::from(label);
            loss -= (probs[li] / z).ln();
            for ci in 0..c {
                grad[[ci, y, x]] = probs[ci] / z;
            }
            grad[[li, y, x]] -= 1.0;
        }
    }
    if n == 0 {
        return Err(Error::Numeric(
            "forecasting loss undefined: every pixel is ignored".into(),
        ));
    }
    let inv = 1.0 / n as f64;
    loss *= inv;
    grad.mapv_inplace(|v| v * inv);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "forecasting loss is not finite: {loss}"
        )));
    }
    Ok((loss, grad))
}

/// Mean squared difference between student and teacher pre-softmax tensors.
/// The teacher tensor is a constant: no gradient flows to it.
pub fn distillation_loss(
    o_student: &LogitTensor,
    o_teacher: &LogitTensor,
) -> Result<(f64, Array3<f64>)> {
    let s = o_student.data();
    let t = o_teacher.data();
    if s.dim() != t.dim() {
        return Err(Error::Shape(format!(
            "student logits {:?} and teacher logits {:?} differ in shape",
            s.dim(),
            t.dim()
        )));
    }
    let n = s.len() as f64;
    let diff = s - t;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.mapv(|d| 2.0 * d / n);
    Ok((loss, grad))
}

/// Weighted sum of the two loss terms.
pub fn total_loss(forecasting: f64, distillation: f64, lambda: f64) -> Result<LossValue> {
    for (name, v) in [
        ("forecasting", forecasting),
        ("distillation", distillation),
        ("lambda", lambda),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} component is not finite")));
        }
    }
    if forecasting < 0.0 || distillation < 0.0 || lambda < 0.0 {
        return Err(Error::Numeric(format!(
            "loss components must be non-negative (forecasting={forecasting}, distillation={distillation}, lambda={lambda})"
        )));
    }
    Ok(LossValue {
        total: forecasting + lambda * distillation,
        forecasting,
        distillation,
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::IGNORE_LABEL;
    use ndarray::{Array2, Array3};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits_from(vals: Array3<f64>) -> LogitTensor {
        LogitTensor::new(vals).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let o = logits_from(Array3::zeros((4, 2, 2)));
        let gt = SegMap::new(Array2::zeros((2, 2)), 4).unwrap();
        let (l, _) = forecasting_loss(&o, &gt, IGNORE_LABEL).unwrap();
        assert!((l - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_pixel_closed_form() {
        // one pixel, C=2, logits (2, 0), ground truth class 1
        let mut vals = Array3::zeros((2, 16, 16));
        vals[[0, 0, 0]] = 2.0;
        let o = logits_from(vals.slice(ndarray::s![.., ..1, ..1]).to_owned());
        let mut gtl = Array2::zeros((1, 1));
        gtl[[0, 0]] = 1;
        let gt = SegMap::new(gtl, 2).unwrap();
        let (l, _) = forecasting_loss(&o, &gt, IGNORE_LABEL).unwrap();
        let expected = (1.0 + (2.0_f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
    }

    #[test]
    fn peaked_logits_drive_loss_to_zero() {
        let mut vals = Array3::zeros((3, 2, 2));
        for y in 0..2 {
            for x in 0..2 {
                vals[[1, y, x]] = 100.0;
            }
        }
        let o = logits_from(vals);
        let gt = SegMap::new(Array2::ones((2, 2)), 3).unwrap();
        let (l, _) = forecasting_loss(&o, &gt, IGNORE_LABEL).unwrap();
        assert!(l < 1e-10);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let o = logits_from(Array3::zeros((2, 2, 2)));
        let labels = Array2::from_elem((2, 2), IGNORE_LABEL);
        let gt = SegMap::new(labels, 2).unwrap();
        assert!(forecasting_loss(&o, &gt, IGNORE_LABEL).is_err());
    }

    #[test]
    fn ignored_pixels_have_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals = Array3::from_shape_fn((3, 4, 4), |_| rng.random_range(-2.0..2.0));
        let o = logits_from(vals);
        let mut labels = Array2::zeros((4, 4));
        labels[[1, 2]] = IGNORE_LABEL;
        labels[[3, 0]] = IGNORE_LABEL;
        let gt = SegMap::new(labels, 3).unwrap();
        let (_, grad) = forecasting_loss(&o, &gt, IGNORE_LABEL).unwrap();
        for ci in 0..3 {
            assert_eq!(grad[[ci, 1, 2]], 0.0);
            assert_eq!(grad[[ci, 3, 0]], 0.0);
        }
        assert!(grad[[0, 0, 0]] != 0.0);
    }

    #[test]
    fn forecasting_loss_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals = Array3::from_shape_fn((4, 3, 3), |_| rng.random_range(-1.0..1.0));
        let mut shifted = vals.clone();
        for y in 0..3 {
            for x in 0..3 {
                let k = rng.random_range(-5.0..5.0);
                for c in 0..4 {
                    shifted[[c, y, x]] += k;
                }
            }
        }
        let labels = Array2::from_shape_fn((3, 3), |(y, x)| ((y + x) % 4) as u8);
        let gt = SegMap::new(labels, 4).unwrap();
        let (l1, _) = forecasting_loss(&logits_from(vals), &gt, IGNORE_LABEL).unwrap();
        let (l2, _) = forecasting_loss(&logits_from(shifted), &gt, IGNORE_LABEL).unwrap();
        assert!((l1 - l2).abs() < 1e-9);
    }

    #[test]
    fn distillation_examples() {
        let a = logits_from(Array3::ones((2, 2, 2)));
        let (l, g) = distillation_loss(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));

        let one = logits_from(Array3::ones((1, 1, 1)));
        let zero = logits_from(Array3::zeros((1, 1, 1)));
        let (l, _) = distillation_loss(&one, &zero).unwrap();
        assert_eq!(l, 1.0);

        // H=1, W=2, C=2 holding [1,2,3,4] vs zeros: (1+4+9+16)/4 = 7.5
        let vals = Array3::from_shape_vec((2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = logits_from(vals);
        let t = logits_from(Array3::zeros((2, 1, 2)));
        let (l, _) = distillation_loss(&s, &t).unwrap();
        assert_eq!(l, 7.5);
    }

    #[test]
    fn distillation_symmetric_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = logits_from(Array3::from_shape_fn((3, 2, 2), |_| {
            rng.random_range(-2.0..2.0)
        }));
        let b = logits_from(Array3::from_shape_fn((3, 2, 2), |_| {
            rng.random_range(-2.0..2.0)
        }));
        let (lab, _) = distillation_loss(&a, &b).unwrap();
        let (lba, _) = distillation_loss(&b, &a).unwrap();
        assert_eq!(lab, lba);
        assert!(lab > 0.0);
    }

    #[test]
    fn distillation_shape_mismatch() {
        let a = logits_from(Array3::zeros((2, 2, 2)));
        let b = logits_from(Array3::zeros((2, 2, 4)));
        assert!(distillation_loss(&a, &b).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let v = total_loss(0.5, 0.01, 100.0).unwrap();
        assert!((v.total - 1.5).abs() < 1e-12);
        assert_eq!(v.forecasting, 0.5);
        assert_eq!(v.distillation, 0.01);

        let v = total_loss(0.7, 0.3, 0.0).unwrap();
        assert_eq!(v.total, 0.7);

        let v = total_loss(0.0, 0.0, 100.0).unwrap();
        assert_eq!(v.total, 0.0);

        assert!(total_loss(-0.1, 0.0, 1.0).is_err());
        assert!(total_loss(0.1, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn total_invariant_holds() {
        let v = total_loss(1.25, 0.5, 2.0).unwrap();
        let recomposed = v.forecasting + v.lambda * v.distillation;
        assert!(((v.total - recomposed) / v.total.max(1.0)).abs() < 1e-6);
    }

    /// Analytic gradients of L = L_f + lambda * L_d match central finite
    /// differences on random tensors.
    #[test]
    fn combined_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..6 {
            let lambda = [0.0, 1.0, 100.0][trial % 3];
            let c = rng.random_range(2..=3);
            let h = rng.random_range(1..=4);
            let w = rng.random_range(1..=4);
            let vals = Array3::from_shape_fn((c, h, w), |_| rng.random_range(-2.0..2.0));
            let teacher =
                logits_from(Array3::from_shape_fn((c, h, w), |_| rng.random_range(-2.0..2.0)));
            let labels = Array2::from_shape_fn((h, w), |_| rng.random_range(0..c) as u8);
            let gt = SegMap::new(labels, c).unwrap();

            let loss_at = |vals: &Array3<f64>| -> f64 {
                let o = logits_from(vals.clone());
                let (lf, _) = forecasting_loss(&o, &gt, IGNORE_LABEL).unwrap();
                let (ld, _) = distillation_loss(&o, &teacher).unwrap();
                total_loss(lf, ld, lambda).unwrap().total
            };

            let o = logits_from(vals.clone());
            let (_, gf) = forecasting_loss(&o, &gt, IGNORE_LABEL).unwrap();
            let (_, gd) = distillation_loss(&o, &teacher).unwrap();
            let analytic = &gf + &(gd.mapv(|v| v * lambda));

            let mut v = vals.clone();
            let h_step = 1e-3;
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        v[[ci, y, x]] += h_step;
                        let up = loss_at(&v);
                        v[[ci, y, x]] -= 2.0 * h_step;
                        let down = loss_at(&v);
                        v[[ci, y, x]] += h_step;
                        let num = (up - down) / (2.0 * h_step);
                        let a = analytic[[ci, y, x]];
                        let denom = a.abs().max(num.abs()).max(1e-6);
                        assert!(
                            ((a - num) / denom).abs() < 1e-4,
                            "grad mismatch at ({ci},{y},{x}): {a} vs {num} (lambda {lambda})"
                        );
                    }
                }
            }
        }
    }
}
