//! Retrieval losses over score vectors.
//!
//! `ce_loss` is the softmax cross-entropy of one gold response against the
//! shared negatives. `kd_loss` distills teacher scores over a context's
//! positives `R_i`: the teacher distribution lives on `R_i` only (negatives
//! are treated as having zero teacher mass, in both numerator and
//! normalizer), while the student distribution normalizes over
//! `R_i ∪ R⁻`. Both use max-subtraction for stability.

use serde::{Deserialize, Serialize};

use crate::error::{G2rError, Result};

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `−log softmax(scores)[gold]`.
pub fn ce_loss(scores: &[f64], gold: usize) -> f64 {
    log_sum_exp(scores) - scores[gold]
}

/// Loss and gradient with respect to `scores`.
pub(crate) fn ce_with_grad(scores: &[f64], gold: usize) -> (f64, Vec<f64>) {
    let mut g = softmax(scores);
    g[gold] -= 1.0;
    (ce_loss(scores, gold), g)
}

/// Teacher distribution `softmax(teacher / T)` over `R_i`.
pub fn teacher_distribution(teacher: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = teacher.iter().map(|s| s / temperature).collect();
    softmax(&z)
}

/// Student distribution `softmax(student / T)` over `R_i ∪ R⁻`.
pub fn student_distribution(student: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = student.iter().map(|s| s / temperature).collect();
    softmax(&z)
}

/// Distillation loss for one context.
///
/// `student` holds scores for `R_i` followed by the negatives; `teacher`
/// holds scores for `R_i` only, in the same order.
pub fn kd_loss(student: &[f64], teacher: &[f64], temperature: f64) -> Result<f64> {
    Ok(kd_with_grad(student, teacher, temperature)?.0)
}

pub(crate) fn kd_with_grad(student: &[f64], teacher: &[f64], temperature: f64) -> Result<(f64, Vec<f64>)> {
    if teacher.is_empty() {
        return Err(G2rError::Empty("distillation needs at least one positive".into()));
    }
    if teacher.len() > student.len() {
        return Err(G2rError::ShapeMismatch {
            expected: format!("at least {} student scores", teacher.len()),
            actual: student.len().to_string(),
        });
    }
    if !(temperature > 0.0) {
        return Err(G2rError::invalid("temperature must be positive"));
    }
    if teacher.iter().any(|s| !s.is_finite()) {
        return Err(G2rError::invalid("teacher scores must be finite"));
    }
    let pg = teacher_distribution(teacher, temperature);
    let z: Vec<f64> = student.iter().map(|s| s / temperature).collect();
    let lse = log_sum_exp(&z);
    let mut loss = 0.0;
    for (p, zi) in pg.iter().zip(&z) {
        if *p > 0.0 {
            loss -= p * (zi - lse);
        }
    }
    // d/dz_j = P_R(j) − P_G(j); chain through z = s / T.
    let mut grad = softmax(&z);
    for (g, p) in grad.iter_mut().zip(&pg) {
        *g -= p;
    }
    grad.iter_mut().for_each(|g| *g /= temperature);
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
}

/// `α·ce + (1 − α)·kd`.
pub fn combined_loss(ce: f64, kd: f64, alpha: f64) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(G2rError::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(LossBreakdown {
        ce,
        kd,
        total: alpha * ce + (1.0 - alpha) * kd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_examples() {
        assert!((ce_loss(&[0.3, 0.3], 0) - 2f64.ln()).abs() < 1e-15);
        let expected = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
        assert!((ce_loss(&[10.0, 0.0, 0.0], 0) - expected).abs() < 1e-15);
        assert!((expected - 9.08e-5).abs() < 1e-7);
        let s = [1.5, -0.2, 0.7, 3.0];
        let shifted: Vec<f64> = s.iter().map(|x| x + 123.0).collect();
        assert!((ce_loss(&s, 2) - ce_loss(&shifted, 2)).abs() < 1e-12);
    }

    #[test]
    fn kd_examples() {
        // Equal teacher scores on two positives; student [1, 1] plus one negative at 0.
        let got = kd_loss(&[1.0, 1.0, 0.0], &[0.4, 0.4], 1.0).unwrap();
        let e = 1f64.exp();
        let expected = -(0.5 * (e / (2.0 * e + 1.0)).ln()) * 2.0;
        assert!((got - expected).abs() < 1e-15);

        // One-hot teacher reduces to CE over the same candidates.
        let student = [0.2, -1.0, 0.5, 0.1, -0.3];
        let kd = kd_loss(&student, &[0.0, -1e9, -1e9], 1.0).unwrap();
        assert!((kd - ce_loss(&student, 0)).abs() < 1e-12);

        // Uniform teacher: loss does not depend on T through the teacher side.
        let a = teacher_distribution(&[-2.0, -2.0, -2.0], 0.5);
        let b = teacher_distribution(&[-2.0, -2.0, -2.0], 7.0);
        assert_eq!(a, b);

        assert!(kd_loss(&[1.0], &[], 1.0).is_err());
        assert!(kd_loss(&[1.0, 2.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combined_loss(1.0, 2.0, 1.0).unwrap().total, 1.0);
        assert_eq!(combined_loss(1.0, 2.0, 0.0).unwrap().total, 2.0);
        assert!((combined_loss(1.0, 2.0, 0.9).unwrap().total - 1.1).abs() < 1e-15);
        assert!(combined_loss(1.0, 2.0, 1.5).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = vec![0.3, -0.4, 1.2, 0.0, 0.9];
        let t = [-1.0, -0.5, -2.0];
        let (_, g) = kd_with_grad(&s, &t, 0.7).unwrap();
        let (_, gc) = ce_with_grad(&s, 1);
        let eps = 1e-6;
        for j in 0..s.len() {
            let mut hi = s.clone();
            let mut lo = s.clone();
            hi[j] += eps;
            lo[j] -= eps;
            let num = (kd_loss(&hi, &t, 0.7).unwrap() - kd_loss(&lo, &t, 0.7).unwrap()) / (2.0 * eps);
            assert!((num - g[j]).abs() < 1e-8);
            let num = (ce_loss(&hi, 1) - ce_loss(&lo, 1)) / (2.0 * eps);
            assert!((num - gc[j]).abs() < 1e-8);
        }
    }
}
