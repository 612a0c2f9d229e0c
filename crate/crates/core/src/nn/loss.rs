//! Softmax cross-entropy and temperature-scaled KL distillation terms.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let top = super::model::argmax(logits);
    let max = logits[top];
    // ln(1 + s) keeps precision when the other classes are negligible
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &z)| (z - max).exp())
        .sum();
    let log_norm = rest.ln_1p();
    logits.iter().map(|&z| (z - max) - log_norm).collect()
}

/// Mean negative log-likelihood over the batch and its gradient
/// `(softmax − one_hot) / B` with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (rows, classes) = logits.dims2()?;
    if labels.len() != rows {
        return Err(Error::shape(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    if rows == 0 {
        return Err(Error::Empty("batch"));
    }
    let n = rows as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; rows * classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let row = logits.row(r);
        let logp = log_softmax(row);
        loss -= logp[y];
        let g = &mut grad[r * classes..(r + 1) * classes];
        for (gi, lp) in g.iter_mut().zip(&logp) {
            *gi = lp.exp() / n;
        }
        g[y] -= 1.0 / n;
    }
    Ok((loss / n, Tensor::from_parts(vec![rows, classes], grad)))
}

/// Per-row cross-entropy, without reduction.
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (rows, classes) = logits.dims2()?;
    if labels.len() != rows {
        return Err(Error::shape(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            Ok(-log_softmax(logits.row(r))[y])
        })
        .collect()
}

/// Which argument order the distillation KL uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(student ‖ teacher).
    #[default]
    StudentTeacher,
    /// KL(teacher ‖ student), the usual Hinton form.
    TeacherStudent,
}

/// KL term between the tempered student softmax and a fixed teacher
/// distribution per row. Returns the batch-mean divergence and its gradient
/// with respect to the student logits (already divided by the batch size).
pub fn distillation_kl(
    student_logits: &Tensor,
    teacher_probs: &[Vec<f64>],
    temperature: f64,
    direction: KlDirection,
) -> Result<(f64, Tensor)> {
    let (rows, classes) = student_logits.dims2()?;
    if teacher_probs.len() != rows {
        return Err(Error::shape(format!(
            "{} teacher rows for {rows} student rows",
            teacher_probs.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let n = rows as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; rows * classes];
    for r in 0..rows {
        let p = &teacher_probs[r];
        if p.len() != classes {
            return Err(Error::shape(format!(
                "teacher has {} classes, student {classes}",
                p.len()
            )));
        }
        let q = softmax(student_logits.row(r), temperature);
        let g = &mut grad[r * classes..(r + 1) * classes];
        match direction {
            KlDirection::StudentTeacher => {
                let mut kl = 0.0;
                let mut ratios = vec![0.0; classes];
                for j in 0..classes {
                    if q[j] > 0.0 {
                        ratios[j] = (q[j] / p[j].max(f64::MIN_POSITIVE)).ln();
                        kl += q[j] * ratios[j];
                    }
                }
                for j in 0..classes {
                    g[j] = q[j] * (ratios[j] - kl) / (temperature * n);
                }
                total += kl;
            }
            KlDirection::TeacherStudent => {
                let mut kl = 0.0;
                for j in 0..classes {
                    if p[j] > 0.0 {
                        kl += p[j] * (p[j] / q[j].max(f64::MIN_POSITIVE)).ln();
                    }
                    g[j] = (q[j] - p[j]) / (temperature * n);
                }
                total += kl;
            }
        }
    }
    Ok((total / n, Tensor::from_parts(vec![rows, classes], grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::new(vec![2, 4], vec![0.3; 8]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_class_hand_value() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let p = softmax(logits.row(0), 1.0);
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        let (loss, grad) = cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((grad.data()[0] + 0.75).abs() < 1e-12);
        assert!((grad.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn loss_falls_monotonically_as_true_logit_grows() {
        let mut prev = f64::INFINITY;
        for k in 0..40 {
            let z = k as f64;
            let logits = Tensor::new(vec![1, 3], vec![z, 0.0, 0.0]).unwrap();
            let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-15);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let logits = Tensor::zeros(vec![1, 3]);
        assert!(matches!(
            cross_entropy(&logits, &[3]),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn kl_is_zero_when_student_matches_teacher() {
        let logits = Tensor::new(vec![1, 3], vec![0.2, -1.0, 0.7]).unwrap();
        for dir in [KlDirection::StudentTeacher, KlDirection::TeacherStudent] {
            let teacher = vec![softmax(logits.row(0), 2.0)];
            let (kl, g) = distillation_kl(&logits, &teacher, 2.0, dir).unwrap();
            assert!(kl.abs() < 1e-15);
            assert!(g.data().iter().all(|v| v.abs() < 1e-15));
        }
    }

    fn numeric_kl_grad(dir: KlDirection) {
        let z = vec![0.4, -0.3, 1.1, 0.0];
        let teacher = vec![vec![0.1, 0.2, 0.3, 0.4]];
        let tau = 1.7;
        let t = Tensor::new(vec![1, 4], z.clone()).unwrap();
        let (_, g) = distillation_kl(&t, &teacher, tau, dir).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut zp = z.clone();
            zp[j] += h;
            let mut zm = z.clone();
            zm[j] -= h;
            let fp = distillation_kl(&Tensor::new(vec![1, 4], zp).unwrap(), &teacher, tau, dir)
                .unwrap()
                .0;
            let fm = distillation_kl(&Tensor::new(vec![1, 4], zm).unwrap(), &teacher, tau, dir)
                .unwrap()
                .0;
            let num = (fp - fm) / (2.0 * h);
            assert!(
                (num - g.data()[j]).abs() < 1e-8,
                "{dir:?} {j}: {num} vs {}",
                g.data()[j]
            );
        }
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        numeric_kl_grad(KlDirection::StudentTeacher);
        numeric_kl_grad(KlDirection::TeacherStudent);
    }
}
