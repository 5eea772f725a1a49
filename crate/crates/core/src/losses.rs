//! Training objectives with analytic gradients.
//!
//! Score losses take per-candidate scores for one query and return the value
//! with its gradient with respect to the (student) scores. Embedding losses
//! return gradients for the student embeddings and the projection.

use serde::{Deserialize, Serialize};

use crate::encoders::{Affine, Projection};
use crate::error::{Error, Result};
use crate::numerics::{check_dim, log_sum_exp, sigmoid, softplus, stable_softmax, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Gradient with respect to the student (or only) score list.
    pub grad: Vec<f64>,
}

/// One-hot (label) loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OneHotLoss {
    #[default]
    SoftmaxCe,
    BinaryCe,
}

/// Score-distillation loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreDistillLoss {
    #[default]
    SoftmaxCe,
    BinaryCe,
    Mse,
}

impl OneHotLoss {
    pub fn eval(self, scores: &[f64], labels: &[u8]) -> Result<LossOutput> {
        match self {
            OneHotLoss::SoftmaxCe => softmax_ce_onehot(scores, labels),
            OneHotLoss::BinaryCe => binary_ce_onehot(scores, labels),
        }
    }
}

impl ScoreDistillLoss {
    pub fn eval(self, student: &[f64], teacher: &[f64], temperature: f64) -> Result<LossOutput> {
        match self {
            ScoreDistillLoss::SoftmaxCe => softmax_ce_distill(student, teacher, temperature),
            ScoreDistillLoss::BinaryCe => binary_ce_distill(student, teacher),
            ScoreDistillLoss::Mse => mse_distill(student, teacher),
        }
    }
}

fn check_labels(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyVector);
    }
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok(())
}

fn check_pair(student: &[f64], teacher: &[f64]) -> Result<()> {
    if student.len() != teacher.len() {
        return Err(Error::LengthMismatch {
            left: student.len(),
            right: teacher.len(),
        });
    }
    if student.is_empty() {
        return Err(Error::EmptyVector);
    }
    Ok(())
}

/// `−Σ_j y_j log softmax(s)_j`.
pub fn softmax_ce_onehot(scores: &[f64], labels: &[u8]) -> Result<LossOutput> {
    check_labels(scores, labels)?;
    let positives: f64 = labels.iter().map(|&y| y as f64).sum();
    if positives == 0.0 {
        return Err(Error::NoPositive);
    }
    let lse = log_sum_exp(scores)?;
    let p = stable_softmax(scores)?;
    let value = scores
        .iter()
        .zip(labels)
        .map(|(s, &y)| y as f64 * (lse - s))
        .sum();
    let grad = p
        .iter()
        .zip(labels)
        .map(|(pj, &y)| positives * pj - y as f64)
        .collect();
    Ok(LossOutput { value, grad })
}

/// `−Σ_j [y_j log σ(s_j) + (1−y_j) log(1−σ(s_j))]`, using
/// `log σ(s) = −γ(−s)` and `log(1−σ(s)) = −γ(s)`.
pub fn binary_ce_onehot(scores: &[f64], labels: &[u8]) -> Result<LossOutput> {
    check_labels(scores, labels)?;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, &y) in scores.iter().zip(labels) {
        let y = y as f64;
        value += y * softplus(-s) + (1.0 - y) * softplus(s);
        grad.push(sigmoid(s) - y);
    }
    Ok(LossOutput { value, grad })
}

/// Cross-entropy of `softmax(s_student/T)` against `softmax(s_teacher/T)`.
pub fn softmax_ce_distill(student: &[f64], teacher: &[f64], temperature: f64) -> Result<LossOutput> {
    check_pair(student, teacher)?;
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let ss: Vec<f64> = student.iter().map(|s| s / temperature).collect();
    let ts: Vec<f64> = teacher.iter().map(|s| s / temperature).collect();
    let target = stable_softmax(&ts)?;
    let pred = stable_softmax(&ss)?;
    let lse = log_sum_exp(&ss)?;
    let value = target.iter().zip(&ss).map(|(t, s)| t * (lse - s)).sum();
    let grad = pred
        .iter()
        .zip(&target)
        .map(|(p, t)| (p - t) / temperature)
        .collect();
    Ok(LossOutput { value, grad })
}

/// `−Σ_j [σ(t_j) log σ(s_j) + (1−σ(t_j)) log(1−σ(s_j))]`.
pub fn binary_ce_distill(student: &[f64], teacher: &[f64]) -> Result<LossOutput> {
    check_pair(student, teacher)?;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(student.len());
    for (&s, &t) in student.iter().zip(teacher) {
        let pt = sigmoid(t);
        value += pt * softplus(-s) + (1.0 - pt) * softplus(s);
        grad.push(sigmoid(s) - pt);
    }
    Ok(LossOutput { value, grad })
}

/// `Σ_j (t_j − s_j)²`.
pub fn mse_distill(student: &[f64], teacher: &[f64]) -> Result<LossOutput> {
    check_pair(student, teacher)?;
    let value = student.iter().zip(teacher).map(|(s, t)| (t - s) * (t - s)).sum();
    let grad = student.iter().zip(teacher).map(|(s, t)| 2.0 * (s - t)).collect();
    Ok(LossOutput { value, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedMatchOutput {
    pub value: f64,
    /// One gradient per student embedding.
    pub grad_student: Vec<Vec<f64>>,
    pub grad_projection: Affine,
}

/// `(1/n) Σ_i ‖t_i − proj(s_i)‖₂`, or its squared-norm variant.
///
/// Where a residual is exactly zero the (sub)gradient is taken as zero.
pub fn embed_match_loss(
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    projection: &Projection,
    squared: bool,
) -> Result<EmbedMatchOutput> {
    if teacher.len() != student.len() {
        return Err(Error::LengthMismatch {
            left: teacher.len(),
            right: student.len(),
        });
    }
    let mut grad_projection = projection.zeros_like();
    let n = teacher.len();
    if n == 0 {
        return Ok(EmbedMatchOutput {
            value: 0.0,
            grad_student: Vec::new(),
            grad_projection,
        });
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad_student = Vec::with_capacity(n);
    for (t, s) in teacher.iter().zip(student) {
        check_dim(projection.in_dim(), s.len())?;
        check_dim(projection.out_dim(), t.len())?;
        let p = projection.apply(s)?;
        let r: Vec<f64> = p.iter().zip(t).map(|(a, b)| a - b).collect();
        let sq: f64 = r.iter().map(|x| x * x).sum();
        let dr: Vec<f64> = if squared {
            value += sq;
            r.iter().map(|x| 2.0 * x * inv_n).collect()
        } else {
            let norm = sq.sqrt();
            value += norm;
            if norm > 0.0 {
                r.iter().map(|x| x / norm * inv_n).collect()
            } else {
                vec![0.0; r.len()]
            }
        };
        grad_student.push(projection.backward(s, &dr, &mut grad_projection));
    }
    Ok(EmbedMatchOutput {
        value: value * inv_n,
        grad_student,
        grad_projection,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionOutput {
    pub value: f64,
    pub grad_tokens: Mat,
    pub grad_decoder: Affine,
}

/// Mean over positions of the softmax cross-entropy between
/// `decoder(token_embedding)` and the original token id at that position.
pub fn reconstruction_loss(
    tokens: &Mat,
    original: &[u32],
    decoder: &Affine,
) -> Result<ReconstructionOutput> {
    if tokens.rows() != original.len() {
        return Err(Error::LengthMismatch {
            left: tokens.rows(),
            right: original.len(),
        });
    }
    if original.is_empty() {
        return Err(Error::EmptyVector);
    }
    check_dim(decoder.in_dim(), tokens.cols())?;
    let inv_n = 1.0 / original.len() as f64;
    let mut grad_decoder = decoder.zeros_like();
    let mut grad_tokens = Mat::zeros(tokens.rows(), tokens.cols());
    let mut value = 0.0;
    for (i, &id) in original.iter().enumerate() {
        let id = id as usize;
        if id >= decoder.out_dim() {
            return Err(Error::OutOfVocabulary(id as u32));
        }
        let x = tokens.row(i);
        let logits = decoder.apply(x)?;
        value += log_sum_exp(&logits)? - logits[id];
        let mut dl = stable_softmax(&logits)?;
        dl[id] -= 1.0;
        dl.iter_mut().for_each(|g| *g *= inv_n);
        let dx = decoder.backward(x, &dl, &mut grad_decoder);
        grad_tokens.row_mut(i).copy_from_slice(&dx);
    }
    Ok(ReconstructionOutput {
        value: value * inv_n,
        grad_tokens,
        grad_decoder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Rng};
    use std::f64::consts::LN_2;

    #[test]
    fn softmax_onehot_cases() {
        let out = softmax_ce_onehot(&[0.0, 0.0], &[1, 0]).unwrap();
        assert!((out.value - LN_2).abs() < 1e-15);
        assert!(matches!(
            softmax_ce_onehot(&[0.0, 0.0], &[0, 0]),
            Err(Error::NoPositive)
        ));
        let a = softmax_ce_onehot(&[1.0, 0.5, -0.2], &[1, 0, 0]).unwrap().value;
        let b = softmax_ce_onehot(&[1.5, 0.5, -0.2], &[1, 0, 0]).unwrap().value;
        assert!(b < a);
    }

    #[test]
    fn binary_onehot_cases() {
        assert!((binary_ce_onehot(&[0.0], &[1]).unwrap().value - LN_2).abs() < 1e-15);
        assert!((binary_ce_onehot(&[0.0, 0.0], &[1, 0]).unwrap().value - 2.0 * LN_2).abs() < 1e-15);
        let v = binary_ce_onehot(&[-500.0], &[0]).unwrap().value;
        assert!(v.is_finite() && v >= 0.0 && v < 1e-200);
    }

    #[test]
    fn softmax_distill_cases() {
        let t = [0.3, -1.0, 2.0];
        let self_match = softmax_ce_distill(&t, &t, 1.0).unwrap().value;
        let p = stable_softmax(&t).unwrap();
        let entropy: f64 = -p.iter().map(|x| x * x.ln()).sum::<f64>();
        assert!((self_match - entropy).abs() < 1e-12);

        let student = [0.4, -0.3];
        let d = softmax_ce_distill(&student, &[10.0, -10.0], 1.0).unwrap().value;
        let o = softmax_ce_onehot(&student, &[1, 0]).unwrap().value;
        assert!((d - o).abs() < 1e-3);
        assert!(softmax_ce_distill(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn binary_distill_cases() {
        assert!((binary_ce_distill(&[0.0], &[0.0]).unwrap().value - LN_2).abs() < 1e-15);
        let s = [0.7, -1.3];
        let t = [2.0, 0.1];
        let out = binary_ce_distill(&s, &t).unwrap();
        for j in 0..2 {
            assert!((out.grad[j] - (sigmoid(s[j]) - sigmoid(t[j]))).abs() < 1e-15);
        }
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse_distill(&[1.0, 2.0], &[1.0, 2.0]).unwrap().value, 0.0);
        assert_eq!(mse_distill(&[0.0, 0.0], &[1.0, 2.0]).unwrap().value, 5.0);
    }

    #[test]
    fn embed_match_cases() {
        let id = Affine::projection(2, 2, &mut Rng::new(0));
        let e = vec![vec![0.3, 0.4], vec![-1.0, 2.0]];
        assert_eq!(embed_match_loss(&e, &e, &id, false).unwrap().value, 0.0);
        let zero = Affine::zeros(2, 2);
        let out = embed_match_loss(&[vec![1.0, 0.0]], &[vec![5.0, 5.0]], &zero, false).unwrap();
        assert_eq!(out.value, 1.0);
    }

    #[test]
    fn reconstruction_cases() {
        // Decoder reading a one-hot token embedding and emitting +20 on the
        // matching logit.
        let v = 6;
        let mut dec = Affine::zeros(v, v);
        for i in 0..v {
            dec.w.set(i, i, 20.0);
        }
        let ids = [1u32, 3, 5, 2];
        let mut tokens = Mat::zeros(ids.len(), v);
        for (i, &id) in ids.iter().enumerate() {
            tokens.set(i, id as usize, 1.0);
        }
        assert!(reconstruction_loss(&tokens, &ids, &dec).unwrap().value < 1e-6);
        let zero = Affine::zeros(v, v);
        let out = reconstruction_loss(&tokens, &ids, &zero).unwrap();
        assert!((out.value - (v as f64).ln()).abs() < 1e-12);
        assert!(reconstruction_loss(&tokens, &ids[..2], &dec).is_err());
    }

    #[test]
    fn gradients_pass_grad_check() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let s: Vec<f64> = (0..4).map(|_| 2.0 * rng.normal()).collect();
            let t: Vec<f64> = (0..4).map(|_| 2.0 * rng.normal()).collect();
            let y = [0u8, 1, 0, 1];
            let cases: Vec<Box<dyn Fn(&[f64]) -> (f64, Vec<f64>)>> = vec![
                Box::new(|p| {
                    let o = softmax_ce_onehot(p, &y).unwrap();
                    (o.value, o.grad)
                }),
                Box::new(|p| {
                    let o = binary_ce_onehot(p, &y).unwrap();
                    (o.value, o.grad)
                }),
                Box::new(|p| {
                    let o = softmax_ce_distill(p, &t, 2.0).unwrap();
                    (o.value, o.grad)
                }),
                Box::new(|p| {
                    let o = binary_ce_distill(p, &t).unwrap();
                    (o.value, o.grad)
                }),
                Box::new(|p| {
                    let o = mse_distill(p, &t).unwrap();
                    (o.value, o.grad)
                }),
            ];
            for f in cases {
                assert!(grad_check(f, &s, 1e-5).unwrap() < 1e-4);
            }
        }
    }
}
