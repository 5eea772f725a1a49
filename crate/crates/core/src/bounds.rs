//! Finite-sample teacher/student bound terms.
//!
//! Everything here works on an [`EmbeddingSample`]: per example, the
//! student and teacher query and document embeddings plus a binary label.
//! Scores are inner products of exactly these embeddings, so a projected
//! student is checked in the teacher space it is compared against.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasim::TrainingExample;
use crate::distill::TrainData;
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::numerics::{distance, dot, norm, sigmoid, softplus};

/// Slack absorbing floating-point accumulation in inequality verdicts.
pub const SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSample {
    pub student_q: Vec<Vec<f64>>,
    pub student_d: Vec<Vec<f64>>,
    pub teacher_q: Vec<Vec<f64>>,
    pub teacher_d: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    /// True when the student embeddings went through a projection.
    pub projected_student: bool,
}

impl EmbeddingSample {
    pub fn new(
        student_q: Vec<Vec<f64>>,
        student_d: Vec<Vec<f64>>,
        teacher_q: Vec<Vec<f64>>,
        teacher_d: Vec<Vec<f64>>,
        labels: Vec<f64>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::EmptyVector);
        }
        for len in [student_q.len(), student_d.len(), teacher_q.len(), teacher_d.len()] {
            if len != n {
                return Err(Error::LengthMismatch { left: n, right: len });
            }
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid("labels must be binary"));
        }
        let k = teacher_q[0].len();
        for e in student_q.iter().chain(&student_d).chain(&teacher_q).chain(&teacher_d) {
            if e.len() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    got: e.len(),
                });
            }
        }
        Ok(Self {
            student_q,
            student_d,
            teacher_q,
            teacher_d,
            labels,
            projected_student: false,
        })
    }

    /// Embeds single-document examples with both models.
    pub fn from_encoders(
        teacher: &(dyn DualEncoder + Sync),
        student: &(dyn DualEncoder + Sync),
        data: TrainData<'_>,
        examples: &[TrainingExample],
    ) -> Result<Self> {
        if examples.iter().any(|e| e.doc_ids.len() != 1 || e.labels.len() != 1) {
            return Err(Error::LemmaRequiresSingleDoc);
        }
        let rows = examples
            .par_iter()
            .map(|e| {
                let q = data.query(e.query_id)?;
                let d_id = e.doc_ids[0];
                let d = data.doc(d_id)?;
                Ok((
                    student.embed_query(q)?,
                    student.embed_doc(d_id, d)?,
                    teacher.embed_query(q)?,
                    teacher.embed_doc(d_id, d)?,
                    f64::from(e.labels[0]),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cols = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (a, b, c, d, y) in rows {
            cols.0.push(a);
            cols.1.push(b);
            cols.2.push(c);
            cols.3.push(d);
            cols.4.push(y);
        }
        Self::new(cols.0, cols.1, cols.2, cols.3, cols.4)
    }

    pub fn with_projected_student(mut self, projected: bool) -> Self {
        self.projected_student = projected;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn student_score(&self, i: usize) -> f64 {
        dot(&self.student_q[i], &self.student_d[i]).unwrap_or(f64::NAN)
    }

    fn teacher_score(&self, i: usize) -> f64 {
        dot(&self.teacher_q[i], &self.teacher_d[i]).unwrap_or(f64::NAN)
    }
}

/// Binary cross-entropy against a label, `(1 - y) s + softplus(-s)`.
pub fn bce_onehot(s: f64, y: f64) -> f64 {
    (1.0 - y) * s + softplus(-s)
}

/// Binary cross-entropy against a teacher score,
/// `(1 - σ(t)) s + softplus(-s)`.
pub fn bce_distill(s: f64, t: f64) -> f64 {
    (1.0 - sigmoid(t)) * s + softplus(-s)
}

/// Largest embedding norm over the sample and all four encoders.
pub fn compute_k(sample: &EmbeddingSample) -> f64 {
    sample
        .student_q
        .iter()
        .chain(&sample.student_d)
        .chain(&sample.teacher_q)
        .chain(&sample.teacher_d)
        .map(|e| norm(e))
        .fold(0.0, f64::max)
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Mean distance between paired embeddings.
pub fn r_emb(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::LengthMismatch {
            left: teacher.len(),
            right: student.len(),
        });
    }
    if teacher.is_empty() {
        return Err(Error::EmptyVector);
    }
    let mut total = 0.0;
    for (t, s) in teacher.iter().zip(student) {
        if t.len() != s.len() {
            return Err(Error::DimensionMismatch {
                expected: t.len(),
                got: s.len(),
            });
        }
        total += distance(t, s);
    }
    Ok(total / teacher.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    /// Student distillation risk versus teacher label risk.
    DistillVsTeacher,
    /// Student label risk versus student distillation risk.
    StudentVsDistill,
    /// Generalization-gap decomposition on a train and a held-out sample.
    GapDecomposition,
}

/// Terms of one bound evaluation. `verdict` is `lhs <= rhs + SLACK`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kind: BoundKind,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub r_emb_q: f64,
    pub r_emb_d: f64,
    /// `2K · r_emb_q`.
    pub term_emb_q: f64,
    /// `2K · r_emb_d`.
    pub term_emb_d: f64,
    /// `K² · mean |σ(t) - y|` on the sample.
    pub term_label: f64,
    pub delta_teacher_estimate: Option<f64>,
    /// `K² · mean |σ(t) - y|` on the held-out sample, standing in for the
    /// expectation.
    pub term_label_heldout: Option<f64>,
    /// The uniform deviation over the student class is not computable; this
    /// is the realized student's train/held-out distillation-risk gap, a
    /// lower bound on it.
    pub uniform_deviation_lower_bound: Option<f64>,
    pub projected_student: bool,
    pub verdict: bool,
    pub notes: Vec<String>,
}

struct Terms {
    k: f64,
    r_emb_q: f64,
    r_emb_d: f64,
    label_err: f64,
}

fn terms(s: &EmbeddingSample) -> Result<Terms> {
    Ok(Terms {
        k: compute_k(s),
        r_emb_q: r_emb(&s.teacher_q, &s.student_q)?,
        r_emb_d: r_emb(&s.teacher_d, &s.student_d)?,
        label_err: mean(
            (0..s.len()).map(|i| (sigmoid(s.teacher_score(i)) - s.labels[i]).abs()),
            s.len(),
        ),
    })
}

/// Mean student distillation risk, mean teacher label risk, mean student
/// label risk.
fn risks(s: &EmbeddingSample) -> (f64, f64, f64) {
    let n = s.len();
    let (mut distill, mut teacher, mut student) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (ss, ts, y) = (s.student_score(i), s.teacher_score(i), s.labels[i]);
        distill += bce_distill(ss, ts);
        teacher += bce_onehot(ts, y);
        student += bce_onehot(ss, y);
    }
    (distill / n as f64, teacher / n as f64, student / n as f64)
}

fn base_notes(s: &EmbeddingSample) -> Vec<String> {
    if s.projected_student {
        vec!["student embeddings are projected into the teacher space".to_string()]
    } else {
        Vec::new()
    }
}

/// Student distillation risk minus teacher label risk, bounded by the two
/// embedding-mismatch terms plus the teacher label-error term.
pub fn lemma4_check(sample: &EmbeddingSample) -> Result<BoundReport> {
    let t = terms(sample)?;
    let (distill, teacher, _) = risks(sample);
    let lhs = distill - teacher;
    let term_emb_q = 2.0 * t.k * t.r_emb_q;
    let term_emb_d = 2.0 * t.k * t.r_emb_d;
    let term_label = t.k * t.k * t.label_err;
    let rhs = term_emb_q + term_emb_d + term_label;
    Ok(BoundReport {
        kind: BoundKind::DistillVsTeacher,
        n: sample.len(),
        k: t.k,
        lhs,
        rhs,
        r_emb_q: t.r_emb_q,
        r_emb_d: t.r_emb_d,
        term_emb_q,
        term_emb_d,
        term_label,
        delta_teacher_estimate: None,
        term_label_heldout: None,
        uniform_deviation_lower_bound: None,
        projected_student: sample.projected_student,
        verdict: lhs <= rhs + SLACK,
        notes: base_notes(sample),
    })
}

/// Student label risk minus student distillation risk, bounded by the
/// teacher label-error term.
pub fn lemma5_check(sample: &EmbeddingSample) -> Result<BoundReport> {
    let t = terms(sample)?;
    let (distill, _, student) = risks(sample);
    let lhs = student - distill;
    let term_label = t.k * t.k * t.label_err;
    Ok(BoundReport {
        kind: BoundKind::StudentVsDistill,
        n: sample.len(),
        k: t.k,
        lhs,
        rhs: term_label,
        r_emb_q: t.r_emb_q,
        r_emb_d: t.r_emb_d,
        term_emb_q: 2.0 * t.k * t.r_emb_q,
        term_emb_d: 2.0 * t.k * t.r_emb_d,
        term_label,
        delta_teacher_estimate: None,
        term_label_heldout: None,
        uniform_deviation_lower_bound: None,
        projected_student: sample.projected_student,
        verdict: lhs <= term_label + SLACK,
        notes: base_notes(sample),
    })
}

/// Every computable term of the student/teacher risk-gap decomposition.
/// Population quantities are replaced by held-out estimates, so the verdict
/// is indicative only.
pub fn theorem1_terms(train: &EmbeddingSample, heldout: &EmbeddingSample) -> Result<BoundReport> {
    let t = terms(train)?;
    let h = terms(heldout)?;
    let k = t.k.max(h.k);
    let (distill_tr, teacher_tr, _) = risks(train);
    let (distill_ho, teacher_ho, student_ho) = risks(heldout);
    let delta = (teacher_tr - teacher_ho).abs();
    let deviation = (distill_tr - distill_ho).abs();
    let term_emb_q = 2.0 * k * t.r_emb_q;
    let term_emb_d = 2.0 * k * t.r_emb_d;
    let term_label = k * k * t.label_err;
    let term_label_heldout = k * k * h.label_err;
    let lhs = student_ho - teacher_ho;
    let rhs = deviation + term_emb_q + term_emb_d + delta + term_label + term_label_heldout;
    let mut notes = base_notes(train);
    notes.push("population risks estimated on the held-out sample".to_string());
    notes.push("uniform deviation over the student class is not computable".to_string());
    Ok(BoundReport {
        kind: BoundKind::GapDecomposition,
        n: train.len(),
        k,
        lhs,
        rhs,
        r_emb_q: t.r_emb_q,
        r_emb_d: t.r_emb_d,
        term_emb_q,
        term_emb_d,
        term_label,
        delta_teacher_estimate: Some(delta),
        term_label_heldout: Some(term_label_heldout),
        uniform_deviation_lower_bound: Some(deviation),
        projected_student: train.projected_student,
        verdict: lhs <= rhs + SLACK,
        notes,
    })
}

/// `‖t_i - t_j‖ - ‖s_i - s_j‖` for every unordered pair `i < j`, in
/// row-major pair order.
pub fn pairwise_discrepancy(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> Result<Vec<f64>> {
    if teacher.len() != student.len() {
        return Err(Error::LengthMismatch {
            left: teacher.len(),
            right: student.len(),
        });
    }
    if teacher.len() < 2 {
        return Err(Error::invalid("pairwise discrepancy needs at least two queries"));
    }
    let n = teacher.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| distance(&teacher[i], &teacher[j]) - distance(&student[i], &student[j]))
                .collect()
        })
        .collect();
    Ok(rows.concat())
}

pub fn mean_abs(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64
}

/// Single-column CSV with a header line.
pub fn discrepancy_csv(values: &[f64]) -> String {
    let mut out = String::from("discrepancy\n");
    for v in values {
        out.push_str(&format!("{v}\n"));
    }
    out
}
