//! Teacher training, student distillation and the optimizer.

mod optim;
mod presets;
mod student;
mod teacher;
mod tower;

pub use optim::{lr_at, AdamW, Batcher, ParamGroup, TrainConfig};
pub use presets::{Augmentation, Preset};
pub use student::{
    distill_step, index_hash, student_objective, train_student, AlignedStudent, Monitor, Student,
    StudentConfig, StudentGrads, StudentMode, StudentRetriever, TeacherTargets,
};
pub use teacher::{train_teacher, Teacher, TeacherConfig, TeacherKind};

use serde::{Deserialize, Serialize};

use crate::datasim::{Tokenized, TrainingExample};
use crate::error::{Error, Result};
use crate::losses::{OneHotLoss, ScoreDistillLoss};

/// Tokenized corpus plus the training examples drawn from it.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub tokens: &'a Tokenized,
    pub examples: &'a [TrainingExample],
}

impl<'a> TrainData<'a> {
    pub fn query(&self, id: u32) -> Result<&'a [u32]> {
        self.tokens
            .queries
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("unknown query id {id}")))
    }

    pub fn doc(&self, id: u32) -> Result<&'a [u32]> {
        self.tokens
            .docs
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownDocument(id))
    }

    fn validate(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::invalid("no training examples"));
        }
        for ex in self.examples {
            self.query(ex.query_id)?;
            for d in &ex.doc_ids {
                self.doc(*d)?;
            }
            if ex.doc_ids.len() != ex.labels.len() {
                return Err(Error::LengthMismatch {
                    left: ex.doc_ids.len(),
                    right: ex.labels.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub onehot: f64,
    pub onehot_loss: OneHotLoss,
    pub score_distill: f64,
    pub distill_loss: ScoreDistillLoss,
    pub embed_q: f64,
    pub embed_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            onehot: 1.0,
            onehot_loss: OneHotLoss::SoftmaxCe,
            score_distill: 1.0,
            distill_loss: ScoreDistillLoss::SoftmaxCe,
            embed_q: 0.0,
            embed_d: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.onehot,
            self.score_distill,
            self.embed_q,
            self.embed_d,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Loss components of one step (or one full-data evaluation). `total` is
/// the weighted sum that was optimized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub onehot: f64,
    pub score_distill: f64,
    pub embed_q: f64,
    pub embed_d: f64,
    pub embed_q_aug: f64,
    pub recon: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub losses: StepLosses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
    pub evals: Vec<EvalRecord>,
    /// Full-data objective before the first and after the last step.
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

pub const HISTORY_COLUMNS: [&str; 9] = [
    "step",
    "lr",
    "onehot",
    "score_distill",
    "embed_q",
    "embed_d",
    "embed_q_aug",
    "recon",
    "total",
];

impl TrainHistory {
    pub fn push(&mut self, step: usize, lr: f64, losses: StepLosses) -> Result<()> {
        if self.rows.last().is_some_and(|r| r.step >= step) {
            return Err(Error::invalid("history steps must increase"));
        }
        self.rows.push(HistoryRow { step, lr, losses });
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = HISTORY_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let l = &r.losses;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.step, r.lr, l.onehot, l.score_distill, l.embed_q, l.embed_d, l.embed_q_aug, l.recon, l.total
            ));
        }
        out
    }
}

pub(crate) fn ensure_finite(losses: &StepLosses, step: usize) -> Result<()> {
    let v = [
        losses.onehot,
        losses.score_distill,
        losses.embed_q,
        losses.embed_d,
        losses.embed_q_aug,
        losses.recon,
        losses.total,
    ];
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step })
    }
}
