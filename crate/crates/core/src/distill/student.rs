use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{lr_at, AdamW, Batcher, ParamGroup, TrainConfig};
use super::teacher::{batch_docs, candidates, push_encoder, Teacher};
use super::tower::{backward_all, encode_all};
use super::{ensure_finite, LossWeights, StepLosses, TrainData, TrainHistory};
use crate::encoders::checkpoint::{affine_shapes, encoder_shapes};
use crate::encoders::{
    single_input, to_checkpoint_bytes, Checkpointable, DualEncoder, Encoder, EncoderConfig,
    PoolingKind, Projection,
};
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::losses::embed_match_loss;
use crate::numerics::{axpy, check_dim, dot_unchecked, Rng};
use crate::queryaug::GeneratedQuery;
use crate::retrieval::{DocumentIndex, IndexMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentMode {
    /// Trainable encoders for queries and documents, shared unless
    /// `shared_towers` is off.
    Symmetric,
    /// Trainable query encoder scored against the frozen teacher index.
    AsymmetricInheritDocs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub mode: StudentMode,
    pub hidden: usize,
    pub out_dim: usize,
    pub blocks: usize,
    pub pooling: PoolingKind,
    /// Symmetric mode only: one encoder for both sides.
    pub shared_towers: bool,
    /// Train the projection to the teacher's embedding space. It is
    /// initialized to the identity when the widths agree.
    pub train_projection: bool,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            mode: StudentMode::Symmetric,
            hidden: 16,
            out_dim: 8,
            blocks: 1,
            pooling: PoolingKind::FirstToken,
            shared_towers: true,
            train_projection: true,
        }
    }
}

/// A distilled dual-encoder student. In asymmetric mode documents are
/// scored with the inherited index identified by `index_hash`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Student {
    pub mode: StudentMode,
    pub query: Encoder,
    /// Separate document tower of a symmetric student.
    #[serde(default)]
    pub doc: Option<Encoder>,
    pub projection: Projection,
    pub train_projection: bool,
    pub index_hash: Option<String>,
}

impl Checkpointable for Student {
    const KIND: &'static str = "student";

    fn pooling(&self) -> String {
        format!("{:?}", self.query.config.pooling)
    }

    fn shapes(&self) -> BTreeMap<String, [usize; 2]> {
        let mut m = BTreeMap::new();
        encoder_shapes("query", &self.query, &mut m);
        if let Some(d) = &self.doc {
            encoder_shapes("doc", d, &mut m);
        }
        affine_shapes("projection", &self.projection, &mut m);
        m
    }
}

/// Hash identifying an index file's contents.
pub fn index_hash(index: &DocumentIndex) -> Result<String> {
    Ok(sha256_hex(&index.to_bytes()?))
}

impl Student {
    pub fn init(
        cfg: &StudentConfig,
        vocab_size: usize,
        teacher_index: &DocumentIndex,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.pooling.is_dual() {
            return Err(Error::invalid("student towers need FirstToken or Mean pooling"));
        }
        let enc_cfg = EncoderConfig {
            vocab_size,
            hidden: cfg.hidden,
            out_dim: cfg.out_dim,
            blocks: cfg.blocks,
            pooling: cfg.pooling,
        };
        let query = Encoder::init(enc_cfg.clone(), rng);
        let projection = Projection::projection(cfg.out_dim, teacher_index.dim(), rng);
        let mut s = Self::from_parts(cfg.mode, query, projection, teacher_index)?;
        s.train_projection = cfg.train_projection;
        if cfg.mode == StudentMode::Symmetric && !cfg.shared_towers {
            s.doc = Some(Encoder::init(enc_cfg, rng));
        }
        Ok(s)
    }

    pub fn from_parts(
        mode: StudentMode,
        query: Encoder,
        projection: Projection,
        teacher_index: &DocumentIndex,
    ) -> Result<Self> {
        check_dim(query.out_dim(), projection.in_dim())?;
        check_dim(teacher_index.dim(), projection.out_dim())?;
        let index_hash = match mode {
            StudentMode::Symmetric => None,
            StudentMode::AsymmetricInheritDocs => Some(index_hash(teacher_index)?),
        };
        Ok(Self {
            mode,
            query,
            doc: None,
            projection,
            train_projection: true,
            index_hash,
        })
    }

    /// Raw query-tower embedding `f(q)`.
    pub fn embed(&self, content: &[u32]) -> Result<Vec<f64>> {
        self.query.encode(&single_input(content))
    }

    /// Encoder of the document side of a symmetric student.
    pub fn doc_encoder(&self) -> &Encoder {
        self.doc.as_ref().unwrap_or(&self.query)
    }

    /// Raw document-tower embedding of a symmetric student.
    pub fn embed_doc(&self, content: &[u32]) -> Result<Vec<f64>> {
        self.doc_encoder().encode(&single_input(content))
    }

    /// Query vector in the scoring space: `f(q)` when symmetric, `proj(f(q))`
    /// when asymmetric.
    pub fn score_query(&self, content: &[u32]) -> Result<Vec<f64>> {
        let e = self.embed(content)?;
        match self.mode {
            StudentMode::Symmetric => Ok(e),
            StudentMode::AsymmetricInheritDocs => self.projection.apply(&e),
        }
    }

    /// Loss weights with the document embedding term disabled in asymmetric
    /// mode, where documents are aligned by construction.
    pub fn effective_weights(&self, w: &LossWeights) -> LossWeights {
        let mut w = w.clone();
        if self.mode == StudentMode::AsymmetricInheritDocs {
            w.embed_d = 0.0;
        }
        w
    }

    /// Index the student retrieves against: its own document embeddings when
    /// symmetric, a copy of the teacher index when asymmetric.
    pub fn build_index(&self, docs: &[Vec<u32>], teacher_index: &DocumentIndex) -> Result<DocumentIndex> {
        match self.mode {
            StudentMode::Symmetric => {
                let meta = IndexMeta {
                    encoder_hash: sha256_hex(&to_checkpoint_bytes(self)?),
                    pooling: self.query.pooling(),
                    empty_query: false,
                };
                DocumentIndex::build(docs, meta, |d| self.embed_doc(d))
            }
            StudentMode::AsymmetricInheritDocs => {
                self.check_index(teacher_index)?;
                Ok(teacher_index.clone())
            }
        }
    }

    fn check_index(&self, index: &DocumentIndex) -> Result<()> {
        if let Some(h) = &self.index_hash {
            if *h != index_hash(index)? {
                return Err(Error::invalid("document index differs from the one the student inherited"));
            }
        }
        Ok(())
    }

    /// Retrieval view over a scoring-space index (see [`Student::build_index`]).
    pub fn retriever<'a>(&'a self, index: &'a DocumentIndex) -> Result<StudentRetriever<'a>> {
        let expected = match self.mode {
            StudentMode::Symmetric => self.query.out_dim(),
            StudentMode::AsymmetricInheritDocs => self.projection.out_dim(),
        };
        check_dim(expected, index.dim())?;
        Ok(StudentRetriever { student: self, index })
    }

    /// View in the teacher's embedding space, for comparisons with the
    /// teacher. Symmetric students map both sides through the projection.
    pub fn aligned<'a>(&'a self, teacher_index: &'a DocumentIndex) -> Result<AlignedStudent<'a>> {
        if self.mode == StudentMode::AsymmetricInheritDocs {
            self.check_index(teacher_index)?;
        }
        Ok(AlignedStudent {
            student: self,
            teacher_index,
        })
    }

    fn zero_grads(&self) -> StudentGrads {
        StudentGrads {
            query: self.query.zeros_like(),
            doc: self.doc.as_ref().map(Encoder::zeros_like),
            projection: self.projection.zeros_like(),
        }
    }

    fn apply(&mut self, grads: &StudentGrads, opt: &mut AdamW, lr: f64) -> Result<()> {
        let mut groups = Vec::new();
        push_encoder(&mut groups, &mut self.query, &grads.query);
        if let (Some(d), Some(g)) = (self.doc.as_mut(), grads.doc.as_ref()) {
            push_encoder(&mut groups, d, g);
        }
        if self.train_projection {
            for (p, g) in self
                .projection
                .params_mut()
                .into_iter()
                .zip(grads.projection.params())
            {
                groups.push(ParamGroup {
                    param: p,
                    grad: g,
                    decay: false,
                });
            }
        }
        opt.step(groups, lr)
    }
}

pub struct StudentRetriever<'a> {
    student: &'a Student,
    index: &'a DocumentIndex,
}

impl StudentRetriever<'_> {
    pub fn index(&self) -> &DocumentIndex {
        self.index
    }

    pub fn score(&self, query: &[u32], doc_id: u32) -> Result<f64> {
        Ok(dot_unchecked(&self.student.score_query(query)?, self.index.row(doc_id)?))
    }
}

impl DualEncoder for StudentRetriever<'_> {
    fn embed_query(&self, content: &[u32]) -> Result<Vec<f64>> {
        self.student.score_query(content)
    }

    fn embed_doc(&self, doc_id: u32, _content: &[u32]) -> Result<Vec<f64>> {
        Ok(self.index.row(doc_id)?.to_vec())
    }
}

pub struct AlignedStudent<'a> {
    student: &'a Student,
    teacher_index: &'a DocumentIndex,
}

impl DualEncoder for AlignedStudent<'_> {
    fn embed_query(&self, content: &[u32]) -> Result<Vec<f64>> {
        self.student.projection.apply(&self.student.embed(content)?)
    }

    fn embed_doc(&self, doc_id: u32, content: &[u32]) -> Result<Vec<f64>> {
        match self.student.mode {
            StudentMode::Symmetric => self.student.projection.apply(&self.student.embed_doc(content)?),
            StudentMode::AsymmetricInheritDocs => Ok(self.teacher_index.row(doc_id)?.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentGrads {
    pub query: Encoder,
    pub doc: Option<Encoder>,
    pub projection: Projection,
}

/// Frozen teacher outputs needed by the distillation objective, computed
/// once up front.
pub struct TeacherTargets<'a> {
    teacher: &'a Teacher,
    index: &'a DocumentIndex,
    scores: Vec<Vec<f64>>,
    queries: Vec<Vec<f64>>,
    aug_tokens: Vec<Vec<u32>>,
    aug: Vec<Vec<f64>>,
}

impl<'a> TeacherTargets<'a> {
    pub fn new(
        teacher: &'a Teacher,
        index: &'a DocumentIndex,
        data: &TrainData,
        aug: &[GeneratedQuery],
    ) -> Result<Self> {
        check_dim(teacher.dim(), index.dim())?;
        let per_example = data
            .examples
            .par_iter()
            .map(|ex| {
                let q = data.query(ex.query_id)?;
                let docs = ex.doc_ids.iter().map(|&d| data.doc(d)).collect::<Result<Vec<_>>>()?;
                let scores = docs.iter().map(|d| teacher.score(q, d)).collect::<Result<Vec<_>>>()?;
                Ok((scores, teacher.query_target(q, &docs)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let (scores, queries) = per_example.into_iter().unzip();
        let mut by_query: BTreeMap<u32, usize> = BTreeMap::new();
        for (i, ex) in data.examples.iter().enumerate() {
            by_query.entry(ex.query_id).or_insert(i);
        }
        let aug_targets = aug
            .par_iter()
            .map(|g| {
                let context: Vec<&[u32]> = match by_query.get(&g.source_query_id) {
                    Some(&i) => data.examples[i]
                        .doc_ids
                        .iter()
                        .map(|&d| data.doc(d))
                        .collect::<Result<_>>()?,
                    None => Vec::new(),
                };
                teacher.query_target(&g.generated_tokens, &context)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            teacher,
            index,
            scores,
            queries,
            aug_tokens: aug.iter().map(|g| g.generated_tokens.clone()).collect(),
            aug: aug_targets,
        })
    }

    pub fn teacher(&self) -> &Teacher {
        self.teacher
    }

    pub fn index(&self) -> &DocumentIndex {
        self.index
    }

    pub fn aug_len(&self) -> usize {
        self.aug.len()
    }

    /// Teacher scores of a candidate list for example `e`; documents beyond
    /// the example's own (in-batch negatives) are scored on demand.
    fn scores_for(&self, data: &TrainData, e: usize, list: &[u32]) -> Result<Vec<f64>> {
        let ex = &data.examples[e];
        let mut out = self.scores[e].clone();
        for &d in &list[ex.doc_ids.len()..] {
            out.push(match self.teacher {
                Teacher::De(_) => dot_unchecked(&self.queries[e], self.index.row(d)?),
                Teacher::Ce(m) => m.score(data.query(ex.query_id)?, data.doc(d)?)?,
            });
        }
        Ok(out)
    }
}

/// Distillation objective on a batch: weighted one-hot, score-distillation
/// and embedding-matching terms. Generated queries in `aug_batch` only enter
/// the query embedding-matching term, with the same weight.
#[allow(clippy::too_many_arguments)]
pub fn student_objective(
    targets: &TeacherTargets,
    student: &Student,
    data: &TrainData,
    batch: &[usize],
    aug_batch: &[usize],
    weights: &LossWeights,
    cfg: &TrainConfig,
    grads: Option<&mut StudentGrads>,
) -> Result<StepLosses> {
    let w = student.effective_weights(weights);
    let symmetric = student.mode == StudentMode::Symmetric;
    let proj = &student.projection;
    let lists: Vec<(Vec<u32>, Vec<u8>)> = (0..batch.len())
        .map(|b| candidates(data.examples, batch, b, cfg.in_batch_negatives))
        .collect();
    let doc_lists: Vec<Vec<u32>> = lists.iter().map(|l| l.0.clone()).collect();
    let (docs, pos) = batch_docs(&doc_lists);

    let q_tokens = batch
        .iter()
        .map(|&i| data.query(data.examples[i].query_id))
        .collect::<Result<Vec<_>>>()?;
    let q_items = encode_all(&student.query, &q_tokens)?;
    let a_tokens: Vec<&[u32]> = aug_batch.iter().map(|&a| targets.aug_tokens[a].as_slice()).collect();
    let a_items = encode_all(&student.query, &a_tokens)?;
    let d_items = if symmetric {
        let d_tokens = docs.iter().map(|&d| data.doc(d)).collect::<Result<Vec<_>>>()?;
        encode_all(student.doc_encoder(), &d_tokens)?
    } else {
        Vec::new()
    };
    let d_vecs: Vec<&[f64]> = if symmetric {
        d_items.iter().map(|i| i.emb.as_slice()).collect()
    } else {
        docs.iter().map(|&d| targets.index.row(d)).collect::<Result<_>>()?
    };

    let kdim = student.query.out_dim();
    let inv_b = 1.0 / batch.len() as f64;
    let mut dq = vec![vec![0.0; kdim]; batch.len()];
    let mut dd = vec![vec![0.0; kdim]; docs.len()];
    let mut d_proj = proj.zeros_like();
    let (mut onehot, mut distill) = (0.0, 0.0);
    for (b, (list, labels)) in lists.iter().enumerate() {
        let e_q = &q_items[b].emb;
        let qv = if symmetric { e_q.clone() } else { proj.apply(e_q)? };
        let s: Vec<f64> = list.iter().map(|d| dot_unchecked(&qv, d_vecs[pos[d]])).collect();
        let t = targets.scores_for(data, batch[b], list)?;
        let oh = w.onehot_loss.eval(&s, labels)?;
        let sd = w.distill_loss.eval(&s, &t, cfg.temperature)?;
        onehot += oh.value * inv_b;
        distill += sd.value * inv_b;
        let mut dqv = vec![0.0; qv.len()];
        for (j, d) in list.iter().enumerate() {
            let g = (w.onehot * oh.grad[j] + w.score_distill * sd.grad[j]) * inv_b;
            if g == 0.0 {
                continue;
            }
            axpy(g, d_vecs[pos[d]], &mut dqv);
            if symmetric {
                axpy(g, &qv, &mut dd[pos[d]]);
            }
        }
        if symmetric {
            axpy(1.0, &dqv, &mut dq[b]);
        } else {
            let dx = proj.backward(e_q, &dqv, &mut d_proj);
            axpy(1.0, &dx, &mut dq[b]);
        }
    }

    let q_targets: Vec<Vec<f64>> = batch.iter().map(|&e| targets.queries[e].clone()).collect();
    let q_embs: Vec<Vec<f64>> = q_items.iter().map(|i| i.emb.clone()).collect();
    let em_q = embed_match_loss(&q_targets, &q_embs, proj, false)?;
    let mut da = vec![vec![0.0; kdim]; aug_batch.len()];
    let mut embed_q_aug = 0.0;
    if !aug_batch.is_empty() {
        let a_targets: Vec<Vec<f64>> = aug_batch.iter().map(|&a| targets.aug[a].clone()).collect();
        let a_embs: Vec<Vec<f64>> = a_items.iter().map(|i| i.emb.clone()).collect();
        let em_a = embed_match_loss(&a_targets, &a_embs, proj, false)?;
        embed_q_aug = em_a.value;
        if w.embed_q > 0.0 {
            for (d, g) in da.iter_mut().zip(&em_a.grad_student) {
                axpy(w.embed_q, g, d);
            }
            add_affine(&mut d_proj, &em_a.grad_projection, w.embed_q);
        }
    }
    if w.embed_q > 0.0 {
        for (d, g) in dq.iter_mut().zip(&em_q.grad_student) {
            axpy(w.embed_q, g, d);
        }
        add_affine(&mut d_proj, &em_q.grad_projection, w.embed_q);
    }
    let mut embed_d = 0.0;
    if symmetric {
        let d_targets: Vec<Vec<f64>> = docs
            .iter()
            .map(|&d| Ok(targets.index.row(d)?.to_vec()))
            .collect::<Result<_>>()?;
        let d_embs: Vec<Vec<f64>> = d_items.iter().map(|i| i.emb.clone()).collect();
        let em_d = embed_match_loss(&d_targets, &d_embs, proj, false)?;
        embed_d = em_d.value;
        if w.embed_d > 0.0 {
            for (d, g) in dd.iter_mut().zip(&em_d.grad_student) {
                axpy(w.embed_d, g, d);
            }
            add_affine(&mut d_proj, &em_d.grad_projection, w.embed_d);
        }
    }

    let losses = StepLosses {
        onehot,
        score_distill: distill,
        embed_q: em_q.value,
        embed_d,
        embed_q_aug,
        recon: 0.0,
        total: w.onehot * onehot
            + w.score_distill * distill
            + w.embed_q * (em_q.value + embed_q_aug)
            + w.embed_d * embed_d,
    };
    if let Some(g) = grads {
        backward_all(&student.query, &q_items, &dq, &mut g.query)?;
        backward_all(&student.query, &a_items, &da, &mut g.query)?;
        if symmetric {
            match g.doc.as_mut() {
                Some(gd) => backward_all(student.doc_encoder(), &d_items, &dd, gd)?,
                None => backward_all(&student.query, &d_items, &dd, &mut g.query)?,
            }
        }
        add_affine(&mut g.projection, &d_proj, 1.0);
    }
    Ok(losses)
}

fn add_affine(acc: &mut Projection, g: &Projection, scale: f64) {
    for (a, b) in acc.params_mut().into_iter().zip(g.params()) {
        axpy(scale, b, a);
    }
}

/// One optimizer step on the distillation objective. The teacher and its
/// index are only read.
#[allow(clippy::too_many_arguments)]
pub fn distill_step(
    targets: &TeacherTargets,
    student: &mut Student,
    opt: &mut AdamW,
    data: &TrainData,
    batch: &[usize],
    aug_batch: &[usize],
    weights: &LossWeights,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepLosses> {
    let mut grads = student.zero_grads();
    let losses = student_objective(
        targets,
        student,
        data,
        batch,
        aug_batch,
        weights,
        cfg,
        Some(&mut grads),
    )?;
    ensure_finite(&losses, 0)?;
    student.apply(&grads, opt, lr)?;
    Ok(losses)
}

/// Per-interval evaluation hook: returns named metric values.
pub type Monitor<'m> = dyn FnMut(usize, &Student) -> Result<Vec<(String, f64)>> + 'm;

/// Trains a student against a frozen teacher. Randomness comes from the
/// `init`, `batching` and `augmentation` sub-seeds of `train.seed`.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    teacher: &Teacher,
    teacher_index: &DocumentIndex,
    cfg: &StudentConfig,
    data: &TrainData,
    weights: &LossWeights,
    train: &TrainConfig,
    aug: &[GeneratedQuery],
    mut monitor: Option<&mut Monitor<'_>>,
) -> Result<(Student, TrainHistory)> {
    train.validate()?;
    weights.validate()?;
    data.validate()?;
    let targets = TeacherTargets::new(teacher, teacher_index, data, aug)?;
    let mut rng = Rng::derived(train.seed, "init");
    let mut student = Student::init(cfg, data.tokens.vocab.len(), teacher_index, &mut rng)?;
    let all: Vec<usize> = (0..data.examples.len()).collect();
    let full = |s: &Student| -> Result<f64> {
        let mut total = 0.0;
        for chunk in all.chunks(64) {
            let l = student_objective(&targets, s, data, chunk, &[], weights, train, None)?;
            total += l.total * chunk.len() as f64;
        }
        Ok(total / all.len() as f64)
    };
    let mut history = TrainHistory {
        initial_loss: Some(full(&student)?),
        ..TrainHistory::default()
    };
    let mut opt = AdamW::new(train);
    let mut batcher = Batcher::new(data.examples.len(), Rng::derived(train.seed, "batching"));
    let mut aug_batcher = Batcher::new(aug.len(), Rng::derived(train.seed, "augmentation"));
    for step in 0..train.steps {
        let batch = batcher.next_batch(train.batch_size);
        let aug_batch = aug_batcher.next_batch(train.batch_size);
        let lr = lr_at(step, train)?;
        let losses = distill_step(
            &targets,
            &mut student,
            &mut opt,
            data,
            &batch,
            &aug_batch,
            weights,
            train,
            lr,
        )
        .map_err(|e| match e {
            Error::Diverged { .. } => Error::Diverged { step },
            e => e,
        })?;
        history.push(step, lr, losses)?;
        if let Some(m) = monitor.as_mut() {
            if train.eval_every > 0 && (step + 1) % train.eval_every == 0 {
                for (metric, value) in m(step + 1, &student)? {
                    history.evals.push(super::EvalRecord {
                        step: step + 1,
                        metric,
                        value,
                    });
                }
            }
        }
    }
    history.final_loss = Some(full(&student)?);
    Ok((student, history))
}
