use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{lr_at, AdamW, Batcher, ParamGroup, TrainConfig};
use super::tower::{backward_all, backward_tokens, encode_all};
use super::{ensure_finite, StepLosses, TrainData, TrainHistory};
use crate::datasim::TrainingExample;
use crate::encoders::{
    checkpoint_kind, dual_pool, dual_pool_backward, from_checkpoint_bytes, Checkpointable, pool, pool_backward,
    to_checkpoint_bytes, Affine, CeHead, CeModel, DeModel, Encoder, EncoderConfig, Forward,
    JointInput, PoolingKind,
};
use crate::error::{Error, Result};
use crate::losses::{reconstruction_loss, OneHotLoss};
use crate::numerics::{axpy, dot_unchecked, Mat, Rng};
use crate::retrieval::DocumentIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    De,
    /// Cross encoder with a [CLS] classification head.
    Ce,
    /// Cross encoder scored by dual pooling, trained with reconstruction.
    CeDualPooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub hidden: usize,
    pub out_dim: usize,
    pub blocks: usize,
    /// DE only: query and document towers share parameters.
    pub shared_towers: bool,
    /// Single-sequence pooling of DE towers.
    pub pooling: PoolingKind,
    pub dual_pooling: PoolingKind,
    /// Maximum joint input length of cross encoders.
    pub max_len: usize,
    pub onehot_loss: OneHotLoss,
    /// Weight of the reconstruction loss (dual-pooled CE only).
    pub w_recon: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            kind: TeacherKind::De,
            hidden: 32,
            out_dim: 16,
            blocks: 1,
            shared_towers: false,
            pooling: PoolingKind::FirstToken,
            dual_pooling: PoolingKind::SegmentWeightedMean,
            max_len: 64,
            onehot_loss: OneHotLoss::SoftmaxCe,
            w_recon: 1.0,
        }
    }
}

/// A trained (frozen) teacher.
#[derive(Debug, Clone, PartialEq)]
pub enum Teacher {
    De(DeModel),
    Ce(CeModel),
}

impl Teacher {
    pub fn init(cfg: &TeacherConfig, vocab_size: usize, rng: &mut Rng) -> Result<Self> {
        let enc = |pooling, rng: &mut Rng| {
            Encoder::init(
                EncoderConfig {
                    vocab_size,
                    hidden: cfg.hidden,
                    out_dim: cfg.out_dim,
                    blocks: cfg.blocks,
                    pooling,
                },
                rng,
            )
        };
        Ok(match cfg.kind {
            TeacherKind::De => {
                if cfg.pooling.is_dual() {
                    return Err(Error::invalid("DE towers need FirstToken or Mean pooling"));
                }
                let q = enc(cfg.pooling, rng);
                if cfg.shared_towers {
                    Teacher::De(DeModel::shared(q))
                } else {
                    Teacher::De(DeModel::separate(q, enc(cfg.pooling, rng)))
                }
            }
            TeacherKind::Ce => {
                let e = enc(PoolingKind::FirstToken, rng);
                let scale = 1.0 / (cfg.out_dim as f64).sqrt();
                let w = (0..cfg.out_dim).map(|_| rng.normal() * scale).collect();
                Teacher::Ce(CeModel::with_classification(e, w, cfg.max_len))
            }
            TeacherKind::CeDualPooled => {
                if !cfg.dual_pooling.is_dual() {
                    return Err(Error::invalid(
                        "dual_pooling must be segment-weighted-mean or dual-special-token",
                    ));
                }
                let e = enc(cfg.dual_pooling, rng);
                let mut m = CeModel::with_dual_pool(e, cfg.dual_pooling, cfg.max_len);
                m.decoder = Some(Affine::projection(cfg.out_dim, vocab_size, rng));
                Teacher::Ce(m)
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Teacher::De(m) => m.dim(),
            Teacher::Ce(m) => m.dim(),
        }
    }

    pub fn score(&self, q: &[u32], d: &[u32]) -> Result<f64> {
        match self {
            Teacher::De(m) => m.score(q, d),
            Teacher::Ce(m) => m.score(q, d),
        }
    }

    /// Query embedding used as the embedding-matching target. A cross
    /// encoder has no standalone query embedding, so its query-side proxy
    /// is averaged over the given context documents.
    pub fn query_target(&self, q: &[u32], context: &[&[u32]]) -> Result<Vec<f64>> {
        match self {
            Teacher::De(m) => m.embed_query(q),
            Teacher::Ce(m) => {
                if context.is_empty() {
                    return Err(Error::invalid("cross-encoder query targets need context documents"));
                }
                let mut acc = vec![0.0; m.dim()];
                for d in context {
                    axpy(1.0, &m.dual_pool(q, d, false)?.query_emb, &mut acc);
                }
                acc.iter_mut().for_each(|x| *x /= context.len() as f64);
                Ok(acc)
            }
        }
    }

    /// Inheritable document index: the DE document tower, or the dual-pooled
    /// CE on empty-query inputs.
    pub fn build_index(&self, docs: &[Vec<u32>]) -> Result<DocumentIndex> {
        match self {
            Teacher::De(m) => DocumentIndex::from_de(m, docs),
            Teacher::Ce(m) => DocumentIndex::from_ce(m, docs),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        match self {
            Teacher::De(m) => to_checkpoint_bytes(m),
            Teacher::Ce(m) => to_checkpoint_bytes(m),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match checkpoint_kind(bytes)?.as_str() {
            k if k == <DeModel as Checkpointable>::KIND => Ok(Teacher::De(from_checkpoint_bytes(bytes)?)),
            _ => Ok(Teacher::Ce(from_checkpoint_bytes(bytes)?)),
        }
    }

    fn apply_grads(&mut self, grads: &Teacher, opt: &mut AdamW, lr: f64) -> Result<()> {
        let mut groups = Vec::new();
        match (self, grads) {
            (Teacher::De(m), Teacher::De(g)) => {
                push_encoder(&mut groups, &mut m.query, &g.query);
                if let (Some(d), Some(gd)) = (m.doc.as_mut(), g.doc.as_ref()) {
                    push_encoder(&mut groups, d, gd);
                }
            }
            (Teacher::Ce(m), Teacher::Ce(g)) => {
                push_encoder(&mut groups, &mut m.encoder, &g.encoder);
                if let (CeHead::Classification(w), CeHead::Classification(gw)) =
                    (&mut m.head, &g.head)
                {
                    groups.push(ParamGroup {
                        param: w,
                        grad: gw,
                        decay: true,
                    });
                }
                if let (Some(d), Some(gd)) = (m.decoder.as_mut(), g.decoder.as_ref()) {
                    for (p, q) in d.params_mut().into_iter().zip(gd.params()) {
                        groups.push(ParamGroup {
                            param: p,
                            grad: q,
                            decay: true,
                        });
                    }
                }
            }
            _ => return Err(Error::invalid("gradient does not match teacher kind")),
        }
        opt.step(groups, lr)
    }

    fn zeros_like(&self) -> Teacher {
        match self {
            Teacher::De(m) => Teacher::De(DeModel {
                query: m.query.zeros_like(),
                doc: m.doc.as_ref().map(Encoder::zeros_like),
            }),
            Teacher::Ce(m) => Teacher::Ce(CeModel {
                encoder: m.encoder.zeros_like(),
                head: match &m.head {
                    CeHead::Classification(w) => CeHead::Classification(vec![0.0; w.len()]),
                    h => h.clone(),
                },
                decoder: m.decoder.as_ref().map(Affine::zeros_like),
                max_len: m.max_len,
            }),
        }
    }
}

pub(crate) fn push_encoder<'a>(
    groups: &mut Vec<ParamGroup<'a>>,
    enc: &'a mut Encoder,
    grads: &'a Encoder,
) {
    for (p, g) in enc.params_mut().into_iter().zip(grads.params()) {
        groups.push(ParamGroup {
            param: p,
            grad: g,
            decay: true,
        });
    }
}

/// Candidate documents and labels of example `i` within a batch. With
/// in-batch negatives, documents of the other examples are appended as
/// negatives.
pub(crate) fn candidates(
    examples: &[TrainingExample],
    batch: &[usize],
    b: usize,
    in_batch: bool,
) -> (Vec<u32>, Vec<u8>) {
    let ex = &examples[batch[b]];
    let mut docs = ex.doc_ids.clone();
    let mut labels = ex.labels.clone();
    if in_batch {
        for (o, &other) in batch.iter().enumerate() {
            if o == b {
                continue;
            }
            for d in &examples[other].doc_ids {
                if !docs.contains(d) {
                    docs.push(*d);
                    labels.push(0);
                }
            }
        }
    }
    (docs, labels)
}

/// Documents of a batch in first-appearance order, with a position lookup.
pub(crate) fn batch_docs(lists: &[Vec<u32>]) -> (Vec<u32>, HashMap<u32, usize>) {
    let mut order = Vec::new();
    let mut pos = HashMap::new();
    for l in lists {
        for &d in l {
            pos.entry(d).or_insert_with(|| {
                order.push(d);
                order.len() - 1
            });
        }
    }
    (order, pos)
}

/// Objective and (optionally) gradient of a DE teacher on a batch.
fn de_batch(
    m: &DeModel,
    data: &TrainData,
    batch: &[usize],
    cfg: &TeacherConfig,
    in_batch: bool,
    grads: Option<&mut DeModel>,
) -> Result<StepLosses> {
    let lists: Vec<(Vec<u32>, Vec<u8>)> = (0..batch.len())
        .map(|b| candidates(data.examples, batch, b, in_batch))
        .collect();
    let doc_lists: Vec<Vec<u32>> = lists.iter().map(|l| l.0.clone()).collect();
    let (docs, pos) = batch_docs(&doc_lists);
    let q_tokens = batch
        .iter()
        .map(|&i| data.query(data.examples[i].query_id))
        .collect::<Result<Vec<_>>>()?;
    let d_tokens = docs.iter().map(|&d| data.doc(d)).collect::<Result<Vec<_>>>()?;
    let q_items = encode_all(&m.query, &q_tokens)?;
    let d_items = encode_all(m.doc_encoder(), &d_tokens)?;
    let inv_b = 1.0 / batch.len() as f64;
    let kdim = m.dim();
    let mut dq = vec![vec![0.0; kdim]; batch.len()];
    let mut dd = vec![vec![0.0; kdim]; docs.len()];
    let mut loss = 0.0;
    for (b, (list, labels)) in lists.iter().enumerate() {
        let qe = &q_items[b].emb;
        let scores: Vec<f64> = list
            .iter()
            .map(|d| dot_unchecked(qe, &d_items[pos[d]].emb))
            .collect();
        let out = cfg.onehot_loss.eval(&scores, labels)?;
        loss += out.value * inv_b;
        for (d, g) in list.iter().zip(&out.grad) {
            let g = g * inv_b;
            let p = pos[d];
            axpy(g, &d_items[p].emb, &mut dq[b]);
            axpy(g, qe, &mut dd[p]);
        }
    }
    if let Some(grads) = grads {
        backward_all(&m.query, &q_items, &dq, &mut grads.query)?;
        match (&m.doc, grads.doc.as_mut()) {
            (Some(d), Some(gd)) => backward_all(d, &d_items, &dd, gd)?,
            _ => backward_all(&m.query, &d_items, &dd, &mut grads.query)?,
        }
    }
    Ok(StepLosses {
        onehot: loss,
        total: loss,
        ..StepLosses::default()
    })
}

struct CePair {
    example: usize,
    joint: JointInput,
    fwd: Forward,
    score: f64,
    pooled: (Vec<f64>, Vec<f64>),
    recon: Option<(f64, Mat, Affine)>,
}

fn ce_batch(
    m: &CeModel,
    data: &TrainData,
    batch: &[usize],
    cfg: &TeacherConfig,
    in_batch: bool,
    grads: Option<&mut CeModel>,
) -> Result<StepLosses> {
    let lists: Vec<(Vec<u32>, Vec<u8>)> = (0..batch.len())
        .map(|b| candidates(data.examples, batch, b, in_batch))
        .collect();
    let jobs: Vec<(usize, u32)> = lists
        .iter()
        .enumerate()
        .flat_map(|(b, l)| l.0.iter().map(move |&d| (b, d)))
        .collect();
    let want_grad = grads.is_some();
    let pairs: Vec<CePair> = jobs
        .par_iter()
        .map(|&(b, d)| {
            let q = data.query(data.examples[batch[b]].query_id)?;
            let joint = m.joint(q, data.doc(d)?, false)?;
            let fwd = m.forward(&joint)?;
            let (score, pooled) = match &m.head {
                CeHead::Classification(w) => {
                    let e = pool(PoolingKind::FirstToken, &fwd.tokens)?;
                    (dot_unchecked(w, &e), (e, Vec::new()))
                }
                CeHead::DualPool(kind) => {
                    let (qe, de) = dual_pool(*kind, &fwd.tokens, &joint)?;
                    (dot_unchecked(&qe, &de), (qe, de))
                }
            };
            let recon = match (&m.decoder, cfg.kind) {
                (Some(dec), TeacherKind::CeDualPooled) if cfg.w_recon > 0.0 || want_grad => {
                    let r = reconstruction_loss(&fwd.tokens, &joint.ids, dec)?;
                    Some((r.value, r.grad_tokens, r.grad_decoder))
                }
                _ => None,
            };
            Ok(CePair {
                example: b,
                joint,
                fwd,
                score,
                pooled,
                recon,
            })
        })
        .collect::<Result<_>>()?;

    let inv_b = 1.0 / batch.len() as f64;
    let inv_pairs = 1.0 / pairs.len() as f64;
    let mut score_grad = vec![0.0; pairs.len()];
    let mut onehot = 0.0;
    let mut start = 0;
    for (b, (list, labels)) in lists.iter().enumerate() {
        let end = start + list.len();
        debug_assert!(pairs[start..end].iter().all(|p| p.example == b));
        let scores: Vec<f64> = pairs[start..end].iter().map(|p| p.score).collect();
        let out = cfg.onehot_loss.eval(&scores, labels)?;
        onehot += out.value * inv_b;
        for (j, g) in out.grad.iter().enumerate() {
            score_grad[start + j] = g * inv_b;
        }
        start = end;
    }
    let recon: f64 = pairs
        .iter()
        .filter_map(|p| p.recon.as_ref().map(|r| r.0))
        .sum::<f64>()
        * inv_pairs;
    let w_recon = if matches!(m.head, CeHead::DualPool(_)) { cfg.w_recon } else { 0.0 };

    if let Some(grads) = grads {
        let idx: Vec<usize> = (0..pairs.len()).collect();
        backward_tokens(
            &m.encoder,
            &idx,
            |&i| {
                let p = &pairs[i];
                let g = score_grad[i];
                let n = p.fwd.len();
                let mut d_tokens = match &m.head {
                    CeHead::Classification(w) => {
                        let d: Vec<f64> = w.iter().map(|x| g * x).collect();
                        pool_backward(PoolingKind::FirstToken, n, &d)?
                    }
                    CeHead::DualPool(kind) => {
                        let dq: Vec<f64> = p.pooled.1.iter().map(|x| g * x).collect();
                        let dd: Vec<f64> = p.pooled.0.iter().map(|x| g * x).collect();
                        dual_pool_backward(*kind, n, &p.joint, &dq, &dd)?
                    }
                };
                if let Some((_, gt, _)) = &p.recon {
                    axpy(w_recon * inv_pairs, gt.as_slice(), d_tokens.as_mut_slice());
                }
                Ok(Some((&p.fwd, d_tokens)))
            },
            &mut grads.encoder,
        )?;
        if let CeHead::Classification(gw) = &mut grads.head {
            for (p, g) in pairs.iter().zip(&score_grad) {
                axpy(*g, &p.pooled.0, gw);
            }
        }
        if let Some(gd) = grads.decoder.as_mut() {
            for p in &pairs {
                if let Some((_, _, gdec)) = &p.recon {
                    for (a, b) in gd.params_mut().into_iter().zip(gdec.params()) {
                        axpy(w_recon * inv_pairs, b, a);
                    }
                }
            }
        }
    }
    Ok(StepLosses {
        onehot,
        recon,
        total: onehot + w_recon * recon,
        ..StepLosses::default()
    })
}

fn batch_objective(
    teacher: &Teacher,
    data: &TrainData,
    batch: &[usize],
    cfg: &TeacherConfig,
    in_batch: bool,
    grads: Option<&mut Teacher>,
) -> Result<StepLosses> {
    match (teacher, grads) {
        (Teacher::De(m), Some(Teacher::De(g))) => de_batch(m, data, batch, cfg, in_batch, Some(g)),
        (Teacher::De(m), None) => de_batch(m, data, batch, cfg, in_batch, None),
        (Teacher::Ce(m), Some(Teacher::Ce(g))) => ce_batch(m, data, batch, cfg, in_batch, Some(g)),
        (Teacher::Ce(m), None) => ce_batch(m, data, batch, cfg, in_batch, None),
        _ => Err(Error::invalid("gradient does not match teacher kind")),
    }
}

/// Mean objective over all examples, evaluated in fixed-size batches.
pub(crate) fn full_objective(
    teacher: &Teacher,
    data: &TrainData,
    cfg: &TeacherConfig,
) -> Result<f64> {
    let idx: Vec<usize> = (0..data.examples.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(64) {
        let l = batch_objective(teacher, data, chunk, cfg, false, None)?;
        total += l.total * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Trains a teacher with the one-hot objective (plus reconstruction for the
/// dual-pooled cross encoder). Randomness comes from the `init` and
/// `batching` sub-seeds of `train.seed`.
pub fn train_teacher(
    cfg: &TeacherConfig,
    data: &TrainData,
    train: &TrainConfig,
) -> Result<(Teacher, TrainHistory)> {
    train.validate()?;
    data.validate()?;
    if data
        .examples
        .iter()
        .any(|e| !e.labels.contains(&1) && cfg.onehot_loss == OneHotLoss::SoftmaxCe)
    {
        return Err(Error::NoPositive);
    }
    let mut rng = Rng::derived(train.seed, "init");
    let mut teacher = Teacher::init(cfg, data.tokens.vocab.len(), &mut rng)?;
    let mut history = TrainHistory {
        initial_loss: Some(full_objective(&teacher, data, cfg)?),
        ..TrainHistory::default()
    };
    let mut opt = AdamW::new(train);
    let mut batcher = Batcher::new(data.examples.len(), Rng::derived(train.seed, "batching"));
    for step in 0..train.steps {
        let batch = batcher.next_batch(train.batch_size);
        let mut grads = teacher.zeros_like();
        let losses = batch_objective(
            &teacher,
            data,
            &batch,
            cfg,
            train.in_batch_negatives,
            Some(&mut grads),
        )?;
        ensure_finite(&losses, step)?;
        let lr = lr_at(step, train)?;
        teacher
            .apply_grads(&grads, &mut opt, lr)
            .map_err(|e| match e {
                Error::Diverged { .. } => Error::Diverged { step },
                e => e,
            })?;
        history.push(step, lr, losses)?;
    }
    let final_loss = full_objective(&teacher, data, cfg)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged { step: train.steps });
    }
    history.final_loss = Some(final_loss);
    Ok((teacher, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasim::{generate_corpus, make_training_examples, CorpusSpec, NegativeSampling, Tokenized};
    use crate::numerics::grad_check;

    fn setup() -> (Tokenized, Vec<TrainingExample>) {
        let c = generate_corpus(&CorpusSpec::new(4, 10, 6, 60, 8, 4, 0)).unwrap();
        let t = Tokenized::new(&c);
        let ids: Vec<u32> = (0..c.queries.len() as u32).collect();
        let ex = make_training_examples(&c, &ids, 3, NegativeSampling::Random, 0).unwrap();
        (t, ex)
    }

    fn small(kind: TeacherKind) -> TeacherConfig {
        TeacherConfig {
            kind,
            hidden: 6,
            out_dim: 4,
            blocks: 1,
            max_len: 24,
            ..TeacherConfig::default()
        }
    }

    fn flat(t: &Teacher) -> Vec<f64> {
        let mut out = Vec::new();
        match t {
            Teacher::De(m) => {
                m.query.params().iter().for_each(|p| out.extend_from_slice(p));
                if let Some(d) = &m.doc {
                    d.params().iter().for_each(|p| out.extend_from_slice(p));
                }
            }
            Teacher::Ce(m) => {
                m.encoder.params().iter().for_each(|p| out.extend_from_slice(p));
                if let CeHead::Classification(w) = &m.head {
                    out.extend_from_slice(w);
                }
                if let Some(d) = &m.decoder {
                    d.params().iter().for_each(|p| out.extend_from_slice(p));
                }
            }
        }
        out
    }

    fn unflat(t: &mut Teacher, x: &[f64]) {
        let mut slots: Vec<&mut [f64]> = Vec::new();
        match t {
            Teacher::De(m) => {
                slots.extend(m.query.params_mut());
                if let Some(d) = m.doc.as_mut() {
                    slots.extend(d.params_mut());
                }
            }
            Teacher::Ce(m) => {
                slots.extend(m.encoder.params_mut());
                if let CeHead::Classification(w) = &mut m.head {
                    slots.push(w);
                }
                if let Some(d) = m.decoder.as_mut() {
                    slots.extend(d.params_mut());
                }
            }
        }
        let mut off = 0;
        for s in slots {
            let n = s.len();
            s.copy_from_slice(&x[off..off + n]);
            off += n;
        }
    }

    fn check_gradient(kind: TeacherKind, in_batch: bool) {
        let (tokens, ex) = setup();
        let data = TrainData {
            tokens: &tokens,
            examples: &ex,
        };
        let cfg = small(kind);
        let base = Teacher::init(&cfg, tokens.vocab.len(), &mut Rng::new(1)).unwrap();
        let batch = [0, 3, 5];
        let err = grad_check(
            |x| {
                let mut t = base.clone();
                unflat(&mut t, x);
                let mut g = t.zeros_like();
                let l = batch_objective(&t, &data, &batch, &cfg, in_batch, Some(&mut g)).unwrap();
                (l.total, flat(&g))
            },
            &flat(&base),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{kind:?}: {err}");
    }

    #[test]
    fn de_gradient() {
        check_gradient(TeacherKind::De, false);
        check_gradient(TeacherKind::De, true);
    }

    #[test]
    fn ce_gradient() {
        check_gradient(TeacherKind::Ce, false);
    }

    #[test]
    fn ce_dual_gradient() {
        check_gradient(TeacherKind::CeDualPooled, false);
    }

    #[test]
    fn zero_steps_returns_init() {
        let (tokens, ex) = setup();
        let data = TrainData {
            tokens: &tokens,
            examples: &ex,
        };
        let cfg = small(TeacherKind::De);
        let train = TrainConfig {
            steps: 0,
            seed: 9,
            ..TrainConfig::default()
        };
        let (t, h) = train_teacher(&cfg, &data, &train).unwrap();
        let init = Teacher::init(&cfg, tokens.vocab.len(), &mut Rng::derived(9, "init")).unwrap();
        assert_eq!(t, init);
        assert!(h.rows.is_empty());
    }

    #[test]
    fn checkpoint_kind_detection() {
        let (tokens, _) = setup();
        for kind in [TeacherKind::De, TeacherKind::Ce, TeacherKind::CeDualPooled] {
            let t = Teacher::init(&small(kind), tokens.vocab.len(), &mut Rng::new(0)).unwrap();
            assert_eq!(Teacher::from_bytes(&t.to_bytes().unwrap()).unwrap(), t);
        }
    }
}
