use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::transformer::{pool, strip_pads, Encoder, Forward, PoolingKind};
use super::vocab::{CLS, SEP};
use crate::error::{Error, Result};
use crate::numerics::{check_dim, dot, dot_unchecked, Mat, Rng};

/// Affine map `x ↦ Wx + b` with `W: out×in`. Used as the student-to-teacher
/// projection and as the token decoder of the reconstruction loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Mat,
    pub b: Vec<f64>,
}

/// Student-to-teacher embedding projection.
pub type Projection = Affine;

impl Affine {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: Mat::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    /// Identity when square, Xavier-uniform otherwise; zero bias.
    pub fn projection(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let w = if in_dim == out_dim {
            Mat::identity(in_dim)
        } else {
            Mat::xavier(out_dim, in_dim, rng)
        };
        Self {
            w,
            b: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim(), self.out_dim())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.w.matvec(x)?;
        y.iter_mut().zip(&self.b).for_each(|(a, b)| *a += b);
        Ok(y)
    }

    /// Accumulates `dW += dy·xᵀ`, `db += dy` into `grads` and returns `dx = Wᵀdy`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grads: &mut Affine) -> Vec<f64> {
        let (out, inp) = self.w.shape();
        let mut dx = vec![0.0; inp];
        for r in 0..out {
            let g = dy[r];
            if g == 0.0 {
                continue;
            }
            grads.b[r] += g;
            let wrow = self.w.row(r);
            let grow = grads.w.row_mut(r);
            for c in 0..inp {
                grow[c] += g * x[c];
                dx[c] += g * wrow[c];
            }
        }
        dx
    }

    pub fn params(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice(), &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_mut_slice(), &mut self.b]
    }
}

/// Dual encoder. `doc == None` means the document tower shares the query
/// tower's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeModel {
    pub query: Encoder,
    pub doc: Option<Encoder>,
}

impl DeModel {
    pub fn shared(encoder: Encoder) -> Self {
        Self {
            query: encoder,
            doc: None,
        }
    }

    pub fn separate(query: Encoder, doc: Encoder) -> Self {
        Self {
            query,
            doc: Some(doc),
        }
    }

    pub fn is_shared(&self) -> bool {
        self.doc.is_none()
    }

    pub fn doc_encoder(&self) -> &Encoder {
        self.doc.as_ref().unwrap_or(&self.query)
    }

    pub fn dim(&self) -> usize {
        self.query.out_dim()
    }

    /// Embeds query content tokens (a [CLS] is prepended).
    pub fn embed_query(&self, content: &[u32]) -> Result<Vec<f64>> {
        self.query.encode(&single_input(content))
    }

    pub fn embed_doc(&self, content: &[u32]) -> Result<Vec<f64>> {
        self.doc_encoder().encode(&single_input(content))
    }

    pub fn score(&self, q: &[u32], d: &[u32]) -> Result<f64> {
        de_score(&self.embed_query(q)?, &self.embed_doc(d)?)
    }
}

/// Anything that maps queries and documents to a common embedding space.
/// Documents are passed both by id and content so index-backed models can
/// look them up.
pub trait DualEncoder {
    fn embed_query(&self, content: &[u32]) -> Result<Vec<f64>>;
    fn embed_doc(&self, doc_id: u32, content: &[u32]) -> Result<Vec<f64>>;
}

impl DualEncoder for DeModel {
    fn embed_query(&self, content: &[u32]) -> Result<Vec<f64>> {
        DeModel::embed_query(self, content)
    }

    fn embed_doc(&self, _doc_id: u32, content: &[u32]) -> Result<Vec<f64>> {
        DeModel::embed_doc(self, content)
    }
}

/// `[CLS]` followed by content tokens (leading specials and pads removed).
pub fn single_input(content: &[u32]) -> Vec<u32> {
    let content = strip_pads(content);
    let content = content.strip_prefix(&[CLS]).unwrap_or(content);
    let mut ids = Vec::with_capacity(content.len() + 1);
    ids.push(CLS);
    ids.extend_from_slice(content);
    ids
}

/// DE relevance score `⟨emb_q, emb_d⟩`.
pub fn de_score(q_emb: &[f64], d_emb: &[f64]) -> Result<f64> {
    dot(q_emb, d_emb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CeHead {
    Classification(Vec<f64>),
    DualPool(PoolingKind),
}

/// Cross encoder over joint `[CLS] q [SEP] d [SEP]` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeModel {
    pub encoder: Encoder,
    pub head: CeHead,
    /// Token decoder (`k → V`) for the reconstruction loss.
    pub decoder: Option<Affine>,
    pub max_len: usize,
}

/// `[CLS] q [SEP] d [SEP]` with segment ids and spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointInput {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub query: Range<usize>,
    pub doc: Range<usize>,
    /// Position of the first [SEP].
    pub sep: usize,
}

/// Lays out a joint input. With `empty_query`, the query tokens are
/// dropped. Overlong documents lose their tail so the total length is at
/// most `max_len`; the query is never truncated.
pub fn build_joint_input(
    q: &[u32],
    d: &[u32],
    empty_query: bool,
    max_len: usize,
) -> Result<JointInput> {
    let q = if empty_query { &[][..] } else { content_of(q) };
    let d = content_of(d);
    if q.len() + 3 > max_len {
        return Err(Error::invalid(format!(
            "query of {} tokens does not fit joint length {max_len}",
            q.len()
        )));
    }
    let d = &d[..d.len().min(max_len - 3 - q.len())];
    let mut ids = Vec::with_capacity(q.len() + d.len() + 3);
    ids.push(CLS);
    ids.extend_from_slice(q);
    let sep = ids.len();
    ids.push(SEP);
    ids.extend_from_slice(d);
    ids.push(SEP);
    let mut segments = vec![0u8; sep + 1];
    segments.resize(ids.len(), 1);
    Ok(JointInput {
        query: 1..sep,
        doc: sep + 1..ids.len() - 1,
        sep,
        ids,
        segments,
    })
}

fn content_of(ids: &[u32]) -> &[u32] {
    let ids = strip_pads(ids);
    let ids = ids.strip_prefix(&[CLS]).unwrap_or(ids);
    ids.strip_suffix(&[SEP]).unwrap_or(ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualPoolOutput {
    pub query_emb: Vec<f64>,
    pub doc_emb: Vec<f64>,
    pub score: f64,
}

/// Proxy query/document embeddings from the output tokens of a joint input.
pub fn dual_pool(
    kind: PoolingKind,
    tokens: &Mat,
    joint: &JointInput,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if joint.doc.is_empty() {
        return Err(Error::EmptySegment);
    }
    match kind {
        PoolingKind::DualSpecialToken => {
            Ok((tokens.row(0).to_vec(), tokens.row(joint.sep).to_vec()))
        }
        PoolingKind::SegmentWeightedMean => Ok((
            weighted_mean(tokens, joint.query.clone()),
            weighted_mean(tokens, joint.doc.clone()),
        )),
        _ => Err(Error::invalid(
            "dual pooling needs SegmentWeightedMean or DualSpecialToken",
        )),
    }
}

/// Per-token weight `1/√len`.
fn weighted_mean(tokens: &Mat, span: Range<usize>) -> Vec<f64> {
    let mut out = vec![0.0; tokens.cols()];
    if span.is_empty() {
        return out;
    }
    let w = 1.0 / (span.len() as f64).sqrt();
    for i in span {
        for (o, v) in out.iter_mut().zip(tokens.row(i)) {
            *o += w * v;
        }
    }
    out
}

/// Gradient of [`dual_pool`] with respect to the output tokens.
pub fn dual_pool_backward(
    kind: PoolingKind,
    n: usize,
    joint: &JointInput,
    d_query: &[f64],
    d_doc: &[f64],
) -> Result<Mat> {
    let k = d_query.len();
    let mut d = Mat::zeros(n, k);
    let mut scatter = |span: Range<usize>, w: f64, g: &[f64]| {
        for i in span {
            for (o, v) in d.row_mut(i).iter_mut().zip(g) {
                *o += w * v;
            }
        }
    };
    match kind {
        PoolingKind::DualSpecialToken => {
            scatter(0..1, 1.0, d_query);
            scatter(joint.sep..joint.sep + 1, 1.0, d_doc);
        }
        PoolingKind::SegmentWeightedMean => {
            if !joint.query.is_empty() {
                scatter(
                    joint.query.clone(),
                    1.0 / (joint.query.len() as f64).sqrt(),
                    d_query,
                );
            }
            scatter(
                joint.doc.clone(),
                1.0 / (joint.doc.len() as f64).sqrt(),
                d_doc,
            );
        }
        _ => {
            return Err(Error::invalid(
                "dual pooling needs SegmentWeightedMean or DualSpecialToken",
            ))
        }
    }
    Ok(d)
}

impl CeModel {
    pub fn with_classification(encoder: Encoder, w: Vec<f64>, max_len: usize) -> Self {
        Self {
            encoder,
            head: CeHead::Classification(w),
            decoder: None,
            max_len,
        }
    }

    pub fn with_dual_pool(encoder: Encoder, kind: PoolingKind, max_len: usize) -> Self {
        Self {
            encoder,
            head: CeHead::DualPool(kind),
            decoder: None,
            max_len,
        }
    }

    pub fn joint(&self, q: &[u32], d: &[u32], empty_query: bool) -> Result<JointInput> {
        build_joint_input(q, d, empty_query, self.max_len)
    }

    pub fn forward(&self, joint: &JointInput) -> Result<Forward> {
        self.encoder.forward(&joint.ids, Some(&joint.segments))
    }

    /// `⟨w, emb_{q,d}⟩` with [CLS] pooling.
    pub fn score_cls(&self, q: &[u32], d: &[u32]) -> Result<f64> {
        let CeHead::Classification(w) = &self.head else {
            return Err(Error::WrongHead("expected a classification head"));
        };
        let joint = self.joint(q, d, false)?;
        let fwd = self.forward(&joint)?;
        let emb = pool(PoolingKind::FirstToken, &fwd.tokens)?;
        dot(w, &emb)
    }

    pub fn dual_pool(&self, q: &[u32], d: &[u32], empty_query: bool) -> Result<DualPoolOutput> {
        let CeHead::DualPool(kind) = self.head else {
            return Err(Error::WrongHead("expected a dual-pooling head"));
        };
        let joint = self.joint(q, d, empty_query)?;
        let fwd = self.forward(&joint)?;
        let (query_emb, doc_emb) = dual_pool(kind, &fwd.tokens, &joint)?;
        let score = dot_unchecked(&query_emb, &doc_emb);
        Ok(DualPoolOutput {
            query_emb,
            doc_emb,
            score,
        })
    }

    /// Relevance score under whichever head is configured.
    pub fn score(&self, q: &[u32], d: &[u32]) -> Result<f64> {
        match self.head {
            CeHead::Classification(_) => self.score_cls(q, d),
            CeHead::DualPool(_) => Ok(self.dual_pool(q, d, false)?.score),
        }
    }

    /// Document embedding from an empty-query joint input (dual pooling only).
    pub fn doc_embedding(&self, d: &[u32]) -> Result<Vec<f64>> {
        Ok(self.dual_pool(&[], d, true)?.doc_emb)
    }

    pub fn dim(&self) -> usize {
        self.encoder.out_dim()
    }
}

/// Applies `p` to `emb`.
pub fn project(p: &Projection, emb: &[f64]) -> Result<Vec<f64>> {
    check_dim(p.in_dim(), emb.len())?;
    p.apply(emb)
}
