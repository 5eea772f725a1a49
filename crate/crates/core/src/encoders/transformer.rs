//! Desk-scale Transformer-like encoder.
//!
//! Each block applies single-head attention `softmax(QKᵀ/√h)V` and a
//! position-wise `tanh` affine map, both with residual connections and
//! without layer norm. A final affine map takes hidden states (width `h`) to
//! output token embeddings (width `k`). Inputs are the token embedding plus a
//! segment embedding (segment 0 for single sequences and the query side of
//! joint inputs, 1 for the document side).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    check_dim, matmul_a_bt_into, matmul_at_b_into, matmul_into, Mat, Rng,
};

/// How token embeddings are reduced to a sequence embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingKind {
    /// Embedding at position 0, the [CLS] token.
    FirstToken,
    Mean,
    /// Joint inputs only: each segment averaged with weight `1/√len`.
    SegmentWeightedMean,
    /// Joint inputs only: [CLS] for the query side, first [SEP] for the document side.
    DualSpecialToken,
}

impl PoolingKind {
    pub fn is_dual(self) -> bool {
        matches!(
            self,
            PoolingKind::SegmentWeightedMean | PoolingKind::DualSpecialToken
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    /// Hidden width `h`.
    pub hidden: usize,
    /// Output embedding width `k`.
    pub out_dim: usize,
    pub blocks: usize,
    pub pooling: PoolingKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub w_ff: Mat,
    pub b_ff: Vec<f64>,
}

impl Block {
    fn zeros(h: usize) -> Self {
        Self {
            wq: Mat::zeros(h, h),
            wk: Mat::zeros(h, h),
            wv: Mat::zeros(h, h),
            w_ff: Mat::zeros(h, h),
            b_ff: vec![0.0; h],
        }
    }
}

/// Encoder parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub tok_emb: Mat,
    pub seg_emb: Mat,
    pub blocks: Vec<Block>,
    pub w_out: Mat,
    pub b_out: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: Mat,
    x1: Mat,
    t: Mat,
}

/// Result of a forward pass: output token embeddings (`n×k`) plus the
/// activations needed by [`Encoder::backward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub tokens: Mat,
    ids: Vec<u32>,
    segments: Vec<u8>,
    caches: Vec<BlockCache>,
    last_hidden: Mat,
}

impl Forward {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Encoder {
    pub fn zeros(config: EncoderConfig) -> Self {
        let (v, h, k) = (config.vocab_size, config.hidden, config.out_dim);
        Self {
            tok_emb: Mat::zeros(v, h),
            seg_emb: Mat::zeros(2, h),
            blocks: (0..config.blocks).map(|_| Block::zeros(h)).collect(),
            w_out: Mat::zeros(h, k),
            b_out: vec![0.0; k],
            config,
        }
    }

    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Self {
        let (v, h, k) = (config.vocab_size, config.hidden, config.out_dim);
        let emb_std = 1.0 / (h as f64).sqrt();
        Self {
            tok_emb: Mat::gaussian(v, h, emb_std, rng),
            seg_emb: Mat::gaussian(2, h, 0.1 * emb_std, rng),
            blocks: (0..config.blocks)
                .map(|_| Block {
                    wq: Mat::xavier(h, h, rng),
                    wk: Mat::xavier(h, h, rng),
                    wv: Mat::xavier(h, h, rng),
                    w_ff: Mat::xavier(h, h, rng),
                    b_ff: vec![0.0; h],
                })
                .collect(),
            w_out: Mat::xavier(h, k, rng),
            b_out: vec![0.0; k],
            config,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone())
    }

    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    pub fn pooling(&self) -> PoolingKind {
        self.config.pooling
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.tok_emb.as_slice(), self.seg_emb.as_slice()];
        for b in &self.blocks {
            out.extend([
                b.wq.as_slice(),
                b.wk.as_slice(),
                b.wv.as_slice(),
                b.w_ff.as_slice(),
                b.b_ff.as_slice(),
            ]);
        }
        out.push(self.w_out.as_slice());
        out.push(self.b_out.as_slice());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> =
            vec![self.tok_emb.as_mut_slice(), self.seg_emb.as_mut_slice()];
        for b in &mut self.blocks {
            out.push(b.wq.as_mut_slice());
            out.push(b.wk.as_mut_slice());
            out.push(b.wv.as_mut_slice());
            out.push(b.w_ff.as_mut_slice());
            out.push(b.b_ff.as_mut_slice());
        }
        out.push(self.w_out.as_mut_slice());
        out.push(self.b_out.as_mut_slice());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Forward pass over `ids` (pads already stripped). `segments` defaults
    /// to all zeros.
    pub fn forward(&self, ids: &[u32], segments: Option<&[u8]>) -> Result<Forward> {
        if ids.is_empty() {
            return Err(Error::EmptyVector);
        }
        let h = self.config.hidden;
        let n = ids.len();
        let segments: Vec<u8> = match segments {
            Some(s) => {
                check_dim(n, s.len())?;
                s.to_vec()
            }
            None => vec![0; n],
        };
        let mut x = Mat::zeros(n, h);
        for (i, (&id, &seg)) in ids.iter().zip(&segments).enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(Error::OutOfVocabulary(id));
            }
            let row = x.row_mut(i);
            for ((r, e), s) in row
                .iter_mut()
                .zip(self.tok_emb.row(id as usize))
                .zip(self.seg_emb.row(seg.min(1) as usize))
            {
                *r = e + s;
            }
        }
        let scale = 1.0 / (h as f64).sqrt();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut q = Mat::zeros(n, h);
            let mut k = Mat::zeros(n, h);
            let mut v = Mat::zeros(n, h);
            matmul_into(x.as_slice(), n, h, b.wq.as_slice(), h, q.as_mut_slice());
            matmul_into(x.as_slice(), n, h, b.wk.as_slice(), h, k.as_mut_slice());
            matmul_into(x.as_slice(), n, h, b.wv.as_slice(), h, v.as_mut_slice());
            let mut attn = Mat::zeros(n, n);
            matmul_a_bt_into(q.as_slice(), n, h, k.as_slice(), n, attn.as_mut_slice());
            for i in 0..n {
                let row = attn.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for s in row.iter_mut() {
                    *s *= scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
            let mut x1 = x.clone();
            matmul_into(attn.as_slice(), n, n, v.as_slice(), h, x1.as_mut_slice());
            let mut t = Mat::zeros(n, h);
            matmul_into(x1.as_slice(), n, h, b.w_ff.as_slice(), h, t.as_mut_slice());
            for i in 0..n {
                for (tv, bv) in t.row_mut(i).iter_mut().zip(&b.b_ff) {
                    *tv = (*tv + bv).tanh();
                }
            }
            let mut x2 = x1.clone();
            x2.as_mut_slice()
                .iter_mut()
                .zip(t.as_slice())
                .for_each(|(a, b)| *a += b);
            caches.push(BlockCache {
                x,
                q,
                k,
                v,
                attn,
                x1,
                t,
            });
            x = x2;
        }
        let kdim = self.config.out_dim;
        let mut tokens = Mat::zeros(n, kdim);
        for i in 0..n {
            tokens.row_mut(i).copy_from_slice(&self.b_out);
        }
        matmul_into(x.as_slice(), n, h, self.w_out.as_slice(), kdim, tokens.as_mut_slice());
        Ok(Forward {
            tokens,
            ids: ids.to_vec(),
            segments,
            caches,
            last_hidden: x,
        })
    }

    /// Accumulates parameter gradients into `grads` given the gradient of the
    /// objective with respect to the output token embeddings.
    pub fn backward(&self, fwd: &Forward, d_tokens: &Mat, grads: &mut Encoder) -> Result<()> {
        let (h, kdim) = (self.config.hidden, self.config.out_dim);
        let n = fwd.len();
        if d_tokens.shape() != (n, kdim) {
            return Err(Error::DimensionMismatch {
                expected: n * kdim,
                got: d_tokens.rows() * d_tokens.cols(),
            });
        }
        matmul_at_b_into(
            fwd.last_hidden.as_slice(),
            n,
            h,
            d_tokens.as_slice(),
            kdim,
            grads.w_out.as_mut_slice(),
        );
        for i in 0..n {
            for (g, d) in grads.b_out.iter_mut().zip(d_tokens.row(i)) {
                *g += d;
            }
        }
        let mut dx = Mat::zeros(n, h);
        matmul_a_bt_into(
            d_tokens.as_slice(),
            n,
            kdim,
            self.w_out.as_slice(),
            h,
            dx.as_mut_slice(),
        );
        let scale = 1.0 / (h as f64).sqrt();
        for ((b, c), gb) in self
            .blocks
            .iter()
            .zip(&fwd.caches)
            .zip(grads.blocks.iter_mut())
            .rev()
        {
            // Feed-forward branch: x2 = x1 + tanh(x1·W + b).
            let mut du = dx.clone();
            du.as_mut_slice()
                .iter_mut()
                .zip(c.t.as_slice())
                .for_each(|(d, t)| *d *= 1.0 - t * t);
            matmul_at_b_into(c.x1.as_slice(), n, h, du.as_slice(), h, gb.w_ff.as_mut_slice());
            for i in 0..n {
                for (g, d) in gb.b_ff.iter_mut().zip(du.row(i)) {
                    *g += d;
                }
            }
            let mut dx1 = dx;
            matmul_a_bt_into(du.as_slice(), n, h, b.w_ff.as_slice(), h, dx1.as_mut_slice());

            // Attention branch: x1 = x + softmax(c·QKᵀ)·V.
            let mut da = Mat::zeros(n, n);
            matmul_a_bt_into(dx1.as_slice(), n, h, c.v.as_slice(), n, da.as_mut_slice());
            let mut dv = Mat::zeros(n, h);
            matmul_at_b_into(c.attn.as_slice(), n, n, dx1.as_slice(), h, dv.as_mut_slice());
            let mut ds = da;
            for i in 0..n {
                let a = c.attn.row(i);
                let row = ds.row_mut(i);
                let inner: f64 = a.iter().zip(row.iter()).map(|(x, y)| x * y).sum();
                for (d, av) in row.iter_mut().zip(a) {
                    *d = scale * av * (*d - inner);
                }
            }
            let mut dq = Mat::zeros(n, h);
            matmul_into(ds.as_slice(), n, n, c.k.as_slice(), h, dq.as_mut_slice());
            let mut dk = Mat::zeros(n, h);
            matmul_at_b_into(ds.as_slice(), n, n, c.q.as_slice(), h, dk.as_mut_slice());
            let xs = c.x.as_slice();
            matmul_at_b_into(xs, n, h, dq.as_slice(), h, gb.wq.as_mut_slice());
            matmul_at_b_into(xs, n, h, dk.as_slice(), h, gb.wk.as_mut_slice());
            matmul_at_b_into(xs, n, h, dv.as_slice(), h, gb.wv.as_mut_slice());
            let mut dx0 = dx1;
            matmul_a_bt_into(dq.as_slice(), n, h, b.wq.as_slice(), h, dx0.as_mut_slice());
            matmul_a_bt_into(dk.as_slice(), n, h, b.wk.as_slice(), h, dx0.as_mut_slice());
            matmul_a_bt_into(dv.as_slice(), n, h, b.wv.as_slice(), h, dx0.as_mut_slice());
            dx = dx0;
        }
        for (i, (&id, &seg)) in fwd.ids.iter().zip(&fwd.segments).enumerate() {
            let d = dx.row(i);
            for (g, v) in grads.tok_emb.row_mut(id as usize).iter_mut().zip(d) {
                *g += v;
            }
            for (g, v) in grads.seg_emb.row_mut(seg.min(1) as usize).iter_mut().zip(d) {
                *g += v;
            }
        }
        Ok(())
    }

    /// Single-sequence embedding: forward pass plus FirstToken/Mean pooling.
    pub fn encode(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let fwd = self.forward(strip_pads(ids), None)?;
        pool(self.config.pooling, &fwd.tokens)
    }

    /// Adds `alpha * other` to every parameter.
    pub fn add_scaled(&mut self, other: &Encoder, alpha: f64) {
        for (p, o) in self.params_mut().into_iter().zip(other.params()) {
            for (a, b) in p.iter_mut().zip(o) {
                *a += alpha * b;
            }
        }
    }
}

pub(crate) fn strip_pads(ids: &[u32]) -> &[u32] {
    let end = ids
        .iter()
        .position(|&t| t == super::vocab::PAD)
        .unwrap_or(ids.len());
    &ids[..end]
}

/// Single-vector pooling over output token embeddings.
pub fn pool(kind: PoolingKind, tokens: &Mat) -> Result<Vec<f64>> {
    if tokens.rows() == 0 {
        return Err(Error::EmptyVector);
    }
    match kind {
        PoolingKind::FirstToken => Ok(tokens.row(0).to_vec()),
        PoolingKind::Mean => {
            let n = tokens.rows() as f64;
            let mut out = vec![0.0; tokens.cols()];
            for i in 0..tokens.rows() {
                for (o, v) in out.iter_mut().zip(tokens.row(i)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= n);
            Ok(out)
        }
        PoolingKind::SegmentWeightedMean | PoolingKind::DualSpecialToken => Err(Error::invalid(
            "dual pooling kinds require a joint query-document input",
        )),
    }
}

/// Gradient of [`pool`] with respect to the token embeddings.
pub fn pool_backward(kind: PoolingKind, n: usize, d_pooled: &[f64]) -> Result<Mat> {
    let mut d = Mat::zeros(n, d_pooled.len());
    match kind {
        PoolingKind::FirstToken => d.row_mut(0).copy_from_slice(d_pooled),
        PoolingKind::Mean => {
            let inv = 1.0 / n as f64;
            for i in 0..n {
                for (o, v) in d.row_mut(i).iter_mut().zip(d_pooled) {
                    *o = v * inv;
                }
            }
        }
        _ => {
            return Err(Error::invalid(
                "dual pooling kinds require a joint query-document input",
            ))
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn config(pooling: PoolingKind, blocks: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 12,
            hidden: 4,
            out_dim: 3,
            blocks,
            pooling,
        }
    }

    #[test]
    fn zero_params_give_zero_embedding() {
        let enc = Encoder::zeros(config(PoolingKind::Mean, 2));
        let e = enc.encode(&[1, 5, 7]).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_vocab_rejected() {
        let enc = Encoder::init(config(PoolingKind::Mean, 1), &mut Rng::new(0));
        assert!(matches!(enc.encode(&[1, 12]), Err(Error::OutOfVocabulary(12))));
    }

    #[test]
    fn pads_do_not_change_mean_pooling() {
        let enc = Encoder::init(config(PoolingKind::Mean, 2), &mut Rng::new(1));
        let a = enc.encode(&[1, 5, 7]).unwrap();
        let b = enc.encode(&[1, 5, 7, 0, 0, 0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (seed, pooling) in [(0u64, PoolingKind::Mean), (1, PoolingKind::FirstToken)] {
            let mut rng = Rng::new(seed);
            let enc = Encoder::init(config(pooling, 2), &mut rng);
            let ids = [1u32, 6, 9, 6, 2];
            let segs = [0u8, 0, 1, 1, 1];
            let target: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let flat: Vec<f64> = enc.params().concat();
            let f = |p: &[f64]| {
                let mut e = enc.clone();
                let mut off = 0;
                for s in e.params_mut() {
                    let len = s.len();
                    s.copy_from_slice(&p[off..off + len]);
                    off += len;
                }
                let fwd = e.forward(&ids, Some(&segs)).unwrap();
                let pooled = pool(pooling, &fwd.tokens).unwrap();
                let value: f64 = pooled.iter().zip(&target).map(|(a, b)| a * b).sum();
                let dz = pool_backward(pooling, ids.len(), &target).unwrap();
                let mut g = e.zeros_like();
                e.backward(&fwd, &dz, &mut g).unwrap();
                (value, g.params().concat())
            };
            let err = grad_check(f, &flat, 1e-5).unwrap();
            assert!(err < 1e-6, "{pooling:?}: {err}");
        }
    }
}
