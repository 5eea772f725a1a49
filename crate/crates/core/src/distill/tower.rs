//! Batched forward and backward passes through a single encoder tower.
//!
//! Work is split into fixed-size chunks that run in parallel; each chunk
//! accumulates into its own gradient buffer and buffers are summed in chunk
//! order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::encoders::{pool, pool_backward, single_input, Encoder, Forward};
use crate::numerics::Mat;
use crate::error::Result;

const CHUNK: usize = 8;

pub(crate) struct Encoded {
    pub fwd: Forward,
    pub emb: Vec<f64>,
}

/// Encodes content token sequences as `[CLS] content`.
pub(crate) fn encode_all(enc: &Encoder, seqs: &[&[u32]]) -> Result<Vec<Encoded>> {
    seqs.par_iter()
        .map(|s| {
            let fwd = enc.forward(&single_input(s), None)?;
            let emb = pool(enc.pooling(), &fwd.tokens)?;
            Ok(Encoded { fwd, emb })
        })
        .collect()
}

/// Backpropagates per-item embedding gradients and accumulates the
/// parameter gradient into `grads`. Items whose gradient is zero are skipped.
pub(crate) fn backward_all(
    enc: &Encoder,
    items: &[Encoded],
    d_embs: &[Vec<f64>],
    grads: &mut Encoder,
) -> Result<()> {
    let pairs: Vec<(&Encoded, &Vec<f64>)> = items
        .iter()
        .zip(d_embs)
        .filter(|(_, d)| d.iter().any(|x| *x != 0.0))
        .collect();
    let partials = pairs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = enc.zeros_like();
            for (item, d) in chunk {
                let d_tokens = pool_backward(enc.pooling(), item.fwd.len(), d)?;
                enc.backward(&item.fwd, &d_tokens, &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    for p in &partials {
        grads.add_scaled(p, 1.0);
    }
    Ok(())
}

/// Generic ordered parallel reduction of token-level backward passes.
pub(crate) fn backward_tokens<'a, T: Sync>(
    enc: &Encoder,
    items: &'a [T],
    f: impl Fn(&'a T) -> Result<Option<(&'a Forward, Mat)>> + Sync,
    grads: &mut Encoder,
) -> Result<()> {
    let partials = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = enc.zeros_like();
            for item in chunk {
                if let Some((fwd, d_tokens)) = f(item)? {
                    enc.backward(fwd, &d_tokens, &mut g)?;
                }
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    for p in &partials {
        grads.add_scaled(p, 1.0);
    }
    Ok(())
}
